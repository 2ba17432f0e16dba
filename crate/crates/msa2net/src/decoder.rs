//! The multi-scale amalgamation decoder and the plain ablation decoder.
//!
//! Each decode stage adds the refined skip to the carried deep features,
//! splits channels into G=4 groups, applies one self-adaptive conv per group,
//! fuses the concatenated result with squeeze–excitation plus a learnable
//! projection, and upsamples 2× with channel halving. Three stages run from
//! the deepest features up; the final 4× head restores full resolution.

use crate::adaptive_conv::{Phase, SelectionMode, SelfAdaptiveConv};
use crate::fingerprint::KernelCandidateMatrix;
use crate::nn::{PointwiseConv, SeBlock};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Param, Tensor};
use serde::{Deserialize, Serialize};

pub const GROUPS: usize = 4;

/// Per-pixel class probabilities with the derived label map.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegmentationResult {
    /// Row-major H×W×C.
    pub probabilities: Vec<f64>,
    pub labels: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
}

impl SegmentationResult {
    /// From a [C,H,W] probability tensor.
    pub fn from_chw(probs: &Tensor) -> Self {
        let (c, h, w) = (probs.c(), probs.h(), probs.w());
        let plane = h * w;
        let mut probabilities = vec![0.0; c * plane];
        let mut labels = vec![0u8; plane];
        for p in 0..plane {
            let mut best = 0usize;
            for ch in 0..c {
                let v = probs.data()[ch * plane + p];
                probabilities[p * c + ch] = v;
                if v > probs.data()[best * plane + p] {
                    best = ch;
                }
            }
            labels[p] = best as u8;
        }
        SegmentationResult {
            probabilities,
            labels,
            height: h,
            width: w,
            num_classes: c,
        }
    }
}

/// One decode stage at channel width C: group convs + SE fusion + upsampler.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecodeStage {
    pub group_convs: Vec<SelfAdaptiveConv>,
    pub fuse_se: SeBlock,
    pub fuse_proj: PointwiseConv,
    /// 1×1 projection applied after 2× bilinear upsampling (C → C/2).
    pub up_proj: PointwiseConv,
}

impl DecodeStage {
    fn new(
        rng: &mut Rng,
        channels: usize,
        matrix: &KernelCandidateMatrix,
        guidance_fixed: bool,
    ) -> Self {
        assert_eq!(channels % GROUPS, 0, "channels must divide the group count");
        let gc = channels / GROUPS;
        let group_convs = (0..GROUPS)
            .map(|g| {
                let mode = if guidance_fixed {
                    SelectionMode::FixedRow(g)
                } else {
                    SelectionMode::Learned
                };
                SelfAdaptiveConv::new(rng, gc, gc, matrix, mode, true)
            })
            .collect();
        DecodeStage {
            group_convs,
            fuse_se: SeBlock::new(rng, channels, 4),
            fuse_proj: PointwiseConv::new(rng, channels, channels),
            up_proj: PointwiseConv::new(rng, channels, channels / 2),
        }
    }

    pub fn forward(&self, t: &mut Tape, skip: Var, carry: Var, phase: Phase) -> Var {
        let x = t.add(skip, carry);
        let c = t.value(x).c();
        let gc = c / GROUPS;
        let parts: Vec<Var> = (0..GROUPS)
            .map(|g| {
                let part = t.slice_channels(x, g * gc, (g + 1) * gc);
                self.group_convs[g].forward(t, part, phase)
            })
            .collect();
        let u = t.concat_channels(&parts);
        let gated = self.fuse_se.forward(t, u);
        let fused = self.fuse_proj.forward(t, gated);
        let up = t.upsample_bilinear(fused, 2);
        self.up_proj.forward(t, up)
    }

    /// Kernel sizes deployed by the four group branches (argmax each).
    pub fn kernel_vector(&self) -> [usize; 4] {
        let mut out = [0; 4];
        for (g, conv) in self.group_convs.iter().enumerate() {
            out[g] = conv.selected_kernel(None).2;
        }
        out
    }

    fn visit_params(&mut self, f: &mut impl FnMut(&mut Param)) {
        for g in &mut self.group_convs {
            g.visit_params(f);
        }
        self.fuse_se.visit_params(f);
        self.fuse_proj.visit_params(f);
        self.up_proj.visit_params(f);
    }
}

/// Final head: add the shallowest skip, upsample 4×, project to classes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegHead {
    pub class_proj: PointwiseConv,
}

impl SegHead {
    fn new(rng: &mut Rng, channels: usize, num_classes: usize) -> Self {
        SegHead {
            class_proj: PointwiseConv::new(rng, channels, num_classes),
        }
    }

    /// Returns per-pixel class logits at full resolution.
    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let up = t.upsample_bilinear(x, 4);
        self.class_proj.forward(t, up)
    }

    fn visit_params(&mut self, f: &mut impl FnMut(&mut Param)) {
        self.class_proj.visit_params(f);
    }
}

/// The grouped multi-scale adaptive decoder (three stages + head).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MsaDecoder {
    /// Stage 1 consumes the deepest features, stage 3 the shallowest carried.
    pub stages: Vec<DecodeStage>,
    pub head: SegHead,
}

impl MsaDecoder {
    pub fn new(
        rng: &mut Rng,
        stage_dims: &[usize; 4],
        num_classes: usize,
        matrix: &KernelCandidateMatrix,
        guidance_fixed: bool,
    ) -> Self {
        let stages = vec![
            DecodeStage::new(rng, stage_dims[3], matrix, guidance_fixed),
            DecodeStage::new(rng, stage_dims[2], matrix, guidance_fixed),
            DecodeStage::new(rng, stage_dims[1], matrix, guidance_fixed),
        ];
        MsaDecoder {
            stages,
            head: SegHead::new(rng, stage_dims[0], num_classes),
        }
    }

    /// Refined features [F̂1..F̂4] → class logits at input resolution.
    pub fn decode(&self, t: &mut Tape, refined: &[Var; 4], phase: Phase) -> Var {
        let deepest = refined[3];
        let zero = t.constant(Tensor::zeros(t.value(deepest).shape()));
        let mut carry = self.stages[0].forward(t, deepest, zero, phase);
        carry = self.stages[1].forward(t, refined[2], carry, phase);
        carry = self.stages[2].forward(t, refined[1], carry, phase);
        let x = t.add(refined[0], carry);
        self.head.forward(t, x)
    }

    pub fn visit_params(&mut self, f: &mut impl FnMut(&mut Param)) {
        for s in &mut self.stages {
            s.visit_params(f);
        }
        self.head.visit_params(f);
    }
}

/// Ablation decoder: bilinear upsampling with 1×1 projections only.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlainDecoder {
    pub up_projs: Vec<PointwiseConv>,
    pub head: SegHead,
}

impl PlainDecoder {
    pub fn new(rng: &mut Rng, stage_dims: &[usize; 4], num_classes: usize) -> Self {
        PlainDecoder {
            up_projs: vec![
                PointwiseConv::new(rng, stage_dims[3], stage_dims[2]),
                PointwiseConv::new(rng, stage_dims[2], stage_dims[1]),
                PointwiseConv::new(rng, stage_dims[1], stage_dims[0]),
            ],
            head: SegHead::new(rng, stage_dims[0], num_classes),
        }
    }

    pub fn decode(&self, t: &mut Tape, refined: &[Var; 4]) -> Var {
        let mut carry = {
            let up = t.upsample_bilinear(refined[3], 2);
            self.up_projs[0].forward(t, up)
        };
        for (i, proj) in self.up_projs.iter().enumerate().skip(1) {
            let x = t.add(refined[3 - i], carry);
            let up = t.upsample_bilinear(x, 2);
            carry = proj.forward(t, up);
        }
        let x = t.add(refined[0], carry);
        self.head.forward(t, x)
    }

    pub fn visit_params(&mut self, f: &mut impl FnMut(&mut Param)) {
        for p in &mut self.up_projs {
            p.visit_params(f);
        }
        self.head.visit_params(f);
    }
}

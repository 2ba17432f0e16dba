//! Four-stage dual encoder: cross-shaped window attention main branch plus a
//! convolutional auxiliary branch with a self-adaptive spatial conv, fused by
//! addition and a learnable per-channel gate.

use crate::adaptive_conv::{Phase, SelectionMode, SelfAdaptiveConv};
use crate::fingerprint::KernelCandidateMatrix;
use crate::nn::{LayerNorm, PatchEmbed, PointwiseConv};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Param, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("input {0}x{1} must be divisible by 32")]
    InputNotDivisible(usize, usize),
    #[error("stage dims {0:?} must be strictly increasing")]
    DimsNotIncreasing(Vec<usize>),
    #[error("stage {stage}: {channels} channels not divisible by {heads} heads")]
    ChannelsHeads { stage: usize, channels: usize, heads: usize },
    #[error("stage {stage}: heads {heads} must be even")]
    OddHeads { stage: usize, heads: usize },
    #[error("{0} must be positive")]
    ZeroField(&'static str),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_size: (usize, usize),
    pub patch_stride: usize,
    pub stage_dims: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub heads_per_stage: [usize; 4],
    pub stripe_widths: [usize; 4],
}

impl Default for EncoderConfig {
    /// Desk-scale defaults: trains on CPU in minutes, keeps the topology.
    fn default() -> Self {
        EncoderConfig {
            input_size: (64, 64),
            patch_stride: 4,
            stage_dims: [32, 64, 128, 256],
            blocks_per_stage: [2, 2, 2, 2],
            heads_per_stage: [2, 4, 8, 8],
            stripe_widths: [1, 2, 2, 4],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(ConfigError::InputNotDivisible(h, w));
        }
        if self.patch_stride != 4 {
            return Err(ConfigError::ZeroField("patch_stride must be 4"));
        }
        for i in 1..4 {
            if self.stage_dims[i] <= self.stage_dims[i - 1] {
                return Err(ConfigError::DimsNotIncreasing(self.stage_dims.to_vec()));
            }
        }
        for stage in 0..4 {
            let heads = self.heads_per_stage[stage];
            let dims = self.stage_dims[stage];
            if heads == 0 || self.blocks_per_stage[stage] == 0 || self.stripe_widths[stage] == 0 {
                return Err(ConfigError::ZeroField("blocks/heads/stripes"));
            }
            if heads % 2 != 0 {
                return Err(ConfigError::OddHeads { stage, heads });
            }
            if dims % heads != 0 {
                return Err(ConfigError::ChannelsHeads {
                    stage,
                    channels: dims,
                    heads,
                });
            }
        }
        Ok(())
    }

    /// Spatial size of each stage's feature map.
    pub fn stage_sizes(&self) -> [(usize, usize); 4] {
        let (h, w) = self.input_size;
        let mut out = [(0, 0); 4];
        let mut cur = (h / self.patch_stride, w / self.patch_stride);
        for (i, slot) in out.iter_mut().enumerate() {
            if i > 0 {
                cur = (cur.0 / 2, cur.1 / 2);
            }
            *slot = cur;
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CswinBlock {
    pub ln1: LayerNorm,
    pub qkv: PointwiseConv,
    pub proj: PointwiseConv,
    pub ln2: LayerNorm,
    pub mlp_in: PointwiseConv,
    pub mlp_out: PointwiseConv,
    pub heads: usize,
    pub stripe: usize,
}

impl CswinBlock {
    fn new(rng: &mut Rng, channels: usize, heads: usize, stripe: usize) -> Self {
        // Residual branches start damped so the stream scale stays put.
        let mut proj = PointwiseConv::new(rng, channels, channels);
        for v in proj.weight.value.data_mut() {
            *v *= 0.2;
        }
        let mut mlp_out = PointwiseConv::new(rng, 4 * channels, channels);
        for v in mlp_out.weight.value.data_mut() {
            *v *= 0.2;
        }
        CswinBlock {
            ln1: LayerNorm::new(channels),
            qkv: PointwiseConv::new(rng, channels, 3 * channels),
            proj,
            ln2: LayerNorm::new(channels),
            mlp_in: PointwiseConv::new(rng, channels, 4 * channels),
            mlp_out,
            heads,
            stripe,
        }
    }

    fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let c = t.value(x).c();
        let h = self.ln1.forward(t, x);
        let qkv = self.qkv.forward(t, h);
        let q = t.slice_channels(qkv, 0, c);
        let k = t.slice_channels(qkv, c, 2 * c);
        let v = t.slice_channels(qkv, 2 * c, 3 * c);
        let attn = t.cswin_attention(q, k, v, self.heads, self.stripe);
        let attn = self.proj.forward(t, attn);
        let x = t.add(x, attn);
        let h2 = self.ln2.forward(t, x);
        let m = self.mlp_in.forward(t, h2);
        let m = t.gelu(m);
        let m = self.mlp_out.forward(t, m);
        t.add(x, m)
    }

    fn visit_params(&mut self, f: &mut impl FnMut(&mut Param)) {
        self.ln1.visit_params(f);
        self.qkv.visit_params(f);
        self.proj.visit_params(f);
        self.ln2.visit_params(f);
        self.mlp_in.visit_params(f);
        self.mlp_out.visit_params(f);
    }
}

/// Residual conv block whose spatial conv is self-adaptive.
/// Output = x + adaptive(relu(pointwise(x))).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuxBlock {
    pub pre: PointwiseConv,
    pub adaptive: SelfAdaptiveConv,
}

impl AuxBlock {
    fn new(rng: &mut Rng, channels: usize, matrix: &KernelCandidateMatrix, mode: SelectionMode) -> Self {
        AuxBlock {
            pre: PointwiseConv::new(rng, channels, channels),
            adaptive: SelfAdaptiveConv::new(rng, channels, channels, matrix, mode, true),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var, phase: Phase) -> Var {
        let p = self.pre.forward(t, x);
        let p = t.relu(p);
        let a = self.adaptive.forward(t, p, phase);
        t.add(x, a)
    }

    fn visit_params(&mut self, f: &mut impl FnMut(&mut Param)) {
        self.pre.visit_params(f);
        self.adaptive.visit_params(f);
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderStage {
    pub embed: PatchEmbed,
    pub blocks: Vec<CswinBlock>,
    pub aux: AuxBlock,
    /// Per-channel fusion gate, initialized to 1.
    pub gate: Param,
}

impl EncoderStage {
    /// z = embed(x); F = gate ⊙ (blocks(z) + aux(z)) + z.
    fn forward(&self, t: &mut Tape, x: Var, phase: Phase) -> Var {
        let z = self.embed.forward(t, x);
        let mut main = z;
        for block in &self.blocks {
            main = block.forward(t, main);
        }
        let aux = self.aux.forward(t, z, phase);
        let fused = t.add(main, aux);
        let g = t.param(&self.gate);
        let gated = t.mul_channel(fused, g);
        t.add(gated, z)
    }

    fn visit_params(&mut self, f: &mut impl FnMut(&mut Param)) {
        self.embed.visit_params(f);
        for b in &mut self.blocks {
            b.visit_params(f);
        }
        self.aux.visit_params(f);
        f(&mut self.gate);
    }
}

/// Multi-scale features [F1..F4] at resolutions /4, /8, /16, /32.
pub struct StageFeatures(pub [Var; 4]);

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub stages: Vec<EncoderStage>,
}

impl Encoder {
    pub fn new(
        rng: &mut Rng,
        config: &EncoderConfig,
        matrix: &KernelCandidateMatrix,
        mode: SelectionMode,
    ) -> Self {
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let in_ch = if i == 0 { 3 } else { config.stage_dims[i - 1] };
            let stride = if i == 0 { config.patch_stride } else { 2 };
            let dim = config.stage_dims[i];
            let blocks = (0..config.blocks_per_stage[i])
                .map(|_| CswinBlock::new(rng, dim, config.heads_per_stage[i], config.stripe_widths[i]))
                .collect();
            // The fusion adds the aux branch on top of the gated main branch
            // and the embedding, roughly doubling the stream scale; a halved
            // embedding keeps stage outputs near the input scale.
            let mut embed = PatchEmbed::new(rng, in_ch, dim, stride);
            for v in embed.weight.value.data_mut() {
                *v *= 0.5;
            }
            stages.push(EncoderStage {
                embed,
                blocks,
                aux: AuxBlock::new(rng, dim, matrix, mode),
                gate: Param::new(Tensor::full(&[dim], 1.0)),
            });
        }
        Encoder {
            config: config.clone(),
            stages,
        }
    }

    pub fn encode(&self, t: &mut Tape, image: Var, phase: Phase) -> StageFeatures {
        let (h, w) = (t.value(image).h(), t.value(image).w());
        assert!(
            h % 32 == 0 && w % 32 == 0,
            "input {}x{} must be divisible by 32",
            h,
            w
        );
        let mut features = Vec::with_capacity(4);
        let mut x = image;
        for stage in &self.stages {
            x = stage.forward(t, x, phase);
            features.push(x);
        }
        StageFeatures([features[0], features[1], features[2], features[3]])
    }

    pub fn visit_params(&mut self, f: &mut impl FnMut(&mut Param)) {
        for s in &mut self.stages {
            s.visit_params(f);
        }
    }
}

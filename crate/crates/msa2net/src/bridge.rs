//! The multi-scale convolution bridge: per-stage skip-connection refinement
//! (self-adaptive conv → squeeze–excitation → dense projection of the
//! concatenated stage input), with one selection-logit matrix shared across
//! the four stages so the bridge reports a single kernel 4-vector.

use crate::adaptive_conv::{Phase, SelectionMode, SelfAdaptiveConv};
use crate::fingerprint::KernelCandidateMatrix;
use crate::nn::{PointwiseConv, SeBlock};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Param;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BridgeStage {
    pub adaptive: SelfAdaptiveConv,
    pub se: SeBlock,
    /// 1×1 projection of concat(se_output, stage_input) back to C channels.
    pub dense_proj: PointwiseConv,
}

impl BridgeStage {
    fn new(rng: &mut Rng, channels: usize, matrix: &KernelCandidateMatrix, mode: SelectionMode) -> Self {
        BridgeStage {
            adaptive: SelfAdaptiveConv::new(rng, channels, channels, matrix, mode, false),
            se: SeBlock::new(rng, channels, 4),
            dense_proj: PointwiseConv::new(rng, 2 * channels, channels),
        }
    }

    /// u = adaptive(F); v = SE(u); out = proj(concat(v, F)).
    pub fn refine(&self, t: &mut Tape, f: Var, phase: Phase, logits: &Param) -> Var {
        let u = self.adaptive.forward_with(t, f, phase, Some(logits));
        let v = self.se.forward(t, u);
        let cat = t.concat_channels(&[v, f]);
        self.dense_proj.forward(t, cat)
    }

    fn visit_params(&mut self, f: &mut impl FnMut(&mut Param)) {
        self.adaptive.visit_params(f);
        self.se.visit_params(f);
        self.dense_proj.visit_params(f);
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvBridge {
    /// Selection logits shared by the four stages.
    pub selection: Param,
    pub stages: Vec<BridgeStage>,
}

impl ConvBridge {
    pub fn new(
        rng: &mut Rng,
        stage_dims: &[usize; 4],
        matrix: &KernelCandidateMatrix,
        mode: SelectionMode,
    ) -> Self {
        ConvBridge {
            selection: Param::zeros(&[16]),
            stages: stage_dims
                .iter()
                .map(|&c| BridgeStage::new(rng, c, matrix, mode))
                .collect(),
        }
    }

    /// Refine all four stages independently; shapes are preserved.
    pub fn refine_all(&self, t: &mut Tape, features: &[Var; 4], phase: Phase) -> [Var; 4] {
        let mut out = [0; 4];
        for (i, (&f, stage)) in features.iter().zip(&self.stages).enumerate() {
            out[i] = stage.refine(t, f, phase, &self.selection);
        }
        out
    }

    /// Table-formatted kernel vector: per-row argmax of the shared logits.
    pub fn kernel_vector(&self) -> [usize; 4] {
        self.stages[0].adaptive.row_selections(Some(&self.selection))
    }

    pub fn visit_params(&mut self, f: &mut impl FnMut(&mut Param)) {
        f(&mut self.selection);
        for s in &mut self.stages {
            s.visit_params(f);
        }
    }
}

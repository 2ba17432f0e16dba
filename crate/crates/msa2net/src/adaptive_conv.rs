//! The self-adaptive convolution module.
//!
//! One instance holds 16 candidate depthwise kernels whose spatial sizes come
//! from the quantized candidate matrix, a learnable 4×4 selection-logit
//! matrix (stored flat, row-major), and a shared pointwise mixer. Training
//! mixes all candidates by softmax weight so the selection logits keep
//! receiving gradient; evaluation deploys the argmax candidate only.
//!
//! Under the fixed guidance schedules the selection is pinned instead:
//! grouped sites pin one row each, ungrouped sites average the scheduled
//! column, and the logits stay out of the graph entirely.

use crate::fingerprint::KernelCandidateMatrix;
use crate::nn::PointwiseConv;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Param, Tensor};
use serde::{Deserialize, Serialize};

/// Whether a forward pass uses the soft mixture or the hard argmax kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Softmax-weighted mixture over all 16 candidates (differentiable).
    Soft,
    /// Single candidate at the selection argmax.
    Hard,
}

/// How this site selects among its candidates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionMode {
    /// Selection logits are trained by backpropagation.
    Learned,
    /// Pinned to candidate (row, 0); used by grouped sites under fixed
    /// guidance, where group g deploys the g-th entry of the schedule.
    FixedRow(usize),
    /// Uniform average over column 0's four kernels; used by ungrouped
    /// sites under fixed guidance (the site deploys the whole schedule).
    FixedColumnUniform,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelfAdaptiveConv {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Quantized kernel size per (row, column) candidate.
    pub kernel_sizes: [[usize; 4]; 4],
    /// 16 depthwise weight tensors, flat index row*4+col, each [C, k, k].
    pub candidates: Vec<Param>,
    /// Selection logits, flat [16]; `None` when an enclosing module shares
    /// one logit matrix across several instances.
    pub logits: Option<Param>,
    pub mixer: PointwiseConv,
    pub mode: SelectionMode,
}

impl SelfAdaptiveConv {
    pub fn new(
        rng: &mut Rng,
        in_channels: usize,
        out_channels: usize,
        matrix: &KernelCandidateMatrix,
        mode: SelectionMode,
        own_logits: bool,
    ) -> Self {
        let mut candidates = Vec::with_capacity(16);
        for row in 0..4 {
            for col in 0..4 {
                let k = matrix.quantized[row][col];
                // centered impulse scaled by 1/16 plus small uniform noise
                let mut data = vec![0.0; in_channels * k * k];
                rng.fill_uniform(&mut data, 0.002);
                let center = (k / 2) * k + k / 2;
                for c in 0..in_channels {
                    data[c * k * k + center] += 1.0 / 16.0;
                }
                candidates.push(Param::new(Tensor::from_vec(&[in_channels, k, k], data)));
            }
        }
        // Mixer gain compensates the 1/16 impulse so the whole site is
        // roughly scale-preserving at initialization.
        let mut mixer = PointwiseConv::new(rng, in_channels, out_channels);
        for v in mixer.weight.value.data_mut() {
            *v *= 4.0;
        }
        SelfAdaptiveConv {
            in_channels,
            out_channels,
            kernel_sizes: matrix.quantized,
            candidates,
            logits: own_logits.then(|| Param::zeros(&[16])),
            mixer,
            mode,
        }
    }

    fn logit_values<'a>(&'a self, external: Option<&'a Param>) -> &'a Param {
        external
            .or(self.logits.as_ref())
            .expect("learned selection requires logits")
    }

    /// Flat argmax with ties broken by the smallest flat index.
    pub fn argmax_flat(logits: &[f64]) -> usize {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        best
    }

    /// The selected candidate as (row, col, kernel_size).
    pub fn selected_kernel(&self, external: Option<&Param>) -> (usize, usize, usize) {
        match self.mode {
            SelectionMode::FixedRow(row) => (row, 0, self.kernel_sizes[row][0]),
            SelectionMode::FixedColumnUniform => (0, 0, self.kernel_sizes[0][0]),
            SelectionMode::Learned => {
                let flat = Self::argmax_flat(self.logit_values(external).value.data());
                let (row, col) = (flat / 4, flat % 4);
                (row, col, self.kernel_sizes[row][col])
            }
        }
    }

    /// Per-row selections (argmax within each logit row), as kernel sizes.
    /// This is how an ungrouped site reports a 4-vector.
    pub fn row_selections(&self, external: Option<&Param>) -> [usize; 4] {
        let mut out = [0; 4];
        match self.mode {
            SelectionMode::Learned => {
                let logits = self.logit_values(external).value.data().to_vec();
                for row in 0..4 {
                    let slice = &logits[row * 4..(row + 1) * 4];
                    let mut best = 0;
                    for (i, &v) in slice.iter().enumerate() {
                        if v > slice[best] {
                            best = i;
                        }
                    }
                    out[row] = self.kernel_sizes[row][best];
                }
            }
            _ => {
                for row in 0..4 {
                    out[row] = self.kernel_sizes[row][0];
                }
            }
        }
        out
    }

    /// Softmax of the current selection logits (diagnostics / invariants).
    pub fn selection_probabilities(&self, external: Option<&Param>) -> [f64; 16] {
        let logits = self.logit_values(external).value.data();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut out = [0.0; 16];
        let mut z = 0.0;
        for (o, &l) in out.iter_mut().zip(logits) {
            *o = (l - max).exp();
            z += *o;
        }
        for o in out.iter_mut() {
            *o /= z;
        }
        out
    }

    pub fn forward(&self, t: &mut Tape, x: Var, phase: Phase) -> Var {
        self.forward_with(t, x, phase, None)
    }

    /// Forward with optionally shared selection logits.
    pub fn forward_with(
        &self,
        t: &mut Tape,
        x: Var,
        phase: Phase,
        external_logits: Option<&Param>,
    ) -> Var {
        assert_eq!(
            t.value(x).c(),
            self.in_channels,
            "self-adaptive conv: channel mismatch"
        );
        let mixed = match self.mode {
            SelectionMode::FixedRow(row) => {
                let w = t.param(&self.candidates[row * 4]);
                t.depthwise_conv(x, w)
            }
            SelectionMode::FixedColumnUniform => {
                let branches: Vec<Var> = (0..4)
                    .map(|row| {
                        let w = t.param(&self.candidates[row * 4]);
                        t.depthwise_conv(x, w)
                    })
                    .collect();
                let sum = t.add_many(&branches);
                t.scale(sum, 0.25)
            }
            SelectionMode::Learned => match phase {
                Phase::Hard => {
                    let flat = Self::argmax_flat(self.logit_values(external_logits).value.data());
                    let w = t.param(&self.candidates[flat]);
                    t.depthwise_conv(x, w)
                }
                Phase::Soft => {
                    let logits = t.param(self.logit_values(external_logits));
                    let probs = t.softmax(logits);
                    let weighted: Vec<Var> = (0..16)
                        .map(|i| {
                            let w = t.param(&self.candidates[i]);
                            let conv = t.depthwise_conv(x, w);
                            t.scale_by(conv, probs, i)
                        })
                        .collect();
                    t.add_many(&weighted)
                }
            },
        };
        self.mixer.forward(t, mixed)
    }

    /// Visit every trainable parameter (own logits included when present).
    pub fn visit_params(&mut self, f: &mut impl FnMut(&mut Param)) {
        for c in &mut self.candidates {
            f(c);
        }
        if let Some(l) = &mut self.logits {
            f(l);
        }
        self.mixer.visit_params(f);
    }
}

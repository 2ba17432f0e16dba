//! Reusable layers: 1×1 convs, layer norm, patch embedding, squeeze–excitation.

use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Param, Tensor};
use serde::{Deserialize, Serialize};

pub fn xavier(rng: &mut Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut data = vec![0.0; shape.iter().product()];
    rng.fill_uniform(&mut data, bound);
    Tensor::from_vec(shape, data)
}

/// 1×1 convolution (also used as the token-wise linear layer).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PointwiseConv {
    pub weight: Param,
    pub bias: Param,
}

impl PointwiseConv {
    pub fn new(rng: &mut Rng, in_ch: usize, out_ch: usize) -> Self {
        PointwiseConv {
            weight: Param::new(xavier(rng, &[out_ch, in_ch], in_ch, out_ch)),
            bias: Param::zeros(&[out_ch]),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let w = t.param(&self.weight);
        let b = t.param(&self.bias);
        t.pointwise_conv(x, w, b)
    }

    pub fn visit_params(&mut self, f: &mut impl FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

impl LayerNorm {
    pub fn new(channels: usize) -> Self {
        LayerNorm {
            gamma: Param::new(Tensor::full(&[channels], 1.0)),
            beta: Param::zeros(&[channels]),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let g = t.param(&self.gamma);
        let b = t.param(&self.beta);
        t.layer_norm(x, g, b, 1e-5)
    }

    pub fn visit_params(&mut self, f: &mut impl FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// k×k stride-k convolution for patch embedding / merging.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PatchEmbed {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
}

impl PatchEmbed {
    pub fn new(rng: &mut Rng, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        let fan_in = in_ch * stride * stride;
        PatchEmbed {
            weight: Param::new(xavier(
                rng,
                &[out_ch, in_ch, stride, stride],
                fan_in,
                out_ch,
            )),
            bias: Param::zeros(&[out_ch]),
            stride,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let w = t.param(&self.weight);
        let b = t.param(&self.bias);
        t.patch_conv(x, w, b, self.stride)
    }

    pub fn visit_params(&mut self, f: &mut impl FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Squeeze–excitation: global pool → bottleneck → sigmoid gates in (0, 1).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeBlock {
    pub squeeze: PointwiseConv,
    pub excite: PointwiseConv,
}

impl SeBlock {
    pub fn new(rng: &mut Rng, channels: usize, reduction: usize) -> Self {
        let mid = (channels / reduction).max(1);
        SeBlock {
            squeeze: PointwiseConv::new(rng, channels, mid),
            excite: PointwiseConv::new(rng, mid, channels),
        }
    }

    /// Channel gates for `x`, shape [C].
    pub fn gates(&self, t: &mut Tape, x: Var) -> Var {
        let c = t.value(x).c();
        let pooled = t.global_avg_pool(x);
        let z = t.reshape(pooled, &[c, 1, 1]);
        let h = self.squeeze.forward(t, z);
        let h = t.relu(h);
        let e = self.excite.forward(t, h);
        let e = t.sigmoid(e);
        let mid = t.value(e).c();
        debug_assert_eq!(mid, c);
        t.reshape(e, &[c])
    }

    /// x ⊙ gates(x).
    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let g = self.gates(t, x);
        t.mul_channel(x, g)
    }

    pub fn visit_params(&mut self, f: &mut impl FnMut(&mut Param)) {
        self.squeeze.visit_params(f);
        self.excite.visit_params(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn se_gates_are_sigmoid_bounded() {
        let mut rng = Rng::new(1);
        let se = SeBlock::new(&mut rng, 8, 4);
        let mut t = Tape::new();
        let mut data = vec![0.0; 8 * 3 * 3];
        rng.fill_uniform(&mut data, 2.0);
        let x = t.constant(Tensor::from_vec(&[8, 3, 3], data));
        let g = se.gates(&mut t, x);
        let gv = t.value(g);
        assert_eq!(gv.shape(), &[8]);
        for &v in gv.data() {
            assert!(v > 0.0 && v < 1.0, "gate {} outside (0,1)", v);
        }
    }

    #[test]
    fn pointwise_shapes() {
        let mut rng = Rng::new(2);
        let pw = PointwiseConv::new(&mut rng, 3, 5);
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[3, 4, 4]));
        let y = pw.forward(&mut t, x);
        assert_eq!(t.value(y).shape(), &[5, 4, 4]);
    }
}

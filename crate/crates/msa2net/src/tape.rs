//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes; each non-leaf
//! node carries a backward closure that routes the incoming gradient to its
//! parents. Parameters are interned by id, so using the same [`Param`] twice
//! in one forward accumulates both gradient contributions.
//!
//! One tape per sample: batching is done by running independent tapes (in
//! parallel if desired) and summing parameter gradients in batch order, which
//! keeps training bit-reproducible.

use crate::tensor::{Param, Tensor};
use std::collections::BTreeMap;

pub type Var = usize;

pub(crate) type BackFn = Box<dyn Fn(&Tensor, &mut Grads)>;

struct Node {
    value: Tensor,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    interned: BTreeMap<u64, Var>,
}

/// Per-node gradient buffers produced by [`Tape::backward`].
pub struct Grads {
    slots: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn accum(&mut self, var: Var, g: Tensor) {
        match &mut self.slots[var] {
            Some(acc) => {
                let dst = acc.data_mut();
                for (d, s) in dst.iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.slots[var].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v].value
    }

    fn push(&mut self, value: Tensor, back: Option<BackFn>) -> Var {
        self.nodes.push(Node { value, back });
        self.nodes.len() - 1
    }

    /// Record a node with a custom backward closure (used by the op impls).
    pub(crate) fn push_node(&mut self, value: Tensor, back: BackFn) -> Var {
        self.push(value, Some(back))
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, None)
    }

    /// Leaf for a learnable parameter. Repeated calls with the same param
    /// return the same node.
    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(&v) = self.interned.get(&p.id) {
            return v;
        }
        let v = self.push(p.value.clone(), None);
        self.interned.insert(p.id, v);
        v
    }

    /// Gradient of the last backward pass w.r.t. `p`, if it participated.
    pub fn grad_of<'g>(&self, grads: &'g Grads, p: &Param) -> Option<&'g Tensor> {
        self.interned.get(&p.id).and_then(|&v| grads.get(v))
    }

    /// Every interned parameter's gradient, ordered by parameter id.
    pub fn param_grads(&self, grads: &Grads) -> Vec<(u64, Tensor)> {
        self.interned
            .iter()
            .filter_map(|(&id, &var)| grads.get(var).map(|g| (id, g.clone())))
            .collect()
    }

    /// Run reverse accumulation from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.nodes[loss].value.len(), 1, "loss must be scalar");
        let mut grads = Grads {
            slots: vec![None; self.nodes.len()],
        };
        grads.accum(loss, Tensor::scalar(1.0));
        for i in (0..=loss).rev() {
            let Some(g) = grads.slots[i].take() else {
                continue;
            };
            match &self.nodes[i].back {
                Some(back) => back(&g, &mut grads),
                // Leaves keep their gradient.
                None => grads.slots[i] = Some(g),
            }
        }
        grads
    }

    // ── elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(ta.shape(), tb.shape(), "add: shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::from_vec(ta.shape(), data);
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                grads.accum(a, g.clone());
                grads.accum(b, g.clone());
            })),
        )
    }

    pub fn add_many(&mut self, vars: &[Var]) -> Var {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(ta.shape(), tb.shape(), "mul: shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(ta.shape(), data);
        let (va, vb) = (ta.clone(), tb.clone());
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let da = Tensor::from_vec(
                    va.shape(),
                    g.data().iter().zip(vb.data()).map(|(g, y)| g * y).collect(),
                );
                let db = Tensor::from_vec(
                    vb.shape(),
                    g.data().iter().zip(va.data()).map(|(g, x)| g * x).collect(),
                );
                grads.accum(a, da);
                grads.accum(b, db);
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = &self.nodes[a].value;
        let out = Tensor::from_vec(ta.shape(), ta.data().iter().map(|x| x * c).collect());
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                grads.accum(
                    a,
                    Tensor::from_vec(g.shape(), g.data().iter().map(|v| v * c).collect()),
                );
            })),
        )
    }

    /// Multiply a tensor by element `idx` of a vector node (used to weight
    /// candidate-kernel outputs by selection probabilities).
    pub fn scale_by(&mut self, a: Var, coeffs: Var, idx: usize) -> Var {
        let c = self.nodes[coeffs].value.data()[idx];
        let ta = &self.nodes[a].value;
        let out = Tensor::from_vec(ta.shape(), ta.data().iter().map(|x| x * c).collect());
        let va = ta.clone();
        let n = self.nodes[coeffs].value.len();
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let da = Tensor::from_vec(g.shape(), g.data().iter().map(|v| v * c).collect());
                grads.accum(a, da);
                let dot: f64 = g.data().iter().zip(va.data()).map(|(g, x)| g * x).sum();
                let mut dc = vec![0.0; n];
                dc[idx] = dot;
                grads.accum(coeffs, Tensor::from_vec(&[n], dc));
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a].value;
        let out = Tensor::from_vec(ta.shape(), ta.data().iter().map(|x| x.max(0.0)).collect());
        let va = ta.clone();
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let da = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(va.data())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
                grads.accum(a, da);
            })),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const C3: f64 = 0.044715;
        let ta = &self.nodes[a].value;
        let out = Tensor::from_vec(
            ta.shape(),
            ta.data()
                .iter()
                .map(|&x| 0.5 * x * (1.0 + (K * (x + C3 * x * x * x)).tanh()))
                .collect(),
        );
        let va = ta.clone();
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let da = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(va.data())
                        .map(|(g, &x)| {
                            let u = K * (x + C3 * x * x * x);
                            let t = u.tanh();
                            let du = K * (1.0 + 3.0 * C3 * x * x);
                            g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                        })
                        .collect(),
                );
                grads.accum(a, da);
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a].value;
        let out = Tensor::from_vec(
            ta.shape(),
            ta.data().iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect(),
        );
        let vo = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let da = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(vo.data())
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect(),
                );
                grads.accum(a, da);
            })),
        )
    }

    // ── channel broadcasts over [C, H, W] ────────────────────────────

    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let tx = &self.nodes[x].value;
        let tb = &self.nodes[bias].value;
        let (c, h, w) = (tx.c(), tx.h(), tx.w());
        assert_eq!(tb.len(), c, "bias length must equal channel count");
        let plane = h * w;
        let mut data = tx.data().to_vec();
        for ch in 0..c {
            let b = tb.data()[ch];
            for v in &mut data[ch * plane..(ch + 1) * plane] {
                *v += b;
            }
        }
        let out = Tensor::from_vec(tx.shape(), data);
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                grads.accum(x, g.clone());
                let mut db = vec![0.0; c];
                for ch in 0..c {
                    db[ch] = g.data()[ch * plane..(ch + 1) * plane].iter().sum();
                }
                grads.accum(bias, Tensor::from_vec(&[c], db));
            })),
        )
    }

    /// Per-channel scaling: `out[c,h,w] = x[c,h,w] * s[c]`.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Var {
        let tx = &self.nodes[x].value;
        let ts = &self.nodes[s].value;
        let (c, h, w) = (tx.c(), tx.h(), tx.w());
        assert_eq!(ts.len(), c, "scale length must equal channel count");
        let plane = h * w;
        let mut data = tx.data().to_vec();
        for ch in 0..c {
            let k = ts.data()[ch];
            for v in &mut data[ch * plane..(ch + 1) * plane] {
                *v *= k;
            }
        }
        let out = Tensor::from_vec(tx.shape(), data);
        let (vx, vs) = (tx.clone(), ts.clone());
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let mut dx = g.data().to_vec();
                let mut ds = vec![0.0; c];
                for ch in 0..c {
                    let k = vs.data()[ch];
                    let gp = &g.data()[ch * plane..(ch + 1) * plane];
                    let xp = &vx.data()[ch * plane..(ch + 1) * plane];
                    ds[ch] = gp.iter().zip(xp).map(|(g, x)| g * x).sum();
                    for v in &mut dx[ch * plane..(ch + 1) * plane] {
                        *v *= k;
                    }
                }
                grads.accum(x, Tensor::from_vec(vx.shape(), dx));
                grads.accum(s, Tensor::from_vec(&[c], ds));
            })),
        )
    }

    // ── structure ────────────────────────────────────────────────────

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let (h, w) = {
            let t = &self.nodes[parts[0]].value;
            (t.h(), t.w())
        };
        let mut total_c = 0;
        let mut data = Vec::new();
        let mut spans = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = &self.nodes[p].value;
            assert_eq!((t.h(), t.w()), (h, w), "concat: spatial mismatch");
            spans.push((p, t.len()));
            total_c += t.c();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_vec(&[total_c, h, w], data);
        let part_shapes: Vec<Vec<usize>> = parts
            .iter()
            .map(|&p| self.nodes[p].value.shape().to_vec())
            .collect();
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let mut off = 0;
                for ((p, n), shape) in spans.iter().zip(&part_shapes) {
                    let slice = g.data()[off..off + n].to_vec();
                    grads.accum(*p, Tensor::from_vec(shape, slice));
                    off += n;
                }
            })),
        )
    }

    /// Channels `[from, to)` of a [C, H, W] tensor.
    pub fn slice_channels(&mut self, x: Var, from: usize, to: usize) -> Var {
        let tx = &self.nodes[x].value;
        let (c, h, w) = (tx.c(), tx.h(), tx.w());
        assert!(from < to && to <= c);
        let plane = h * w;
        let data = tx.data()[from * plane..to * plane].to_vec();
        let out = Tensor::from_vec(&[to - from, h, w], data);
        let full_shape = tx.shape().to_vec();
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let mut dx = vec![0.0; full_shape.iter().product()];
                dx[from * plane..to * plane].copy_from_slice(g.data());
                grads.accum(x, Tensor::from_vec(&full_shape, dx));
            })),
        )
    }

    /// View with a different shape (same element count).
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let tx = &self.nodes[x].value;
        assert_eq!(tx.len(), shape.iter().product::<usize>(), "reshape size");
        let old_shape = tx.shape().to_vec();
        let out = Tensor::from_vec(shape, tx.data().to_vec());
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                grads.accum(x, Tensor::from_vec(&old_shape, g.data().to_vec()));
            })),
        )
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x].value;
        let s: f64 = tx.data().iter().sum();
        let shape = tx.shape().to_vec();
        self.push(
            Tensor::scalar(s),
            Some(Box::new(move |g, grads| {
                let gv = g.item();
                grads.accum(x, Tensor::full(&shape, gv));
            })),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x].value.len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Global average pool: [C, H, W] → [C].
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x].value;
        let (c, h, w) = (tx.c(), tx.h(), tx.w());
        let plane = h * w;
        let inv = 1.0 / plane as f64;
        let data: Vec<f64> = (0..c)
            .map(|ch| tx.data()[ch * plane..(ch + 1) * plane].iter().sum::<f64>() * inv)
            .collect();
        let out = Tensor::from_vec(&[c], data);
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let mut dx = vec![0.0; c * plane];
                for ch in 0..c {
                    let gv = g.data()[ch] * inv;
                    for v in &mut dx[ch * plane..(ch + 1) * plane] {
                        *v = gv;
                    }
                }
                grads.accum(x, Tensor::from_vec(&[c, h, w], dx));
            })),
        )
    }

    // ── softmax ──────────────────────────────────────────────────────

    /// Softmax over a flat vector.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x].value;
        let max = tx.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = tx.data().iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let out = Tensor::from_vec(tx.shape(), probs);
        let vp = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let dot: f64 = g.data().iter().zip(vp.data()).map(|(g, p)| g * p).sum();
                let dx = Tensor::from_vec(
                    vp.shape(),
                    g.data()
                        .iter()
                        .zip(vp.data())
                        .map(|(g, p)| p * (g - dot))
                        .collect(),
                );
                grads.accum(x, dx);
            })),
        )
    }

    /// Softmax over the channel dimension at every pixel of [C, H, W].
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x].value;
        let (c, h, w) = (tx.c(), tx.h(), tx.w());
        let plane = h * w;
        let xd = tx.data();
        let mut data = vec![0.0; c * plane];
        for p in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for ch in 0..c {
                max = max.max(xd[ch * plane + p]);
            }
            let mut z = 0.0;
            for ch in 0..c {
                let e = (xd[ch * plane + p] - max).exp();
                data[ch * plane + p] = e;
                z += e;
            }
            for ch in 0..c {
                data[ch * plane + p] /= z;
            }
        }
        let out = Tensor::from_vec(&[c, h, w], data);
        let vp = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let pd = vp.data();
                let mut dx = vec![0.0; c * plane];
                for p in 0..plane {
                    let mut dot = 0.0;
                    for ch in 0..c {
                        dot += g.data()[ch * plane + p] * pd[ch * plane + p];
                    }
                    for ch in 0..c {
                        let i = ch * plane + p;
                        dx[i] = pd[i] * (g.data()[i] - dot);
                    }
                }
                grads.accum(x, Tensor::from_vec(&[c, h, w], dx));
            })),
        )
    }
}

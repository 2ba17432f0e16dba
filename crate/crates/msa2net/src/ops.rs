//! Convolution, attention, normalization, resampling and loss ops.
//!
//! All spatial convolutions that preserve resolution pad by replicating the
//! border pixel, so a spatially constant input stays constant through the
//! whole network. Strided convolutions tile exactly and use no padding.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[inline]
fn clamp(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

impl Tape {
    /// 1×1 convolution: x [Ci,H,W], w [Co,Ci], b [Co] → [Co,H,W].
    pub fn pointwise_conv(&mut self, x: Var, w: Var, b: Var) -> Var {
        let tx = self.value(x).clone();
        let tw = self.value(w).clone();
        let tb = self.value(b).clone();
        let (ci, h, wd) = (tx.c(), tx.h(), tx.w());
        let co = tw.shape()[0];
        assert_eq!(tw.shape(), &[co, ci], "pointwise weight shape");
        assert_eq!(tb.len(), co);
        let plane = h * wd;
        let mut out = vec![0.0; co * plane];
        for o in 0..co {
            let dst = &mut out[o * plane..(o + 1) * plane];
            dst.fill(tb.data()[o]);
            for i in 0..ci {
                let k = tw.data()[o * ci + i];
                if k == 0.0 {
                    continue;
                }
                let src = &tx.data()[i * plane..(i + 1) * plane];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += k * s;
                }
            }
        }
        let out = Tensor::from_vec(&[co, h, wd], out);
        self.push_node(
            out,
            Box::new(move |g, grads| {
                let gd = g.data();
                let mut dx = vec![0.0; ci * plane];
                let mut dw = vec![0.0; co * ci];
                let mut db = vec![0.0; co];
                for o in 0..co {
                    let gp = &gd[o * plane..(o + 1) * plane];
                    db[o] = gp.iter().sum();
                    for i in 0..ci {
                        let k = tw.data()[o * ci + i];
                        let xp = &tx.data()[i * plane..(i + 1) * plane];
                        let mut dot = 0.0;
                        let dxp = &mut dx[i * plane..(i + 1) * plane];
                        for ((d, gv), xv) in dxp.iter_mut().zip(gp).zip(xp) {
                            *d += k * gv;
                            dot += gv * xv;
                        }
                        dw[o * ci + i] = dot;
                    }
                }
                grads.accum(x, Tensor::from_vec(&[ci, h, wd], dx));
                grads.accum(w, Tensor::from_vec(&[co, ci], dw));
                grads.accum(b, Tensor::from_vec(&[co], db));
            }),
        )
    }

    /// Depthwise k×k convolution with replicate padding (k−1)/2, no bias.
    /// x [C,H,W], w [C,k,k] → [C,H,W].
    pub fn depthwise_conv(&mut self, x: Var, w: Var) -> Var {
        let tx = self.value(x).clone();
        let tw = self.value(w).clone();
        let (c, h, wd) = (tx.c(), tx.h(), tx.w());
        let k = tw.shape()[1];
        assert_eq!(tw.shape(), &[c, k, k], "depthwise weight shape");
        assert_eq!(k % 2, 1, "kernel size must be odd");
        let r = (k / 2) as isize;
        let plane = h * wd;
        let mut out = vec![0.0; c * plane];
        for ch in 0..c {
            let xp = &tx.data()[ch * plane..(ch + 1) * plane];
            let wp = &tw.data()[ch * k * k..(ch + 1) * k * k];
            let op = &mut out[ch * plane..(ch + 1) * plane];
            for y in 0..h {
                for dy in 0..k {
                    let sy = clamp(y as isize + dy as isize - r, h);
                    let row = &xp[sy * wd..(sy + 1) * wd];
                    for dx in 0..k {
                        let kv = wp[dy * k + dx];
                        if kv == 0.0 {
                            continue;
                        }
                        let off = dx as isize - r;
                        let orow = &mut op[y * wd..(y + 1) * wd];
                        for xo in 0..wd {
                            orow[xo] += kv * row[clamp(xo as isize + off, wd)];
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[c, h, wd], out);
        self.push_node(
            out,
            Box::new(move |g, grads| {
                let gd = g.data();
                let mut dx = vec![0.0; c * plane];
                let mut dw = vec![0.0; c * k * k];
                let r = (k / 2) as isize;
                for ch in 0..c {
                    let xp = &tx.data()[ch * plane..(ch + 1) * plane];
                    let wp = &tw.data()[ch * k * k..(ch + 1) * k * k];
                    let gp = &gd[ch * plane..(ch + 1) * plane];
                    let dxp = &mut dx[ch * plane..(ch + 1) * plane];
                    let dwp = &mut dw[ch * k * k..(ch + 1) * k * k];
                    for y in 0..h {
                        let grow = &gp[y * wd..(y + 1) * wd];
                        for dy in 0..k {
                            let sy = clamp(y as isize + dy as isize - r, h);
                            for dxk in 0..k {
                                let off = dxk as isize - r;
                                let kv = wp[dy * k + dxk];
                                let mut acc = 0.0;
                                for xo in 0..wd {
                                    let sx = clamp(xo as isize + off, wd);
                                    let gv = grow[xo];
                                    acc += gv * xp[sy * wd + sx];
                                    dxp[sy * wd + sx] += kv * gv;
                                }
                                dwp[dy * k + dxk] += acc;
                            }
                        }
                    }
                }
                grads.accum(x, Tensor::from_vec(&[c, h, wd], dx));
                grads.accum(w, Tensor::from_vec(&[c, k, k], dw));
            }),
        )
    }

    /// Patch embedding: k×k convolution with stride k (exact tiling, no pad).
    /// x [Ci,H,W], w [Co,Ci,k,k], b [Co] → [Co,H/k,W/k].
    pub fn patch_conv(&mut self, x: Var, w: Var, b: Var, k: usize) -> Var {
        let tx = self.value(x).clone();
        let tw = self.value(w).clone();
        let tb = self.value(b).clone();
        let (ci, h, wd) = (tx.c(), tx.h(), tx.w());
        assert!(h % k == 0 && wd % k == 0, "input not divisible by stride");
        let co = tw.shape()[0];
        assert_eq!(tw.shape(), &[co, ci, k, k]);
        let (oh, ow) = (h / k, wd / k);
        let oplane = oh * ow;
        let plane = h * wd;
        let mut out = vec![0.0; co * oplane];
        for o in 0..co {
            let op = &mut out[o * oplane..(o + 1) * oplane];
            op.fill(tb.data()[o]);
            for i in 0..ci {
                let xp = &tx.data()[i * plane..(i + 1) * plane];
                let wp = &tw.data()[(o * ci + i) * k * k..(o * ci + i + 1) * k * k];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for dy in 0..k {
                            let row = &xp[(oy * k + dy) * wd + ox * k..][..k];
                            let wrow = &wp[dy * k..(dy + 1) * k];
                            for dx in 0..k {
                                acc += wrow[dx] * row[dx];
                            }
                        }
                        op[oy * ow + ox] += acc;
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[co, oh, ow], out);
        self.push_node(
            out,
            Box::new(move |g, grads| {
                let gd = g.data();
                let mut dx = vec![0.0; ci * plane];
                let mut dw = vec![0.0; co * ci * k * k];
                let mut db = vec![0.0; co];
                for o in 0..co {
                    let gp = &gd[o * oplane..(o + 1) * oplane];
                    db[o] = gp.iter().sum();
                    for i in 0..ci {
                        let xp = &tx.data()[i * plane..(i + 1) * plane];
                        let dxp = &mut dx[i * plane..(i + 1) * plane];
                        let wbase = (o * ci + i) * k * k;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = gp[oy * ow + ox];
                                if gv == 0.0 {
                                    continue;
                                }
                                for dy in 0..k {
                                    for dxk in 0..k {
                                        let src = (oy * k + dy) * wd + ox * k + dxk;
                                        dw[wbase + dy * k + dxk] += gv * xp[src];
                                        dxp[src] += gv * tw.data()[wbase + dy * k + dxk];
                                    }
                                }
                            }
                        }
                    }
                }
                grads.accum(x, Tensor::from_vec(&[ci, h, wd], dx));
                grads.accum(w, Tensor::from_vec(&[co, ci, k, k], dw));
                grads.accum(b, Tensor::from_vec(&[co], db));
            }),
        )
    }

    /// LayerNorm over the channel dimension at each spatial position.
    /// x [C,H,W], gamma/beta [C].
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let tx = self.value(x).clone();
        let tg = self.value(gamma).clone();
        let tbeta = self.value(beta).clone();
        let (c, h, w) = (tx.c(), tx.h(), tx.w());
        let plane = h * w;
        let xd = tx.data();
        let mut xhat = vec![0.0; c * plane];
        let mut inv_std = vec![0.0; plane];
        for p in 0..plane {
            let mut mean = 0.0;
            for ch in 0..c {
                mean += xd[ch * plane + p];
            }
            mean /= c as f64;
            let mut var = 0.0;
            for ch in 0..c {
                let d = xd[ch * plane + p] - mean;
                var += d * d;
            }
            var /= c as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[p] = istd;
            for ch in 0..c {
                xhat[ch * plane + p] = (xd[ch * plane + p] - mean) * istd;
            }
        }
        let mut out = vec![0.0; c * plane];
        for ch in 0..c {
            let (gm, bt) = (tg.data()[ch], tbeta.data()[ch]);
            for p in 0..plane {
                out[ch * plane + p] = gm * xhat[ch * plane + p] + bt;
            }
        }
        let out = Tensor::from_vec(&[c, h, w], out);
        let xhat_t = Tensor::from_vec(&[c, h, w], xhat);
        self.push_node(
            out,
            Box::new(move |g, grads| {
                let gd = g.data();
                let xh = xhat_t.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; c * plane];
                for ch in 0..c {
                    let mut sg = 0.0;
                    let mut sb = 0.0;
                    for p in 0..plane {
                        let i = ch * plane + p;
                        sg += gd[i] * xh[i];
                        sb += gd[i];
                    }
                    dgamma[ch] = sg;
                    dbeta[ch] = sb;
                }
                for p in 0..plane {
                    let mut m1 = 0.0; // mean of dxhat
                    let mut m2 = 0.0; // mean of dxhat * xhat
                    for ch in 0..c {
                        let i = ch * plane + p;
                        let dxh = gd[i] * tg.data()[ch];
                        m1 += dxh;
                        m2 += dxh * xh[i];
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    for ch in 0..c {
                        let i = ch * plane + p;
                        let dxh = gd[i] * tg.data()[ch];
                        dx[i] = inv_std[p] * (dxh - m1 - xh[i] * m2);
                    }
                }
                grads.accum(x, Tensor::from_vec(&[c, h, w], dx));
                grads.accum(gamma, Tensor::from_vec(&[c], dgamma));
                grads.accum(beta, Tensor::from_vec(&[c], dbeta));
            }),
        )
    }

    /// Bilinear upsampling by an integer factor (half-pixel centers, edges
    /// clamped). x [C,H,W] → [C,H*f,W*f].
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Var {
        let tx = self.value(x).clone();
        let (c, h, w) = (tx.c(), tx.h(), tx.w());
        let (oh, ow) = (h * factor, w * factor);
        // Precompute 1-D sampling positions and weights.
        let axis = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
            (0..n_out)
                .map(|o| {
                    let src = (o as f64 + 0.5) / factor as f64 - 0.5;
                    let f = src.floor();
                    let lo = clamp(f as isize, n_in);
                    let hi = clamp(f as isize + 1, n_in);
                    (lo, hi, src - f)
                })
                .collect()
        };
        let ys = axis(oh, h);
        let xs = axis(ow, w);
        let plane = h * w;
        let oplane = oh * ow;
        let mut out = vec![0.0; c * oplane];
        for ch in 0..c {
            let xp = &tx.data()[ch * plane..(ch + 1) * plane];
            let op = &mut out[ch * oplane..(ch + 1) * oplane];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let v00 = xp[y0 * w + x0];
                    let v01 = xp[y0 * w + x1];
                    let v10 = xp[y1 * w + x0];
                    let v11 = xp[y1 * w + x1];
                    op[oy * ow + ox] = v00 * (1.0 - fy) * (1.0 - fx)
                        + v01 * (1.0 - fy) * fx
                        + v10 * fy * (1.0 - fx)
                        + v11 * fy * fx;
                }
            }
        }
        let out = Tensor::from_vec(&[c, oh, ow], out);
        self.push_node(
            out,
            Box::new(move |g, grads| {
                let gd = g.data();
                let mut dx = vec![0.0; c * plane];
                for ch in 0..c {
                    let gp = &gd[ch * oplane..(ch + 1) * oplane];
                    let dxp = &mut dx[ch * plane..(ch + 1) * plane];
                    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                            let gv = gp[oy * ow + ox];
                            dxp[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            dxp[y0 * w + x1] += gv * (1.0 - fy) * fx;
                            dxp[y1 * w + x0] += gv * fy * (1.0 - fx);
                            dxp[y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
                grads.accum(x, Tensor::from_vec(&[c, h, w], dx));
            }),
        )
    }

    /// Mean per-pixel cross-entropy between logits [C,H,W] and a label map
    /// (row-major H×W, values in 0..C).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Var {
        let tl = self.value(logits).clone();
        let (c, h, w) = (tl.c(), tl.h(), tl.w());
        let plane = h * w;
        assert_eq!(labels.len(), plane, "label map size mismatch");
        let ld = tl.data();
        let mut probs = vec![0.0; c * plane];
        let mut loss = 0.0;
        for p in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for ch in 0..c {
                max = max.max(ld[ch * plane + p]);
            }
            let mut z = 0.0;
            for ch in 0..c {
                let e = (ld[ch * plane + p] - max).exp();
                probs[ch * plane + p] = e;
                z += e;
            }
            let label = labels[p] as usize;
            assert!(label < c, "label {} out of range", label);
            loss -= (ld[label * plane + p] - max - z.ln()) / plane as f64;
            for ch in 0..c {
                probs[ch * plane + p] /= z;
            }
        }
        let probs_t = Tensor::from_vec(&[c, h, w], probs);
        let labels_owned: Vec<u8> = labels.to_vec();
        self.push_node(
            Tensor::scalar(loss),
            Box::new(move |g, grads| {
                let gv = g.item() / plane as f64;
                let mut dl = probs_t.data().to_vec();
                for p in 0..plane {
                    dl[labels_owned[p] as usize * plane + p] -= 1.0;
                }
                for v in &mut dl {
                    *v *= gv;
                }
                grads.accum(logits, Tensor::from_vec(&[c, h, w], dl));
            }),
        )
    }

    /// Soft Dice loss over foreground classes (1..C) given per-pixel class
    /// probabilities [C,H,W]: 1 − mean_c (2·Σp·t + ε)/(Σp + Σt + ε).
    pub fn dice_loss(&mut self, probs: Var, labels: &[u8], eps: f64) -> Var {
        let tp = self.value(probs).clone();
        let (c, h, w) = (tp.c(), tp.h(), tp.w());
        let plane = h * w;
        assert_eq!(labels.len(), plane);
        assert!(c >= 2, "dice loss needs at least one foreground class");
        let pd = tp.data();
        let nfg = c - 1;
        let mut inter = vec![0.0; c];
        let mut psum = vec![0.0; c];
        let mut tsum = vec![0.0; c];
        for p in 0..plane {
            let lab = labels[p] as usize;
            tsum[lab] += 1.0;
            for ch in 1..c {
                let pv = pd[ch * plane + p];
                psum[ch] += pv;
                if lab == ch {
                    inter[ch] += pv;
                }
            }
        }
        let mut loss = 1.0;
        for ch in 1..c {
            let d = (2.0 * inter[ch] + eps) / (psum[ch] + tsum[ch] + eps);
            loss -= d / nfg as f64;
        }
        let labels_owned: Vec<u8> = labels.to_vec();
        self.push_node(
            Tensor::scalar(loss),
            Box::new(move |g, grads| {
                let gv = g.item();
                let mut dp = vec![0.0; c * plane];
                for ch in 1..c {
                    let denom = psum[ch] + tsum[ch] + eps;
                    let num = 2.0 * inter[ch] + eps;
                    for p in 0..plane {
                        let t = if labels_owned[p] as usize == ch { 1.0 } else { 0.0 };
                        // d(loss)/dp = -(1/nfg) * (2t*denom - num) / denom^2
                        dp[ch * plane + p] =
                            -gv / nfg as f64 * (2.0 * t * denom - num) / (denom * denom);
                    }
                }
                grads.accum(probs, Tensor::from_vec(&[c, h, w], dp));
            }),
        )
    }
}

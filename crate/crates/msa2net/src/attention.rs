//! Cross-shaped window self-attention.
//!
//! Heads are split half/half: the first half attends within horizontal
//! stripes of `stripe` rows, the second half within vertical stripes of
//! `stripe` columns. Each band is full attention over its own tokens, so a
//! query's receptive field is the cross formed by its row- and column-bands
//! across the two head groups.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Token coordinates of every band for one orientation.
/// Bands tile the image; a trailing band may be narrower than `stripe`.
fn bands(h: usize, w: usize, stripe: usize, horizontal: bool) -> Vec<Vec<(usize, usize)>> {
    let stripe = stripe.max(1);
    let mut out = Vec::new();
    if horizontal {
        let mut y0 = 0;
        while y0 < h {
            let y1 = (y0 + stripe).min(h);
            let mut band = Vec::with_capacity((y1 - y0) * w);
            for y in y0..y1 {
                for x in 0..w {
                    band.push((y, x));
                }
            }
            out.push(band);
            y0 = y1;
        }
    } else {
        let mut x0 = 0;
        while x0 < w {
            let x1 = (x0 + stripe).min(w);
            let mut band = Vec::with_capacity((x1 - x0) * h);
            for x in x0..x1 {
                for y in 0..h {
                    band.push((y, x));
                }
            }
            out.push(band);
            x0 = x1;
        }
    }
    out
}

fn gather(src: &[f64], plane: usize, width: usize, c0: usize, dh: usize, band: &[(usize, usize)]) -> Vec<f64> {
    let mut out = vec![0.0; band.len() * dh];
    for (ti, &(y, x)) in band.iter().enumerate() {
        for d in 0..dh {
            out[ti * dh + d] = src[(c0 + d) * plane + y * width + x];
        }
    }
    out
}

fn row_softmax(scores: &mut [f64], t: usize) {
    for row in scores.chunks_mut(t) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

impl Tape {
    /// Fused stripe attention. q, k, v are [C,H,W]; output is [C,H,W].
    pub fn cswin_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, stripe: usize) -> Var {
        let tq = self.value(q).clone();
        let tk = self.value(k).clone();
        let tv = self.value(v).clone();
        let (c, h, w) = (tq.c(), tq.h(), tq.w());
        assert_eq!(tk.shape(), tq.shape());
        assert_eq!(tv.shape(), tq.shape());
        assert!(heads >= 2 && heads % 2 == 0, "heads must be even");
        assert_eq!(c % heads, 0, "channels must divide heads");
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let plane = h * w;

        let mut out = vec![0.0; c * plane];
        // Saved attention matrices per (head, band) for the backward pass.
        let mut saved: Vec<(usize, Vec<(usize, usize)>, Vec<f64>)> = Vec::new();
        for head in 0..heads {
            let horizontal = head < heads / 2;
            let c0 = head * dh;
            for band in bands(h, w, stripe, horizontal) {
                let t = band.len();
                let qb = gather(tq.data(), plane, w, c0, dh, &band);
                let kb = gather(tk.data(), plane, w, c0, dh, &band);
                let vb = gather(tv.data(), plane, w, c0, dh, &band);
                let mut attn = vec![0.0; t * t];
                for i in 0..t {
                    for j in 0..t {
                        let mut s = 0.0;
                        for d in 0..dh {
                            s += qb[i * dh + d] * kb[j * dh + d];
                        }
                        attn[i * t + j] = s * scale;
                    }
                }
                row_softmax(&mut attn, t);
                for (i, &(y, x)) in band.iter().enumerate() {
                    for d in 0..dh {
                        let mut o = 0.0;
                        for j in 0..t {
                            o += attn[i * t + j] * vb[j * dh + d];
                        }
                        out[(c0 + d) * plane + y * w + x] = o;
                    }
                }
                saved.push((head, band, attn));
            }
        }
        let out = Tensor::from_vec(&[c, h, w], out);
        self.push_node(
            out,
            Box::new(move |g, grads| {
                let gd = g.data();
                let mut dq = vec![0.0; c * plane];
                let mut dk = vec![0.0; c * plane];
                let mut dv = vec![0.0; c * plane];
                for (head, band, attn) in &saved {
                    let c0 = head * dh;
                    let t = band.len();
                    let qb = gather(tq.data(), plane, w, c0, dh, band);
                    let kb = gather(tk.data(), plane, w, c0, dh, band);
                    let vb = gather(tv.data(), plane, w, c0, dh, band);
                    let gob = gather(gd, plane, w, c0, dh, band);
                    // dV = A^T · dO
                    let mut dvb = vec![0.0; t * dh];
                    for j in 0..t {
                        for i in 0..t {
                            let a = attn[i * t + j];
                            if a == 0.0 {
                                continue;
                            }
                            for d in 0..dh {
                                dvb[j * dh + d] += a * gob[i * dh + d];
                            }
                        }
                    }
                    // dA = dO · V^T, then softmax backward row-wise → dS
                    let mut ds = vec![0.0; t * t];
                    for i in 0..t {
                        let mut dot = 0.0;
                        for j in 0..t {
                            let mut da = 0.0;
                            for d in 0..dh {
                                da += gob[i * dh + d] * vb[j * dh + d];
                            }
                            ds[i * t + j] = da;
                            dot += da * attn[i * t + j];
                        }
                        for j in 0..t {
                            ds[i * t + j] = attn[i * t + j] * (ds[i * t + j] - dot);
                        }
                    }
                    // dQ = dS · K · scale ; dK = dS^T · Q · scale
                    let mut dqb = vec![0.0; t * dh];
                    let mut dkb = vec![0.0; t * dh];
                    for i in 0..t {
                        for j in 0..t {
                            let s = ds[i * t + j] * scale;
                            if s == 0.0 {
                                continue;
                            }
                            for d in 0..dh {
                                dqb[i * dh + d] += s * kb[j * dh + d];
                                dkb[j * dh + d] += s * qb[i * dh + d];
                            }
                        }
                    }
                    for (ti, &(y, x)) in band.iter().enumerate() {
                        for d in 0..dh {
                            let idx = (c0 + d) * plane + y * w + x;
                            dq[idx] += dqb[ti * dh + d];
                            dk[idx] += dkb[ti * dh + d];
                            dv[idx] += dvb[ti * dh + d];
                        }
                    }
                }
                grads.accum(q, Tensor::from_vec(&[c, h, w], dq));
                grads.accum(k, Tensor::from_vec(&[c, h, w], dk));
                grads.accum(v, Tensor::from_vec(&[c, h, w], dv));
            }),
        )
    }
}

/// Materialize every attention matrix for inspection (row-major T×T per
/// band per head). Shares the band layout with the fused op.
pub fn materialize_attention(
    q: &Tensor,
    k: &Tensor,
    heads: usize,
    stripe: usize,
) -> Vec<Vec<f64>> {
    let (c, h, w) = (q.c(), q.h(), q.w());
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let plane = h * w;
    let mut mats = Vec::new();
    for head in 0..heads {
        let horizontal = head < heads / 2;
        let c0 = head * dh;
        for band in bands(h, w, stripe, horizontal) {
            let t = band.len();
            let qb = gather(q.data(), plane, w, c0, dh, &band);
            let kb = gather(k.data(), plane, w, c0, dh, &band);
            let mut attn = vec![0.0; t * t];
            for i in 0..t {
                for j in 0..t {
                    let mut s = 0.0;
                    for d in 0..dh {
                        s += qb[i * dh + d] * kb[j * dh + d];
                    }
                    attn[i * t + j] = s * scale;
                }
            }
            row_softmax(&mut attn, t);
            mats.push(attn);
        }
    }
    mats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tape::tests::check_grad;

    fn rand_t(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = Rng::new(seed);
        let mut v = vec![0.0; shape.iter().product()];
        rng.fill_uniform(&mut v, 1.0);
        Tensor::from_vec(shape, v)
    }

    #[test]
    fn output_shape_matches_input() {
        let mut t = Tape::new();
        let q = t.constant(rand_t(1, &[16, 8, 8]));
        let k = t.constant(rand_t(2, &[16, 8, 8]));
        let v = t.constant(rand_t(3, &[16, 8, 8]));
        let y = t.cswin_attention(q, k, v, 2, 2);
        assert_eq!(t.value(y).shape(), &[16, 8, 8]);
    }

    #[test]
    fn zero_logits_average_each_stripe() {
        // q = k = 0 → uniform attention → every output equals its band mean.
        let mut t = Tape::new();
        let vt = rand_t(4, &[4, 4, 6]);
        let q = t.constant(Tensor::zeros(&[4, 4, 6]));
        let k = t.constant(Tensor::zeros(&[4, 4, 6]));
        let v = t.constant(vt.clone());
        let y = t.cswin_attention(q, k, v, 2, 2);
        let out = t.value(y);
        // head 0 (channels 0..2) horizontal stripes of 2 rows
        let (h, w) = (4, 6);
        for ch in 0..2 {
            for band_start in [0usize, 2] {
                let mut mean = 0.0;
                for y0 in band_start..band_start + 2 {
                    for x0 in 0..w {
                        mean += vt.at3(ch, y0, x0);
                    }
                }
                mean /= (2 * w) as f64;
                for y0 in band_start..band_start + 2 {
                    for x0 in 0..w {
                        assert!((out.at3(ch, y0, x0) - mean).abs() < 1e-12);
                    }
                }
            }
        }
        // head 1 (channels 2..4) vertical stripes of 2 columns
        for ch in 2..4 {
            for band_start in [0usize, 2, 4] {
                let mut mean = 0.0;
                for x0 in band_start..band_start + 2 {
                    for y0 in 0..h {
                        mean += vt.at3(ch, y0, x0);
                    }
                }
                mean /= (2 * h) as f64;
                assert!((out.at3(ch, 0, band_start) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let q = rand_t(5, &[8, 6, 6]);
        let k = rand_t(6, &[8, 6, 6]);
        for mat in materialize_attention(&q, &k, 4, 2) {
            let t = (mat.len() as f64).sqrt() as usize;
            for row in mat.chunks(t) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "row sum {}", s);
            }
        }
    }

    #[test]
    fn ragged_bands_cover_input_exactly() {
        // 7 wide with stripe 4 → vertical bands of 4 and 3 columns.
        let bs = bands(5, 7, 4, false);
        assert_eq!(bs.len(), 2);
        let total: usize = bs.iter().map(|b| b.len()).sum();
        assert_eq!(total, 35);
    }

    #[test]
    fn grad_attention_all_inputs() {
        let k = rand_t(7, &[4, 4, 4]);
        let v = rand_t(8, &[4, 4, 4]);
        check_grad(
            &[4, 4, 4],
            9,
            move |t, q| {
                let kv = t.constant(k.clone());
                let vv = t.constant(v.clone());
                t.cswin_attention(q, kv, vv, 2, 2)
            },
            1e-5,
        );
        let q = rand_t(10, &[4, 4, 4]);
        let v2 = rand_t(11, &[4, 4, 4]);
        check_grad(
            &[4, 4, 4],
            12,
            move |t, k| {
                let qv = t.constant(q.clone());
                let vv = t.constant(v2.clone());
                t.cswin_attention(qv, k, vv, 2, 2)
            },
            1e-5,
        );
        let q2 = rand_t(13, &[4, 4, 4]);
        let k2 = rand_t(14, &[4, 4, 4]);
        check_grad(
            &[4, 4, 4],
            15,
            move |t, v| {
                let qv = t.constant(q2.clone());
                let kv = t.constant(k2.clone());
                t.cswin_attention(qv, kv, v, 2, 2)
            },
            1e-5,
        );
    }
}

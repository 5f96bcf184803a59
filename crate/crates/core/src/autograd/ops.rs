//! Elementwise and layout operations.

use super::{Graph, Var};
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    Tensor::from_vec(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// `tanh` through a single `exp`; saturates cleanly for large `|u|`.
#[inline]
fn fast_tanh(u: f64) -> f64 {
    let e = (-2.0 * u.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(u)
}

/// Round half away from zero.
pub fn round_half_away(v: f64) -> f64 {
    v.signum() * (v.abs() + 0.5).floor()
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(out, &[a, b], |g, _, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(out, &[a, b], |g, _, _| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(out, &[a, b], |g, p, _| {
            vec![
                Some(zip_map(g, p[1], |g, y| g * y)),
                Some(zip_map(g, p[0], |g, x| g * x)),
            ]
        })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, &[a], move |g, _, _| vec![Some(g.map(|v| v * s))])
    }

    /// `s * x` for a learnable scalar `s` of shape `[1]`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let out = self.value(x).map(|v| v * sv);
        self.push(out, &[x, s], |g, p, _| {
            let s = p[1].item();
            let ds: f64 = g.data().iter().zip(p[0].data()).map(|(g, x)| g * x).sum();
            vec![Some(g.map(|v| v * s)), Some(Tensor::scalar(ds))]
        })
    }

    /// Adds a per-channel bias (last dimension).
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Var {
        let c = self.value(b).len();
        let mut out = self.value(x).clone();
        assert_eq!(out.channels(), c, "bias length must equal channel count");
        let bias = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_mut(c) {
            for (v, bb) in row.iter_mut().zip(&bias) {
                *v += bb;
            }
        }
        self.push(out, &[x, b], move |g, _, _| {
            let mut db = vec![0.0; c];
            for row in g.data().chunks(c) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            vec![Some(g.clone()), Some(Tensor::from_vec(&[c], db))]
        })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| {
            let u = GELU_C * (v + 0.044715 * v * v * v);
            0.5 * v * (1.0 + fast_tanh(u))
        });
        self.push(out, &[x], |g, p, _| {
            vec![Some(zip_map(g, p[0], |g, v| {
                let u = GELU_C * (v + 0.044715 * v * v * v);
                let t = fast_tanh(u);
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
            }))]
        })
    }

    /// Clamp to [0, 1]; the gradient is zero where the clamp is active.
    pub fn clamp01(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.clamp(0.0, 1.0));
        self.push(out, &[x], |g, p, _| {
            vec![Some(zip_map(g, p[0], |g, v| {
                if (0.0..=1.0).contains(&v) {
                    g
                } else {
                    0.0
                }
            }))]
        })
    }

    /// Round half away from zero with a straight-through (identity) gradient.
    pub fn round_ste(&mut self, x: Var) -> Var {
        let out = self.value(x).map(round_half_away);
        self.push(out, &[x], |g, _, _| vec![Some(g.clone())])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), &[x], |g, p, _| {
            vec![Some(Tensor::full(p[0].shape(), g.item()))]
        })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Concatenate NHWC (or any rank) tensors along the last dimension.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let widths: Vec<usize> = xs.iter().map(|&v| self.value(v).channels()).collect();
        let rows = self.value(xs[0]).len() / widths[0];
        let lead = self.value(xs[0]).shape()[..self.value(xs[0]).shape().len() - 1].to_vec();
        for &v in xs {
            let s = self.value(v).shape();
            assert_eq!(&s[..s.len() - 1], &lead[..], "concat: leading dims differ");
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&v, &w) in xs.iter().zip(&widths) {
            let src = self.value(v).data();
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead;
        shape.push(total);
        let widths2 = widths.clone();
        self.push(Tensor::from_vec(&shape, data), xs, move |g, p, _| {
            let mut off = 0;
            let mut out = Vec::with_capacity(widths2.len());
            for (pi, &w) in widths2.iter().enumerate() {
                let mut d = vec![0.0; rows * w];
                for r in 0..rows {
                    d[r * w..(r + 1) * w]
                        .copy_from_slice(&g.data()[r * total + off..r * total + off + w]);
                }
                out.push(Some(Tensor::from_vec(p[pi].shape(), d)));
                off += w;
            }
            out
        })
    }

    /// Channels `[start, start + len)` of the last dimension.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let c = xv.channels();
        assert!(start + len <= c, "slice out of range");
        let rows = xv.len() / c;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.data()[r * c + start..r * c + start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        self.push(Tensor::from_vec(&shape, data), &[x], move |g, p, _| {
            let mut d = Tensor::zeros(p[0].shape());
            let dd = d.data_mut();
            for r in 0..rows {
                dd[r * c + start..r * c + start + len]
                    .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
            }
            vec![Some(d)]
        })
    }

    /// Softmax across `groups` equal channel blocks, independently for every
    /// position and every channel index inside a block.
    pub fn group_softmax(&mut self, x: Var, groups: usize) -> Var {
        let xv = self.value(x);
        let total = xv.channels();
        assert_eq!(total % groups, 0, "channels not divisible by group count");
        let c = total / groups;
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(total) {
            for ch in 0..c {
                let mut m = f64::NEG_INFINITY;
                for k in 0..groups {
                    m = m.max(row[k * c + ch]);
                }
                let mut s = 0.0;
                for k in 0..groups {
                    let e = (row[k * c + ch] - m).exp();
                    row[k * c + ch] = e;
                    s += e;
                }
                for k in 0..groups {
                    row[k * c + ch] /= s;
                }
            }
        }
        self.push(out, &[x], move |g, _, y| {
            let mut d = Tensor::zeros(y.shape());
            let dd = d.data_mut();
            for ((drow, grow), yrow) in dd
                .chunks_mut(total)
                .zip(g.data().chunks(total))
                .zip(y.data().chunks(total))
            {
                for ch in 0..c {
                    let dot: f64 = (0..groups).map(|k| grow[k * c + ch] * yrow[k * c + ch]).sum();
                    for k in 0..groups {
                        let i = k * c + ch;
                        drow[i] = yrow[i] * (grow[i] - dot);
                    }
                }
            }
            vec![Some(d)]
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        self.push(out, &[x], |g, p, _| vec![Some(g.clone().reshape(p[0].shape()))])
    }

    /// Nearest-neighbour 2x upsampling of an NHWC tensor.
    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let (b, h, w, c) = self.value(x).nhwc();
        let (oh, ow) = (2 * h, 2 * w);
        let src = self.value(x).data();
        let mut out = vec![0.0; b * oh * ow * c];
        for n in 0..b {
            for y in 0..oh {
                for xx in 0..ow {
                    let si = ((n * h + y / 2) * w + xx / 2) * c;
                    let di = ((n * oh + y) * ow + xx) * c;
                    out[di..di + c].copy_from_slice(&src[si..si + c]);
                }
            }
        }
        self.push(Tensor::from_vec(&[b, oh, ow, c], out), &[x], move |g, _, _| {
            let mut d = vec![0.0; b * h * w * c];
            let gd = g.data();
            for n in 0..b {
                for y in 0..oh {
                    for xx in 0..ow {
                        let si = ((n * h + y / 2) * w + xx / 2) * c;
                        let di = ((n * oh + y) * ow + xx) * c;
                        for k in 0..c {
                            d[si + k] += gd[di + k];
                        }
                    }
                }
            }
            vec![Some(Tensor::from_vec(&[b, h, w, c], d))]
        })
    }

    /// Bilinear resize of an NHWC tensor (half-pixel centres, edge clamped).
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (b, h, w, c) = self.value(x).nhwc();
        if (h, w) == (oh, ow) {
            return x;
        }
        let ys = bilinear_taps(h, oh);
        let xs = bilinear_taps(w, ow);
        let src = self.value(x).data();
        let mut out = vec![0.0; b * oh * ow * c];
        for n in 0..b {
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let di = ((n * oh + oy) * ow + ox) * c;
                    let w00 = (1.0 - fy) * (1.0 - fx);
                    let w01 = (1.0 - fy) * fx;
                    let w10 = fy * (1.0 - fx);
                    let w11 = fy * fx;
                    let i00 = ((n * h + y0) * w + x0) * c;
                    let i01 = ((n * h + y0) * w + x1) * c;
                    let i10 = ((n * h + y1) * w + x0) * c;
                    let i11 = ((n * h + y1) * w + x1) * c;
                    for k in 0..c {
                        out[di + k] = w00 * src[i00 + k]
                            + w01 * src[i01 + k]
                            + w10 * src[i10 + k]
                            + w11 * src[i11 + k];
                    }
                }
            }
        }
        self.push(Tensor::from_vec(&[b, oh, ow, c], out), &[x], move |g, _, _| {
            let mut d = vec![0.0; b * h * w * c];
            let gd = g.data();
            for n in 0..b {
                for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                        let di = ((n * oh + oy) * ow + ox) * c;
                        let taps = [
                            (((n * h + y0) * w + x0) * c, (1.0 - fy) * (1.0 - fx)),
                            (((n * h + y0) * w + x1) * c, (1.0 - fy) * fx),
                            (((n * h + y1) * w + x0) * c, fy * (1.0 - fx)),
                            (((n * h + y1) * w + x1) * c, fy * fx),
                        ];
                        for (si, wt) in taps {
                            for k in 0..c {
                                d[si + k] += wt * gd[di + k];
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::from_vec(&[b, h, w, c], d))]
        })
    }
}

/// Source index pairs and interpolation fractions for each output coordinate.
pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::check;

    fn ramp(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.13).collect())
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(round_half_away(1.4), 1.0);
        assert_eq!(round_half_away(-1.5), -2.0);
        assert_eq!(round_half_away(0.5), 1.0);
        assert_eq!(round_half_away(-0.5), -1.0);
        assert_eq!(round_half_away(3.0), 3.0);
        assert_eq!(round_half_away(-0.4), 0.0);
    }

    #[test]
    fn group_softmax_sums_to_one() {
        let mut g = Graph::new();
        let x = g.constant(ramp(&[1, 2, 2, 6]));
        let y = g.group_softmax(x, 3);
        for row in g.value(y).data().chunks(6) {
            for c in 0..2 {
                let s: f64 = (0..3).map(|k| row[k * 2 + c]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = ramp(&[1, 3, 2, 4]);
        let w = ramp(&[1, 3, 2, 4]).map(|v| v * 0.7 + 0.1);
        let err = check(&x, 1e-6, |g, v| {
            let y = g.gelu(v);
            let sm = g.group_softmax(y, 2);
            let c = g.constant(w.clone());
            let m = g.mul(sm, c);
            let s = g.slice_channels(m, 1, 2);
            let cat = g.concat_channels(&[s, v]);
            let up = g.resize_bilinear(cat, 5, 3);
            let up2 = g.upsample_nearest2(up);
            let q = g.mul(up2, up2);
            g.sum(q)
        });
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 3, 3, 2], 0.25));
        let y = g.resize_bilinear(x, 7, 5);
        assert!(g.value(y).data().iter().all(|v| (v - 0.25).abs() < 1e-15));
        let z = g.resize_bilinear(x, 3, 3);
        assert_eq!(z, x);
    }
}

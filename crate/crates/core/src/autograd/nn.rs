//! Layers: dense maps, convolutions, windowed attention, spectral filtering.

use rustfft::num_complex::Complex64;

use super::{Graph, Var};
use crate::spectral::{fft2, filter_plane, half_index, half_width};
use crate::tensor::{gemm, Tensor};

/// Token grouping for [`Graph::attention`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionWindow {
    /// Every spatial location attends to every other one.
    Global,
    /// Non-overlapping square windows of this side length. A window larger
    /// than the grid covers the whole grid.
    Size(usize),
}

impl AttentionWindow {
    /// `(window_h, window_w)` for an `h x w` grid; `None` when the window does
    /// not tile the grid.
    pub fn geometry(self, h: usize, w: usize) -> Option<(usize, usize)> {
        match self {
            AttentionWindow::Global => Some((h, w)),
            AttentionWindow::Size(s) => {
                let (wh, ww) = (s.min(h), s.min(w));
                (wh > 0 && h.is_multiple_of(wh) && w.is_multiple_of(ww)).then_some((wh, ww))
            }
        }
    }
}

fn window_tokens(b: usize, h: usize, w: usize, wh: usize, ww: usize) -> Vec<Vec<usize>> {
    let mut windows = Vec::with_capacity(b * (h / wh) * (w / ww));
    for n in 0..b {
        for wy in 0..h / wh {
            for wx in 0..w / ww {
                let mut toks = Vec::with_capacity(wh * ww);
                for y in 0..wh {
                    for x in 0..ww {
                        toks.push((n * h + wy * wh + y) * w + wx * ww + x);
                    }
                }
                windows.push(toks);
            }
        }
    }
    windows
}

fn gather(src: &[f64], toks: &[usize], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(toks.len() * d);
    for &t in toks {
        out.extend_from_slice(&src[t * d..(t + 1) * d]);
    }
    out
}

fn scatter_add(dst: &mut [f64], toks: &[usize], d: usize, vals: &[f64]) {
    for (i, &t) in toks.iter().enumerate() {
        for k in 0..d {
            dst[t * d + k] += vals[i * d + k];
        }
    }
}

fn softmax_rows(s: &mut [f64], n: usize) {
    for row in s.chunks_mut(n) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

/// Row-stochastic attention matrices, one per window, for inspection.
pub fn attention_weights(q: &Tensor, k: &Tensor, window: AttentionWindow) -> Vec<Vec<f64>> {
    let (b, h, w, dk) = q.nhwc();
    assert_eq!(k.shape(), q.shape());
    let (wh, ww) = window.geometry(h, w).expect("window must tile the grid");
    let scale = 1.0 / (dk as f64).sqrt();
    window_tokens(b, h, w, wh, ww)
        .iter()
        .map(|toks| {
            let t = toks.len();
            let qw = gather(q.data(), toks, dk);
            let kw = gather(k.data(), toks, dk);
            let mut s = vec![0.0; t * t];
            gemm(t, dk, t, &qw, false, &kw, true, &mut s, 0.0);
            s.iter_mut().for_each(|v| *v *= scale);
            softmax_rows(&mut s, t);
            s
        })
        .collect()
}

fn im2col(x: &[f64], dims: (usize, usize, usize, usize), k: usize, stride: usize, pad: usize) -> (Vec<f64>, usize, usize) {
    let (b, h, w, c) = dims;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let kk = k * k * c;
    let mut col = vec![0.0; b * oh * ow * kk];
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((n * oh + oy) * ow + ox) * kk;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((n * h + iy as usize) * w + ix as usize) * c;
                        let dst = row + (ky * k + kx) * c;
                        col[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    (col, oh, ow)
}

fn col2im(col: &[f64], dims: (usize, usize, usize, usize), k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Vec<f64> {
    let (b, h, w, c) = dims;
    let kk = k * k * c;
    let mut x = vec![0.0; b * h * w * c];
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((n * oh + oy) * ow + ox) * kk;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((n * h + iy as usize) * w + ix as usize) * c;
                        let src = row + (ky * k + kx) * c;
                        for j in 0..c {
                            x[dst + j] += col[src + j];
                        }
                    }
                }
            }
        }
    }
    x
}

impl Graph {
    /// `x · w (+ b)` over the last dimension; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let cin = xv.channels();
        assert_eq!(wv.shape(), &[cin, wv.shape()[1]][..], "linear: weight must be [{cin}, out]");
        let cout = wv.shape()[1];
        let rows = xv.len() / cin.max(1);
        let mut out = vec![0.0; rows * cout];
        gemm(rows, cin, cout, xv.data(), false, wv.data(), false, &mut out, 0.0);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let (need_x, need_w) = (self.requires_grad(x), self.requires_grad(w));
        let y = self.push(Tensor::from_vec(&shape, out), &[x, w], move |g, p, _| {
            let dx = need_x.then(|| {
                let mut dx = vec![0.0; rows * cin];
                gemm(rows, cout, cin, g.data(), false, p[1].data(), true, &mut dx, 0.0);
                Tensor::from_vec(p[0].shape(), dx)
            });
            let dw = need_w.then(|| {
                let mut dw = vec![0.0; cin * cout];
                gemm(cin, rows, cout, p[0].data(), true, g.data(), false, &mut dw, 0.0);
                Tensor::from_vec(&[cin, cout], dw)
            });
            vec![dx, dw]
        });
        match b {
            Some(b) => self.add_channel_bias(y, b),
            None => y,
        }
    }

    /// 2-D convolution, NHWC input, weight `[k, k, in, out]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let dims = self.value(x).nhwc();
        let ws = self.value(w).shape().to_vec();
        assert!(ws.len() == 4 && ws[0] == ws[1] && ws[2] == dims.3, "conv2d: weight {ws:?} vs input {dims:?}");
        let (k, cout) = (ws[0], ws[3]);
        let kk = k * k * dims.3;
        let (col, oh, ow) = im2col(self.value(x).data(), dims, k, stride, pad);
        let rows = dims.0 * oh * ow;
        let mut out = vec![0.0; rows * cout];
        gemm(rows, kk, cout, &col, false, self.value(w).data(), false, &mut out, 0.0);
        drop(col);
        let (need_x, need_w) = (self.requires_grad(x), self.requires_grad(w));
        let y = self.push(Tensor::from_vec(&[dims.0, oh, ow, cout], out), &[x, w], move |g, p, _| {
            let dw = need_w.then(|| {
                let (col, _, _) = im2col(p[0].data(), dims, k, stride, pad);
                let mut dw = vec![0.0; kk * cout];
                gemm(kk, rows, cout, &col, true, g.data(), false, &mut dw, 0.0);
                Tensor::from_vec(p[1].shape(), dw)
            });
            let dx = need_x.then(|| {
                let mut dcol = vec![0.0; rows * kk];
                gemm(rows, cout, kk, g.data(), false, p[1].data(), true, &mut dcol, 0.0);
                Tensor::from_vec(p[0].shape(), col2im(&dcol, dims, k, stride, pad, oh, ow))
            });
            vec![dx, dw]
        });
        match b {
            Some(b) => self.add_channel_bias(y, b),
            None => y,
        }
    }

    /// Depthwise 3x3 convolution, stride 1, zero padding 1; weight `[3, 3, c]`.
    pub fn dwconv3x3(&mut self, x: Var, w: Var) -> Var {
        let (b, h, wd, c) = self.value(x).nhwc();
        assert_eq!(self.value(w).shape(), &[3, 3, c], "dwconv weight must be [3, 3, {c}]");
        let out = dw_forward(self.value(x).data(), self.value(w).data(), (b, h, wd, c));
        self.push(Tensor::from_vec(&[b, h, wd, c], out), &[x, w], move |g, p, _| {
            let (xd, wdat, gd) = (p[0].data(), p[1].data(), g.data());
            let mut dx = vec![0.0; xd.len()];
            let mut dw = vec![0.0; 9 * c];
            for n in 0..b {
                for y in 0..h {
                    for xx in 0..wd {
                        let o = ((n * h + y) * wd + xx) * c;
                        for ky in 0..3 {
                            let iy = y as isize + ky as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = xx as isize + kx as isize - 1;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let i = ((n * h + iy as usize) * wd + ix as usize) * c;
                                let wi = (ky * 3 + kx) * c;
                                for ch in 0..c {
                                    dx[i + ch] += gd[o + ch] * wdat[wi + ch];
                                    dw[wi + ch] += gd[o + ch] * xd[i + ch];
                                }
                            }
                        }
                    }
                }
            }
            vec![
                Some(Tensor::from_vec(p[0].shape(), dx)),
                Some(Tensor::from_vec(&[3, 3, c], dw)),
            ]
        })
    }

    /// Scaled dot-product attention `softmax(Q Kᵀ / sqrt(d)) V` where tokens
    /// are spatial positions, grouped into windows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, window: AttentionWindow) -> Var {
        let (b, h, w, dk) = self.value(q).nhwc();
        assert_eq!(self.value(k).shape(), self.value(q).shape(), "attention: q/k shapes differ");
        let (vb, vh, vw, dv) = self.value(v).nhwc();
        assert_eq!((vb, vh, vw), (b, h, w), "attention: value grid differs from query grid");
        let (wh, ww) = window
            .geometry(h, w)
            .unwrap_or_else(|| panic!("attention window {window:?} does not tile {h}x{w}"));
        let windows = window_tokens(b, h, w, wh, ww);
        let scale = 1.0 / (dk as f64).sqrt();
        let t = wh * ww;
        let mut out = vec![0.0; b * h * w * dv];
        let mut probs = Vec::with_capacity(windows.len());
        {
            let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
            for toks in &windows {
                let qw = gather(qd, toks, dk);
                let kw = gather(kd, toks, dk);
                let vw_ = gather(vd, toks, dv);
                let mut s = vec![0.0; t * t];
                gemm(t, dk, t, &qw, false, &kw, true, &mut s, 0.0);
                s.iter_mut().for_each(|x| *x *= scale);
                softmax_rows(&mut s, t);
                let mut o = vec![0.0; t * dv];
                gemm(t, t, dv, &s, false, &vw_, false, &mut o, 0.0);
                for (i, &tok) in toks.iter().enumerate() {
                    out[tok * dv..(tok + 1) * dv].copy_from_slice(&o[i * dv..(i + 1) * dv]);
                }
                probs.push(s);
            }
        }
        self.push(Tensor::from_vec(&[b, h, w, dv], out), &[q, k, v], move |g, p, _| {
            let (qd, kd, vd, gd) = (p[0].data(), p[1].data(), p[2].data(), g.data());
            let mut dq = vec![0.0; qd.len()];
            let mut dk_ = vec![0.0; kd.len()];
            let mut dvv = vec![0.0; vd.len()];
            for (toks, pm) in windows.iter().zip(&probs) {
                let qw = gather(qd, toks, dk);
                let kw = gather(kd, toks, dk);
                let vw_ = gather(vd, toks, dv);
                let gw = gather(gd, toks, dv);
                let mut dvw = vec![0.0; t * dv];
                gemm(t, t, dv, pm, true, &gw, false, &mut dvw, 0.0);
                let mut dp = vec![0.0; t * t];
                gemm(t, dv, t, &gw, false, &vw_, true, &mut dp, 0.0);
                for r in 0..t {
                    let row = &mut dp[r * t..(r + 1) * t];
                    let prow = &pm[r * t..(r + 1) * t];
                    let dot: f64 = row.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for (d, &pp) in row.iter_mut().zip(prow) {
                        *d = pp * (*d - dot) * scale;
                    }
                }
                let mut dqw = vec![0.0; t * dk];
                gemm(t, t, dk, &dp, false, &kw, false, &mut dqw, 0.0);
                let mut dkw = vec![0.0; t * dk];
                gemm(t, t, dk, &dp, true, &qw, false, &mut dkw, 0.0);
                scatter_add(&mut dq, toks, dk, &dqw);
                scatter_add(&mut dk_, toks, dk, &dkw);
                scatter_add(&mut dvv, toks, dv, &dvw);
            }
            vec![
                Some(Tensor::from_vec(p[0].shape(), dq)),
                Some(Tensor::from_vec(p[1].shape(), dk_)),
                Some(Tensor::from_vec(p[2].shape(), dvv)),
            ]
        })
    }

    /// Frequency-domain filtering of every channel plane:
    /// `Re(IFFT2(M ⊙ FFT2(x)))` with `M` given over the half spectrum
    /// `[h, w/2 + 1, c]` and expanded by conjugate mirroring.
    pub fn spectral_filter(&mut self, x: Var, mask: Var) -> Var {
        let (b, h, w, c) = self.value(x).nhwc();
        let hw = half_width(w);
        assert_eq!(self.value(mask).shape(), &[h, hw, c], "spectral mask shape mismatch");
        let out = spectral_apply(self.value(x).data(), self.value(mask).data(), (b, h, w, c));
        self.push(Tensor::from_vec(&[b, h, w, c], out), &[x, mask], move |g, p, _| {
            // The operator is self-adjoint in x.
            let dx = spectral_apply(g.data(), p[1].data(), (b, h, w, c));
            let mut dm = vec![0.0; h * hw * c];
            let inv_n = 1.0 / (h * w) as f64;
            let mut xb = vec![Complex64::new(0.0, 0.0); h * w];
            let mut gb = vec![Complex64::new(0.0, 0.0); h * w];
            for n in 0..b {
                for ch in 0..c {
                    for i in 0..h * w {
                        xb[i] = Complex64::new(p[0].data()[(n * h * w + i) * c + ch], 0.0);
                        gb[i] = Complex64::new(g.data()[(n * h * w + i) * c + ch], 0.0);
                    }
                    fft2(&mut xb, h, w, false);
                    fft2(&mut gb, h, w, false);
                    for u in 0..h {
                        for v in 0..w {
                            let i = u * w + v;
                            let contrib = (xb[i] * gb[i].conj()).re * inv_n;
                            let (hu, hv) = half_index(u, v, h, w);
                            dm[(hu * hw + hv) * c + ch] += contrib;
                        }
                    }
                }
            }
            vec![
                Some(Tensor::from_vec(p[0].shape(), dx)),
                Some(Tensor::from_vec(p[1].shape(), dm)),
            ]
        })
    }
}

fn dw_forward(x: &[f64], wt: &[f64], dims: (usize, usize, usize, usize)) -> Vec<f64> {
    let (b, h, w, c) = dims;
    let mut out = vec![0.0; x.len()];
    for n in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let o = ((n * h + y) * w + xx) * c;
                for ky in 0..3 {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = xx as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = ((n * h + iy as usize) * w + ix as usize) * c;
                        let wi = (ky * 3 + kx) * c;
                        for ch in 0..c {
                            out[o + ch] += x[i + ch] * wt[wi + ch];
                        }
                    }
                }
            }
        }
    }
    out
}

fn spectral_apply(x: &[f64], mask: &[f64], dims: (usize, usize, usize, usize)) -> Vec<f64> {
    let (b, h, w, c) = dims;
    let hw = half_width(w);
    let mut out = vec![0.0; x.len()];
    let mut plane = vec![0.0; h * w];
    for n in 0..b {
        for ch in 0..c {
            for i in 0..h * w {
                plane[i] = x[(n * h * w + i) * c + ch];
            }
            let filtered = filter_plane(&plane, h, w, |u, v| mask[(u * hw + v) * c + ch]);
            for (i, v) in filtered.into_iter().enumerate() {
                out[(n * h * w + i) * c + ch] = v;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::check;

    fn pseudo(shape: &[usize], seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_vec(
            shape,
            (0..n)
                .map(|_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
                })
                .collect(),
        )
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = pseudo(&[1, 5, 4, 2], 1);
        let w = pseudo(&[3, 3, 2, 3], 2);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.conv2d(xv, wv, None, 2, 1);
        let yv = g.value(y).clone();
        assert_eq!(yv.shape(), &[1, 3, 2, 3]);
        for oy in 0..3 {
            for ox in 0..2 {
                for co in 0..3 {
                    let mut s = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if !(0..5).contains(&iy) || !(0..4).contains(&ix) {
                                continue;
                            }
                            for ci in 0..2 {
                                s += x.data()[((iy as usize) * 4 + ix as usize) * 2 + ci]
                                    * w.data()[((ky * 3 + kx) * 2 + ci) * 3 + co];
                            }
                        }
                    }
                    assert!((yv.data()[(oy * 2 + ox) * 3 + co] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_and_linear_gradients() {
        let x = pseudo(&[2, 4, 4, 3], 3);
        let w = pseudo(&[3, 3, 3, 2], 4);
        let lw = pseudo(&[2, 5], 5);
        let err = check(&x, 1e-6, |g, v| {
            let wv = g.constant(w.clone());
            let y = g.conv2d(v, wv, None, 1, 1);
            let l = g.constant(lw.clone());
            let z = g.linear(y, l, None);
            let z2 = g.mul(z, z);
            g.sum(z2)
        });
        assert!(err < 1e-6, "input grad rel err {err}");
        let err_w = check(&w, 1e-6, |g, wv| {
            let xv = g.constant(x.clone());
            let y = g.conv2d(xv, wv, None, 2, 1);
            let y2 = g.mul(y, y);
            g.sum(y2)
        });
        assert!(err_w < 1e-6, "weight grad rel err {err_w}");
    }

    #[test]
    fn dwconv_gradients() {
        let x = pseudo(&[1, 4, 5, 3], 6);
        let w = pseudo(&[3, 3, 3], 7);
        let e1 = check(&x, 1e-6, |g, v| {
            let wv = g.constant(w.clone());
            let y = g.dwconv3x3(v, wv);
            let y2 = g.mul(y, y);
            g.sum(y2)
        });
        let e2 = check(&w, 1e-6, |g, wv| {
            let xv = g.constant(x.clone());
            let y = g.dwconv3x3(xv, wv);
            let y2 = g.mul(y, y);
            g.sum(y2)
        });
        assert!(e1 < 1e-6 && e2 < 1e-6, "{e1} {e2}");
    }

    #[test]
    fn attention_gradients_windowed_and_global() {
        let q = pseudo(&[1, 4, 4, 3], 8);
        let k = pseudo(&[1, 4, 4, 3], 9);
        let v = pseudo(&[1, 4, 4, 2], 10);
        let wsum = pseudo(&[1, 4, 4, 2], 11);
        for window in [AttentionWindow::Size(2), AttentionWindow::Global] {
            for which in 0..3 {
                let base = [&q, &k, &v][which].clone();
                let err = check(&base, 1e-6, |g, x| {
                    let mut parts = [None, None, None];
                    parts[which] = Some(x);
                    let qv = parts[0].unwrap_or_else(|| g.constant(q.clone()));
                    let kv = parts[1].unwrap_or_else(|| g.constant(k.clone()));
                    let vv = parts[2].unwrap_or_else(|| g.constant(v.clone()));
                    let o = g.attention(qv, kv, vv, window);
                    let c = g.constant(wsum.clone());
                    let m = g.mul(o, c);
                    g.sum(m)
                });
                assert!(err < 1e-6, "{window:?} input {which}: {err}");
            }
        }
    }

    #[test]
    fn spectral_gradients() {
        let x = pseudo(&[1, 4, 6, 2], 12);
        let m = pseudo(&[4, 4, 2], 13);
        let wsum = pseudo(&[1, 4, 6, 2], 14);
        let ex = check(&x, 1e-6, |g, v| {
            let mv = g.constant(m.clone());
            let y = g.spectral_filter(v, mv);
            let c = g.constant(wsum.clone());
            let p = g.mul(y, c);
            g.sum(p)
        });
        let em = check(&m, 1e-6, |g, mv| {
            let xv = g.constant(x.clone());
            let y = g.spectral_filter(xv, mv);
            let c = g.constant(wsum.clone());
            let p = g.mul(y, c);
            g.sum(p)
        });
        assert!(ex < 1e-6 && em < 1e-6, "{ex} {em}");
    }

    #[test]
    fn window_geometry() {
        assert_eq!(AttentionWindow::Size(4).geometry(8, 8), Some((4, 4)));
        assert_eq!(AttentionWindow::Size(4).geometry(2, 2), Some((2, 2)));
        assert_eq!(AttentionWindow::Size(4).geometry(6, 8), None);
        assert_eq!(AttentionWindow::Global.geometry(3, 5), Some((3, 5)));
    }
}

use rand::Rng;

use crate::autograd::{attention_weights, AttentionWindow, Session, Var};
use crate::error::{Error, Result};
use crate::params::{variance_scaling, ParameterSet};
use crate::tensor::{FeatureMap, Tensor};

/// Cross-scale attention for one task: queries and keys come from the two
/// coarser features, values from the finest one. The output projection is
/// zero-initialized so the block starts as the identity on the finest scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Msf {
    pub prefix: String,
    /// Channels of `F1`, `F2`, `F3`.
    pub channels: [usize; 3],
    pub dim: usize,
    pub window: AttentionWindow,
}

impl Msf {
    pub fn new(prefix: impl Into<String>, channels: &[usize], dim: usize, window: AttentionWindow) -> Result<Self> {
        if channels.len() < 3 {
            return Err(Error::config("msf.scales", format!("needs 3 scales, got {}", channels.len())));
        }
        if dim == 0 {
            return Err(Error::config("msf.dim", "must be > 0"));
        }
        Ok(Self {
            prefix: prefix.into(),
            channels: [channels[0], channels[1], channels[2]],
            dim,
            window,
        })
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn param_count(&self) -> usize {
        let [c1, c2, c3] = self.channels;
        let d = self.dim;
        (c1 + c2) * 2 * d + 2 * d + c3 * d + d + d * c3 + c3
    }

    pub fn init(&self, p: &mut ParameterSet, rng: &mut impl Rng) {
        let [c1, c2, c3] = self.channels;
        let d = self.dim;
        p.insert(self.name("qk.w"), variance_scaling(rng, &[c1 + c2, 2 * d], c1 + c2));
        p.insert(self.name("qk.b"), Tensor::zeros(&[2 * d]));
        p.insert(self.name("v.w"), variance_scaling(rng, &[c3, d], c3));
        p.insert(self.name("v.b"), Tensor::zeros(&[d]));
        p.insert(self.name("out.w"), Tensor::zeros(&[d, c3]));
        p.insert(self.name("out.b"), Tensor::zeros(&[c3]));
    }

    fn window_for(&self, h: usize, w: usize) -> AttentionWindow {
        if self.window.geometry(h, w).is_some() {
            self.window
        } else {
            AttentionWindow::Global
        }
    }

    /// `(Q, K, V)` on the grid of `F3`.
    pub fn project(&self, s: &mut Session, f1: Var, f2: Var, f3: Var) -> (Var, Var, Var) {
        let (_, h, w, _) = s.value(f3).nhwc();
        let a = s.resize_bilinear(f1, h, w);
        let b = s.resize_bilinear(f2, h, w);
        let cat = s.concat_channels(&[a, b]);
        let (wqk, bqk) = (s.p(&self.name("qk.w")), s.p(&self.name("qk.b")));
        let qk = s.linear(cat, wqk, Some(bqk));
        let q = s.slice_channels(qk, 0, self.dim);
        let k = s.slice_channels(qk, self.dim, self.dim);
        let (wv, bv) = (s.p(&self.name("v.w")), s.p(&self.name("v.b")));
        let v = s.linear(f3, wv, Some(bv));
        (q, k, v)
    }

    /// `out_proj(attention) ` before the residual.
    pub fn fused(&self, s: &mut Session, f1: Var, f2: Var, f3: Var) -> Var {
        let (q, k, v) = self.project(s, f1, f2, f3);
        let (_, h, w, _) = s.value(f3).nhwc();
        let a = s.attention(q, k, v, self.window_for(h, w));
        let (wo, bo) = (s.p(&self.name("out.w")), s.p(&self.name("out.b")));
        s.linear(a, wo, Some(bo))
    }

    pub fn forward(&self, s: &mut Session, f1: Var, f2: Var, f3: Var) -> Var {
        let o = self.fused(s, f1, f2, f3);
        s.add(f3, o)
    }

    /// Fuses three feature maps.
    pub fn apply(&self, params: &ParameterSet, f: &[FeatureMap]) -> Result<FeatureMap> {
        self.check(f)?;
        let mut s = Session::new(&[params], false);
        let v: Vec<Var> = f.iter().map(|x| s.constant(x.to_batch())).collect();
        let out = self.forward(&mut s, v[0], v[1], v[2]);
        Ok(super::unbatch(s.value(out), f[2].scale_index))
    }

    /// Attention matrices (one per window) for inspection.
    pub fn attention_rows(&self, params: &ParameterSet, f: &[FeatureMap]) -> Result<Vec<Vec<f64>>> {
        self.check(f)?;
        let mut s = Session::new(&[params], false);
        let v: Vec<Var> = f.iter().map(|x| s.constant(x.to_batch())).collect();
        let (q, k, _) = self.project(&mut s, v[0], v[1], v[2]);
        let (h, w) = (f[2].height(), f[2].width());
        Ok(attention_weights(s.value(q), s.value(k), self.window_for(h, w)))
    }

    fn check(&self, f: &[FeatureMap]) -> Result<()> {
        if f.len() != 3 {
            return Err(Error::config("msf.scales", format!("needs 3 scales, got {}", f.len())));
        }
        for (i, (x, &c)) in f.iter().zip(&self.channels).enumerate() {
            if x.channels() != c {
                return Err(Error::Shape(format!("{}: F{} has {} channels, expected {c}", self.prefix, i + 1, x.channels())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck;
    use crate::params::uniform;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(grid: usize, seed: u64) -> (Msf, ParameterSet, Vec<FeatureMap>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Msf::new("msf", &[5, 4, 3], 4, AttentionWindow::Global).unwrap();
        let mut p = ParameterSet::new();
        m.init(&mut p, &mut rng);
        let f = vec![
            FeatureMap::new(uniform(&mut rng, &[(grid / 4).max(1), (grid / 4).max(1), 5], 1.0), 3).unwrap(),
            FeatureMap::new(uniform(&mut rng, &[(grid / 2).max(1), (grid / 2).max(1), 4], 1.0), 2).unwrap(),
            FeatureMap::new(uniform(&mut rng, &[grid, grid, 3], 1.0), 1).unwrap(),
        ];
        (m, p, f)
    }

    #[test]
    fn zero_out_proj_is_identity() {
        let (m, p, f) = setup(8, 0);
        assert_eq!(m.apply(&p, &f).unwrap().data, f[2].data);
    }

    #[test]
    fn single_token_passes_values() {
        let (m, p, f) = setup(1, 1);
        let mut p = p;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        p.insert("msf.out.w", uniform(&mut rng, &[4, 3], 1.0));
        let mut s = Session::new(&[&p], false);
        let v: Vec<Var> = f.iter().map(|x| s.constant(x.to_batch())).collect();
        let fused = m.fused(&mut s, v[0], v[1], v[2]);
        let got = s.value(fused).clone();
        let vw = p.get("msf.v.w").unwrap();
        let ow = p.get("msf.out.w").unwrap();
        let x = f[2].data.data();
        for o in 0..3 {
            let want: f64 = (0..4)
                .map(|d| (0..3).map(|i| x[i] * vw.data()[i * 4 + d]).sum::<f64>() * ow.data()[d * 3 + o])
                .sum();
            assert!((got.data()[o] - want).abs() < 1e-12);
        }
        assert_eq!(m.attention_rows(&p, &f).unwrap(), vec![vec![1.0]]);
    }

    #[test]
    fn constant_query_gives_uniform_attention() {
        let (m, mut p, f) = setup(4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        p.insert("msf.qk.w", Tensor::zeros(&[9, 8]));
        p.insert("msf.out.w", uniform(&mut rng, &[4, 3], 1.0));
        for row in &m.attention_rows(&p, &f).unwrap()[0].chunks(16).collect::<Vec<_>>() {
            assert!(row.iter().all(|v| (v - 1.0 / 16.0).abs() < 1e-12));
        }
        let mut s = Session::new(&[&p], false);
        let v: Vec<Var> = f.iter().map(|x| s.constant(x.to_batch())).collect();
        let fused = m.fused(&mut s, v[0], v[1], v[2]);
        let out = s.value(fused).data().to_vec();
        for tok in out.chunks(3) {
            for (a, b) in tok.iter().zip(&out[..3]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rows_are_stochastic_and_scale_keeps_argmax() {
        let (m, p, f) = setup(8, 5);
        let rows = &m.attention_rows(&p, &f).unwrap()[0];
        let t = 64;
        for row in rows.chunks(t) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        // Doubling the query projection sharpens rows but keeps each argmax.
        let mut p2 = p.clone();
        let qk = p2.get_mut("msf.qk.w").unwrap();
        for (i, v) in qk.data_mut().iter_mut().enumerate() {
            if i % 8 < 4 {
                *v *= 2.0;
            }
        }
        let rows2 = &m.attention_rows(&p2, &f).unwrap()[0];
        let argmax = |r: &[f64]| r.iter().enumerate().fold(0, |b, (i, v)| if *v > r[b] { i } else { b });
        for (r1, r2) in rows.chunks(t).zip(rows2.chunks(t)) {
            assert_eq!(argmax(r1), argmax(r2));
        }
    }

    #[test]
    fn fewer_than_three_scales_rejected() {
        assert!(matches!(
            Msf::new("m", &[4, 4], 4, AttentionWindow::Global),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        let (_, mut p, f) = setup(4, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        p.insert("msf.out.w", uniform(&mut rng, &[4, 3], 1.0));
        let fixed = p.clone();
        let worst = gradcheck::check(p.get("msf.qk.w").unwrap(), 1e-6, |g, w| {
            let mut s = Session::new(&[&fixed], false);
            std::mem::swap(&mut *s, g);
            let v: Vec<Var> = f.iter().map(|x| s.constant(x.to_batch())).collect();
            let (a, b) = (s.resize_bilinear(v[0], 4, 4), s.resize_bilinear(v[1], 4, 4));
            let cat = s.concat_channels(&[a, b]);
            let qk = s.linear(cat, w, None);
            let q = s.slice_channels(qk, 0, 4);
            let k = s.slice_channels(qk, 4, 4);
            let (wv, wo) = (s.p("msf.v.w"), s.p("msf.out.w"));
            let vv = s.linear(v[2], wv, None);
            let att = s.attention(q, k, vv, AttentionWindow::Global);
            let o = s.linear(att, wo, None);
            let y = s.add(v[2], o);
            let sq = s.mul(y, y);
            let out = s.sum(sq);
            std::mem::swap(&mut *s, g);
            out
        });
        assert!(worst < 1e-4, "{worst}");
    }
}

use rand::Rng;

use crate::autograd::{Session, Var};
use crate::error::{Error, Result};
use crate::params::{variance_scaling, ParameterSet};
use crate::tensor::{FeatureMap, Tensor};

/// Task aggregation: a per-position MLP over the concatenated task features
/// produces logits that are softmax-normalized across tasks for every
/// channel; the weighted task features summed over tasks form the shared
/// feature, which is added back to every task feature.
#[derive(Clone, Debug, PartialEq)]
pub struct Tam {
    pub prefix: String,
    pub tasks: usize,
    pub channels: usize,
    pub hidden: usize,
}

pub struct TamOutput {
    /// `None` when the module is bypassed.
    pub shared: Option<Var>,
    pub refined: Vec<Var>,
    pub mask: Option<Var>,
}

impl Tam {
    /// Hidden width `N·C/2`, at least `min_hidden`.
    pub fn new(prefix: impl Into<String>, tasks: usize, channels: usize, min_hidden: usize) -> Self {
        Self {
            prefix: prefix.into(),
            tasks,
            channels,
            hidden: (tasks * channels / 2).max(min_hidden),
        }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn param_count(&self) -> usize {
        let nc = self.tasks * self.channels;
        2 * nc * self.hidden + self.hidden + nc
    }

    pub fn init(&self, p: &mut ParameterSet, rng: &mut impl Rng) {
        let nc = self.tasks * self.channels;
        p.insert(self.name("fc1.w"), variance_scaling(rng, &[nc, self.hidden], nc));
        p.insert(self.name("fc1.b"), Tensor::zeros(&[self.hidden]));
        p.insert(self.name("fc2.w"), variance_scaling(rng, &[self.hidden, nc], self.hidden));
        p.insert(self.name("fc2.b"), Tensor::zeros(&[nc]));
    }

    /// Softmax mask over the task axis, shape `[.., N·C]`.
    pub fn mask(&self, s: &mut Session, cat: Var) -> Var {
        let (w1, b1) = (s.p(&self.name("fc1.w")), s.p(&self.name("fc1.b")));
        let (w2, b2) = (s.p(&self.name("fc2.w")), s.p(&self.name("fc2.b")));
        let h = s.linear(cat, w1, Some(b1));
        let h = s.gelu(h);
        let logits = s.linear(h, w2, Some(b2));
        s.group_softmax(logits, self.tasks)
    }

    pub fn forward(&self, s: &mut Session, feats: &[Var], bypass: bool) -> TamOutput {
        assert_eq!(feats.len(), self.tasks, "{}: expected {} task features", self.prefix, self.tasks);
        if bypass {
            return TamOutput {
                shared: None,
                refined: feats.to_vec(),
                mask: None,
            };
        }
        let c = self.channels;
        let cat = s.concat_channels(feats);
        let mask = self.mask(s, cat);
        let weighted = s.mul(cat, mask);
        let mut shared = s.slice_channels(weighted, 0, c);
        for k in 1..self.tasks {
            let part = s.slice_channels(weighted, k * c, c);
            shared = s.add(shared, part);
        }
        let refined = feats.iter().map(|&f| s.add(f, shared)).collect();
        TamOutput {
            shared: Some(shared),
            refined,
            mask: Some(mask),
        }
    }

    /// Runs the module on per-task feature maps; returns `(shared, refined)`.
    pub fn apply(&self, params: &ParameterSet, feats: &[FeatureMap]) -> Result<(FeatureMap, Vec<FeatureMap>)> {
        if feats.len() != self.tasks {
            return Err(Error::Shape(format!("{}: got {} task features, expected {}", self.prefix, feats.len(), self.tasks)));
        }
        let want = (feats[0].height(), feats[0].width(), self.channels);
        for (k, f) in feats.iter().enumerate() {
            if (f.height(), f.width(), f.channels()) != want {
                return Err(Error::Shape(format!(
                    "{}: task {k} feature is {}x{}x{}, expected {}x{}x{}",
                    self.prefix,
                    f.height(),
                    f.width(),
                    f.channels(),
                    want.0,
                    want.1,
                    want.2
                )));
            }
        }
        let mut s = Session::new(&[params], false);
        let vars: Vec<Var> = feats.iter().map(|f| s.constant(f.to_batch())).collect();
        let out = self.forward(&mut s, &vars, false);
        let si = feats[0].scale_index;
        let shared = super::unbatch(s.value(out.shared.unwrap()), si);
        let refined = out.refined.iter().map(|&r| super::unbatch(s.value(r), si)).collect();
        Ok((shared, refined))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::uniform;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn feats(n: usize, c: usize, seed: u64) -> Vec<FeatureMap> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| FeatureMap::new(uniform(&mut rng, &[4, 4, c], 1.0), 2).unwrap())
            .collect()
    }

    fn build(n: usize, c: usize) -> (Tam, ParameterSet) {
        let t = Tam::new("tam", n, c, 8);
        let mut p = ParameterSet::new();
        t.init(&mut p, &mut ChaCha8Rng::seed_from_u64(3));
        (t, p)
    }

    #[test]
    fn single_task_is_doubling() {
        let (t, p) = build(1, 3);
        let f = feats(1, 3, 0);
        let (shared, refined) = t.apply(&p, &f).unwrap();
        assert_eq!(shared.data, f[0].data);
        assert_eq!(refined[0].data, f[0].data.map(|v| 2.0 * v));
    }

    #[test]
    fn equal_logits_average() {
        let (t, mut p) = build(2, 3);
        p.insert("tam.fc2.w", Tensor::zeros(&[t.hidden, 6]));
        let f = feats(2, 3, 1);
        let (shared, _) = t.apply(&p, &f).unwrap();
        let mut avg = f[0].data.clone();
        avg.add_assign(&f[1].data);
        avg.scale_inplace(0.5);
        assert!(shared.data.max_abs_diff(&avg) < 1e-12);
    }

    #[test]
    fn saturated_logits_select_first_task() {
        let (t, mut p) = build(2, 3);
        p.insert("tam.fc2.w", Tensor::zeros(&[t.hidden, 6]));
        p.insert("tam.fc2.b", Tensor::from_vec(&[6], vec![20.0, 20.0, 20.0, -20.0, -20.0, -20.0]));
        let f = feats(2, 3, 2);
        let (shared, _) = t.apply(&p, &f).unwrap();
        assert!(shared.data.max_abs_diff(&f[0].data) < 1e-6);
    }

    #[test]
    fn mask_groups_sum_to_one() {
        let (t, p) = build(3, 4);
        let f = feats(3, 4, 4);
        let mut s = Session::new(&[&p], false);
        let vars: Vec<Var> = f.iter().map(|x| s.constant(x.to_batch())).collect();
        let out = t.forward(&mut s, &vars, false);
        for row in s.value(out.mask.unwrap()).data().chunks(12) {
            for ch in 0..4 {
                let total: f64 = (0..3).map(|k| row[k * 4 + ch]).sum();
                assert!((total - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mismatched_task_shapes_name_the_task() {
        let (t, p) = build(2, 3);
        let mut f = feats(2, 3, 5);
        f[1] = FeatureMap::new(Tensor::zeros(&[2, 2, 3]), 2).unwrap();
        match t.apply(&p, &f) {
            Err(Error::Shape(m)) => assert!(m.contains("task 1"), "{m}"),
            other => panic!("{:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn permutation_equivariance_with_block_symmetric_phi() {
        // Block-circulant weights: swapping the task blocks of input and
        // output leaves the map unchanged.
        let c = 2;
        let t = Tam::new("tam", 2, c, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (a1, b1) = (uniform(&mut rng, &[c, 2], 1.0), uniform(&mut rng, &[c, 2], 1.0));
        let mut w1 = vec![0.0; 2 * c * 4];
        for i in 0..c {
            for j in 0..2 {
                w1[i * 4 + j] = a1.data()[i * 2 + j];
                w1[i * 4 + 2 + j] = b1.data()[i * 2 + j];
                w1[(c + i) * 4 + j] = b1.data()[i * 2 + j];
                w1[(c + i) * 4 + 2 + j] = a1.data()[i * 2 + j];
            }
        }
        let (a2, b2) = (uniform(&mut rng, &[2, c], 1.0), uniform(&mut rng, &[2, c], 1.0));
        let mut w2 = vec![0.0; 4 * 2 * c];
        for i in 0..2 {
            for j in 0..c {
                w2[i * 2 * c + j] = a2.data()[i * c + j];
                w2[i * 2 * c + c + j] = b2.data()[i * c + j];
                w2[(2 + i) * 2 * c + j] = b2.data()[i * c + j];
                w2[(2 + i) * 2 * c + c + j] = a2.data()[i * c + j];
            }
        }
        let mut p = ParameterSet::new();
        p.insert("tam.fc1.w", Tensor::from_vec(&[2 * c, 4], w1));
        p.insert("tam.fc1.b", Tensor::from_vec(&[4], vec![0.1, -0.2, 0.1, -0.2]));
        p.insert("tam.fc2.w", Tensor::from_vec(&[4, 2 * c], w2));
        p.insert("tam.fc2.b", Tensor::from_vec(&[2 * c], vec![0.3, 0.0, 0.3, 0.0]));
        let f = feats(2, c, 6);
        let swapped = vec![f[1].clone(), f[0].clone()];
        let (s1, r1) = t.apply(&p, &f).unwrap();
        let (s2, r2) = t.apply(&p, &swapped).unwrap();
        assert!(s1.data.max_abs_diff(&s2.data) < 1e-12);
        assert!(r1[0].data.max_abs_diff(&r2[1].data) < 1e-12);
        assert!(r1[1].data.max_abs_diff(&r2[0].data) < 1e-12);
    }

    #[test]
    fn bypass_passes_features_through() {
        let (t, p) = build(2, 3);
        let f = feats(2, 3, 7);
        let mut s = Session::new(&[&p], false);
        let vars: Vec<Var> = f.iter().map(|x| s.constant(x.to_batch())).collect();
        let out = t.forward(&mut s, &vars, true);
        assert!(out.shared.is_none());
        assert_eq!(out.refined, vars);
    }

    #[test]
    fn parameter_count() {
        let (t, p) = build(4, 16);
        assert_eq!(t.hidden, 32);
        assert_eq!(t.param_count(), p.count());
    }
}

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::tensor::{FeatureMap, Tensor};

pub use crate::autograd::round_half_away;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Additive uniform noise on `[-0.5, 0.5)`.
    Train,
    /// Rounding half away from zero.
    Eval,
}

pub fn quantize(y: &FeatureMap, mode: QuantMode, rng: &mut impl Rng) -> FeatureMap {
    let data = match mode {
        QuantMode::Eval => y.data.map(round_half_away),
        QuantMode::Train => {
            let mut t = y.data.clone();
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5));
            t
        }
    };
    FeatureMap::unchecked(data, y.scale_index)
}

impl Graph {
    /// Differentiable quantizer: noise is a constant offset in training mode,
    /// rounding uses a straight-through gradient.
    pub fn quantize(&mut self, y: Var, mode: QuantMode, rng: &mut impl Rng) -> Var {
        match mode {
            QuantMode::Eval => self.round_ste(y),
            QuantMode::Train => {
                let shape = self.value(y).shape().to_vec();
                let n = self.value(y).len();
                let noise = Tensor::from_vec(&shape, (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect());
                let u = self.constant(noise);
                self.add(y, u)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fm(v: &[f64]) -> FeatureMap {
        FeatureMap::new(Tensor::from_vec(&[1, v.len(), 1], v.to_vec()), 0).unwrap()
    }

    #[test]
    fn eval_rounds_half_away() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = quantize(&fm(&[1.4, -1.5, 0.5, -0.5, 2.0, -3.0]), QuantMode::Eval, &mut rng);
        assert_eq!(q.data.data(), &[1.0, -2.0, 1.0, -1.0, 2.0, -3.0]);
    }

    #[test]
    fn train_noise_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..2000).map(|i| i as f64 * 0.01 - 10.0).collect();
        let q = quantize(&fm(&x), QuantMode::Train, &mut rng);
        for (a, b) in q.data.data().iter().zip(&x) {
            let d = a - b;
            assert!((-0.5..0.5).contains(&d));
        }
    }

    #[test]
    fn straight_through_gradient() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = g.leaf(Tensor::from_vec(&[3], vec![0.2, 1.7, -2.6]), true);
        let q = g.quantize(x, QuantMode::Eval, &mut rng);
        let s = g.sum(q);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }
}

//! Scalar objectives: rate under the discretized logistic, distortion and
//! per-task losses.

use super::{Graph, Var};
use crate::tensor::Tensor;

/// Probabilities below this are floored before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-9;

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mass of the unit bin centred on `y` under a logistic with location `mu`
/// and scale `s`, evaluated on the tail closer to zero for accuracy.
pub(crate) fn logistic_bin(y: f64, mu: f64, s: f64) -> f64 {
    let d = y - mu;
    if d > 0.0 {
        sigmoid((-d + 0.5) / s) - sigmoid((-d - 0.5) / s)
    } else {
        sigmoid((d + 0.5) / s) - sigmoid((d - 0.5) / s)
    }
}

impl Graph {
    /// Total information content in bits, `-Σ log2 p(y)`, with per-channel
    /// `means` and `log_scales` over the last dimension of `y`.
    pub fn rate_bits(&mut self, y: Var, means: Var, log_scales: Var) -> Var {
        let c = self.value(means).len();
        assert_eq!(self.value(y).channels(), c, "rate: channel mismatch");
        assert_eq!(self.value(log_scales).len(), c);
        let mu = self.value(means).data().to_vec();
        let s: Vec<f64> = self.value(log_scales).data().iter().map(|v| v.exp()).collect();
        let mut bits = 0.0;
        for row in self.value(y).data().chunks(c) {
            for ch in 0..c {
                bits -= logistic_bin(row[ch], mu[ch], s[ch]).max(PROB_FLOOR).log2();
            }
        }
        self.push(Tensor::scalar(bits), &[y, means, log_scales], move |g, p, _| {
            let g = g.item();
            let ln2 = std::f64::consts::LN_2;
            let mut dy = vec![0.0; p[0].len()];
            let mut dmu = vec![0.0; c];
            let mut dls = vec![0.0; c];
            for (r, row) in p[0].data().chunks(c).enumerate() {
                for ch in 0..c {
                    let prob = logistic_bin(row[ch], mu[ch], s[ch]);
                    if prob <= PROB_FLOOR {
                        continue;
                    }
                    let a = (row[ch] + 0.5 - mu[ch]) / s[ch];
                    let b = (row[ch] - 0.5 - mu[ch]) / s[ch];
                    let da = sigmoid(a) * sigmoid(-a);
                    let db = sigmoid(b) * sigmoid(-b);
                    let dbits_dp = -1.0 / (prob * ln2);
                    let dp_dy = (da - db) / s[ch];
                    let dp_dls = -(da * a - db * b);
                    dy[r * c + ch] = g * dbits_dp * dp_dy;
                    dmu[ch] -= g * dbits_dp * dp_dy;
                    dls[ch] += g * dbits_dp * dp_dls;
                }
            }
            vec![
                Some(Tensor::from_vec(p[0].shape(), dy)),
                Some(Tensor::from_vec(&[c], dmu)),
                Some(Tensor::from_vec(&[c], dls)),
            ]
        })
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let d2 = self.mul(d, d);
        self.mean(d2)
    }

    pub fn l1(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let n = self.value(d).len().max(1) as f64;
        let v = self.value(d).data().iter().map(|x| x.abs()).sum::<f64>() / n;
        self.push(Tensor::scalar(v), &[d], move |g, p, _| {
            let g = g.item() / n;
            vec![Some(p[0].map(|x| g * x.signum()))]
        })
    }

    /// Mean softmax cross-entropy over every position; `logits` is `[..., k]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let k = self.value(logits).channels();
        let rows = self.value(logits).len() / k;
        assert_eq!(labels.len(), rows, "one label per position");
        let mut probs = self.value(logits).clone();
        let mut loss = 0.0;
        for (row, &lab) in probs.data_mut().chunks_mut(k).zip(labels) {
            assert!(lab < k, "label {lab} out of range for {k} classes");
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            loss -= row[lab] - m - z.ln();
            for v in row.iter_mut() {
                *v = (*v - m).exp() / z;
            }
        }
        let n = rows.max(1) as f64;
        let labels = labels.to_vec();
        self.push(Tensor::scalar(loss / n), &[logits], move |g, _, _| {
            let s = g.item() / n;
            let mut d = probs.clone();
            for (row, &lab) in d.data_mut().chunks_mut(k).zip(&labels) {
                row[lab] -= 1.0;
                row.iter_mut().for_each(|v| *v *= s);
            }
            vec![Some(d)]
        })
    }

    /// Mean binary cross-entropy on logits against targets in [0, 1].
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.len(), targets.len(), "one target per logit");
        let n = lv.len().max(1) as f64;
        let loss: f64 = lv
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let targets = targets.to_vec();
        self.push(Tensor::scalar(loss / n), &[logits], move |g, p, _| {
            let s = g.item() / n;
            let d: Vec<f64> = p[0]
                .data()
                .iter()
                .zip(&targets)
                .map(|(&z, &t)| s * (sigmoid(z) - t))
                .collect();
            vec![Some(Tensor::from_vec(p[0].shape(), d))]
        })
    }

    /// Mean of `1 - cos(pred, target)` over 3-vectors in the last dimension.
    pub fn cosine_loss(&mut self, pred: Var, target: Var) -> Var {
        assert_eq!(self.value(pred).shape(), self.value(target).shape());
        assert_eq!(self.value(pred).channels(), 3);
        let rows = self.value(pred).len() / 3;
        let n = rows.max(1) as f64;
        const EPS: f64 = 1e-8;
        let loss: f64 = self
            .value(pred)
            .data()
            .chunks(3)
            .zip(self.value(target).data().chunks(3))
            .map(|(p, t)| {
                let np = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt().max(EPS);
                let nt = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt().max(EPS);
                1.0 - (p[0] * t[0] + p[1] * t[1] + p[2] * t[2]) / (np * nt)
            })
            .sum();
        self.push(Tensor::scalar(loss / n), &[pred, target], move |g, pv, _| {
            let s = g.item() / n;
            let mut dp = vec![0.0; rows * 3];
            for (i, (p, t)) in pv[0].data().chunks(3).zip(pv[1].data().chunks(3)).enumerate() {
                let np = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt().max(EPS);
                let nt = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt().max(EPS);
                let dot = p[0] * t[0] + p[1] * t[1] + p[2] * t[2];
                for k in 0..3 {
                    dp[i * 3 + k] = -s * (t[k] / (np * nt) - dot * p[k] / (np * np * np * nt));
                }
            }
            vec![Some(Tensor::from_vec(pv[0].shape(), dp)), None]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::check;

    #[test]
    fn logistic_bin_is_symmetric_and_normalized() {
        let total: f64 = (-200..=200).map(|k| logistic_bin(k as f64, 0.3, 1.7)).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!((logistic_bin(2.0, 0.0, 1.0) - logistic_bin(-2.0, 0.0, 1.0)).abs() < 1e-15);
    }

    #[test]
    fn loss_gradients() {
        let x = Tensor::from_vec(&[1, 2, 1, 3], vec![0.3, -1.2, 0.8, 2.0, 0.1, -0.4]);
        let e = check(&x, 1e-6, |g, v| g.softmax_cross_entropy(v, &[2, 0]));
        assert!(e < 1e-6, "ce {e}");
        let e = check(&x, 1e-6, |g, v| g.bce_with_logits(v, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]));
        assert!(e < 1e-6, "bce {e}");
        let t = Tensor::from_vec(&[1, 2, 1, 3], vec![0.0, 0.6, 0.8, 1.0, 0.0, 0.0]);
        let e = check(&x, 1e-6, |g, v| {
            let tv = g.constant(t.clone());
            g.cosine_loss(v, tv)
        });
        assert!(e < 1e-6, "cos {e}");
        let e = check(&x, 1e-6, |g, v| {
            let tv = g.constant(t.clone());
            g.mse(v, tv)
        });
        assert!(e < 1e-6, "mse {e}");
    }
}

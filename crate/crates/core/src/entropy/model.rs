use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{logistic_bin, sigmoid, PROB_FLOOR};
use crate::error::{Error, Result};
use crate::params::{hex, ParameterSet};
use crate::tensor::{FeatureMap, Tensor};

/// Default symbol support `[-K, K]`.
pub const DEFAULT_SUPPORT: i32 = 32;

/// Factorized discretized-logistic prior, one location/scale per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyModel {
    pub means: Vec<f64>,
    pub log_scales: Vec<f64>,
    pub support: i32,
}

impl EntropyModel {
    pub fn new(means: Vec<f64>, log_scales: Vec<f64>, support: i32) -> Result<Self> {
        let m = Self {
            means,
            log_scales,
            support,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.means.len() != self.log_scales.len() || self.means.is_empty() {
            return Err(Error::config(
                "entropy.means",
                "means and log_scales must be non-empty and equally long",
            ));
        }
        if self.support < 1 || self.support > i16::MAX as i32 {
            return Err(Error::config("entropy.support", "support K must be in [1, 32767]"));
        }
        if self
            .means
            .iter()
            .chain(&self.log_scales)
            .any(|v| !v.is_finite())
            || self.log_scales.iter().any(|l| !l.exp().is_normal())
        {
            return Err(Error::config("entropy.log_scales", "parameters must be finite with positive scale"));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.means.len()
    }

    /// Reads `{prefix}means` and `{prefix}log_scales` from a parameter set.
    pub fn from_params(params: &ParameterSet, prefix: &str, support: i32) -> Result<Self> {
        let get = |k: &str| {
            params
                .get(&format!("{prefix}{k}"))
                .map(|t| t.data().to_vec())
                .ok_or_else(|| Error::Checkpoint(format!("missing `{prefix}{k}`")))
        };
        Self::new(get("means")?, get("log_scales")?, support)
    }

    pub fn insert_into(&self, params: &mut ParameterSet, prefix: &str) {
        let c = self.channels();
        params.insert(format!("{prefix}means"), Tensor::from_vec(&[c], self.means.clone()));
        params.insert(format!("{prefix}log_scales"), Tensor::from_vec(&[c], self.log_scales.clone()));
    }

    /// Short content hash identifying this snapshot.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.support.to_le_bytes());
        for v in self.means.iter().chain(&self.log_scales) {
            h.update(v.to_bits().to_le_bytes());
        }
        hex(&h.finalize()[..8])
    }

    /// Probability of integer `k` in `channel` (unfloored, no tail folding).
    pub fn prob(&self, channel: usize, k: f64) -> f64 {
        logistic_bin(k, self.means[channel], self.log_scales[channel].exp())
    }

    /// Interior bin masses over `[-K, K]` and the mass outside that range.
    pub fn pmf(&self, channel: usize) -> (Vec<f64>, f64) {
        let k = self.support;
        let bins: Vec<f64> = (-k..=k).map(|s| self.prob(channel, s as f64)).collect();
        let (mu, s) = (self.means[channel], self.log_scales[channel].exp());
        let lower = sigmoid((-(k as f64) - 0.5 - mu) / s);
        let upper = sigmoid((mu - k as f64 - 0.5) / s);
        (bins, lower + upper)
    }

    /// Draws one symbol per position from the per-channel distribution,
    /// restricted to the support.
    pub fn sample(&self, rng: &mut impl Rng, h: usize, w: usize) -> Vec<i32> {
        let c = self.channels();
        let cdfs: Vec<Vec<f64>> = (0..c)
            .map(|ch| {
                let (bins, _) = self.pmf(ch);
                let z: f64 = bins.iter().sum();
                let mut acc = 0.0;
                bins.iter()
                    .map(|b| {
                        acc += b / z;
                        acc
                    })
                    .collect()
            })
            .collect();
        (0..h * w * c)
            .map(|i| {
                let u: f64 = rng.gen();
                let idx = cdfs[i % c].iter().position(|&v| u < v).unwrap_or(cdfs[i % c].len() - 1);
                idx as i32 - self.support
            })
            .collect()
    }
}

/// Estimated bits `-Σ log2 p(ŷ)` of a latent under `model`.
///
/// Uses the same discretized-logistic bin mass as the training objective,
/// floored at 1e-9. The estimate depends on the latent values only, not on
/// the coder's symbol support.
pub fn rate_bits(latent: &FeatureMap, model: &EntropyModel) -> f64 {
    assert_eq!(latent.channels(), model.channels(), "latent/model channel mismatch");
    let c = model.channels();
    latent
        .data
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(ch, &v)| -model.prob(ch, v).max(PROB_FLOOR).log2())
                .sum::<f64>()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logistic_cdf(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn single_symbol_closed_form() {
        // p(0) = F(0.5) - F(-0.5) under the standard logistic.
        let p = logistic_cdf(0.5) - logistic_cdf(-0.5);
        assert!((p - 0.244918).abs() < 1e-6);
        let m = EntropyModel::new(vec![0.0], vec![0.0], 32).unwrap();
        let fm = FeatureMap::new(Tensor::zeros(&[1, 1, 1]), 0).unwrap();
        let bits = rate_bits(&fm, &m);
        assert!((bits - (-p.log2())).abs() < 1e-12);
        assert!((bits - 2.0297).abs() < 1e-3, "{bits}");
    }

    #[test]
    fn concentrated_scale_costs_nothing() {
        let m = EntropyModel::new(vec![3.0], vec![(1e-3f64).ln()], 32).unwrap();
        let fm = FeatureMap::new(Tensor::full(&[1, 1, 1], 3.0), 0).unwrap();
        assert!(rate_bits(&fm, &m) < 1e-6);
    }

    #[test]
    fn additive_over_elements() {
        let m = EntropyModel::new(vec![0.2, -1.0], vec![0.3, -0.2], 32).unwrap();
        let vals = [0.0, 1.0, -2.0, 3.0, 1.0, -1.0];
        let whole = FeatureMap::new(Tensor::from_vec(&[1, 3, 2], vals.to_vec()), 0).unwrap();
        let parts: f64 = vals
            .chunks(2)
            .map(|row| {
                let fm = FeatureMap::new(Tensor::from_vec(&[1, 1, 2], row.to_vec()), 0).unwrap();
                rate_bits(&fm, &m)
            })
            .sum();
        assert!((rate_bits(&whole, &m) - parts).abs() < 1e-10);
    }

    #[test]
    fn pmf_plus_tail_is_normalized() {
        for (mu, ls) in [(0.0, 0.0), (5.3, 2.0), (-30.0, 1.5), (0.1, -5.0)] {
            let m = EntropyModel::new(vec![mu], vec![ls], 32).unwrap();
            let (bins, tail) = m.pmf(0);
            let total: f64 = bins.iter().sum::<f64>() + tail;
            assert!((total - 1.0).abs() < 1e-9, "mu={mu} ls={ls} total={total}");
        }
    }

    #[test]
    fn rejects_invalid() {
        assert!(EntropyModel::new(vec![0.0], vec![], 32).is_err());
        assert!(EntropyModel::new(vec![0.0], vec![0.0], 0).is_err());
        assert!(EntropyModel::new(vec![f64::NAN], vec![0.0], 4).is_err());
    }
}

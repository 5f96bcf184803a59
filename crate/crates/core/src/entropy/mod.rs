//! Quantization, the factorized entropy model and the lossless coder for the
//! shared latent.

mod bitstream;
mod coder;
mod model;
mod quantize;

pub use bitstream::{Bitstream, HEADER_LEN, MAGIC, VERSION};
pub use coder::{FreqTable, RangeDecoder, RangeEncoder, FREQ_BITS, FREQ_TOTAL};
pub use model::{rate_bits, EntropyModel, DEFAULT_SUPPORT};
pub use quantize::{quantize, round_half_away, QuantMode};

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Tensor};

/// Integer symbols of a quantized latent, `(h, w, c)` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentCode {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub symbols: Vec<i32>,
    pub model_id: String,
}

impl LatentCode {
    pub fn new(height: usize, width: usize, channels: usize, symbols: Vec<i32>, model_id: String) -> Result<Self> {
        if symbols.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} symbols for a {height}x{width}x{channels} grid",
                symbols.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            symbols,
            model_id,
        })
    }

    /// Rounds a latent to integers.
    pub fn from_latent(latent: &FeatureMap, model: &EntropyModel) -> Self {
        Self {
            height: latent.height(),
            width: latent.width(),
            channels: latent.channels(),
            symbols: latent.data.data().iter().map(|&v| round_half_away(v) as i32).collect(),
            model_id: model.id(),
        }
    }

    pub fn to_feature_map(&self) -> FeatureMap {
        let data = self.symbols.iter().map(|&s| s as f64).collect();
        FeatureMap::unchecked(Tensor::from_vec(&[self.height, self.width, self.channels], data), 0)
    }
}

/// One frequency table per latent channel over `[-K, K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CodingTables {
    pub support: i32,
    tables: Vec<FreqTable>,
}

impl CodingTables {
    /// Quantizes the model PMFs; tail mass below `-K` and above `K` is folded
    /// into the edge bins.
    pub fn from_model(model: &EntropyModel) -> Result<Self> {
        model.validate()?;
        let k = model.support;
        let probs = (0..model.channels())
            .map(|ch| {
                let (mut bins, _) = model.pmf(ch);
                let (mu, s) = (model.means[ch], model.log_scales[ch].exp());
                let last = bins.len() - 1;
                bins[0] += crate::autograd::sigmoid((-(k as f64) - 0.5 - mu) / s);
                bins[last] += crate::autograd::sigmoid((mu - k as f64 - 0.5) / s);
                bins
            })
            .collect::<Vec<_>>();
        Self::from_probabilities(&probs, k)
    }

    /// Builds tables from explicit per-channel PMFs over `[-K, K]`.
    pub fn from_probabilities(probs: &[Vec<f64>], support: i32) -> Result<Self> {
        let n = 2 * support as usize + 1;
        if support < 1 || probs.iter().any(|p| p.len() != n) {
            return Err(Error::config("support", format!("each PMF must have 2K+1 = {n} entries")));
        }
        let tables = probs.iter().map(|p| FreqTable::from_probabilities(p)).collect::<Result<_>>()?;
        Ok(Self { support, tables })
    }

    pub fn channels(&self) -> usize {
        self.tables.len()
    }

    /// Ideal code length in bits of a clamped symbol under the quantized table.
    pub fn symbol_bits(&self, channel: usize, symbol: i32) -> f64 {
        let s = symbol.clamp(-self.support, self.support);
        self.tables[channel].bits((s + self.support) as usize)
    }
}

/// Range-codes a latent. Out-of-support symbols are clamped; the number of
/// clamped symbols is returned alongside the stream.
pub fn encode_bitstream(code: &LatentCode, tables: &CodingTables) -> Result<(Bitstream, usize)> {
    if code.channels != tables.channels() && !code.symbols.is_empty() {
        return Err(Error::Shape(format!(
            "latent has {} channels, entropy model has {}",
            code.channels,
            tables.channels()
        )));
    }
    let fit = |v: usize, what: &str| {
        u16::try_from(v).map_err(|_| Error::Shape(format!("{what} {v} does not fit the header")))
    };
    let header = (
        fit(code.height, "height")?,
        fit(code.width, "width")?,
        fit(code.channels, "channels")?,
        fit(tables.support as usize, "support")?,
    );
    let k = tables.support;
    let mut clamped = 0;
    let payload = if code.symbols.is_empty() {
        Vec::new()
    } else {
        let mut enc = RangeEncoder::new();
        for (i, &s) in code.symbols.iter().enumerate() {
            let c = s.clamp(-k, k);
            clamped += usize::from(c != s);
            enc.encode(&tables.tables[i % code.channels], (c + k) as usize);
        }
        enc.finish()
    };
    let bs = Bitstream {
        height: header.0,
        width: header.1,
        channels: header.2,
        support: header.3,
        payload,
    };
    Ok((bs, clamped))
}

pub fn decode_bitstream(bs: &Bitstream, tables: &CodingTables, model_id: &str) -> Result<LatentCode> {
    let (h, w, c) = (bs.height as usize, bs.width as usize, bs.channels as usize);
    let n = h * w * c;
    if bs.support as i32 != tables.support {
        return Err(Error::Format(format!(
            "stream support {} differs from the model's {}",
            bs.support, tables.support
        )));
    }
    if n == 0 {
        if !bs.payload.is_empty() {
            return Err(Error::Format("empty grid with a non-empty payload".into()));
        }
        return LatentCode::new(h, w, c, Vec::new(), model_id.to_string());
    }
    if c != tables.channels() {
        return Err(Error::Format(format!("stream has {c} channels, model has {}", tables.channels())));
    }
    let k = tables.support;
    let mut dec = RangeDecoder::new(&bs.payload, HEADER_LEN)?;
    let mut symbols = Vec::with_capacity(n);
    for i in 0..n {
        symbols.push(dec.decode(&tables.tables[i % c])? as i32 - k);
    }
    LatentCode::new(h, w, c, symbols, model_id.to_string())
}

/// Convenience wrapper building tables from `model`.
pub fn encode_with_model(code: &LatentCode, model: &EntropyModel) -> Result<(Bitstream, usize)> {
    encode_bitstream(code, &CodingTables::from_model(model)?)
}

pub fn decode_with_model(bs: &Bitstream, model: &EntropyModel) -> Result<LatentCode> {
    decode_bitstream(bs, &CodingTables::from_model(model)?, &model.id())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> EntropyModel {
        EntropyModel::new(vec![0.0, 1.5, -3.0, 0.2], vec![0.5, 0.0, 1.2, -1.0], DEFAULT_SUPPORT).unwrap()
    }

    #[test]
    fn lossless_on_model_samples() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let symbols = m.sample(&mut rng, 9, 11);
        let code = LatentCode::new(9, 11, 4, symbols, m.id()).unwrap();
        let (bs, clamped) = encode_with_model(&code, &m).unwrap();
        assert_eq!(clamped, 0);
        let back = decode_with_model(&Bitstream::from_bytes(&bs.to_bytes()).unwrap(), &m).unwrap();
        assert_eq!(back, code);
    }

    #[test]
    fn uniform_two_bit_alphabet_size() {
        // Reference PMF: 1/4 on each of {-1, 0, 1, 2}, nothing on -2.
        let pmf = vec![0.0, 0.25, 0.25, 0.25, 0.25];
        let tables = CodingTables::from_probabilities(&[pmf], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let symbols: Vec<i32> = (0..4096).map(|_| rng.gen_range(-1..=2)).collect();
        let code = LatentCode::new(64, 64, 1, symbols, String::new()).unwrap();
        let (bs, _) = encode_bitstream(&code, &tables).unwrap();
        let len = bs.payload.len() as f64;
        assert!((1024.0..=1024.0 * 1.02 + 32.0).contains(&len), "{len}");
        assert_eq!(decode_bitstream(&bs, &tables, "").unwrap(), code);
    }

    #[test]
    fn payload_respects_shannon_bound() {
        let m = model();
        let tables = CodingTables::from_model(&m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let symbols = m.sample(&mut rng, 16, 16);
            let shannon: f64 = symbols
                .iter()
                .enumerate()
                .map(|(i, &s)| {
                    let (bins, _) = m.pmf(i % 4);
                    -bins[(s + m.support) as usize].log2()
                })
                .sum();
            let code = LatentCode::new(16, 16, 4, symbols, m.id()).unwrap();
            let (bs, _) = encode_bitstream(&code, &tables).unwrap();
            let bits = bs.payload.len() as f64 * 8.0;
            assert!(bits >= shannon * (1.0 - 1e-3), "{bits} < {shannon}");
            assert!(bits <= shannon * 1.02 + 8.0 * 32.0);
        }
    }

    #[test]
    fn empty_grid_is_header_only() {
        let m = model();
        let code = LatentCode::new(0, 0, 4, vec![], m.id()).unwrap();
        let (bs, _) = encode_with_model(&code, &m).unwrap();
        assert!(bs.payload.is_empty());
        assert_eq!(bs.to_bytes().len(), HEADER_LEN);
        let back = decode_with_model(&Bitstream::from_bytes(&bs.to_bytes()).unwrap(), &m).unwrap();
        assert!(back.symbols.is_empty());
    }

    #[test]
    fn clamps_out_of_support() {
        let m = EntropyModel::new(vec![0.0], vec![0.0], 4).unwrap();
        let code = LatentCode::new(1, 3, 1, vec![-9, 2, 7], m.id()).unwrap();
        let (bs, clamped) = encode_with_model(&code, &m).unwrap();
        assert_eq!(clamped, 2);
        assert_eq!(decode_with_model(&bs, &m).unwrap().symbols, vec![-4, 2, 4]);
    }

    #[test]
    fn truncated_payload_fails_with_offset() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let code = LatentCode::new(8, 8, 4, m.sample(&mut rng, 8, 8), m.id()).unwrap();
        let (mut bs, _) = encode_with_model(&code, &m).unwrap();
        let full = bs.payload.len();
        bs.payload.truncate(full / 2);
        match decode_with_model(&bs, &m) {
            Err(Error::Decode { offset, .. }) => assert_eq!(offset, HEADER_LEN + full / 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rate_gradient_matches_finite_differences() {
        use crate::autograd::Graph;
        let y = Tensor::from_vec(&[1, 2, 2, 2], vec![0.0, 1.0, -2.0, 3.0, 1.0, -1.0, 0.0, 2.0]);
        let mu = Tensor::from_vec(&[2], vec![0.3, -0.4]);
        let ls = Tensor::from_vec(&[2], vec![0.2, 0.7]);
        let bits = |mu: &Tensor, ls: &Tensor| {
            let mut g = Graph::new();
            let (a, b, c) = (g.constant(y.clone()), g.constant(mu.clone()), g.constant(ls.clone()));
            let r = g.rate_bits(a, b, c);
            g.value(r).item()
        };
        let mut g = Graph::new();
        let a = g.constant(y.clone());
        let b = g.leaf(mu.clone(), true);
        let c = g.leaf(ls.clone(), true);
        let r = g.rate_bits(a, b, c);
        let grads = g.backward(r);
        let eps = 1e-6;
        for i in 0..2 {
            for (which, analytic) in [(0, grads.get(b).unwrap()), (1, grads.get(c).unwrap())] {
                let (mut mp, mut mm, mut lp, mut lm) = (mu.clone(), mu.clone(), ls.clone(), ls.clone());
                if which == 0 {
                    mp.data_mut()[i] += eps;
                    mm.data_mut()[i] -= eps;
                } else {
                    lp.data_mut()[i] += eps;
                    lm.data_mut()[i] -= eps;
                }
                let num = (bits(&mp, &lp) - bits(&mm, &lm)) / (2.0 * eps);
                let a = analytic.data()[i];
                assert!((a - num).abs() / a.abs().max(num.abs()).max(1e-6) < 1e-4, "{a} vs {num}");
            }
        }
    }

    #[test]
    fn larger_support_never_costs_more() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..4 * 36).map(|_| rng.gen_range(-40.0f64..40.0).round()).collect();
        let fm = FeatureMap::new(Tensor::from_vec(&[6, 6, 4], data), 0).unwrap();
        let mut prev = f64::INFINITY;
        for k in [4, 8, 16, 32, 64] {
            let mk = EntropyModel { support: k, ..m.clone() };
            let bits = rate_bits(&fm, &mk);
            assert!(bits <= prev + 1e-12);
            prev = bits;
        }
    }
}

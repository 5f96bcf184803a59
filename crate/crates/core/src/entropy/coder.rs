//! Byte-oriented range coder with 32-bit range, carry propagation through a
//! 64-bit `low`, and 16-bit frequency tables.

use crate::error::{Error, Result};

pub const FREQ_BITS: u32 = 16;
pub const FREQ_TOTAL: u32 = 1 << FREQ_BITS;
const TOP: u32 = 1 << 24;

/// Cumulative frequency table for one symbol alphabet.
#[derive(Clone, Debug, PartialEq)]
pub struct FreqTable {
    freq: Vec<u32>,
    cum: Vec<u32>,
}

impl FreqTable {
    /// Quantizes a probability vector. Every symbol gets a frequency of at
    /// least one; the rounding remainder goes to the most probable symbol.
    pub fn from_probabilities(probs: &[f64]) -> Result<Self> {
        let n = probs.len();
        if n == 0 || n as u32 >= FREQ_TOTAL {
            return Err(Error::config("support", "alphabet size must be in [1, 65535]"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Numeric("probabilities must be finite and non-negative".into()));
        }
        let z: f64 = probs.iter().sum();
        let spare = (FREQ_TOTAL - n as u32) as f64;
        let mut freq: Vec<u32> = probs
            .iter()
            .map(|p| {
                let q = if z > 0.0 { p / z } else { 1.0 / n as f64 };
                1 + (q * spare).floor() as u32
            })
            .collect();
        let used: u32 = freq.iter().sum();
        let argmax = probs
            .iter()
            .enumerate()
            .fold(0, |best, (i, p)| if *p > probs[best] { i } else { best });
        freq[argmax] += FREQ_TOTAL - used;
        let mut cum = Vec::with_capacity(n + 1);
        let mut acc = 0;
        cum.push(0);
        for f in &freq {
            acc += f;
            cum.push(acc);
        }
        debug_assert_eq!(acc, FREQ_TOTAL);
        Ok(Self { freq, cum })
    }

    pub fn len(&self) -> usize {
        self.freq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freq.is_empty()
    }

    pub fn freq(&self, symbol: usize) -> u32 {
        self.freq[symbol]
    }

    /// Ideal code length of `symbol` under the quantized table.
    pub fn bits(&self, symbol: usize) -> f64 {
        FREQ_BITS as f64 - (self.freq[symbol] as f64).log2()
    }

    fn lookup(&self, target: u32) -> usize {
        self.cum.partition_point(|&c| c <= target) - 1
    }
}

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, table: &FreqTable, symbol: usize) {
        let r = self.range >> FREQ_BITS;
        self.low += r as u64 * table.cum[symbol] as u64;
        self.range = r * table.freq[symbol];
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.out.push(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    input: &'a [u8],
    pos: usize,
    base_offset: usize,
}

impl<'a> RangeDecoder<'a> {
    /// `base_offset` is added to byte positions in error reports.
    pub fn new(input: &'a [u8], base_offset: usize) -> Result<Self> {
        let mut d = Self {
            code: 0,
            range: u32::MAX,
            input,
            pos: 0,
            base_offset,
        };
        for _ in 0..5 {
            let b = d.next_byte()?;
            d.code = (d.code << 8) | b as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = self.input.get(self.pos).copied().ok_or_else(|| Error::Decode {
            offset: self.base_offset + self.pos,
            detail: "payload ended early".into(),
        })?;
        self.pos += 1;
        Ok(b)
    }

    pub fn decode(&mut self, table: &FreqTable) -> Result<usize> {
        let r = self.range >> FREQ_BITS;
        let target = (self.code / r).min(FREQ_TOTAL - 1);
        let symbol = table.lookup(target);
        self.code -= r * table.cum[symbol];
        self.range = r * table.freq[symbol];
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte()? as u32;
        }
        Ok(symbol)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn table_sums_to_total_and_keeps_every_symbol() {
        let t = FreqTable::from_probabilities(&[0.0, 0.9, 0.1, 0.0]).unwrap();
        let total: u32 = (0..t.len()).map(|i| t.freq(i)).sum();
        assert_eq!(total, FREQ_TOTAL);
        assert!((0..t.len()).all(|i| t.freq(i) >= 1));
    }

    proptest! {
        #[test]
        fn round_trip(probs in prop::collection::vec(0.0f64..1.0, 1..20),
                      picks in prop::collection::vec(any::<u16>(), 0..400)) {
            let t = FreqTable::from_probabilities(&probs).unwrap();
            let symbols: Vec<usize> = picks.iter().map(|p| *p as usize % probs.len()).collect();
            let mut enc = RangeEncoder::new();
            for &s in &symbols {
                enc.encode(&t, s);
            }
            let bytes = enc.finish();
            let mut dec = RangeDecoder::new(&bytes, 0).unwrap();
            for &s in &symbols {
                prop_assert_eq!(dec.decode(&t).unwrap(), s);
            }
            prop_assert_eq!(dec.position(), bytes.len());
        }
    }

    #[test]
    fn carry_heavy_stream() {
        // Long runs of the most probable symbol push `low` against 0xFF..
        let t = FreqTable::from_probabilities(&[1e-6, 1.0 - 2e-6, 1e-6]).unwrap();
        let symbols: Vec<usize> = (0..5000).map(|i| if i % 997 == 0 { 2 } else { 1 }).collect();
        let mut enc = RangeEncoder::new();
        symbols.iter().for_each(|&s| enc.encode(&t, s));
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes, 0).unwrap();
        for &s in &symbols {
            assert_eq!(dec.decode(&t).unwrap(), s);
        }
    }
}

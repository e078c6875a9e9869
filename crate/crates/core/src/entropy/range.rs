//! Carry-aware range coder, 32-bit range with 2^24 renormalization.
//!
//! Frequencies are 16-bit quantized (total 2^16); encoder and decoder
//! states evolve identically given identical symbol/pmf sequences. A
//! 16-bit sentinel closes every stream so desynchronization is detected
//! instead of silently producing garbage.

use crate::error::{CodecError, Result};
use crate::tensor::PMF_FLOOR;

use super::pmf::PMF_TOTAL;

const RC_TOP: u32 = 1 << 24;
const SENTINEL: u32 = 0xA55A;

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
        RangeEncoder { low: 0, range: u32::MAX, cache: 0, cache_size: 1, out: Vec::new() }
    }

    /// Encode a symbol occupying [cum, cum + freq) of the 2^16 total.
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq >= 1 && cum + freq <= PMF_TOTAL);
        let r = self.range >> 16;
        self.low += cum as u64 * r as u64;
        self.range = r * freq;
        while self.range < RC_TOP {
            self.shift_low();
            self.range <<= 8;
        }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low > 0xFFFF_FFFF {
            let carry = (self.low >> 32) as u8;
            self.out.push(self.cache.wrapping_add(carry));
            for _ in 1..self.cache_size {
                self.out.push(0xFFu8.wrapping_add(carry));
            }
            self.cache = (self.low >> 24) as u8;
            self.cache_size = 0;
        }
        self.cache_size += 1;
        self.low = (self.low << 8) & 0xFFFF_FFFF;
    }

    /// Append the sentinel and flush. Consumes the encoder.
    pub fn finish(mut self) -> Vec<u8> {
        self.encode(SENTINEL, 1);
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    range: u32,
    code: u32,
    data: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        let mut d = RangeDecoder { range: u32::MAX, code: 0, data, pos: 1 };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Cumulative frequency the encoder's next symbol must cover.
    pub fn decode_cum(&self) -> u32 {
        let r = self.range >> 16;
        (self.code / r).min(PMF_TOTAL - 1)
    }

    /// Commit to the symbol occupying [cum, cum + freq).
    pub fn update(&mut self, cum: u32, freq: u32) {
        let r = self.range >> 16;
        self.code -= cum * r;
        self.range = r * freq;
        while self.range < RC_TOP {
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.range <<= 8;
        }
    }

    /// Verify the closing sentinel.
    pub fn finish(mut self) -> Result<()> {
        if self.decode_cum() != SENTINEL {
            return Err(CodecError::Desync);
        }
        self.update(SENTINEL, 1);
        Ok(())
    }
}

/// Cumulative table for a frequency vector.
pub fn cumulative(freqs: &[u32]) -> Vec<u32> {
    let mut cum = Vec::with_capacity(freqs.len() + 1);
    let mut acc = 0;
    cum.push(0);
    for &f in freqs {
        acc += f;
        cum.push(acc);
    }
    cum
}

/// Binary search the symbol whose cumulative span contains `target`.
pub fn find_symbol(cum: &[u32], target: u32) -> usize {
    let mut lo = 0usize;
    let mut hi = cum.len() - 1;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if cum[mid] <= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Encode `symbols[i]` (offset by `amin`) under `pmfs[i]`.
pub fn encode_symbols(symbols: &[i32], amin: i32, pmfs: &[Vec<u32>]) -> Result<Vec<u8>> {
    assert_eq!(symbols.len(), pmfs.len());
    let mut enc = RangeEncoder::new();
    for (s, freqs) in symbols.iter().zip(pmfs) {
        let idx = s - amin;
        if idx < 0 || idx as usize >= freqs.len() {
            return Err(CodecError::SymbolOutOfRange(*s, amin, amin + freqs.len() as i32 - 1));
        }
        let cum = cumulative(freqs);
        enc.encode(cum[idx as usize], freqs[idx as usize]);
    }
    Ok(enc.finish())
}

/// Decode `n` symbols; `pmf_for(i, decoded_so_far)` must return the same
/// pmf the encoder used at position `i` (autoregressive callback).
pub fn decode_symbols<F>(bytes: &[u8], n: usize, amin: i32, mut pmf_for: F) -> Result<Vec<i32>>
where
    F: FnMut(usize, &[i32]) -> Vec<u32>,
{
    let mut dec = RangeDecoder::new(bytes);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let freqs = pmf_for(i, &out);
        let cum = cumulative(&freqs);
        let idx = find_symbol(&cum, dec.decode_cum());
        dec.update(cum[idx], freqs[idx]);
        out.push(amin + idx as i32);
    }
    dec.finish()?;
    Ok(out)
}

/// Ideal total code length in bits of a symbol sequence under its pmfs.
pub fn ideal_bits(symbols: &[i32], amin: i32, pmfs: &[Vec<u32>]) -> f64 {
    symbols
        .iter()
        .zip(pmfs)
        .map(|(s, f)| -((f[(s - amin) as usize] as f64 / PMF_TOTAL as f64).log2()))
        .sum()
}

#[allow(dead_code)]
fn _pmf_floor_is_coder_precision() {
    // the rate-estimate floor and the coder's minimum frequency agree
    const _: () = assert!((PMF_FLOOR * PMF_TOTAL as f64) as u64 == 1);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::pmf::build_laplace_pmf;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_core::RngCore;

    #[test]
    fn uniform_symbols_near_entropy() {
        let freqs: Vec<u32> = vec![PMF_TOTAL / 256; 256];
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let syms: Vec<i32> = (0..1000).map(|_| (rng.next_u32() % 256) as i32).collect();
        let pmfs: Vec<Vec<u32>> = (0..1000).map(|_| freqs.clone()).collect();
        let bytes = encode_symbols(&syms, 0, &pmfs).unwrap();
        assert!((bytes.len() as f64 - 1000.0).abs() <= 12.0, "coded {} bytes", bytes.len());
        let back = decode_symbols(&bytes, 1000, 0, |_, _| freqs.clone()).unwrap();
        assert_eq!(back, syms);
    }

    #[test]
    fn single_symbol_alphabet_is_near_free() {
        let freqs = vec![PMF_TOTAL];
        let syms = vec![0i32; 5000];
        let pmfs: Vec<Vec<u32>> = (0..5000).map(|_| freqs.clone()).collect();
        let bytes = encode_symbols(&syms, 0, &pmfs).unwrap();
        assert!(bytes.len() <= 16, "coded {} bytes", bytes.len());
        let back = decode_symbols(&bytes, 5000, 0, |_, _| freqs.clone()).unwrap();
        assert_eq!(back, syms);
    }

    #[test]
    fn corruption_trips_sentinel() {
        let freqs = build_laplace_pmf(0.0, 2.0, -10, 10);
        let syms: Vec<i32> = (-10..=10).cycle().take(200).collect();
        let pmfs: Vec<Vec<u32>> = (0..200).map(|_| freqs.clone()).collect();
        let mut bytes = encode_symbols(&syms, -10, &pmfs).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        let r = decode_symbols(&bytes, 200, -10, |_, _| freqs.clone());
        match r {
            Err(CodecError::Desync) => {}
            Ok(decoded) => assert_ne!(decoded, syms, "corruption went unnoticed"),
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn empty_sequence() {
        let bytes = encode_symbols(&[], 0, &[]).unwrap();
        let back = decode_symbols(&bytes, 0, 0, |_, _| vec![PMF_TOTAL]).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn truncated_stream_errors() {
        let freqs = build_laplace_pmf(0.0, 1.0, -5, 5);
        let syms = vec![1i32; 100];
        let pmfs: Vec<Vec<u32>> = (0..100).map(|_| freqs.clone()).collect();
        let bytes = encode_symbols(&syms, -5, &pmfs).unwrap();
        let trunc = &bytes[..bytes.len() / 3];
        let r = decode_symbols(trunc, 100, -5, |_, _| freqs.clone());
        assert!(r.is_err() || r.unwrap() != syms);
    }
}

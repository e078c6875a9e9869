//! Quantized probability tables for the range coder.
//!
//! Everything here must produce bit-identical tables on encoder and
//! decoder across machines, so the only floating-point primitives used
//! are IEEE basic operations plus [`det_exp`], a fixed-term polynomial
//! exponential that does not depend on the platform libm.

use crate::tensor::PMF_FLOOR;

/// Total frequency of every quantized pmf (16-bit coder precision).
pub const PMF_TOTAL: u32 = 1 << 16;

/// Deterministic exp. Accurate to ~1e-15 relative over [-746, 16];
/// underflows to 0 below, saturates at the top of the supported range.
pub fn det_exp(x: f64) -> f64 {
    if x < -745.0 {
        return 0.0;
    }
    debug_assert!(x <= 16.0);
    let y = x * std::f64::consts::LOG2_E;
    let n = y.floor();
    let f = y - n; // [0, 1)
    // e^(f ln2) by fixed-length Taylor series: 17 terms, |z| < 0.694
    let z = f * std::f64::consts::LN_2;
    let mut term = 1.0;
    let mut sum = 1.0;
    for i in 1..18u32 {
        term *= z / i as f64;
        sum += term;
    }
    sum * pow2i(n as i64)
}

/// 2^n for integer n via exponent-bit construction (exact, deterministic).
fn pow2i(n: i64) -> f64 {
    if n < -1022 {
        return 0.0;
    }
    debug_assert!(n <= 1023);
    f64::from_bits(((1023 + n) as u64) << 52)
}

/// Laplace(0, b) CDF using the deterministic exponential.
pub fn det_laplace_cdf(t: f64, b: f64) -> f64 {
    if t < 0.0 {
        0.5 * det_exp(t / b)
    } else {
        1.0 - 0.5 * det_exp(-t / b)
    }
}

/// Discrete Laplace pmf over [amin, amax] with location `mu`, scale `b`,
/// tail mass folded into the two extreme symbols, floored at 2^-16.
pub fn laplace_pmf_folded(mu: f64, b: f64, amin: i32, amax: i32) -> Vec<f64> {
    debug_assert!(amin <= amax);
    let n = (amax - amin + 1) as usize;
    let mut pmf = Vec::with_capacity(n);
    for v in amin..=amax {
        let d = v as f64 - mu;
        let lo = det_laplace_cdf(d - 0.5, b);
        let hi = det_laplace_cdf(d + 0.5, b);
        pmf.push((hi - lo).max(PMF_FLOOR));
    }
    pmf[0] += det_laplace_cdf(amin as f64 - mu - 0.5, b);
    pmf[n - 1] += 1.0 - det_laplace_cdf(amax as f64 - mu + 0.5, b);
    pmf
}

/// Quantize a pmf to integer frequencies summing exactly to
/// [`PMF_TOTAL`], every frequency at least 1.
pub fn quantize_pmf(pmf: &[f64]) -> Vec<u32> {
    assert!(pmf.len() <= PMF_TOTAL as usize, "alphabet too large for coder precision");
    let total: f64 = pmf.iter().sum();
    let mut freqs: Vec<u32> = pmf
        .iter()
        .map(|&p| (((p / total) * PMF_TOTAL as f64) as u32).max(1))
        .collect();
    let sum: i64 = freqs.iter().map(|&f| f as i64).sum();
    let mut diff = PMF_TOTAL as i64 - sum;
    if diff > 0 {
        let imax = argmax(&freqs);
        freqs[imax] += diff as u32;
    } else {
        // steal from the largest frequencies, never below 1
        while diff < 0 {
            let imax = argmax(&freqs);
            let take = (-diff).min(freqs[imax] as i64 - 1);
            debug_assert!(take > 0, "cannot normalize pmf");
            freqs[imax] -= take as u32;
            diff += take;
        }
    }
    freqs
}

fn argmax(freqs: &[u32]) -> usize {
    let mut best = 0;
    for (i, &f) in freqs.iter().enumerate() {
        if f > freqs[best] {
            best = i;
        }
    }
    best
}

/// Quantized frequencies for a Laplace-coded alphabet.
pub fn build_laplace_pmf(mu: f64, b: f64, amin: i32, amax: i32) -> Vec<u32> {
    quantize_pmf(&laplace_pmf_folded(mu, b, amin, amax))
}

/// Ideal code length of `sym` (index into freqs) in bits.
pub fn freq_bits(freqs: &[u32], sym: usize) -> f64 {
    -(freqs[sym] as f64 / PMF_TOTAL as f64).log2()
}

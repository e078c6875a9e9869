//! Quantization and entropy coding of network parameters.
//!
//! Each module (ARM / upsampling / synthesis) is flattened in parameter
//! order, quantized with a power-of-two step, and coded with a discrete
//! Laplace whose scale is the transmitted mean absolute integer.

use crate::error::Result;
use crate::tensor::Parameters;

use super::pmf::build_laplace_pmf;
use super::range::{decode_symbols, encode_symbols, ideal_bits};

/// Step exponents searched by the encoder: step = 2^-k.
pub const STEP_EXP_MIN: u8 = 4;
pub const STEP_EXP_MAX: u8 = 12;
/// Forced exponent for an all-zero module.
pub const STEP_EXP_DEFAULT: u8 = 8;

/// Minimum transmitted Laplace scale (Q8.8).
const SCALE_FLOOR: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedModule {
    pub ints: Vec<i32>,
    /// step = 2^-step_exp
    pub step_exp: u8,
    /// Laplace scale, Q8.8
    pub scale_fx: u16,
    pub min: i32,
    pub max: i32,
}

impl QuantizedModule {
    pub fn step(&self) -> f32 {
        (2.0f32).powi(-(self.step_exp as i32))
    }

    pub fn scale(&self) -> f64 {
        self.scale_fx as f64 / 256.0
    }
}

/// Parameter names of a module, in deterministic iteration order.
fn module_names(params: &Parameters, prefix: &str) -> Vec<String> {
    params
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, _)| n.to_string())
        .collect()
}

/// Quantize every parameter under `prefix` with step 2^-k.
pub fn quantize_module(params: &Parameters, prefix: &str, k: u8) -> Result<QuantizedModule> {
    let step = (2.0f32).powi(-(k as i32));
    let mut ints = Vec::new();
    for name in module_names(params, prefix) {
        let t = params.get(&name)?;
        ints.extend(t.data.iter().map(|&v| (v / step).round() as i32));
    }
    Ok(finish_quantized(ints, k))
}

fn finish_quantized(ints: Vec<i32>, k: u8) -> QuantizedModule {
    let all_zero = ints.iter().all(|&v| v == 0);
    let (min, max) = if ints.is_empty() || all_zero {
        (0, 0)
    } else {
        (*ints.iter().min().unwrap(), *ints.iter().max().unwrap())
    };
    let mean_abs = if ints.is_empty() {
        0.0
    } else {
        ints.iter().map(|&v| v.unsigned_abs() as f64).sum::<f64>() / ints.len() as f64
    };
    let scale_fx = ((mean_abs * 256.0) as u16).max(SCALE_FLOOR);
    QuantizedModule {
        ints,
        step_exp: if all_zero { STEP_EXP_DEFAULT } else { k },
        scale_fx,
        min,
        max,
    }
}

/// Write dequantized values back into the module's parameters.
pub fn dequantize_into(params: &mut Parameters, prefix: &str, qm: &QuantizedModule) -> Result<()> {
    let step = qm.step();
    let names = module_names(params, prefix);
    let mut off = 0;
    for name in names {
        let t = params.get_mut(&name)?;
        for v in &mut t.data {
            *v = qm.ints[off] as f32 * step;
            off += 1;
        }
    }
    debug_assert_eq!(off, qm.ints.len());
    Ok(())
}

fn module_pmf(qm: &QuantizedModule) -> Vec<u32> {
    build_laplace_pmf(0.0, qm.scale(), qm.min, qm.max)
}

/// Range-code the module's integers. Self-delimiting via the coder
/// sentinel; alphabet bounds and scale travel in the section header.
pub fn code_module(qm: &QuantizedModule) -> Result<Vec<u8>> {
    let freqs = module_pmf(qm);
    let pmfs: Vec<Vec<u32>> = (0..qm.ints.len()).map(|_| freqs.clone()).collect();
    encode_symbols(&qm.ints, qm.min, &pmfs)
}

pub fn decode_module(
    bytes: &[u8],
    count: usize,
    step_exp: u8,
    scale_fx: u16,
    min: i32,
    max: i32,
) -> Result<QuantizedModule> {
    let qm_probe = QuantizedModule { ints: Vec::new(), step_exp, scale_fx, min, max };
    let freqs = module_pmf(&qm_probe);
    let ints = decode_symbols(bytes, count, min, |_, _| freqs.clone())?;
    Ok(QuantizedModule { ints, step_exp, scale_fx, min, max })
}

/// Ideal coded size of the module in bits (excludes coder flush).
pub fn module_bits(qm: &QuantizedModule) -> f64 {
    let freqs = module_pmf(qm);
    let pmfs: Vec<Vec<u32>> = (0..qm.ints.len()).map(|_| freqs.clone()).collect();
    ideal_bits(&qm.ints, qm.min, &pmfs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_core::RngCore;

    fn params_with(data: Vec<f32>) -> Parameters {
        let mut p = Parameters::new();
        let n = data.len();
        p.insert("m.0.w", Tensor::new(vec![n], data).unwrap());
        p
    }

    #[test]
    fn all_zero_module() {
        let p = params_with(vec![0.0; 40]);
        let qm = quantize_module(&p, "m.", 6).unwrap();
        assert_eq!(qm.step_exp, STEP_EXP_DEFAULT);
        assert!(qm.ints.iter().all(|&v| v == 0));
        assert_eq!(qm.scale_fx, 1);
        let bytes = code_module(&qm).unwrap();
        assert!(bytes.len() <= 8, "zero module coded to {} bytes", bytes.len());
    }

    #[test]
    fn quantizer_bound() {
        let data: Vec<f32> = (0..100).map(|i| (i as f32 - 50.0) * 0.013).collect();
        let mut p = params_with(data.clone());
        let qm = quantize_module(&p, "m.", 7).unwrap();
        dequantize_into(&mut p, "m.", &qm).unwrap();
        let step = qm.step();
        for (a, b) in data.iter().zip(&p.get("m.0.w").unwrap().data) {
            assert!((a - b).abs() <= step / 2.0 + 1e-7);
        }
    }

    #[test]
    fn roundtrip_and_size_bound() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        // roughly gaussian weights via CLT
        let data: Vec<f32> = (0..500)
            .map(|_| {
                (0..12)
                    .map(|_| (rng.next_u32() >> 8) as f32 / (1u32 << 24) as f32)
                    .sum::<f32>()
                    - 6.0
            })
            .collect();
        let p = params_with(data);
        let qm = quantize_module(&p, "m.", 12).unwrap();
        let bytes = code_module(&qm).unwrap();
        assert!((bytes.len() as f64) * 8.0 <= 32.0 * 500.0 + 64.0);
        let back =
            decode_module(&bytes, 500, qm.step_exp, qm.scale_fx, qm.min, qm.max).unwrap();
        assert_eq!(back, qm);
    }
}

//! Hierarchical latent pyramid and quantization proxies.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_core::RngCore;

use crate::error::{CodecError, Result};
use crate::tensor::round_ties_even;

pub const LATENT_MIN: i32 = -(1 << 15);
pub const LATENT_MAX: i32 = (1 << 15) - 1;
pub const MAX_GRIDS: usize = 10;

/// L integer grids at dyadic resolutions; during encoding a continuous
/// float shadow of the same shapes is carried alongside.
#[derive(Debug, Clone)]
pub struct LatentPyramid {
    pub h: usize,
    pub w: usize,
    pub grids: Vec<Vec<i32>>,
    pub shadow: Option<Vec<Vec<f32>>>,
}

/// Grid dims at pyramid level `l` for an HxW image (ceil division).
pub fn grid_dims(h: usize, w: usize, l: usize) -> (usize, usize) {
    (h.div_ceil(1 << l), w.div_ceil(1 << l))
}

/// Largest usable grid count for an image (every grid at least 1x1 is
/// always satisfiable, but levels beyond `MAX_GRIDS` are refused).
pub fn clamp_levels(requested: usize) -> usize {
    requested.clamp(1, MAX_GRIDS)
}

impl LatentPyramid {
    /// All-zero pyramid with `l_grids` levels (clamped to [1, 10]).
    pub fn init(h: usize, w: usize, l_grids: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(CodecError::Invalid("image dims must be >= 1".into()));
        }
        let l_grids = clamp_levels(l_grids);
        let grids = (0..l_grids)
            .map(|l| {
                let (gh, gw) = grid_dims(h, w, l);
                vec![0i32; gh * gw]
            })
            .collect();
        Ok(LatentPyramid { h, w, grids, shadow: None })
    }

    pub fn levels(&self) -> usize {
        self.grids.len()
    }

    pub fn dims(&self, l: usize) -> (usize, usize) {
        grid_dims(self.h, self.w, l)
    }

    /// Enter encoding mode: allocate a zero shadow.
    pub fn with_shadow(mut self) -> Self {
        self.shadow = Some(self.grids.iter().map(|g| vec![0.0f32; g.len()]).collect());
        self
    }

    /// Freeze the shadow into the integer grids (ties-to-even, saturating
    /// to the 16-bit latent range).
    pub fn harden(&mut self) -> bool {
        let mut saturated = false;
        if let Some(shadow) = &self.shadow {
            for (g, s) in self.grids.iter_mut().zip(shadow) {
                for (gi, &si) in g.iter_mut().zip(s) {
                    let (v, sat) = quantize_hard(si);
                    *gi = v;
                    saturated |= sat;
                }
            }
        }
        saturated
    }

    pub fn total_elements(&self) -> usize {
        self.grids.iter().map(Vec::len).sum()
    }
}

/// Nearest integer, ties to even, saturated to the latent range.
/// Returns (value, saturated).
pub fn quantize_hard(v: f32) -> (i32, bool) {
    let r = round_ties_even(v);
    if r < LATENT_MIN as f32 {
        (LATENT_MIN, true)
    } else if r > LATENT_MAX as f32 {
        (LATENT_MAX, true)
    } else {
        (r as i32, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuantMode {
    Noise,
    SoftRound { temperature: f32 },
    HardRound,
}

/// Quantize a flat shadow grid out of tape (no gradients): used for
/// deterministic inspection and tests. The differentiable path lives in
/// `Tape::{add_noise, soft_round, round_ste}`.
pub fn quantize(shadow: &[f32], mode: QuantMode, seed: u64) -> Vec<f32> {
    match mode {
        QuantMode::Noise => {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            shadow
                .iter()
                .map(|v| v + (rng.next_u32() >> 8) as f32 / (1u32 << 24) as f32 - 0.5)
                .collect()
        }
        QuantMode::SoftRound { temperature } => {
            assert!(temperature > 0.0);
            shadow
                .iter()
                .map(|&v| {
                    let fl = v.floor();
                    let frac = v - fl;
                    fl + 0.5
                        + 0.5 * (((frac - 0.5) / temperature).tanh()
                            / (0.5 / temperature).tanh())
                })
                .collect()
        }
        QuantMode::HardRound => shadow.iter().map(|&v| quantize_hard(v).0 as f32).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dyadic_dims() {
        let p = LatentPyramid::init(512, 768, 7).unwrap();
        let want = [(512, 768), (256, 384), (128, 192), (64, 96), (32, 48), (16, 24), (8, 12)];
        for (l, &(h, w)) in want.iter().enumerate() {
            assert_eq!(p.dims(l), (h, w));
            assert_eq!(p.grids[l].len(), h * w);
        }
    }

    #[test]
    fn single_pixel() {
        let p = LatentPyramid::init(1, 1, 1).unwrap();
        assert_eq!(p.levels(), 1);
        assert_eq!(p.grids[0].len(), 1);
    }

    #[test]
    fn odd_dims_use_ceil() {
        let p = LatentPyramid::init(5, 5, 2).unwrap();
        assert_eq!(p.dims(0), (5, 5));
        assert_eq!(p.dims(1), (3, 3));
    }

    #[test]
    fn level_clamp() {
        let p = LatentPyramid::init(4, 4, 99).unwrap();
        assert_eq!(p.levels(), MAX_GRIDS);
    }

    #[test]
    fn ties_to_even() {
        assert_eq!(quantize_hard(2.5).0, 2);
        assert_eq!(quantize_hard(3.5).0, 4);
        assert_eq!(quantize_hard(-2.5).0, -2);
        assert_eq!(quantize_hard(-0.5).0, 0);
    }

    #[test]
    fn hard_round_saturates() {
        assert_eq!(quantize_hard(1e9), (LATENT_MAX, true));
        assert_eq!(quantize_hard(-1e9), (LATENT_MIN, true));
    }

    #[test]
    fn noise_is_seeded() {
        let x = vec![0.25f32; 64];
        let a = quantize(&x, QuantMode::Noise, 7);
        let b = quantize(&x, QuantMode::Noise, 7);
        assert_eq!(a, b);
        let c = quantize(&x, QuantMode::Noise, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn soft_round_limit() {
        let y = quantize(&[0.4], QuantMode::SoftRound { temperature: 0.01 }, 0);
        assert!(y[0].abs() < 1e-3, "got {}", y[0]);
        let y = quantize(&[1.6], QuantMode::SoftRound { temperature: 0.01 }, 0);
        assert!((y[0] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn noise_unbiased() {
        let x = vec![0.0f32; 100_000];
        let q = quantize(&x, QuantMode::Noise, 42);
        let mean: f64 = q.iter().map(|&v| v as f64).sum::<f64>() / q.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn element_count_bound() {
        for &(h, w, l) in &[(512usize, 768usize, 7usize), (16, 32, 5), (1, 1, 3)] {
            let p = LatentPyramid::init(h, w, l).unwrap();
            assert!(p.total_elements() <= h * w * 4 / 3 + p.levels());
        }
        // odd dims overshoot the pure geometric series by at most the
        // perimeter contribution of the ceil at each level
        let p = LatentPyramid::init(17, 31, 5).unwrap();
        assert!(p.total_elements() <= 17 * 31 * 4 / 3 + 2 * (17 + 31) + 5);
    }
}

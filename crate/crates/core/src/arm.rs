//! Autoregressive probability model over latent grids.
//!
//! For every latent sample a causal context vector is fed through a tiny
//! MLP whose two outputs parameterize a discrete Laplace distribution over
//! the integer latent alphabet. The same weights serve every grid.

use crate::error::{CodecError, Result};
use crate::latent::LatentPyramid;
use crate::tensor::layers::{LayerKind, LayerSpec};
use crate::tensor::{laplace_prob, Parameters, LAPLACE_LN_B_MAX, LAPLACE_LN_B_MIN, PMF_FLOOR};

/// Fixed master offset list, nearest causal neighbours first. Context
/// templates take a prefix of this list; freezing it keeps bitstreams
/// reproducible.
pub const MASTER_OFFSETS: [(i32, i32); 24] = [
    (0, -1), (0, -2), (-1, 0), (-1, -1), (-1, 1), (-1, -2), (-1, 2), (0, -3),
    (-2, 0), (-2, -1), (-2, 1), (-1, -3), (-1, 3), (-2, -2), (-2, 2), (-2, -3),
    (-2, 3), (-3, 0), (-3, -1), (-3, 1), (-3, -2), (-3, 2), (0, -4), (-1, -4),
];

#[derive(Debug, Clone)]
pub struct ContextTemplate {
    pub offsets: Vec<(i32, i32)>,
}

impl ContextTemplate {
    pub fn new(size: usize) -> Result<Self> {
        if !matches!(size, 8 | 16 | 24) {
            return Err(CodecError::Invalid(format!("context size {size} not in {{8,16,24}}")));
        }
        Ok(ContextTemplate { offsets: MASTER_OFFSETS[..size].to_vec() })
    }

    pub fn size(&self) -> usize {
        self.offsets.len()
    }
}

/// Location / scale of the coding distribution, in latent units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaplaceParams {
    pub mu: f64,
    pub b: f64,
}

impl LaplaceParams {
    pub fn from_raw(mu: f64, braw: f64) -> Self {
        LaplaceParams {
            mu,
            b: braw.clamp(LAPLACE_LN_B_MIN as f64, LAPLACE_LN_B_MAX as f64).exp(),
        }
    }
}

/// Causal context at `pos`; out-of-bounds neighbours read as zero.
pub fn gather_context(
    grid: &[f32],
    h: usize,
    w: usize,
    pos: (usize, usize),
    tmpl: &ContextTemplate,
) -> Vec<f32> {
    let (y, x) = (pos.0 as i32, pos.1 as i32);
    tmpl.offsets
        .iter()
        .map(|&(dy, dx)| {
            let (ny, nx) = (y + dy, x + dx);
            if ny >= 0 && nx >= 0 && nx < w as i32 && (ny as usize) < h {
                grid[ny as usize * w + nx as usize]
            } else {
                0.0
            }
        })
        .collect()
}

/// Float-path MLP forward for one context vector.
pub fn arm_forward(ctx: &[f32], psi: &Parameters, arch: &[LayerSpec]) -> Result<LaplaceParams> {
    if arch[0].in_feat != ctx.len() {
        return Err(CodecError::ShapeMismatch(format!(
            "ARM expects context of {}, got {}",
            arch[0].in_feat,
            ctx.len()
        )));
    }
    let mut act = ctx.to_vec();
    let last = arch.len() - 1;
    for (i, spec) in arch.iter().enumerate() {
        let w = psi.get(&format!("arm.{i}.w"))?;
        let b = psi.get(&format!("arm.{i}.b"))?;
        let mut out = vec![0.0f32; spec.out_feat];
        for o in 0..spec.out_feat {
            let mut acc = b.data[o];
            for (j, &a) in act.iter().enumerate() {
                acc += a * w.data[j * spec.out_feat + o];
            }
            if spec.kind == LayerKind::LinearResidual {
                acc += act[o];
            }
            out[o] = acc;
        }
        if i != last {
            for v in &mut out {
                *v = v.max(0.0);
            }
        }
        act = out;
    }
    if act.len() != 2 {
        return Err(CodecError::ShapeMismatch("ARM must emit 2 outputs".into()));
    }
    Ok(LaplaceParams::from_raw(act[0] as f64, act[1] as f64))
}

/// P(v) = F(v + 0.5) - F(v - 0.5), floored at 2^-16.
pub fn discrete_laplace_pmf(lp: &LaplaceParams, v: i32) -> f64 {
    laplace_prob(v as f64 - lp.mu, lp.b).max(PMF_FLOOR)
}

/// Estimated total rate in bits of the integer pyramid under the ARM,
/// grids processed independently in raster order.
pub fn rate_bits(
    pyramid: &LatentPyramid,
    psi: &Parameters,
    arch: &[LayerSpec],
    tmpl: &ContextTemplate,
) -> Result<f64> {
    let mut total = 0.0;
    for l in 0..pyramid.levels() {
        let (h, w) = pyramid.dims(l);
        let grid: Vec<f32> = pyramid.grids[l].iter().map(|&v| v as f32).collect();
        for y in 0..h {
            for x in 0..w {
                let ctx = gather_context(&grid, h, w, (y, x), tmpl);
                let lp = arm_forward(&ctx, psi, arch)?;
                total -= discrete_laplace_pmf(&lp, pyramid.grids[l][y * w + x]).log2();
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::layers::init_stack;
    use crate::tensor::Tensor;

    fn zero_arm(ctx: usize) -> (Parameters, Vec<LayerSpec>) {
        let arch = vec![LayerSpec::linear_res(ctx), LayerSpec::linear(ctx, 2)];
        let mut p = Parameters::new();
        p.insert("arm.0.w", Tensor::zeros(vec![ctx, ctx]));
        p.insert("arm.0.b", Tensor::zeros(vec![ctx]));
        p.insert("arm.1.w", Tensor::zeros(vec![ctx, 2]));
        p.insert("arm.1.b", Tensor::zeros(vec![2]));
        (p, arch)
    }

    #[test]
    fn offsets_all_causal_and_distinct() {
        for (i, &(dy, dx)) in MASTER_OFFSETS.iter().enumerate() {
            assert!(dy < 0 || (dy == 0 && dx < 0), "offset {i} not causal");
            for &other in &MASTER_OFFSETS[..i] {
                assert_ne!((dy, dx), other);
            }
        }
    }

    #[test]
    fn context_at_origin_is_zero() {
        let tmpl = ContextTemplate::new(8).unwrap();
        let grid = vec![9.0f32; 25];
        let ctx = gather_context(&grid, 5, 5, (0, 0), &tmpl);
        assert!(ctx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn context_constant_interior() {
        let tmpl = ContextTemplate::new(8).unwrap();
        let grid = vec![5.0f32; 100];
        let ctx = gather_context(&grid, 10, 10, (5, 5), &tmpl);
        assert_eq!(ctx, vec![5.0; 8]);
    }

    #[test]
    fn context_matches_master_list_by_hand() {
        // 3x3 grid 0..9, query center (1,1); first 8 master offsets
        let grid: Vec<f32> = (0..9).map(|v| v as f32).collect();
        let tmpl = ContextTemplate::new(8).unwrap();
        let ctx = gather_context(&grid, 3, 3, (1, 1), &tmpl);
        // offsets: (0,-1)->3 (0,-2)->oob (-1,0)->1 (-1,-1)->0 (-1,1)->2
        //          (-1,-2)->oob (-1,2)->oob (0,-3)->oob
        assert_eq!(ctx, vec![3.0, 0.0, 1.0, 0.0, 2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_weights_give_unit_scale() {
        let (p, arch) = zero_arm(8);
        let lp = arm_forward(&[0.0; 8], &p, &arch).unwrap();
        assert_eq!(lp.mu, 0.0);
        assert_eq!(lp.b, 1.0);
    }

    #[test]
    fn pmf_closed_form_and_symmetry() {
        let lp = LaplaceParams { mu: 0.0, b: 1.0 };
        let p0 = discrete_laplace_pmf(&lp, 0);
        assert!((p0 - (1.0 - (-0.5f64).exp())).abs() < 1e-12);
        for v in 1..20 {
            assert!(
                (discrete_laplace_pmf(&lp, v) - discrete_laplace_pmf(&lp, -v)).abs() < 1e-15
            );
        }
    }

    #[test]
    fn zero_pyramid_rate_per_sample() {
        let (p, arch) = zero_arm(8);
        let tmpl = ContextTemplate::new(8).unwrap();
        let pyr = LatentPyramid::init(8, 8, 2).unwrap();
        let bits = rate_bits(&pyr, &p, &arch, &tmpl).unwrap();
        let per_sample = bits / pyr.total_elements() as f64;
        assert!((per_sample - 1.346).abs() < 1e-3, "per-sample {per_sample}");
    }

    #[test]
    fn rate_nonnegative_and_monotone_in_magnitude() {
        let arch = vec![LayerSpec::linear_res(8), LayerSpec::linear(8, 2)];
        let mut p = Parameters::new();
        init_stack(&mut p, "arm", &arch, 33);
        // keep mu near zero for the monotone-tail property: zero final layer
        p.get_mut("arm.1.w").unwrap().data.fill(0.0);
        p.get_mut("arm.1.b").unwrap().data.fill(0.0);
        let tmpl = ContextTemplate::new(8).unwrap();
        let mut pyr = LatentPyramid::init(4, 4, 1).unwrap();
        for (i, v) in pyr.grids[0].iter_mut().enumerate() {
            *v = (i as i32 % 5) - 2;
        }
        let r1 = rate_bits(&pyr, &p, &arch, &tmpl).unwrap();
        assert!(r1 >= 0.0);
        for v in pyr.grids[0].iter_mut() {
            *v *= 2;
        }
        let r2 = rate_bits(&pyr, &p, &arch, &tmpl).unwrap();
        assert!(r2 >= r1, "doubling magnitudes decreased rate: {r1} -> {r2}");
    }
}

//! Float-path decode pipeline on the autodiff tape. The encoder trains
//! through this path; the fixed-point path in [`super::fixed`] mirrors it
//! with integer arithmetic for bit-exact decoding.

use std::collections::HashMap;

use crate::arm::ContextTemplate;
use crate::error::{CodecError, Result};
use crate::latent::LatentPyramid;
use crate::tensor::layers::{forward_layer, LayerSpec};
use crate::tensor::{Parameters, Tape, Var};

use super::DecoderParams;

/// Name -> tape var map for a parameter collection.
pub struct Bound {
    pub vars: Vec<Var>,
    by_name: HashMap<String, Var>,
}

impl Bound {
    pub fn new(tape: &mut Tape, params: &Parameters) -> Self {
        let vars = params.bind(tape);
        let by_name = params
            .iter()
            .zip(&vars)
            .map(|((n, _), &v)| (n.to_string(), v))
            .collect();
        Bound { vars, by_name }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| CodecError::MissingParameter(name.to_string()))
    }
}

/// Run a linear or conv stack under `prefix`; the last layer skips ReLU.
pub fn run_stack(
    tape: &mut Tape,
    specs: &[LayerSpec],
    bound: &Bound,
    prefix: &str,
    input: Var,
) -> Result<Var> {
    let mut act = input;
    let last = specs.len() - 1;
    for (i, spec) in specs.iter().enumerate() {
        let w = bound.var(&format!("{prefix}.{i}.w"))?;
        let b = if spec.has_bias { Some(bound.var(&format!("{prefix}.{i}.b"))?) } else { None };
        act = forward_layer(tape, spec, w, b, act, i == last)?;
    }
    Ok(act)
}

/// Upsample a pyramid of per-level grid vars to a dense (L, H, W) stack.
/// Grid l passes l times through the shared stride-2 transpose conv,
/// cropped to the exact dims of the next-finer level at every step.
pub fn upsample(
    tape: &mut Tape,
    grids: &[Var],
    kernel: Var,
    dims: &[(usize, usize)],
) -> Var {
    let mut channels = Vec::with_capacity(grids.len());
    for (l, &g) in grids.iter().enumerate() {
        let mut cur = g;
        for step in (0..l).rev() {
            let (th, tw) = dims[step];
            cur = tape.tconv2x(cur, kernel, th, tw);
        }
        channels.push(cur);
    }
    tape.stack_channels(&channels)
}

/// Synthesis stack plus the final [0, 1] clamp.
pub fn synthesize(
    tape: &mut Tape,
    specs: &[LayerSpec],
    bound: &Bound,
    dense: Var,
) -> Result<Var> {
    let y = run_stack(tape, specs, bound, "syn", dense)?;
    Ok(tape.clamp01(y))
}

/// Estimated rate in bits of one grid var under the ARM (differentiable
/// when the grid is a proxy-quantized shadow).
pub fn arm_rate(
    tape: &mut Tape,
    arm_specs: &[LayerSpec],
    bound: &Bound,
    tmpl: &ContextTemplate,
    grid: Var,
) -> Result<Var> {
    let ctx = tape.gather_ctx(grid, &tmpl.offsets);
    let out = run_stack(tape, arm_specs, bound, "arm", ctx)?;
    let mu = tape.col(out, 0);
    let braw = tape.col(out, 1);
    Ok(tape.laplace_rate(grid, mu, braw))
}

/// Float reference decode of an integer pyramid (no gradients). Returns
/// the clamped (3, H, W) image in [0, 1].
pub fn decode_float(pyramid: &LatentPyramid, dp: &DecoderParams) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, &dp.params);
    let dims: Vec<(usize, usize)> = (0..pyramid.levels()).map(|l| pyramid.dims(l)).collect();
    let grids: Vec<Var> = (0..pyramid.levels())
        .map(|l| {
            let (h, w) = dims[l];
            let data: Vec<f32> = pyramid.grids[l].iter().map(|&v| v as f32).collect();
            tape.leaf(vec![h, w], data)
        })
        .collect();
    let dense = upsample(&mut tape, &grids, bound.var("ups.kernel")?, &dims);
    let img = synthesize(&mut tape, &dp.arch.synth, &bound, dense)?;
    Ok(tape.value(img).to_vec())
}

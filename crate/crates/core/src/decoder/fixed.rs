//! Deterministic fixed-point decode path.
//!
//! The bitstream stores quantized integer weights; the ARM, upsampling
//! and synthesis all run in Q16.16 integer arithmetic so the decoded
//! output is bit-identical across machines. The encoder uses this same
//! path for latent coding and for its reported reconstruction.

use std::collections::HashMap;

use crate::arm::ContextTemplate;
use crate::entropy::bitstream::{
    read_module_section, write_module_section, Bitstream, BitstreamHeader, FLAG_NO_PARAMS,
    VERSION,
};
use crate::entropy::pmf::{build_laplace_pmf, PMF_TOTAL};
use crate::entropy::range::{cumulative, find_symbol, RangeDecoder, RangeEncoder};
use crate::entropy::{code_module, decode_module, QuantizedModule};
use crate::error::{CodecError, Result};
use crate::latent::LatentPyramid;
use crate::tensor::layers::{LayerKind, LayerSpec};
use crate::tensor::{LAPLACE_LN_B_MAX, LAPLACE_LN_B_MIN};

use super::{arch, ArchId, ComplexityReport, DecoderArch, StageTimings};

const FX_ONE: i64 = 1 << 16;

/// Wall clock in ms; zero where no monotonic clock exists (wasm).
#[cfg(not(target_arch = "wasm32"))]
fn now() -> Option<std::time::Instant> {
    Some(std::time::Instant::now())
}
#[cfg(target_arch = "wasm32")]
fn now() -> Option<std::time::Instant> {
    None
}

fn elapsed_ms(t: Option<std::time::Instant>) -> f64 {
    t.map(|t| t.elapsed().as_secs_f64() * 1e3).unwrap_or(0.0)
}

struct FixedLayer {
    spec: LayerSpec,
    w: Vec<i64>,
    b: Vec<i64>,
}

/// Decoder with all weights in Q16.16, built from quantized modules.
pub struct FixedDecoder {
    pub arch: DecoderArch,
    arm: Vec<FixedLayer>,
    ups_kern: Vec<i64>,
    synth: Vec<FixedLayer>,
}

fn to_fx(q: i32, step_exp: u8) -> i64 {
    debug_assert!(step_exp <= 16);
    (q as i64) << (16 - step_exp as i64)
}

fn split_stack(specs: &[LayerSpec], qm: &QuantizedModule, off: &mut usize) -> Vec<FixedLayer> {
    let mut layers = Vec::with_capacity(specs.len());
    for spec in specs {
        let nw = spec.in_feat * spec.out_feat * spec.kernel * spec.kernel;
        let w: Vec<i64> =
            qm.ints[*off..*off + nw].iter().map(|&q| to_fx(q, qm.step_exp)).collect();
        *off += nw;
        let b: Vec<i64> = if spec.has_bias {
            let b = qm.ints[*off..*off + spec.out_feat]
                .iter()
                .map(|&q| to_fx(q, qm.step_exp))
                .collect();
            *off += spec.out_feat;
            b
        } else {
            vec![0; spec.out_feat]
        };
        layers.push(FixedLayer { spec: *spec, w, b });
    }
    layers
}

impl FixedDecoder {
    pub fn new(arch: DecoderArch, modules: &[QuantizedModule; 3]) -> Result<Self> {
        let counts = arch.module_counts();
        for (i, qm) in modules.iter().enumerate() {
            if qm.ints.len() != counts[i] {
                return Err(CodecError::Bitstream(format!(
                    "module {i} carries {} params, expected {}",
                    qm.ints.len(),
                    counts[i]
                )));
            }
        }
        let mut off = 0;
        let arm = split_stack(&arch.arm, &modules[0], &mut off);
        let k = arch.ups_kernel();
        let ups_kern: Vec<i64> =
            modules[1].ints.iter().map(|&q| to_fx(q, modules[1].step_exp)).collect();
        debug_assert_eq!(ups_kern.len(), k * k);
        let mut off = 0;
        let synth = split_stack(&arch.synth, &modules[2], &mut off);
        Ok(FixedDecoder { arch, arm, ups_kern, synth })
    }

    /// ARM MLP on a Q16.16 context; returns (mu, braw) in Q16.16.
    pub fn arm_eval(&self, ctx: &[i64]) -> (i64, i64) {
        let mut act = ctx.to_vec();
        let last = self.arm.len() - 1;
        for (i, layer) in self.arm.iter().enumerate() {
            let (fin, fout) = (layer.spec.in_feat, layer.spec.out_feat);
            let mut out = vec![0i64; fout];
            for o in 0..fout {
                let mut acc: i64 = 0;
                for j in 0..fin {
                    acc += act[j] * layer.w[j * fout + o] >> 16;
                }
                acc += layer.b[o];
                if layer.spec.kind == LayerKind::LinearResidual {
                    acc += act[o];
                }
                out[o] = acc;
            }
            if i != last {
                for v in &mut out {
                    *v = (*v).max(0);
                }
            }
            act = out;
        }
        (act[0], act[1])
    }

    /// Coding distribution for one sample, from fixed-point ARM outputs.
    pub fn sample_pmf(
        &self,
        mu_fx: i64,
        braw_fx: i64,
        amin: i32,
        amax: i32,
        cache: &mut HashMap<(i64, i64), Vec<u32>>,
    ) -> Vec<u32> {
        if let Some(f) = cache.get(&(mu_fx, braw_fx)) {
            return f.clone();
        }
        let mu = mu_fx as f64 / FX_ONE as f64;
        let braw = (braw_fx as f64 / FX_ONE as f64)
            .clamp(LAPLACE_LN_B_MIN as f64, LAPLACE_LN_B_MAX as f64);
        let b = crate::entropy::pmf::det_exp(braw);
        let f = build_laplace_pmf(mu, b, amin, amax);
        cache.insert((mu_fx, braw_fx), f.clone());
        f
    }

    /// Upsample integer grids to dense Q16.16 channels at (h, w).
    pub fn upsample(&self, pyramid: &LatentPyramid) -> Vec<Vec<i64>> {
        let k = self.arch.ups_kernel();
        let dims: Vec<(usize, usize)> = (0..pyramid.levels()).map(|l| pyramid.dims(l)).collect();
        let mut channels = Vec::with_capacity(pyramid.levels());
        for l in 0..pyramid.levels() {
            let mut cur: Vec<i64> =
                pyramid.grids[l].iter().map(|&v| (v as i64) << 16).collect();
            let (mut ch, mut cw) = dims[l];
            for step in (0..l).rev() {
                let (th, tw) = dims[step];
                cur = tconv2x_fixed(&cur, &self.ups_kern, k, ch, cw, th, tw);
                ch = th;
                cw = tw;
            }
            channels.push(cur);
        }
        channels
    }

    /// Synthesis on dense Q16.16 channels; returns planar RGB8 (3, h, w).
    pub fn synthesize(&self, dense: &[Vec<i64>], h: usize, w: usize) -> Vec<u8> {
        let mut act: Vec<i64> = Vec::with_capacity(dense.len() * h * w);
        for c in dense {
            act.extend_from_slice(c);
        }
        let last = self.synth.len() - 1;
        for (i, layer) in self.synth.iter().enumerate() {
            let mut out = conv2d_fixed(&act, layer, h, w);
            if layer.spec.kind == LayerKind::ConvResidual {
                for (o, a) in out.iter_mut().zip(&act) {
                    *o += a;
                }
            }
            if i != last {
                for v in &mut out {
                    *v = (*v).max(0);
                }
            }
            act = out;
        }
        act.iter()
            .map(|&v| {
                let c = v.clamp(0, FX_ONE);
                ((c * 255 + (FX_ONE >> 1)) >> 16) as u8
            })
            .collect()
    }

    /// Full integer-path reconstruction of a pyramid.
    pub fn reconstruct(&self, pyramid: &LatentPyramid) -> Vec<u8> {
        let dense = self.upsample(pyramid);
        self.synthesize(&dense, pyramid.h, pyramid.w)
    }
}

fn conv2d_fixed(x: &[i64], layer: &FixedLayer, h: usize, w: usize) -> Vec<i64> {
    let (cin, cout, k) = (layer.spec.in_feat, layer.spec.out_feat, layer.spec.kernel);
    let p = (k / 2) as i64;
    let clamp = |v: i64, max: usize| v.clamp(0, max as i64 - 1) as usize;
    let mut out = vec![0i64; cout * h * w];
    for co in 0..cout {
        for y in 0..h {
            for x_ in 0..w {
                let mut acc: i64 = 0;
                for ci in 0..cin {
                    for ky in 0..k {
                        let sy = clamp(y as i64 + ky as i64 - p, h);
                        for kx in 0..k {
                            let sx = clamp(x_ as i64 + kx as i64 - p, w);
                            acc += x[ci * h * w + sy * w + sx]
                                * layer.w[((co * cin + ci) * k + ky) * k + kx]
                                >> 16;
                        }
                    }
                }
                out[co * h * w + y * w + x_] = acc + layer.b[co];
            }
        }
    }
    out
}

fn tconv2x_fixed(
    x: &[i64],
    kern: &[i64],
    k: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<i64> {
    let c = (k / 2) as i64 - 1;
    let clamp = |v: i64, max: usize| v.clamp(0, max as i64 - 1) as usize;
    let mut out = vec![0i64; out_h * out_w];
    for oy in 0..out_h {
        for ox in 0..out_w {
            let mut acc: i64 = 0;
            for ty in 0..k {
                let ny = oy as i64 + c - ty as i64;
                if ny & 1 != 0 {
                    continue;
                }
                let sy = clamp(ny >> 1, in_h);
                for tx in 0..k {
                    let nx = ox as i64 + c - tx as i64;
                    if nx & 1 != 0 {
                        continue;
                    }
                    let sx = clamp(nx >> 1, in_w);
                    acc += kern[ty * k + tx] * x[sy * in_w + sx] >> 16;
                }
            }
            out[oy * out_w + ox] = acc;
        }
    }
    out
}

/// Alphabet bounds of one integer grid.
pub fn grid_alphabet(grid: &[i32]) -> (i16, i16) {
    let mn = grid.iter().copied().min().unwrap_or(0).clamp(i16::MIN as i32, i16::MAX as i32);
    let mx = grid.iter().copied().max().unwrap_or(0).clamp(i16::MIN as i32, i16::MAX as i32);
    (mn as i16, mx as i16)
}

fn context_fx(
    decoded: &[i32],
    h: usize,
    w: usize,
    y: usize,
    x: usize,
    tmpl: &ContextTemplate,
) -> Vec<i64> {
    tmpl.offsets
        .iter()
        .map(|&(dy, dx)| {
            let (ny, nx) = (y as i64 + dy as i64, x as i64 + dx as i64);
            if ny >= 0 && ny < h as i64 && nx >= 0 && nx < w as i64 {
                (decoded[ny as usize * w + nx as usize] as i64) << 16
            } else {
                0
            }
        })
        .collect()
}

/// ARM-driven range coding of one grid in raster order.
pub fn encode_grid(
    fd: &FixedDecoder,
    grid: &[i32],
    h: usize,
    w: usize,
    tmpl: &ContextTemplate,
    amin: i16,
    amax: i16,
) -> Result<Vec<u8>> {
    let mut enc = RangeEncoder::new();
    let mut cache = HashMap::new();
    for y in 0..h {
        for x in 0..w {
            let ctx = context_fx(grid, h, w, y, x, tmpl);
            let (mu, braw) = fd.arm_eval(&ctx);
            let freqs = fd.sample_pmf(mu, braw, amin as i32, amax as i32, &mut cache);
            let idx = grid[y * w + x] - amin as i32;
            if idx < 0 || idx as usize >= freqs.len() {
                return Err(CodecError::SymbolOutOfRange(
                    grid[y * w + x],
                    amin as i32,
                    amax as i32,
                ));
            }
            let cum = cumulative(&freqs);
            enc.encode(cum[idx as usize], freqs[idx as usize]);
        }
    }
    Ok(enc.finish())
}

pub fn decode_grid(
    fd: &FixedDecoder,
    bytes: &[u8],
    h: usize,
    w: usize,
    tmpl: &ContextTemplate,
    amin: i16,
    amax: i16,
) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(bytes);
    let mut cache = HashMap::new();
    let mut grid = vec![0i32; h * w];
    for y in 0..h {
        for x in 0..w {
            let ctx = context_fx(&grid, h, w, y, x, tmpl);
            let (mu, braw) = fd.arm_eval(&ctx);
            let freqs = fd.sample_pmf(mu, braw, amin as i32, amax as i32, &mut cache);
            let cum = cumulative(&freqs);
            let idx = find_symbol(&cum, dec.decode_cum());
            dec.update(cum[idx], freqs[idx]);
            grid[y * w + x] = amin as i32 + idx as i32;
        }
    }
    dec.finish()?;
    Ok(grid)
}

/// Ideal bits of a grid under the quantized coding pmfs.
pub fn grid_rate_bits(
    fd: &FixedDecoder,
    grid: &[i32],
    h: usize,
    w: usize,
    tmpl: &ContextTemplate,
    amin: i16,
    amax: i16,
) -> f64 {
    let mut cache = HashMap::new();
    let mut bits = 0.0;
    for y in 0..h {
        for x in 0..w {
            let ctx = context_fx(grid, h, w, y, x, tmpl);
            let (mu, braw) = fd.arm_eval(&ctx);
            let freqs = fd.sample_pmf(mu, braw, amin as i32, amax as i32, &mut cache);
            let f = freqs[(grid[y * w + x] - amin as i32) as usize];
            bits -= (f as f64 / PMF_TOTAL as f64).log2();
        }
    }
    bits
}

/// Assemble a full bitstream from quantized modules and a hardened
/// pyramid.
pub fn build_bitstream(
    arch_id: ArchId,
    pyramid: &LatentPyramid,
    modules: Option<&[QuantizedModule; 3]>,
    fd: &FixedDecoder,
) -> Result<Bitstream> {
    let tmpl = fd.arch.context_template();
    let l = pyramid.levels();
    let mut alphabets = Vec::with_capacity(l);
    let mut grid_bytes = Vec::with_capacity(l);
    for i in 0..l {
        let (h, w) = pyramid.dims(i);
        let (amin, amax) = grid_alphabet(&pyramid.grids[i]);
        let bytes = encode_grid(fd, &pyramid.grids[i], h, w, &tmpl, amin, amax)?;
        alphabets.push((amin, amax));
        grid_bytes.push(bytes);
    }
    let (param_bytes, step_exps, flags) = match modules {
        Some(modules) => {
            let mut out = Vec::new();
            for qm in modules {
                let coded = code_module(qm)?;
                write_module_section(&mut out, qm.min, qm.max, qm.scale_fx, &coded);
            }
            let exps = [modules[0].step_exp, modules[1].step_exp, modules[2].step_exp];
            (out, exps, 0u8)
        }
        None => (Vec::new(), [0, 0, 0], FLAG_NO_PARAMS),
    };
    let header = BitstreamHeader {
        version: VERSION,
        flags,
        h: pyramid.h as u16,
        w: pyramid.w as u16,
        l: l as u8,
        arch_id: arch_id.to_u8(),
        step_exps,
        alphabets,
        param_len: param_bytes.len() as u32,
        grid_lens: grid_bytes.iter().map(|g| g.len() as u32).collect(),
    };
    Ok(Bitstream { header, param_bytes, grid_bytes })
}

/// A decoded image plus its complexity/timing report.
pub struct DecodedImage {
    pub h: usize,
    pub w: usize,
    /// Planar RGB8, 3 x h x w.
    pub rgb: Vec<u8>,
    pub pyramid: LatentPyramid,
    pub report: ComplexityReport,
}

/// Decode a bitstream. `shared` supplies the decoder modules for
/// no-params streams (non-overfitted mode).
pub fn decode_image(data: &[u8], shared: Option<&[QuantizedModule; 3]>) -> Result<DecodedImage> {
    let t_total = now();
    let bs = Bitstream::parse(data)?;
    let hdr = &bs.header;
    let arch_id = ArchId::from_u8(hdr.arch_id)?;
    let dec_arch = arch(arch_id, hdr.l as usize);
    let counts = dec_arch.module_counts();

    let modules: [QuantizedModule; 3] = if hdr.no_params() {
        match shared {
            Some(m) => m.clone(),
            None => {
                return Err(CodecError::Bitstream(
                    "stream has no parameter section; shared decoder parameters required".into(),
                ))
            }
        }
    } else {
        let mut pos = 0;
        let mut out = Vec::with_capacity(3);
        for (i, &count) in counts.iter().enumerate() {
            let (mn, mx, scale, bytes) = read_module_section(&bs.param_bytes, &mut pos)?;
            out.push(decode_module(&bytes, count, hdr.step_exps[i], scale, mn, mx)?);
        }
        if pos != bs.param_bytes.len() {
            return Err(CodecError::Bitstream("parameter section length mismatch".into()));
        }
        out.try_into().map_err(|_| CodecError::Bitstream("module count".into()))?
    };

    let fd = FixedDecoder::new(dec_arch, &modules)?;
    let tmpl = fd.arch.context_template();

    let t_arm = now();
    let mut pyramid = LatentPyramid::init(hdr.h as usize, hdr.w as usize, hdr.l as usize)?;
    if pyramid.levels() != hdr.l as usize {
        return Err(CodecError::Bitstream("grid count inconsistent with dims".into()));
    }
    for l in 0..pyramid.levels() {
        let (h, w) = pyramid.dims(l);
        let (amin, amax) = hdr.alphabets[l];
        pyramid.grids[l] = decode_grid(&fd, &bs.grid_bytes[l], h, w, &tmpl, amin, amax)?;
    }
    let arm_ms = elapsed_ms(t_arm);

    let t_ups = now();
    let dense = fd.upsample(&pyramid);
    let upsample_ms = elapsed_ms(t_ups);

    let t_syn = now();
    let rgb = fd.synthesize(&dense, pyramid.h, pyramid.w);
    let synthesis_ms = elapsed_ms(t_syn);

    let mut report = super::mac_per_pixel(&fd.arch, pyramid.levels());
    report.timings = StageTimings {
        arm_ms,
        upsample_ms,
        synthesis_ms,
        total_ms: elapsed_ms(t_total),
    };
    Ok(DecodedImage { h: pyramid.h, w: pyramid.w, rgb, pyramid, report })
}

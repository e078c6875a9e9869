//! Non-overfitted mode: a feed-forward analysis transform producing the
//! latent pyramid in one pass, trained jointly with a shared decoder over
//! an image set. Streams produced this way omit the parameter section;
//! both ends derive the shared decoder from a checkpoint.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::decoder::fixed::{build_bitstream, decode_image, DecodedImage, FixedDecoder};
use crate::decoder::pipeline::{arm_rate, synthesize, upsample, Bound};
use crate::decoder::{arch, ArchId, DecoderArch, DecoderParams};
use crate::entropy::params::quantize_module;
use crate::entropy::QuantizedModule;
use crate::error::{CodecError, Result};
use crate::latent::{grid_dims, quantize_hard, LatentPyramid, MAX_GRIDS};
use crate::ppm::Image8;
use crate::tensor::adam::{adam_step, AdamConfig, AdamState};
use crate::tensor::layers::init_uniform;
use crate::tensor::{Parameters, Tape, Tensor, Var};

/// Weight-quantization step exponent for the shared decoder; fixed so
/// both ends derive identical integer weights from a checkpoint.
pub const NO_STEP_EXP: u8 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnalysisSpec {
    pub l: usize,
    pub c: usize,
    pub blocks_per_level: usize,
    pub expansion: usize,
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        AnalysisSpec { l: 7, c: 64, blocks_per_level: 2, expansion: 4 }
    }
}

impl AnalysisSpec {
    pub fn validate(&self) -> Result<()> {
        if self.l == 0 || self.l > MAX_GRIDS || self.c == 0 || self.expansion == 0 {
            return Err(CodecError::Invalid("bad analysis spec".into()));
        }
        Ok(())
    }

    /// Largest level count whose coarsest grid is reachable by repeated
    /// halving of this input.
    pub fn clamp_l(&self, h: usize, w: usize) -> usize {
        let mut l = 1;
        while l < self.l && h.min(w) >= 1 << l {
            l += 1;
        }
        l
    }
}

const DW_K: usize = 7;

/// Forward-pass multiplies of the transform per input pixel, same
/// counting convention as the decoder (biases and pooling free, level l
/// weighted 4^-l).
pub fn analysis_mac_per_pixel(spec: &AnalysisSpec) -> f64 {
    let c = spec.c as f64;
    let dw = (DW_K * DW_K) as f64 * c;
    let pw = 2.0 * spec.expansion as f64 * c * c;
    let mut total = 3.0 * c; // stem
    for l in 0..spec.l {
        let wgt = 0.25f64.powi(l as i32);
        if l > 0 {
            // downsample block: strided depthwise + pointwise pair,
            // 1x1 conv on the pooled identity branch
            total += (dw + pw + c * c) * wgt;
        }
        total += spec.blocks_per_level as f64 * (dw + pw) * wgt;
        total += c * wgt; // merge conv
    }
    total
}

fn conv_t(rng: &mut ChaCha20Rng, cout: usize, cin: usize, k: usize) -> Tensor {
    let n = cout * cin * k * k;
    Tensor {
        shape: vec![cout, cin, k, k],
        data: init_uniform(rng, cin * k * k, n),
        requires_grad: true,
        grad: None,
    }
}

fn dw_t(rng: &mut ChaCha20Rng, c: usize, k: usize) -> Tensor {
    Tensor {
        shape: vec![c, k, k],
        data: init_uniform(rng, k * k, c * k * k),
        requires_grad: true,
        grad: None,
    }
}

fn bias_t(c: usize) -> Tensor {
    Tensor::zeros(vec![c]).with_grad()
}

/// Fresh transform weights under the `ana.` prefix, seeded.
pub fn init_analysis(spec: &AnalysisSpec, seed: u64) -> Parameters {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0xA7A);
    let (c, e) = (spec.c, spec.c * spec.expansion);
    let mut p = Parameters::new();
    let put = |p: &mut Parameters, name: String, w: Tensor, bc: usize| {
        p.insert(&format!("{name}.w"), w);
        p.insert(&format!("{name}.b"), bias_t(bc));
    };
    put(&mut p, "ana.stem".into(), conv_t(&mut rng, c, 3, 1), c);
    for l in 0..spec.l {
        if l > 0 {
            put(&mut p, format!("ana.down{l}.dw"), dw_t(&mut rng, c, DW_K), c);
            put(&mut p, format!("ana.down{l}.pw1"), conv_t(&mut rng, e, c, 1), e);
            put(&mut p, format!("ana.down{l}.pw2"), conv_t(&mut rng, c, e, 1), c);
            put(&mut p, format!("ana.down{l}.skip"), conv_t(&mut rng, c, c, 1), c);
        }
        for b in 0..spec.blocks_per_level {
            put(&mut p, format!("ana.blk{l}.{b}.dw"), dw_t(&mut rng, c, DW_K), c);
            put(&mut p, format!("ana.blk{l}.{b}.pw1"), conv_t(&mut rng, e, c, 1), e);
            put(&mut p, format!("ana.blk{l}.{b}.pw2"), conv_t(&mut rng, c, e, 1), c);
        }
        put(&mut p, format!("ana.merge{l}"), conv_t(&mut rng, 1, c, 1), 1);
    }
    p
}

fn wb(bound: &Bound, name: &str) -> Result<(Var, Var)> {
    Ok((bound.var(&format!("{name}.w"))?, bound.var(&format!("{name}.b"))?))
}

/// Depthwise + expand/contract pointwise pair; residual when stride 1,
/// pooled 1x1 identity branch when stride 2.
fn block(
    tape: &mut Tape,
    bound: &Bound,
    name: &str,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let (dw_w, dw_b) = wb(bound, &format!("{name}.dw"))?;
    let (p1w, p1b) = wb(bound, &format!("{name}.pw1"))?;
    let (p2w, p2b) = wb(bound, &format!("{name}.pw2"))?;
    let mut a = tape.dwconv2d(x, dw_w, dw_b, stride);
    a = tape.conv2d_relu(a, p1w, p1b);
    a = tape.conv2d(a, p2w, p2b);
    let skip = if stride == 1 {
        x
    } else {
        let (sw, sb) = wb(bound, &format!("{name}.skip"))?;
        let pooled = tape.avgpool2(x);
        tape.conv2d(pooled, sw, sb)
    };
    Ok(tape.add(a, skip))
}

/// Run the transform on the tape; returns one (h_l, w_l) grid var per
/// level, finest first.
pub fn analyze_on_tape(
    tape: &mut Tape,
    bound: &Bound,
    spec: &AnalysisSpec,
    input: Var,
    l_eff: usize,
) -> Result<Vec<Var>> {
    let (h, w) = (tape.shape(input)[1], tape.shape(input)[2]);
    let (stem_w, stem_b) = wb(bound, "ana.stem")?;
    let mut a = tape.conv2d_relu(input, stem_w, stem_b);
    let mut grids = Vec::with_capacity(l_eff);
    for l in 0..l_eff {
        if l > 0 {
            a = block(tape, bound, &format!("ana.down{l}"), a, 2)?;
        }
        for b in 0..spec.blocks_per_level {
            a = block(tape, bound, &format!("ana.blk{l}.{b}"), a, 1)?;
        }
        let (mw, mb) = wb(bound, &format!("ana.merge{l}"))?;
        let g = tape.conv2d(a, mw, mb);
        let (gh, gw) = grid_dims(h, w, l);
        grids.push(tape.reshape(g, vec![gh, gw]));
    }
    Ok(grids)
}

/// Single forward pass: image -> latent pyramid (continuous shadow plus
/// hardened integer grids).
pub fn analyze(img: &Image8, alpha: &Parameters, spec: &AnalysisSpec) -> Result<LatentPyramid> {
    spec.validate()?;
    let l_eff = spec.clamp_l(img.h, img.w);
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, alpha);
    let input = tape.leaf(vec![3, img.h, img.w], img.to_f32());
    let grids = analyze_on_tape(&mut tape, &bound, spec, input, l_eff)?;
    let mut p = LatentPyramid::init(img.h, img.w, l_eff)?.with_shadow();
    for (l, &g) in grids.iter().enumerate() {
        let vals = tape.value(g);
        p.grids[l] = vals.iter().map(|&v| quantize_hard(v).0).collect();
        if let Some(shadow) = &mut p.shadow {
            shadow[l] = vals.to_vec();
        }
    }
    Ok(p)
}

/// Shared-decoder checkpoint: transform + float decoder weights for one
/// rate point.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub spec: AnalysisSpec,
    pub arch_id: ArchId,
    pub lambda: f64,
    pub alpha: Parameters,
    pub decoder: Parameters,
}

impl Checkpoint {
    /// Quantized decoder modules, derived identically on both ends.
    pub fn modules(&self) -> Result<[QuantizedModule; 3]> {
        Ok([
            quantize_module(&self.decoder, "arm.", NO_STEP_EXP)?,
            quantize_module(&self.decoder, "ups.", NO_STEP_EXP)?,
            quantize_module(&self.decoder, "syn.", NO_STEP_EXP)?,
        ])
    }

    pub fn dec_arch(&self, l_grids: usize) -> DecoderArch {
        arch(self.arch_id, l_grids)
    }
}

const CKPT_MAGIC: [u8; 4] = *b"MCHC";
const CKPT_VERSION: u8 = 1;

fn write_params(out: &mut Vec<u8>, p: &Parameters) {
    out.extend_from_slice(&(p.len() as u32).to_le_bytes());
    for (name, t) in p.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Rd<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Rd<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(CodecError::Invalid("truncated checkpoint".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn read_params(r: &mut Rd) -> Result<Parameters> {
    let count = r.u32()? as usize;
    let mut p = Parameters::new();
    for _ in 0..count {
        let nlen = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| CodecError::Invalid("bad checkpoint name".into()))?
            .to_string();
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f32::from_le_bytes(r.take(4)?.try_into().unwrap()));
        }
        p.insert(&name, Tensor::new(shape, data)?.with_grad());
    }
    Ok(p)
}

impl Checkpoint {
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CKPT_MAGIC);
        out.push(CKPT_VERSION);
        out.extend_from_slice(&self.lambda.to_le_bytes());
        out.push(self.spec.l as u8);
        out.extend_from_slice(&(self.spec.c as u16).to_le_bytes());
        out.push(self.spec.blocks_per_level as u8);
        out.push(self.spec.expansion as u8);
        out.push(self.arch_id.to_u8());
        write_params(&mut out, &self.alpha);
        write_params(&mut out, &self.decoder);
        out
    }

    pub fn parse(data: &[u8]) -> Result<Self> {
        let mut r = Rd { data, pos: 0 };
        if r.take(4)? != CKPT_MAGIC {
            return Err(CodecError::Invalid("not a checkpoint file".into()));
        }
        if r.u8()? != CKPT_VERSION {
            return Err(CodecError::Invalid("unsupported checkpoint version".into()));
        }
        let lambda = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let spec = AnalysisSpec {
            l: r.u8()? as usize,
            c: r.u16()? as usize,
            blocks_per_level: r.u8()? as usize,
            expansion: r.u8()? as usize,
        };
        spec.validate()?;
        let arch_id = ArchId::from_u8(r.u8()?)?;
        let alpha = read_params(&mut r)?;
        let decoder = read_params(&mut r)?;
        if r.pos != data.len() {
            return Err(CodecError::Invalid("trailing checkpoint bytes".into()));
        }
        Ok(Checkpoint { spec, arch_id, lambda, alpha, decoder })
    }
}

#[derive(Debug, Clone)]
pub struct NoTrainConfig {
    pub spec: AnalysisSpec,
    pub arch_id: ArchId,
    pub steps: u64,
    pub lr_start: f32,
    pub lr_floor: f32,
    pub patience: u32,
    pub seed: u64,
}

impl Default for NoTrainConfig {
    fn default() -> Self {
        NoTrainConfig {
            spec: AnalysisSpec::default(),
            arch_id: ArchId::A2300,
            steps: 2000,
            lr_start: 1e-3,
            lr_floor: 1e-6,
            patience: 100,
            seed: 0,
        }
    }
}

/// Result of one non-overfitted training run: checkpoint plus the
/// per-step total-cost history.
pub struct NoTrainRun {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
}

/// Train transform + shared decoder on a patch set for one lambda.
/// Diverging steps halve the learning rate and resume from the last
/// snapshot; training stops when the rate drops below the floor.
pub fn train_no(patches: &[Image8], lambda: f64, cfg: &NoTrainConfig) -> Result<NoTrainRun> {
    cfg.spec.validate()?;
    if patches.is_empty() {
        return Err(CodecError::Invalid("train_no needs at least one patch".into()));
    }
    if !(lambda > 0.0) {
        return Err(CodecError::Invalid("lambda must be positive".into()));
    }
    let l_eff = patches
        .iter()
        .map(|p| cfg.spec.clamp_l(p.h, p.w))
        .min()
        .unwrap();
    let dec_arch = arch(cfg.arch_id, l_eff);
    let dp = DecoderParams::init(&dec_arch, cfg.seed);
    let mut all = init_analysis(&cfg.spec, cfg.seed);
    for (name, t) in dp.params.iter() {
        all.insert(name, t.clone());
    }

    let mut adam = AdamState::new();
    let mut lr = cfg.lr_start;
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    let mut best = f64::INFINITY;
    let mut since_best = 0u32;
    let mut snapshot = (all.clone(), adam.clone());
    let mut step = 0u64;
    while step < cfg.steps {
        let img = &patches[(step as usize) % patches.len()];
        let dims: Vec<(usize, usize)> = (0..l_eff).map(|l| grid_dims(img.h, img.w, l)).collect();

        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &all);
        let input = tape.leaf(vec![3, img.h, img.w], img.to_f32());
        let grids = analyze_on_tape(&mut tape, &bound, &cfg.spec, input, l_eff)?;
        let mut rng = ChaCha20Rng::seed_from_u64(
            cfg.seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let qgrids: Vec<Var> = grids.iter().map(|&g| tape.add_noise(g, &mut rng)).collect();
        let dense = upsample(&mut tape, &qgrids, bound.var("ups.kernel")?, &dims);
        let xhat = synthesize(&mut tape, &dec_arch.synth, &bound, dense)?;
        let target = tape.leaf(vec![3, img.h, img.w], img.to_f32());
        let mse = tape.mse_loss(xhat, target);
        let tmpl = dec_arch.context_template();
        let mut rate = None;
        for &q in &qgrids {
            let r = arm_rate(&mut tape, &dec_arch.arm, &bound, &tmpl, q)?;
            rate = Some(match rate {
                None => r,
                Some(acc) => tape.add(acc, r),
            });
        }
        let rate = rate.expect("grids");
        let per_px = tape.scale(rate, (lambda / (img.h * img.w) as f64) as f32);
        let loss = tape.add(mse, per_px);
        let total = tape.scalar(loss) as f64;

        if tape.backward(loss).is_err() {
            lr *= 0.5;
            log::warn!("train_no diverged at step {step}; lr -> {lr:.2e}, resuming snapshot");
            if lr < cfg.lr_floor {
                break;
            }
            all = snapshot.0.clone();
            adam = snapshot.1.clone();
            continue;
        }
        all.absorb_grads(&tape, &bound.vars);
        adam_step(&mut all, &AdamConfig { lr, ..AdamConfig::default() }, &mut adam)?;
        all.clear_grads();
        losses.push(total);
        step += 1;

        if total < best {
            best = total;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                lr *= 0.5;
                since_best = 0;
                if lr < cfg.lr_floor {
                    log::info!("train_no: lr under floor at step {step}, terminating");
                    break;
                }
            }
        }
        if step % 100 == 0 {
            snapshot = (all.clone(), adam.clone());
            log::info!("train_no step {step}/{}: loss {total:.6}, lr {lr:.2e}", cfg.steps);
        }
    }

    let mut alpha = Parameters::new();
    let mut decoder = Parameters::new();
    for (name, t) in all.iter() {
        if name.starts_with("ana.") {
            alpha.insert(name, t.clone());
        } else {
            decoder.insert(name, t.clone());
        }
    }
    Ok(NoTrainRun {
        checkpoint: Checkpoint { spec: cfg.spec, arch_id: cfg.arch_id, lambda, alpha, decoder },
        losses,
    })
}

/// Encode an image with a shared-decoder checkpoint. The stream omits
/// the parameter section; returns (bytes, integer-path reconstruction).
pub fn no_encode(img: &Image8, ckpt: &Checkpoint) -> Result<(Vec<u8>, Vec<u8>)> {
    let pyramid = analyze(img, &ckpt.alpha, &ckpt.spec)?;
    let modules = ckpt.modules()?;
    let fd = FixedDecoder::new(ckpt.dec_arch(pyramid.levels()), &modules)?;
    let rgb = fd.reconstruct(&pyramid);
    let bs = build_bitstream(ckpt.arch_id, &pyramid, None, &fd)?;
    Ok((bs.serialize(), rgb))
}

/// Decode a no-params stream using the checkpoint's shared decoder.
pub fn no_decode(data: &[u8], ckpt: &Checkpoint) -> Result<DecodedImage> {
    decode_image(data, Some(&ckpt.modules()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_patch(h: usize, w: usize, seed: u32) -> Image8 {
        let mut rgb = vec![0u8; 3 * h * w];
        for (i, v) in rgb.iter_mut().enumerate() {
            let x = (i as u32).wrapping_mul(2654435761).wrapping_add(seed);
            *v = ((x >> 13) & 0x7F) as u8 + 64;
        }
        Image8::new(h, w, rgb).unwrap()
    }

    fn tiny_spec() -> AnalysisSpec {
        AnalysisSpec { l: 3, c: 4, blocks_per_level: 1, expansion: 2 }
    }

    #[test]
    fn zero_alpha_gives_zero_pyramid() {
        let spec = tiny_spec();
        let mut alpha = init_analysis(&spec, 1);
        for (_, t) in alpha.iter_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let img = test_patch(16, 16, 7);
        let p = analyze(&img, &alpha, &spec).unwrap();
        assert!(p.grids.iter().all(|g| g.iter().all(|&v| v == 0)));
    }

    #[test]
    fn grid_dims_match_pyramid_contract() {
        let spec = tiny_spec();
        let alpha = init_analysis(&spec, 2);
        for (h, w) in [(16, 16), (17, 31), (8, 24)] {
            let p = analyze(&test_patch(h, w, 1), &alpha, &spec).unwrap();
            let want = LatentPyramid::init(h, w, p.levels()).unwrap();
            for l in 0..p.levels() {
                assert_eq!(p.dims(l), want.dims(l), "{h}x{w} level {l}");
                assert_eq!(p.grids[l].len(), want.grids[l].len());
            }
        }
    }

    #[test]
    fn l_clamps_on_small_inputs() {
        let spec = AnalysisSpec { l: 7, ..tiny_spec() };
        assert_eq!(spec.clamp_l(256, 256), 7);
        assert_eq!(spec.clamp_l(32, 32), 6);
        assert_eq!(spec.clamp_l(8, 200), 4);
    }

    #[test]
    fn mac_default_in_band_and_additive() {
        let m = analysis_mac_per_pixel(&AnalysisSpec::default());
        assert!(m > 80_000.0 && m < 320_000.0, "default spec {m} MAC/px");

        // C=1, one block, L=1: stem 3 + block (49 + 2*4) + merge 1.
        let tiny = AnalysisSpec { l: 1, c: 1, blocks_per_level: 1, expansion: 4 };
        assert!((analysis_mac_per_pixel(&tiny) - 61.0).abs() < 1e-9);

        // Linear in blocks-per-level.
        let base = AnalysisSpec { blocks_per_level: 1, ..AnalysisSpec::default() };
        let twice = AnalysisSpec { blocks_per_level: 2, ..AnalysisSpec::default() };
        let thrice = AnalysisSpec { blocks_per_level: 3, ..AnalysisSpec::default() };
        let (a, b, c) =
            (analysis_mac_per_pixel(&base), analysis_mac_per_pixel(&twice), analysis_mac_per_pixel(&thrice));
        assert!(((c - b) - (b - a)).abs() < 1e-6);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = NoTrainConfig {
            spec: tiny_spec(),
            arch_id: ArchId::A300,
            steps: 3,
            ..NoTrainConfig::default()
        };
        let run = train_no(&[test_patch(16, 16, 3)], 0.001, &cfg).unwrap();
        let bytes = run.checkpoint.serialize();
        let back = Checkpoint::parse(&bytes).unwrap();
        assert_eq!(back.spec, run.checkpoint.spec);
        assert_eq!(back.lambda, run.checkpoint.lambda);
        assert_eq!(back.modules().unwrap(), run.checkpoint.modules().unwrap());
        assert!(Checkpoint::parse(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn no_stream_roundtrips_without_params() {
        let cfg = NoTrainConfig {
            spec: tiny_spec(),
            arch_id: ArchId::A300,
            steps: 10,
            ..NoTrainConfig::default()
        };
        let img = test_patch(16, 16, 9);
        let run = train_no(&[img.clone()], 0.001, &cfg).unwrap();
        let (bytes, rgb) = no_encode(&img, &run.checkpoint).unwrap();
        let bs = crate::entropy::Bitstream::parse(&bytes).unwrap();
        assert!(bs.header.no_params());
        assert!(bs.param_bytes.is_empty());
        let dec = no_decode(&bytes, &run.checkpoint).unwrap();
        assert_eq!(dec.rgb, rgb);
        // Without the checkpoint the stream must refuse to decode.
        assert!(decode_image(&bytes, None).is_err());
    }

    #[test]
    fn toy_training_descends() {
        let cfg = NoTrainConfig {
            spec: tiny_spec(),
            arch_id: ArchId::A300,
            steps: 150,
            ..NoTrainConfig::default()
        };
        let patches = vec![test_patch(16, 16, 1), test_patch(16, 16, 2)];
        let run = train_no(&patches, 0.001, &cfg).unwrap();
        let early = run.losses[..20].iter().sum::<f64>() / 20.0;
        let late = run.losses[run.losses.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(late < early, "no descent: {early} -> {late}");
    }
}

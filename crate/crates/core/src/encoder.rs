//! Per-image overfitting encoder: joint gradient descent on the latent
//! pyramid and decoder weights, followed by weight quantization and
//! bitstream emission.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::decoder::fixed::{build_bitstream, decode_image, grid_rate_bits, FixedDecoder};
use crate::decoder::pipeline::{arm_rate, synthesize, upsample, Bound};
use crate::decoder::{arch, mac_per_pixel, ArchId, ComplexityReport, DecoderArch, DecoderParams};
use crate::entropy::params::{module_bits, quantize_module, STEP_EXP_MAX, STEP_EXP_MIN};
use crate::entropy::QuantizedModule;
use crate::error::{CodecError, Result};
use crate::latent::{grid_dims, quantize_hard, LatentPyramid};
use crate::metrics::{psnr, RdCurve};
use crate::ppm::Image8;
use crate::tensor::adam::{adam_step, AdamConfig, AdamState};
use crate::tensor::{Parameters, Tape, Tensor, Var};

/// Number of latent grids in the nominal configuration.
pub const DEFAULT_GRIDS: usize = 7;

#[cfg(not(target_arch = "wasm32"))]
fn now() -> Option<std::time::Instant> {
    Some(std::time::Instant::now())
}
#[cfg(target_arch = "wasm32")]
fn now() -> Option<std::time::Instant> {
    None
}

fn elapsed_s(t: Option<std::time::Instant>) -> f64 {
    t.map(|t| t.elapsed().as_secs_f64()).unwrap_or(0.0)
}

/// Shortened-training presets; each maps to an iteration count N.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    P600,
    P1100,
    P1600,
    P3600,
    P10600,
    P102600,
}

pub const PRESETS: [Preset; 6] =
    [Preset::P600, Preset::P1100, Preset::P1600, Preset::P3600, Preset::P10600, Preset::P102600];

impl Preset {
    pub fn n_iters(self) -> u64 {
        match self {
            Preset::P600 => 598,
            Preset::P1100 => 1096,
            Preset::P1600 => 1594,
            Preset::P3600 => 3588,
            Preset::P10600 => 10565,
            Preset::P102600 => 102_607,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::P600 => "P600",
            Preset::P1100 => "P1100",
            Preset::P1600 => "P1600",
            Preset::P3600 => "P3600",
            Preset::P10600 => "P10600",
            Preset::P102600 => "P102600",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        PRESETS
            .iter()
            .copied()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| CodecError::Invalid(format!("unknown preset {s}")))
    }
}

/// Encoder complexity per Eq-2 style accounting: three decoder passes
/// (forward, backward twice the cost folded in) per iteration.
pub fn kappa_enc(n_iters: u64, kappa_dec: f64) -> f64 {
    3.0 * n_iters as f64 * kappa_dec
}

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub lambda: f64,
    pub arch_id: ArchId,
    pub n_iters: u64,
    pub lr_start: f32,
    pub lr_floor: f32,
    pub patience: u32,
    pub seed: u64,
    pub l_grids: usize,
    /// Fraction of iterations on the additive-noise proxy.
    pub phase_noise: f64,
    /// Fraction on the annealed soft-round proxy; the remainder uses
    /// hard rounding with straight-through gradients.
    pub phase_soft: f64,
}

impl EncoderConfig {
    pub fn new(arch_id: ArchId, lambda: f64, preset: Preset) -> Self {
        EncoderConfig {
            lambda,
            arch_id,
            n_iters: preset.n_iters(),
            lr_start: 1e-2,
            lr_floor: 1e-6,
            patience: 100,
            seed: 0,
            l_grids: DEFAULT_GRIDS,
            phase_noise: 0.70,
            phase_soft: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(CodecError::Invalid("lambda must be positive".into()));
        }
        if self.n_iters == 0 {
            return Err(CodecError::Invalid("n_iters must be positive".into()));
        }
        if self.l_grids == 0 || self.phase_noise + self.phase_soft > 1.0 {
            return Err(CodecError::Invalid("bad grid count or phase split".into()));
        }
        Ok(())
    }
}

/// One training step's cost breakdown: Eq-1 terms.
#[derive(Debug, Clone, Copy)]
pub struct RdCost {
    /// MSE over [0, 1] RGB.
    pub distortion: f64,
    /// Estimated latent rate in bits.
    pub rate_bits: f64,
    /// D + lambda * bits/(H*W).
    pub total: f64,
}

/// Live training state: latents and decoder weights in one ordered
/// parameter collection (`lat.*`, then `arm.*`, `ups.*`, `syn.*`).
pub struct TrainState {
    pub params: Parameters,
    pub arch: DecoderArch,
    pub h: usize,
    pub w: usize,
    pub lambda: f64,
    target: Vec<f32>,
    dims: Vec<(usize, usize)>,
    adam: AdamState,
    pub lr: f32,
    pub iter: u64,
    n_iters: u64,
    phase_noise: f64,
    phase_soft: f64,
    seed: u64,
    best: f64,
    since_best: u32,
    patience: u32,
    lr_floor: f32,
}

impl TrainState {
    pub fn new(img: &Image8, cfg: &EncoderConfig, lr_start: f32) -> Result<Self> {
        if img.h < 8 || img.w < 8 {
            return Err(CodecError::Invalid("images below 8x8 are not supported".into()));
        }
        let dec_arch = arch(cfg.arch_id, cfg.l_grids);
        let dp = DecoderParams::init(&dec_arch, cfg.seed);
        let mut params = Parameters::new();
        let dims: Vec<(usize, usize)> =
            (0..cfg.l_grids).map(|l| grid_dims(img.h, img.w, l)).collect();
        for (l, &(gh, gw)) in dims.iter().enumerate() {
            params.insert(&format!("lat.{l}"), Tensor::zeros(vec![gh, gw]).with_grad());
        }
        for (name, t) in dp.params.iter() {
            params.insert(name, t.clone());
        }
        Ok(TrainState {
            params,
            arch: dec_arch,
            h: img.h,
            w: img.w,
            lambda: cfg.lambda,
            target: img.to_f32(),
            dims,
            adam: AdamState::new(),
            lr: lr_start,
            iter: 0,
            n_iters: cfg.n_iters,
            phase_noise: cfg.phase_noise,
            phase_soft: cfg.phase_soft,
            seed: cfg.seed,
            best: f64::INFINITY,
            since_best: 0,
            patience: cfg.patience.max(1),
            lr_floor: cfg.lr_floor,
        })
    }

    fn quantize_proxy(&self, tape: &mut Tape, lat: Var) -> Var {
        let f = self.iter as f64 / self.n_iters as f64;
        if f < self.phase_noise {
            let mut rng = ChaCha20Rng::seed_from_u64(
                self.seed ^ self.iter.wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            tape.add_noise(lat, &mut rng)
        } else if f < self.phase_noise + self.phase_soft {
            let t = ((f - self.phase_noise) / self.phase_soft) as f32;
            tape.soft_round(lat, 0.3 - 0.2 * t)
        } else {
            tape.round_ste(lat)
        }
    }

    /// Harden the latent shadow floats into an integer pyramid.
    pub fn pyramid(&self) -> Result<LatentPyramid> {
        let mut p = LatentPyramid::init(self.h, self.w, self.dims.len())?;
        for l in 0..self.dims.len() {
            let t = self.params.get(&format!("lat.{l}"))?;
            p.grids[l] = t.data.iter().map(|&v| quantize_hard(v).0).collect();
        }
        Ok(p)
    }
}

/// One forward/backward/Adam iteration on the Eq-1 objective.
pub fn training_step(state: &mut TrainState) -> Result<RdCost> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, &state.params);
    let tmpl = state.arch.context_template();

    let mut qgrids = Vec::with_capacity(state.dims.len());
    for l in 0..state.dims.len() {
        let lat = bound.var(&format!("lat.{l}"))?;
        qgrids.push(state.quantize_proxy(&mut tape, lat));
    }

    let dense = upsample(&mut tape, &qgrids, bound.var("ups.kernel")?, &state.dims);
    let xhat = synthesize(&mut tape, &state.arch.synth, &bound, dense)?;
    let target = tape.leaf(vec![3, state.h, state.w], state.target.clone());
    let mse = tape.mse_loss(xhat, target);

    let mut rate = None;
    for &q in &qgrids {
        let r = arm_rate(&mut tape, &state.arch.arm, &bound, &tmpl, q)?;
        rate = Some(match rate {
            None => r,
            Some(acc) => tape.add(acc, r),
        });
    }
    let rate = rate.expect("at least one grid");
    let per_px = tape.scale(rate, (state.lambda / (state.h * state.w) as f64) as f32);
    let loss = tape.add(mse, per_px);

    let cost = RdCost {
        distortion: tape.scalar(mse) as f64,
        rate_bits: tape.scalar(rate) as f64,
        total: tape.scalar(loss) as f64,
    };
    tape.backward(loss).map_err(|e| match e {
        CodecError::NonFinite(_) => CodecError::Diverged(state.iter as usize),
        other => other,
    })?;
    state.params.absorb_grads(&tape, &bound.vars);
    let cfg = AdamConfig { lr: state.lr, ..AdamConfig::default() };
    adam_step(&mut state.params, &cfg, &mut state.adam)?;
    state.params.clear_grads();

    state.iter += 1;
    if cost.total < state.best {
        state.best = cost.total;
        state.since_best = 0;
    } else {
        state.since_best += 1;
        if state.since_best >= state.patience {
            state.lr = (state.lr * 0.5).max(state.lr_floor);
            state.since_best = 0;
        }
    }
    Ok(cost)
}

fn train_once(img: &Image8, cfg: &EncoderConfig, lr_start: f32) -> Result<(TrainState, RdCost)> {
    let mut state = TrainState::new(img, cfg, lr_start)?;
    let mut last = RdCost { distortion: 0.0, rate_bits: 0.0, total: 0.0 };
    for i in 0..cfg.n_iters {
        last = training_step(&mut state)?;
        if i % 100 == 0 {
            log::info!(
                "iter {i}/{}: loss {:.6} (mse {:.6}, {:.0} bits), lr {:.2e}",
                cfg.n_iters,
                last.total,
                last.distortion,
                last.rate_bits,
                state.lr
            );
        }
    }
    Ok((state, last))
}

fn mse_u8(a: &[u8], b: &[u8]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x as f64 - y as f64) / 255.0;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64
}

/// Rate + distortion of a candidate weight quantization, by actual
/// integer-path re-decode.
fn quant_cost(
    dec_arch: &DecoderArch,
    pyramid: &LatentPyramid,
    orig: &[u8],
    modules: &[QuantizedModule; 3],
    lambda: f64,
) -> Result<f64> {
    let fd = FixedDecoder::new(dec_arch.clone(), modules)?;
    let rgb = fd.reconstruct(pyramid);
    let d = mse_u8(orig, &rgb);
    let tmpl = dec_arch.context_template();
    let mut bits: f64 = modules.iter().map(module_bits).sum();
    for l in 0..pyramid.levels() {
        let (h, w) = pyramid.dims(l);
        let (amin, amax) = crate::decoder::fixed::grid_alphabet(&pyramid.grids[l]);
        bits += grid_rate_bits(&fd, &pyramid.grids[l], h, w, &tmpl, amin, amax);
    }
    Ok(d + lambda * bits / (pyramid.h * pyramid.w) as f64)
}

/// Greedy per-module step-size search (two passes over arm/ups/syn).
fn search_steps(
    dec_arch: &DecoderArch,
    params: &Parameters,
    pyramid: &LatentPyramid,
    orig: &[u8],
    lambda: f64,
) -> Result<[QuantizedModule; 3]> {
    let prefixes = ["arm.", "ups.", "syn."];
    let mut ks = [8u8; 3];
    let build = |ks: &[u8; 3]| -> Result<[QuantizedModule; 3]> {
        Ok([
            quantize_module(params, prefixes[0], ks[0])?,
            quantize_module(params, prefixes[1], ks[1])?,
            quantize_module(params, prefixes[2], ks[2])?,
        ])
    };
    for _pass in 0..2 {
        for m in 0..3 {
            let mut best = (f64::INFINITY, ks[m]);
            for k in STEP_EXP_MIN..=STEP_EXP_MAX {
                let mut cand = ks;
                cand[m] = k;
                let cost = quant_cost(dec_arch, pyramid, orig, &build(&cand)?, lambda)?;
                if cost < best.0 {
                    best = (cost, k);
                }
            }
            ks[m] = best.1;
        }
    }
    build(&ks)
}

/// Everything the encoder produces for one image.
#[derive(Debug, Clone)]
pub struct EncodeOutcome {
    pub bytes: Vec<u8>,
    /// Integer-path reconstruction, planar RGB8.
    pub rgb: Vec<u8>,
    pub psnr_db: f64,
    pub bpp: f64,
    pub rd: RdCost,
    pub report: ComplexityReport,
    pub step_exps: [u8; 3],
    pub encode_s: f64,
}

pub fn encode_image(img: &Image8, cfg: &EncoderConfig) -> Result<EncodeOutcome> {
    cfg.validate()?;
    let t0 = now();

    let (state, _) = match train_once(img, cfg, cfg.lr_start) {
        Ok(done) => done,
        Err(CodecError::Diverged(at)) => {
            log::warn!("training diverged at iteration {at}; restarting at lr/10");
            train_once(img, cfg, cfg.lr_start / 10.0)?
        }
        Err(e) => return Err(e),
    };

    let pyramid = state.pyramid()?;
    let modules = search_steps(&state.arch, &state.params, &pyramid, &img.rgb, cfg.lambda)?;
    let fd = FixedDecoder::new(state.arch.clone(), &modules)?;
    let rgb = fd.reconstruct(&pyramid);
    let bs = build_bitstream(cfg.arch_id, &pyramid, Some(&modules), &fd)?;
    let bytes = bs.serialize();

    // The stream must reproduce the encoder-side reconstruction exactly.
    let decoded = decode_image(&bytes, None)?;
    if decoded.rgb != rgb || decoded.pyramid.grids != pyramid.grids {
        return Err(CodecError::Invalid(
            "self-check failed: decoded stream differs from encoder reconstruction".into(),
        ));
    }

    let total_bits = (bytes.len() * 8) as f64;
    let hw = (img.h * img.w) as f64;
    let distortion = mse_u8(&img.rgb, &rgb);
    let mut report = mac_per_pixel(&state.arch, cfg.l_grids);
    report.n_iters = cfg.n_iters;
    report.kappa_enc = kappa_enc(cfg.n_iters, report.kappa_dec);
    Ok(EncodeOutcome {
        psnr_db: psnr(&img.rgb, &rgb)?,
        bpp: total_bits / hw,
        rd: RdCost {
            distortion,
            rate_bits: total_bits,
            total: distortion + cfg.lambda * total_bits / hw,
        },
        step_exps: [modules[0].step_exp, modules[1].step_exp, modules[2].step_exp],
        bytes,
        rgb,
        report,
        encode_s: elapsed_s(t0),
    })
}

/// One sweep CSV row.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub image: String,
    pub lambda: f64,
    pub arch_mac: u32,
    pub n_iters: u64,
    pub kappa_enc: f64,
    pub bpp: f64,
    pub psnr_db: f64,
    pub encode_s: f64,
    pub decode_ms: f64,
}

impl SweepRow {
    pub fn to_csv(&self) -> String {
        format!(
            // bpp and psnr print shortest-roundtrip so the CSV parses
            // back into RdCurve losslessly
            "{},{},{},{},{},{},{},{:.3},{:.3}",
            self.image,
            self.lambda,
            self.arch_mac,
            self.n_iters,
            self.kappa_enc,
            self.bpp,
            self.psnr_db,
            self.encode_s,
            self.decode_ms
        )
    }
}

fn sweep_job(name: &str, img: &Image8, lambda: f64, cfg: &EncoderConfig) -> Result<SweepRow> {
    let mut job_cfg = cfg.clone();
    job_cfg.lambda = lambda;
    let out = encode_image(img, &job_cfg)?;
    let t = now();
    decode_image(&out.bytes, None)?;
    let decode_ms = elapsed_s(t) * 1e3;
    Ok(SweepRow {
        image: name.to_string(),
        lambda,
        arch_mac: cfg.arch_id.nominal_mac(),
        n_iters: cfg.n_iters,
        kappa_enc: out.report.kappa_enc,
        bpp: out.bpp,
        psnr_db: out.psnr_db,
        encode_s: out.encode_s,
        decode_ms,
    })
}

/// Encode every (image, lambda) pair; jobs run in parallel. Failed jobs
/// are logged and skipped, the rest of the sweep continues.
pub fn sweep(
    images: &[(String, Image8)],
    lambdas: &[f64],
    cfg: &EncoderConfig,
) -> (Vec<RdCurve>, String) {
    let jobs: Vec<(usize, usize)> = (0..images.len())
        .flat_map(|i| (0..lambdas.len()).map(move |j| (i, j)))
        .collect();
    let results: Vec<Option<SweepRow>> = run_jobs(&jobs, |&(i, j)| {
        let (name, img) = &images[i];
        match sweep_job(name, img, lambdas[j], cfg) {
            Ok(row) => Some(row),
            Err(e) => {
                log::error!("sweep job {name} lambda {} failed: {e}", lambdas[j]);
                None
            }
        }
    });

    let mut curves = vec![RdCurve::default(); images.len()];
    let mut csv = String::from(crate::metrics::SWEEP_CSV_HEADER);
    csv.push('\n');
    for (slot, &(i, _)) in results.iter().zip(&jobs) {
        if let Some(row) = slot {
            curves[i].push(row.bpp, row.psnr_db);
            csv.push_str(&row.to_csv());
            csv.push('\n');
        }
    }
    (curves, csv)
}

/// Run `f` over the items on a small thread pool, preserving order.
fn run_jobs<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let workers = workers.min(items.len()).max(1);
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                *slots[i].lock().unwrap() = Some(f(&items[i]));
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().unwrap().expect("job completed")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray_image(h: usize, w: usize, v: u8) -> Image8 {
        Image8::new(h, w, vec![v; 3 * h * w]).unwrap()
    }

    fn tiny_cfg(lambda: f64, n: u64) -> EncoderConfig {
        let mut cfg = EncoderConfig::new(ArchId::A300, lambda, Preset::P600);
        cfg.n_iters = n;
        cfg
    }

    #[test]
    fn kappa_enc_matches_figure_points() {
        assert_eq!(kappa_enc(0, 300.0), 0.0);
        assert_eq!(kappa_enc(598, 300.0), 538_200.0);
        let far = kappa_enc(102_607, 300.0);
        assert!((far - 92_346_150.0).abs() / 92_346_150.0 < 1e-5, "{far}");
    }

    #[test]
    fn preset_iteration_counts() {
        let want = [598, 1096, 1594, 3588, 10565, 102_607];
        for (p, &w) in PRESETS.iter().zip(&want) {
            assert_eq!(p.n_iters(), w, "{}", p.name());
        }
        assert_eq!(Preset::parse("p3600").unwrap(), Preset::P3600);
        assert!(Preset::parse("P9999").is_err());
    }

    #[test]
    fn lambda_zero_ignores_rate_gradient() {
        // With lambda = 0 the latent gradient is the pure distortion
        // gradient: scaling the rate must not change the step.
        let img = gray_image(16, 16, 40);
        let mut a = TrainState::new(&img, &tiny_cfg(1.0, 10), 1e-2).unwrap();
        a.lambda = 0.0;
        let c = training_step(&mut a).unwrap();
        assert!((c.total - c.distortion).abs() < 1e-12);
    }

    #[test]
    fn training_descends_on_gray() {
        let img = gray_image(16, 16, 200);
        let cfg = tiny_cfg(1e-3, 120);
        let mut st = TrainState::new(&img, &cfg, 1e-2).unwrap();
        let first = training_step(&mut st).unwrap();
        let mut last = first;
        for _ in 1..cfg.n_iters {
            last = training_step(&mut st).unwrap();
        }
        assert!(
            last.total < first.total,
            "no descent: {} -> {}",
            first.total,
            last.total
        );
    }

    #[test]
    fn config_validation() {
        let img = gray_image(16, 16, 0);
        let mut cfg = tiny_cfg(1e-3, 10);
        cfg.lambda = 0.0;
        assert!(encode_image(&img, &cfg).is_err());
        let mut cfg = tiny_cfg(1e-3, 10);
        cfg.n_iters = 0;
        assert!(encode_image(&img, &cfg).is_err());
        assert!(TrainState::new(&gray_image(4, 4, 0), &tiny_cfg(1e-3, 10), 1e-2).is_err());
    }

    #[test]
    fn encode_decode_seed_deterministic() {
        let img = gray_image(16, 16, 90);
        let cfg = tiny_cfg(1e-3, 30);
        let a = encode_image(&img, &cfg).unwrap();
        let b = encode_image(&img, &cfg).unwrap();
        assert_eq!(a.bytes, b.bytes);
        assert_eq!(a.rgb, b.rgb);
    }

    #[test]
    fn sweep_emits_one_row_per_job() {
        let images = vec![("gray".to_string(), gray_image(16, 16, 120))];
        let lambdas = [0.02, 0.001];
        let (curves, csv) = sweep(&images, &lambdas, &tiny_cfg(1.0, 25));
        assert_eq!(curves[0].points.len(), 2);
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], crate::metrics::SWEEP_CSV_HEADER);
    }

    #[test]
    fn sweep_empty_images_is_header_only() {
        let (curves, csv) = sweep(&[], &[0.001], &tiny_cfg(1.0, 5));
        assert!(curves.is_empty());
        assert_eq!(csv.trim_end(), crate::metrics::SWEEP_CSV_HEADER);
    }
}

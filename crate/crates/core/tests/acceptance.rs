//! Acceptance gate: the ten release criteria, run sequentially in one
//! test so the timing-sensitive checks are not perturbed by parallel
//! test load. Each criterion prints exactly one PASS/FAIL line.

use std::time::Instant;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use mch_codec::analysis::{analyze, no_encode, train_no, AnalysisSpec, NoTrainConfig};
use mch_codec::arm::ContextTemplate;
use mch_codec::decoder::fixed::{
    build_bitstream, decode_grid, decode_image, encode_grid, grid_alphabet, grid_rate_bits,
    FixedDecoder,
};
use mch_codec::decoder::pipeline::{arm_rate, synthesize, upsample, Bound};
use mch_codec::decoder::{arch, mac_per_pixel, ArchId, DecoderParams, ARCH_IDS};
use mch_codec::encoder::{encode_image, kappa_enc, training_step, EncoderConfig, Preset, TrainState};
use mch_codec::entropy::params::quantize_module;
use mch_codec::entropy::Bitstream;
use mch_codec::latent::{grid_dims, LatentPyramid};
use mch_codec::metrics::{bd_rate, RdCurve};
use mch_codec::ppm::Image8;
use mch_codec::tensor::layers::{forward_layer, init_stack, upsample_kernel_2d, LayerSpec};
use mch_codec::tensor::{Parameters, Tape, Var};

struct Gate {
    failures: Vec<String>,
}

impl Gate {
    fn report(&mut self, n: u32, desc: &str, result: Result<String, String>) {
        match result {
            Ok(detail) => println!("criterion {n} [PASS] {desc}: {detail}"),
            Err(why) => {
                println!("criterion {n} [FAIL] {desc}: {why}");
                self.failures.push(format!("criterion {n}: {why}"));
            }
        }
    }
}

fn rand_unit(rng: &mut ChaCha20Rng) -> f32 {
    (rng.next_u32() >> 8) as f32 / (1u32 << 24) as f32
}

/// Deterministic synthetic "natural" crop: smooth multi-scale luma
/// structure plus mild texture, different per channel.
fn natural_crop(h: usize, w: usize) -> Image8 {
    let mut rng = ChaCha20Rng::seed_from_u64(0xC0FFEE);
    let mut rgb = vec![0u8; 3 * h * w];
    for c in 0..3 {
        let (fx, fy) = (0.9 + 0.25 * c as f32, 1.3 - 0.2 * c as f32);
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f32 / w as f32, y as f32 / h as f32);
                let base = 0.5
                    + 0.22 * (6.28 * fx * xf).sin() * (6.28 * fy * yf).cos()
                    + 0.12 * (19.0 * xf + 13.0 * yf).sin()
                    + 0.08 * (47.0 * xf).sin() * (41.0 * yf).cos();
                let noise = (rand_unit(&mut rng) - 0.5) * 0.04;
                rgb[c * h * w + y * w + x] =
                    ((base + noise).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    Image8::new(h, w, rgb).unwrap()
}

fn criterion_1() -> Result<String, String> {
    let want = [281usize, 525, 941, 1925];
    for (id, &w) in ARCH_IDS.iter().zip(&want) {
        let got = arch(*id, 7).total_params();
        if got != w {
            return Err(format!("{id:?} has {got} params, expected {w}"));
        }
    }
    Ok("decoder params 281/525/941/1925 exact".into())
}

fn criterion_2() -> Result<String, String> {
    let mut macs = Vec::new();
    for id in ARCH_IDS {
        let r = mac_per_pixel(&arch(id, 7), 7);
        let nominal = id.nominal_mac() as f64;
        let err = (r.kappa_dec - nominal).abs() / nominal;
        if err >= 0.05 {
            return Err(format!("{id:?}: {:.1} MAC/px vs {nominal} ({:.1}%)", r.kappa_dec, err * 100.0));
        }
        macs.push(format!("{:.0}", r.kappa_dec));
    }
    let share = mac_per_pixel(&arch(ArchId::A2300, 7), 7).shares.arm;
    if share < 0.65 {
        return Err(format!("A2300 ARM share {:.1}% < 65%", share * 100.0));
    }
    Ok(format!("kappa_dec {} within 5%, A2300 ARM share {:.0}%", macs.join("/"), share * 100.0))
}

fn criterion_3() -> Result<String, String> {
    let cases: [(u64, f64); 6] = [
        (598, 538_200.0),
        (1096, 986_700.0),
        (1594, 1_435_200.0),
        (3588, 3_229_200.0),
        (10565, 9_508_200.0),
        (102607, 92_346_150.0),
    ];
    for (n, want) in cases {
        let got = kappa_enc(n, 300.0);
        if (got - want).abs() / want >= 0.01 {
            return Err(format!("N={n}: kappa_enc {got} vs {want}"));
        }
    }
    Ok("3N*300 reproduces all six operating points within 1%".into())
}

fn criterion_4() -> Result<String, String> {
    let t0 = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(0x404);
    let tmpl8 = ContextTemplate::new(8).unwrap();
    for trial in 0..1000u32 {
        let a = arch(ArchId::A300, 2);
        let mut dp = DecoderParams::init(&a, rng.next_u64());
        let gain = 0.5 + 1.5 * rand_unit(&mut rng);
        for (name, t) in dp.params.iter_mut() {
            if name.starts_with("arm.") {
                t.data.iter_mut().for_each(|v| *v *= gain);
            }
        }
        let modules = [
            quantize_module(&dp.params, "arm.", 6 + (rng.next_u32() % 7) as u8).unwrap(),
            quantize_module(&dp.params, "ups.", 10).unwrap(),
            quantize_module(&dp.params, "syn.", 10).unwrap(),
        ];
        let fd = FixedDecoder::new(a, &modules).unwrap();
        let (h, w) = (2 + (rng.next_u32() % 7) as usize, 2 + (rng.next_u32() % 7) as usize);
        let span = 1 + (rng.next_u32() % 8) as i32;
        let grid: Vec<i32> =
            (0..h * w).map(|_| (rng.next_u32() % (2 * span as u32 + 1)) as i32 - span).collect();
        let (amin, amax) = grid_alphabet(&grid);
        let bytes = encode_grid(&fd, &grid, h, w, &tmpl8, amin, amax)
            .map_err(|e| format!("trial {trial}: encode failed: {e}"))?;
        let back = decode_grid(&fd, &bytes, h, w, &tmpl8, amin, amax)
            .map_err(|e| format!("trial {trial}: decode failed: {e}"))?;
        if back != grid {
            return Err(format!("trial {trial}: lossy round trip on {h}x{w} grid"));
        }
        let ideal = grid_rate_bits(&fd, &grid, h, w, &tmpl8, amin, amax);
        let coded = (bytes.len() * 8) as f64;
        if coded > ideal * 1.001 + 64.0 {
            return Err(format!(
                "trial {trial}: coded {coded} bits vs ideal {ideal:.1} (over 0.1% + 64)"
            ));
        }
    }
    let dt = t0.elapsed().as_secs_f64();
    if dt >= 60.0 {
        return Err(format!("fuzz loop took {dt:.1} s (budget 60 s)"));
    }
    Ok(format!("1000 fuzzed grids round-trip losslessly in {dt:.1} s, coded within 0.1% + 64 bits"))
}

fn criterion_5() -> Result<String, String> {
    let t0 = Instant::now();
    let img = natural_crop(64, 64);
    let mut cfg = EncoderConfig::new(ArchId::A300, 0.001, Preset::P1600);
    cfg.seed = 11;
    let out = encode_image(&img, &cfg).map_err(|e| format!("encode failed: {e}"))?;
    let d1 = decode_image(&out.bytes, None).map_err(|e| format!("decode failed: {e}"))?;
    if d1.rgb != out.rgb {
        return Err("decoded pixels differ from encoder integer-path reconstruction".into());
    }
    let d2 = decode_image(&out.bytes, None).map_err(|e| format!("re-decode failed: {e}"))?;
    if d2.rgb != d1.rgb || d2.pyramid.grids != d1.pyramid.grids {
        return Err("repeated decode is not byte-identical".into());
    }
    let dt = t0.elapsed().as_secs_f64();
    if dt >= 300.0 {
        return Err(format!("took {dt:.0} s (budget 300 s)"));
    }
    Ok(format!(
        "64x64 P1600 encode+decode byte-identical ({:.2} bpp, {:.1} dB) in {dt:.0} s",
        out.bpp, out.psnr_db
    ))
}

fn criterion_6() -> Result<String, String> {
    let t0 = Instant::now();
    let img = natural_crop(256, 256);
    let run = |lambda: f64| -> Result<(f64, f64), String> {
        let mut cfg = EncoderConfig::new(ArchId::A300, lambda, Preset::P600);
        cfg.seed = 21;
        let out = encode_image(&img, &cfg).map_err(|e| format!("encode({lambda}) failed: {e}"))?;
        Ok((out.bpp, out.psnr_db))
    };
    let (bpp_hi, psnr_hi) = run(0.02)?;
    let (bpp_lo, psnr_lo) = run(0.0004)?;
    if !(bpp_lo > bpp_hi && psnr_lo > psnr_hi) {
        return Err(format!(
            "RD ordering violated: lambda 0.02 -> ({bpp_hi:.4} bpp, {psnr_hi:.2} dB), \
             lambda 0.0004 -> ({bpp_lo:.4} bpp, {psnr_lo:.2} dB)"
        ));
    }

    // Loss-curve monotonicity at window-100 smoothing.
    let mut cfg = EncoderConfig::new(ArchId::A300, 0.0004, Preset::P600);
    cfg.seed = 21;
    let n = cfg.n_iters as usize;
    let mut state = TrainState::new(&img, &cfg, cfg.lr_start).map_err(|e| e.to_string())?;
    let mut losses = Vec::with_capacity(n);
    for _ in 0..n {
        losses.push(training_step(&mut state).map_err(|e| format!("training: {e}"))?.total);
    }
    let smooth = |at: usize| -> f64 {
        let lo = at.saturating_sub(50);
        let hi = (at + 50).min(losses.len());
        losses[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
    };
    let (s10, s50, s100) = (smooth(n / 10), smooth(n / 2), smooth(n - 1));
    if !(s50 <= s10 && s100 <= s50) {
        return Err(format!("smoothed loss not non-increasing: {s10:.5} -> {s50:.5} -> {s100:.5}"));
    }
    let dt = t0.elapsed().as_secs_f64();
    if dt >= 1200.0 {
        return Err(format!("took {dt:.0} s (budget 1200 s)"));
    }
    Ok(format!(
        "RD points ({bpp_hi:.3} bpp, {psnr_hi:.1} dB) vs ({bpp_lo:.3} bpp, {psnr_lo:.1} dB); \
         smoothed loss {s10:.4} -> {s50:.4} -> {s100:.4}; {dt:.0} s"
    ))
}

/// Central-difference gradient check on a scalar tape function; skips
/// coordinates straddling a ReLU kink.
fn gradcheck<F>(inputs: &[(Vec<usize>, Vec<f32>)], build: F, tol: f64) -> Result<(), String>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let h = 5e-3f32;
    let run = |datas: &[Vec<f32>]| -> (f64, Vec<Vec<f32>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(datas)
            .map(|((shape, _), d)| tape.leaf_grad(shape.clone(), d.clone()))
            .collect();
        let loss = build(&mut tape, &vars);
        tape.backward(loss).unwrap();
        let grads = vars.iter().map(|&v| tape.grad(v).to_vec()).collect();
        (tape.scalar(loss) as f64, grads)
    };
    let datas: Vec<Vec<f32>> = inputs.iter().map(|(_, d)| d.clone()).collect();
    let (f0, grads) = run(&datas);
    for i in 0..inputs.len() {
        for j in 0..datas[i].len() {
            let mut plus = datas.clone();
            plus[i][j] += h;
            let mut minus = datas.clone();
            minus[i][j] -= h;
            let fp = run(&plus).0;
            let fm = run(&minus).0;
            let fwd = (fp - f0) / h as f64;
            let bwd = (f0 - fm) / h as f64;
            if (fwd - bwd).abs() > 0.02 * fwd.abs().max(bwd.abs()).max(1.0) {
                continue; // kink
            }
            let num = (fp - fm) / (2.0 * h as f64);
            let ana = grads[i][j] as f64;
            if (num - ana).abs() / num.abs().max(ana.abs()).max(5e-2) >= tol {
                return Err(format!("input {i} elem {j}: numeric {num} vs analytic {ana}"));
            }
        }
    }
    Ok(())
}

fn criterion_7() -> Result<String, String> {
    let t0 = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(0x707);
    let mut rv = |n: usize, a: f32| -> Vec<f32> {
        (0..n).map(|_| (rand_unit(&mut rng) * 2.0 - 1.0) * a).collect()
    };

    // Every layer kind through forward_layer.
    let kinds: Vec<(&str, LayerSpec, Vec<usize>, Vec<usize>)> = vec![
        ("linear", LayerSpec::linear(4, 3), vec![2, 4], vec![4, 3]),
        ("linear_res", LayerSpec::linear_res(4), vec![2, 4], vec![4, 4]),
        ("conv", LayerSpec::conv(2, 2, 3), vec![2, 3, 3], vec![2, 2, 3, 3]),
        ("conv_res", LayerSpec::conv_res(2, 3), vec![2, 3, 3], vec![2, 2, 3, 3]),
    ];
    for (name, spec, xs, ws) in kinds {
        let inputs = [
            (xs.clone(), rv(xs.iter().product(), 0.5)),
            (ws.clone(), rv(ws.iter().product(), 0.4)),
            (vec![spec.out_feat], rv(spec.out_feat, 0.3)),
        ];
        for final_layer in [false, true] {
            gradcheck(
                &inputs,
                |tape, v| {
                    let y = forward_layer(tape, &spec, v[1], Some(v[2]), v[0], final_layer)
                        .unwrap();
                    tape.sum(y)
                },
                1e-3,
            )
            .map_err(|e| format!("{name} (relu={}): {e}", !final_layer))?;
        }
    }
    let tin = (vec![3, 3], rv(9, 0.5));
    let tk = (vec![4, 4], rv(16, 0.4));
    gradcheck(
        &[tin, tk],
        |tape, v| {
            let y = tape.tconv2x(v[0], v[1], 6, 6);
            tape.sum(y)
        },
        1e-3,
    )
    .map_err(|e| format!("tconv: {e}"))?;

    // Full Eq-1 objective with frozen noise on a small image, checked at
    // sampled coordinates of every parameter group.
    let img = natural_crop(12, 12);
    let a = arch(ArchId::A300, 2);
    let dims: Vec<(usize, usize)> = (0..2).map(|l| grid_dims(12, 12, l)).collect();
    let mut params = Parameters::new();
    {
        let mut seed_rng = ChaCha20Rng::seed_from_u64(0x717);
        for (l, &(gh, gw)) in dims.iter().enumerate() {
            let data: Vec<f32> =
                (0..gh * gw).map(|_| (rand_unit(&mut seed_rng) - 0.5) * 2.0).collect();
            let mut t = mch_codec::tensor::Tensor::new(vec![gh, gw], data).unwrap();
            t.requires_grad = true;
            params.insert(&format!("lat.{l}"), t);
        }
        for (name, t) in DecoderParams::init(&a, 5).params.iter() {
            params.insert(name, t.clone());
        }
    }
    let target = img.to_f32();
    let lambda = 0.002f64;
    let tmpl = a.context_template();
    let eval = |p: &Parameters| -> (f64, Parameters) {
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, p);
        let mut qgrids = Vec::new();
        for l in 0..2 {
            let lat = bound.var(&format!("lat.{l}")).unwrap();
            let mut nz = ChaCha20Rng::seed_from_u64(0x2A2A); // frozen noise
            qgrids.push(tape.add_noise(lat, &mut nz));
        }
        let dense = upsample(&mut tape, &qgrids, bound.var("ups.kernel").unwrap(), &dims);
        let xhat = synthesize(&mut tape, &a.synth, &bound, dense).unwrap();
        let tv = tape.leaf(vec![3, 12, 12], target.clone());
        let mse = tape.mse_loss(xhat, tv);
        let mut rate = None;
        for &q in &qgrids {
            let r = arm_rate(&mut tape, &a.arm, &bound, &tmpl, q).unwrap();
            rate = Some(match rate {
                None => r,
                Some(acc) => tape.add(acc, r),
            });
        }
        let per_px = tape.scale(rate.unwrap(), (lambda / 144.0) as f32);
        let loss = tape.add(mse, per_px);
        let total = tape.scalar(loss) as f64;
        tape.backward(loss).unwrap();
        let mut out = p.clone();
        out.absorb_grads(&tape, &bound.vars);
        (total, out)
    };
    let (f0, with_grads) = eval(&params);
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let mut pick = ChaCha20Rng::seed_from_u64(0x727);
    let h = 3e-3f32;
    for name in &names {
        let len = params.get(name).unwrap().len();
        for _ in 0..3.min(len) {
            let j = (pick.next_u64() as usize) % len;
            let mut p_plus = params.clone();
            p_plus.get_mut(name).unwrap().data[j] += h;
            let mut p_minus = params.clone();
            p_minus.get_mut(name).unwrap().data[j] -= h;
            let fp = eval(&p_plus).0;
            let fm = eval(&p_minus).0;
            let fwd = (fp - f0) / h as f64;
            let bwd = (f0 - fm) / h as f64;
            if (fwd - bwd).abs() > 0.02 * fwd.abs().max(bwd.abs()).max(0.1) {
                continue; // kink
            }
            let num = (fp - fm) / (2.0 * h as f64);
            let ana = with_grads.get(name).unwrap().grad.as_ref().unwrap()[j] as f64;
            if (num - ana).abs() / num.abs().max(ana.abs()).max(1e-2) >= 1e-2 {
                return Err(format!("end-to-end {name}[{j}]: numeric {num} vs analytic {ana}"));
            }
        }
    }
    let dt = t0.elapsed().as_secs_f64();
    if dt >= 60.0 {
        return Err(format!("took {dt:.1} s (budget 60 s)"));
    }
    Ok(format!("layer-wise < 1e-3 and end-to-end Eq-1 < 1e-2 in {dt:.1} s"))
}

fn criterion_8() -> Result<String, String> {
    let (h, w) = (512usize, 768usize);
    let a = arch(ArchId::A300, 7);
    let dp = DecoderParams::init(&a, 8);
    let modules = [
        quantize_module(&dp.params, "arm.", 10).unwrap(),
        quantize_module(&dp.params, "ups.", 10).unwrap(),
        quantize_module(&dp.params, "syn.", 10).unwrap(),
    ];
    let fd = FixedDecoder::new(a, &modules).unwrap();
    let mut pyr = LatentPyramid::init(h, w, 7).map_err(|e| e.to_string())?;
    let mut rng = ChaCha20Rng::seed_from_u64(0x808);
    for g in pyr.grids.iter_mut() {
        for v in g.iter_mut() {
            *v = (rng.next_u32() % 5) as i32 - 2;
        }
    }
    let bytes = build_bitstream(ArchId::A300, &pyr, Some(&modules), &fd)
        .map_err(|e| e.to_string())?
        .serialize();
    // Warm caches/pages, then take the best of three runs so transient
    // machine load does not fail a capability check.
    decode_image(&bytes, None).map_err(|e| e.to_string())?;
    let mut dt = f64::INFINITY;
    let mut dec = None;
    for _ in 0..3 {
        let t0 = Instant::now();
        dec = Some(decode_image(&bytes, None).map_err(|e| e.to_string())?);
        dt = dt.min(t0.elapsed().as_secs_f64());
    }
    let dec = dec.unwrap();
    let json = serde_json::to_string(&dec.report.timings).map_err(|e| e.to_string())?;
    println!("  decode timings: {json}");
    if dt >= 2.0 {
        return Err(format!("512x768 A300 decode took {dt:.2} s (budget 2 s)"));
    }
    Ok(format!("512x768 A300 decode in {:.0} ms with stage timings emitted", dt * 1000.0))
}

fn criterion_9() -> Result<String, String> {
    // Forward analysis under 1 s at 256x256 (after one warm-up pass for
    // first-touch page faults on the activation buffers).
    let img = natural_crop(256, 256);
    let spec = AnalysisSpec::default();
    let alpha = mch_codec::analysis::init_analysis(&spec, 9);
    analyze(&img, &alpha, &spec).map_err(|e| e.to_string())?;
    let mut dt = f64::INFINITY;
    for _ in 0..3 {
        let t0 = Instant::now();
        analyze(&img, &alpha, &spec).map_err(|e| e.to_string())?;
        dt = dt.min(t0.elapsed().as_secs_f64());
    }
    if dt >= 1.0 {
        return Err(format!("analyze 256x256 took {dt:.2} s (budget 1 s)"));
    }

    // Toy shared-decoder training: expected cost must keep falling.
    let patches: Vec<Image8> = (0..2)
        .map(|i| {
            let full = natural_crop(24 + 8 * i, 24 + 8 * i);
            full
        })
        .collect();
    let cfg = NoTrainConfig {
        spec: AnalysisSpec { l: 3, c: 8, blocks_per_level: 1, expansion: 2 },
        arch_id: ArchId::A300,
        steps: 400,
        seed: 3,
        ..NoTrainConfig::default()
    };
    let run = train_no(&patches, 0.002, &cfg).map_err(|e| e.to_string())?;
    if run.losses.len() < 100 {
        return Err(format!("toy train_no stopped after {} steps", run.losses.len()));
    }
    let window = |at: usize| -> f64 {
        let lo = at.saturating_sub(10);
        let hi = (at + 10).min(run.losses.len());
        run.losses[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
    };
    let (early, late) = (window(50), window(run.losses.len() - 1));
    if late > early * 0.8 {
        return Err(format!("E[D+lambda*R] fell only {:.1}% from step 50", (1.0 - late / early) * 100.0));
    }

    // Shared-decoder stream: no parameter section, standard decode path.
    let (bytes, rgb) = no_encode(&patches[0], &run.checkpoint).map_err(|e| e.to_string())?;
    let header = Bitstream::parse(&bytes).map_err(|e| e.to_string())?.header;
    if !header.no_params() || header.param_len != 0 {
        return Err("shared-decoder stream still carries a parameter section".into());
    }
    let modules = run.checkpoint.modules().map_err(|e| e.to_string())?;
    let dec = decode_image(&bytes, Some(&modules)).map_err(|e| e.to_string())?;
    if dec.rgb != rgb {
        return Err("shared-decoder stream decode mismatch".into());
    }
    Ok(format!(
        "analyze 256x256 in {:.0} ms; toy loss fell {:.0}% after step 50; param-free stream decodes",
        dt * 1000.0,
        (1.0 - late / early) * 100.0
    ))
}

fn criterion_10() -> Result<String, String> {
    let mk = |pts: &[(f64, f64)]| RdCurve {
        points: pts
            .iter()
            .map(|&(bpp, psnr_db)| mch_codec::metrics::RdPoint { bpp, psnr_db })
            .collect(),
    };
    let a = mk(&[(0.1, 30.0), (0.2, 33.0), (0.4, 36.0), (0.8, 39.0)]);
    let same = bd_rate(&a, &a).map_err(|e| e.to_string())?;
    if same.abs() >= 1e-6 {
        return Err(format!("identical curves give {same}%"));
    }
    let doubled = mk(&[(0.2, 30.0), (0.4, 33.0), (0.8, 36.0), (1.6, 39.0)]);
    let d = bd_rate(&doubled, &a).map_err(|e| e.to_string())?;
    if (d - 100.0).abs() >= 0.1 {
        return Err(format!("doubled-rate curve gives {d:.4}% (want 100 +/- 0.1)"));
    }
    Ok(format!("identical -> {same:.2e}%, doubled -> {d:.4}%"))
}

#[test]
fn acceptance() {
    let mut gate = Gate { failures: Vec::new() };
    gate.report(1, "parameter counts", criterion_1());
    gate.report(2, "MAC accounting", criterion_2());
    gate.report(3, "encoder complexity identity", criterion_3());
    gate.report(4, "lossless latent coding", criterion_4());
    gate.report(5, "end-to-end determinism", criterion_5());
    gate.report(6, "RD sanity and loss curve", criterion_6());
    gate.report(7, "gradient correctness", criterion_7());
    gate.report(8, "decode speed envelope", criterion_8());
    gate.report(9, "non-overfitted mode", criterion_9());
    gate.report(10, "BD-rate oracle", criterion_10());
    assert!(gate.failures.is_empty(), "failed criteria:\n{}", gate.failures.join("\n"));
}

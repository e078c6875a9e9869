use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mch_codec::analysis::{no_decode, no_encode, train_no, Checkpoint, NoTrainConfig};
use mch_codec::decoder::fixed::decode_image;
use mch_codec::decoder::ArchId;
use mch_codec::encoder::{encode_image, sweep, EncoderConfig, Preset};
use mch_codec::entropy::Bitstream;
use mch_codec::metrics::psnr;
use mch_codec::ppm::{read_ppm, write_ppm, Image8};

#[derive(Parser)]
#[command(name = "mch", about = "Overfitted neural image codec", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct EncodeOpts {
    /// Decoder complexity in MAC/pixel.
    #[arg(long, default_value_t = 300, value_parser = parse_arch_raw)]
    arch: u32,
    /// Rate weight in the D + lambda*R objective.
    #[arg(long, default_value_t = 0.001)]
    lambda: f64,
    /// Training preset (P600..P102600).
    #[arg(long, default_value = "P1600")]
    preset: String,
    /// Explicit iteration count; overrides the preset.
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl EncodeOpts {
    fn config(&self) -> Result<EncoderConfig> {
        let preset = Preset::parse(&self.preset)?;
        let mut cfg = EncoderConfig::new(ArchId::from_mac(self.arch)?, self.lambda, preset);
        if let Some(n) = self.iters {
            cfg.n_iters = n;
        }
        cfg.seed = self.seed;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Overfit an image and write a bitstream.
    Encode {
        input: PathBuf,
        #[command(flatten)]
        opts: EncodeOpts,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a bitstream to PNG or PPM.
    Decode {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write per-stage decode timings as JSON.
        #[arg(long)]
        json_timings: Option<PathBuf>,
        /// Shared-decoder checkpoint, required for no-params streams.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Encode images over a set of lambdas; emit a rate-distortion CSV.
    Sweep {
        inputs: Vec<PathBuf>,
        #[command(flatten)]
        opts: EncodeOpts,
        /// Comma-separated lambda list.
        #[arg(long, default_value = "0.02,0.004,0.001,0.0004,0.0001")]
        lambdas: String,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Decode bitstreams repeatedly and report timing statistics.
    Bench {
        inputs: Vec<PathBuf>,
        /// Decodes per stream.
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Write the JSON summary here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the non-overfitted analysis transform + shared decoder.
    NoTrain {
        /// Training patch images.
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.001)]
        lambda: f64,
        #[arg(long, default_value_t = 2300, value_parser = parse_arch_raw)]
        arch: u32,
        #[arg(long, default_value_t = 2000)]
        steps: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// One-pass encode with a shared-decoder checkpoint (no param section).
    NoEncode {
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print bitstream header details.
    Info { input: PathBuf },
}

fn parse_arch_raw(s: &str) -> std::result::Result<u32, String> {
    let v: u32 = s.parse().map_err(|_| format!("bad arch {s}"))?;
    ArchId::from_mac(v).map_err(|e| e.to_string())?;
    Ok(v)
}

fn load_image(path: &Path) -> Result<Image8> {
    let data = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if data.starts_with(b"P6") {
        return Ok(read_ppm(&data)?);
    }
    let img = image::load_from_memory(&data)
        .with_context(|| format!("decoding {}", path.display()))?;
    if img.color().has_alpha() {
        log::warn!("{}: alpha channel dropped", path.display());
    }
    let rgb = img.to_rgb8();
    Ok(Image8::from_interleaved(
        rgb.height() as usize,
        rgb.width() as usize,
        rgb.as_raw(),
    )?)
}

fn save_image(path: &Path, img: &Image8) -> Result<()> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")) {
        std::fs::write(path, write_ppm(img))?;
        return Ok(());
    }
    image::save_buffer(
        path,
        &img.to_interleaved(),
        img.w as u32,
        img.h as u32,
        image::ColorType::Rgb8,
    )
    .with_context(|| format!("writing {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::parse(
        &std::fs::read(path).with_context(|| format!("reading {}", path.display()))?,
    )?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Encode { input, opts, out } => {
            let img = load_image(&input)?;
            let outcome = encode_image(&img, &opts.config()?)?;
            std::fs::write(&out, &outcome.bytes)?;
            println!(
                "{}: {} bytes, {:.4} bpp, {:.2} dB, kappa_enc {:.0} MAC/px, {:.1} s",
                out.display(),
                outcome.bytes.len(),
                outcome.bpp,
                outcome.psnr_db,
                outcome.report.kappa_enc,
                outcome.encode_s
            );
        }
        Cmd::Decode { input, out, json_timings, checkpoint } => {
            let data = std::fs::read(&input)?;
            let ckpt = checkpoint.as_deref().map(load_checkpoint).transpose()?;
            let dec = match &ckpt {
                Some(c) => no_decode(&data, c)?,
                None => decode_image(&data, None)?,
            };
            let img = Image8::new(dec.h, dec.w, dec.rgb)?;
            save_image(&out, &img)?;
            if let Some(p) = json_timings {
                std::fs::write(&p, serde_json::to_string_pretty(&dec.report)?)?;
            }
            println!(
                "{}: {}x{}, decoded in {:.1} ms",
                out.display(),
                dec.w,
                dec.h,
                dec.report.timings.total_ms
            );
        }
        Cmd::Sweep { inputs, opts, lambdas, csv } => {
            if inputs.is_empty() {
                log::warn!("no input images; writing header-only CSV");
            }
            let lambdas: Vec<f64> = lambdas
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.trim().parse::<f64>().map_err(|_| anyhow::anyhow!("bad lambda {s}")))
                .collect::<Result<_>>()?;
            let images: Vec<(String, Image8)> = inputs
                .iter()
                .map(|p| Ok((p.display().to_string(), load_image(p)?)))
                .collect::<Result<_>>()?;
            let (_, csv_text) = sweep(&images, &lambdas, &opts.config()?);
            std::fs::write(&csv, csv_text)?;
            println!("wrote {}", csv.display());
        }
        Cmd::Bench { inputs, repeats, out } => {
            if inputs.is_empty() {
                bail!("bench needs at least one bitstream");
            }
            let mut per_arch: std::collections::BTreeMap<u32, (f64, Vec<f64>, [f64; 3])> =
                Default::default();
            for path in &inputs {
                let data = std::fs::read(path)?;
                for _ in 0..repeats.max(1) {
                    let dec = decode_image(&data, None)?;
                    let arch_mac =
                        ArchId::from_u8(Bitstream::parse(&data)?.header.arch_id)?.nominal_mac();
                    let e = per_arch.entry(arch_mac).or_insert((dec.report.kappa_dec, Vec::new(), [0.0; 3]));
                    e.1.push(dec.report.timings.total_ms);
                    e.2[0] += dec.report.timings.arm_ms;
                    e.2[1] += dec.report.timings.upsample_ms;
                    e.2[2] += dec.report.timings.synthesis_ms;
                }
            }
            let summary: Vec<serde_json::Value> = per_arch
                .iter()
                .map(|(arch, (kappa, totals, stages))| {
                    let n = totals.len() as f64;
                    serde_json::json!({
                        "arch": arch,
                        "kappa_dec": kappa,
                        "decode_ms_mean": totals.iter().sum::<f64>() / n,
                        "arm_ms": stages[0] / n,
                        "ups_ms": stages[1] / n,
                        "synth_ms": stages[2] / n,
                    })
                })
                .collect();
            let text = serde_json::to_string_pretty(&summary)?;
            match out {
                Some(p) => std::fs::write(p, text)?,
                None => println!("{text}"),
            }
        }
        Cmd::NoTrain { inputs, lambda, arch, steps, seed, out } => {
            let patches: Vec<Image8> =
                inputs.iter().map(|p| load_image(p)).collect::<Result<_>>()?;
            let cfg = NoTrainConfig {
                arch_id: ArchId::from_mac(arch)?,
                steps,
                seed,
                ..NoTrainConfig::default()
            };
            let run = train_no(&patches, lambda, &cfg)?;
            std::fs::write(&out, run.checkpoint.serialize())?;
            let first = run.losses.first().copied().unwrap_or(0.0);
            let last = run.losses.last().copied().unwrap_or(0.0);
            println!(
                "{}: {} steps, loss {:.5} -> {:.5}",
                out.display(),
                run.losses.len(),
                first,
                last
            );
        }
        Cmd::NoEncode { input, checkpoint, out } => {
            let img = load_image(&input)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let (bytes, rgb) = no_encode(&img, &ckpt)?;
            std::fs::write(&out, &bytes)?;
            let bpp = bytes.len() as f64 * 8.0 / (img.h * img.w) as f64;
            println!(
                "{}: {} bytes, {:.4} bpp, {:.2} dB (no param section)",
                out.display(),
                bytes.len(),
                bpp,
                psnr(&img.rgb, &rgb)?
            );
        }
        Cmd::Info { input } => {
            let bs = Bitstream::parse(&std::fs::read(&input)?)?;
            let h = &bs.header;
            println!("{}x{} pixels, {} grids, arch {} MAC/px", h.w, h.h, h.l, ArchId::from_u8(h.arch_id)?.nominal_mac());
            println!(
                "params: {} bytes (step exps {:?}){}",
                h.param_len,
                h.step_exps,
                if h.no_params() { ", shared-decoder stream" } else { "" }
            );
            for (l, ((mn, mx), len)) in h.alphabets.iter().zip(&h.grid_lens).enumerate() {
                println!("grid {l}: alphabet [{mn}, {mx}], {len} bytes");
            }
            println!("total {} bytes", bs.total_bytes());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are success; anything else is a
            // usage error (exit 1).
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

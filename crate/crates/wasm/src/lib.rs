//! Browser bindings: complexity explorer, bitstream decoding and a small
//! in-page encode demo. All heavy state stays on the Rust side; results
//! cross the boundary as RGBA buffers plus JSON strings. The `*_impl`
//! functions hold the logic and stay testable on native targets; the
//! exported wrappers only translate errors into `JsValue`.

use wasm_bindgen::prelude::*;

use mch_codec::decoder::fixed::decode_image;
use mch_codec::decoder::{arch, mac_per_pixel, ArchId};
use mch_codec::encoder::{encode_image, EncoderConfig, Preset};
use mch_codec::ppm::Image8;

fn complexity_impl(arch_mac: u32, l_grids: usize) -> Result<String, String> {
    if !(1..=10).contains(&l_grids) {
        return Err("grid count must be in 1..=10".into());
    }
    let id = ArchId::from_mac(arch_mac).map_err(|e| e.to_string())?;
    let a = arch(id, l_grids);
    let r = mac_per_pixel(&a, l_grids);
    serde_json::to_string(&serde_json::json!({
        "arch": arch_mac,
        "l_grids": l_grids,
        "params": a.total_params(),
        "kappa_dec": r.kappa_dec,
        "shares": r.shares,
    }))
    .map_err(|e| e.to_string())
}

/// Decoder complexity for one architecture / grid-count choice, as JSON:
/// parameter count, MAC/pixel and per-module shares.
#[wasm_bindgen]
pub fn complexity(arch_mac: u32, l_grids: usize) -> Result<String, JsValue> {
    complexity_impl(arch_mac, l_grids).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub struct Decoded {
    w: usize,
    h: usize,
    rgba: Vec<u8>,
    info: String,
}

#[wasm_bindgen]
impl Decoded {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.w
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.h
    }

    /// Interleaved RGBA, ready for ImageData.
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    /// JSON report: timings, complexity, stream stats.
    #[wasm_bindgen(getter)]
    pub fn info(&self) -> String {
        self.info.clone()
    }
}

fn planar_to_rgba(h: usize, w: usize, rgb: &[u8]) -> Vec<u8> {
    let n = h * w;
    let mut out = vec![255u8; 4 * n];
    for i in 0..n {
        out[4 * i] = rgb[i];
        out[4 * i + 1] = rgb[n + i];
        out[4 * i + 2] = rgb[2 * n + i];
    }
    out
}

fn decode_impl(data: &[u8]) -> Result<Decoded, String> {
    let dec = decode_image(data, None).map_err(|e| e.to_string())?;
    let info = serde_json::to_string(&serde_json::json!({
        "bytes": data.len(),
        "bpp": data.len() as f64 * 8.0 / (dec.h * dec.w) as f64,
        "kappa_dec": dec.report.kappa_dec,
        "timings": dec.report.timings,
    }))
    .map_err(|e| e.to_string())?;
    Ok(Decoded { w: dec.w, h: dec.h, rgba: planar_to_rgba(dec.h, dec.w, &dec.rgb), info })
}

/// Decode a full bitstream (with parameter section) to pixels.
#[wasm_bindgen]
pub fn decode(data: &[u8]) -> Result<Decoded, JsValue> {
    decode_impl(data).map_err(|e| JsValue::from_str(&e))
}

fn encode_demo_impl(
    rgba: &[u8],
    w: usize,
    h: usize,
    arch_mac: u32,
    lambda: f64,
    iters: u32,
) -> Result<Decoded, String> {
    if h * w > 128 * 128 {
        return Err("demo encoder is limited to 128x128".into());
    }
    if rgba.len() != 4 * h * w {
        return Err("RGBA buffer does not match dimensions".into());
    }
    let n = h * w;
    let mut rgb = vec![0u8; 3 * n];
    for i in 0..n {
        rgb[i] = rgba[4 * i];
        rgb[n + i] = rgba[4 * i + 1];
        rgb[2 * n + i] = rgba[4 * i + 2];
    }
    let img = Image8::new(h, w, rgb).map_err(|e| e.to_string())?;
    let id = ArchId::from_mac(arch_mac).map_err(|e| e.to_string())?;
    let mut cfg = EncoderConfig::new(id, lambda, Preset::P600);
    cfg.n_iters = iters.clamp(10, 2000) as u64;
    cfg.l_grids = 4;
    let out = encode_image(&img, &cfg).map_err(|e| e.to_string())?;
    let info = serde_json::to_string(&serde_json::json!({
        "bytes": out.bytes.len(),
        "bpp": out.bpp,
        "psnr_db": out.psnr_db,
        "encode_s": out.encode_s,
        "stream_b64": b64(&out.bytes),
    }))
    .map_err(|e| e.to_string())?;
    Ok(Decoded { w, h, rgba: planar_to_rgba(h, w, &out.rgb), info })
}

/// Overfit a small RGBA image in the page and return the reconstruction
/// plus the stream. Iteration counts are capped to keep the tab
/// responsive.
#[wasm_bindgen]
pub fn encode_demo(
    rgba: &[u8],
    w: usize,
    h: usize,
    arch_mac: u32,
    lambda: f64,
    iters: u32,
) -> Result<Decoded, JsValue> {
    encode_demo_impl(rgba, w, h, arch_mac, lambda, iters).map_err(|e| JsValue::from_str(&e))
}

fn b64(data: &[u8]) -> String {
    const T: &[u8; 64] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    let mut out = String::with_capacity(data.len().div_ceil(3) * 4);
    for chunk in data.chunks(3) {
        let b = [chunk[0], *chunk.get(1).unwrap_or(&0), *chunk.get(2).unwrap_or(&0)];
        let v = (b[0] as u32) << 16 | (b[1] as u32) << 8 | b[2] as u32;
        for i in 0..4 {
            if i <= chunk.len() {
                out.push(T[(v >> (18 - 6 * i)) as usize & 63] as char);
            } else {
                out.push('=');
            }
        }
    }
    out
}

//! Minimal binary PPM (P6) reader/writer and planar/interleaved helpers.

use std::io::{Read, Write};

use crate::error::{CodecError, Result};

/// An 8-bit RGB image, planar layout (3, h, w).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image8 {
    pub h: usize,
    pub w: usize,
    pub rgb: Vec<u8>,
}

impl Image8 {
    pub fn new(h: usize, w: usize, rgb: Vec<u8>) -> Result<Self> {
        if rgb.len() != 3 * h * w {
            return Err(CodecError::Image(format!(
                "planar buffer holds {} bytes, want {}",
                rgb.len(),
                3 * h * w
            )));
        }
        Ok(Image8 { h, w, rgb })
    }

    pub fn from_interleaved(h: usize, w: usize, px: &[u8]) -> Result<Self> {
        if px.len() != 3 * h * w {
            return Err(CodecError::Image("interleaved buffer size mismatch".into()));
        }
        let mut rgb = vec![0u8; 3 * h * w];
        for i in 0..h * w {
            for c in 0..3 {
                rgb[c * h * w + i] = px[i * 3 + c];
            }
        }
        Ok(Image8 { h, w, rgb })
    }

    pub fn to_interleaved(&self) -> Vec<u8> {
        let n = self.h * self.w;
        let mut px = vec![0u8; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                px[i * 3 + c] = self.rgb[c * n + i];
            }
        }
        px
    }

    /// Planar floats in [0, 1].
    pub fn to_f32(&self) -> Vec<f32> {
        self.rgb.iter().map(|&v| v as f32 / 255.0).collect()
    }
}

fn read_token(data: &[u8], pos: &mut usize) -> Result<Vec<u8>> {
    // Skip whitespace and `#` comments between tokens.
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < data.len() && !data[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(CodecError::Image("truncated PPM header".into()));
    }
    Ok(data[start..*pos].to_vec())
}

fn parse_dim(tok: &[u8]) -> Result<usize> {
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| CodecError::Image("bad PPM header field".into()))
}

pub fn read_ppm(data: &[u8]) -> Result<Image8> {
    let mut pos = 0;
    if read_token(data, &mut pos)? != b"P6" {
        return Err(CodecError::Image("not a binary PPM (P6)".into()));
    }
    let w = parse_dim(&read_token(data, &mut pos)?)?;
    let h = parse_dim(&read_token(data, &mut pos)?)?;
    let maxval = parse_dim(&read_token(data, &mut pos)?)?;
    if maxval != 255 {
        return Err(CodecError::Image(format!("unsupported maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(CodecError::Image("zero-sized PPM".into()));
    }
    pos += 1; // single whitespace byte after maxval
    let need = 3 * h * w;
    if data.len() < pos + need {
        return Err(CodecError::Image("truncated PPM pixel data".into()));
    }
    Image8::from_interleaved(h, w, &data[pos..pos + need])
}

pub fn write_ppm(img: &Image8) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend_from_slice(&img.to_interleaved());
    out
}

pub fn load_ppm(path: &std::path::Path) -> Result<Image8> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    read_ppm(&data)
}

pub fn save_ppm(path: &std::path::Path, img: &Image8) -> Result<()> {
    std::fs::File::create(path)?.write_all(&write_ppm(img))?;
    Ok(())
}

//! Bitstream container: header, coded network parameters, coded latents.
//!
//! All multi-byte fields are little-endian. The layout is documented in
//! `docs/bitstream.md` and frozen by golden tests.

use crate::error::{CodecError, Result};

pub const MAGIC: [u8; 4] = *b"MCH1";
pub const VERSION: u8 = 1;
/// Flag bit: stream carries no parameter section (shared-decoder mode).
pub const FLAG_NO_PARAMS: u8 = 0x01;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitstreamHeader {
    pub version: u8,
    pub flags: u8,
    pub h: u16,
    pub w: u16,
    pub l: u8,
    pub arch_id: u8,
    /// Weight-quantization step exponents k (step = 2^-k) for
    /// ARM / upsampling / synthesis.
    pub step_exps: [u8; 3],
    /// Per-grid latent alphabet bounds, fine-to-coarse (grid 0 first).
    pub alphabets: Vec<(i16, i16)>,
    pub param_len: u32,
    pub grid_lens: Vec<u32>,
}

impl BitstreamHeader {
    pub fn no_params(&self) -> bool {
        self.flags & FLAG_NO_PARAMS != 0
    }

    pub fn byte_len(&self) -> usize {
        4 + 1 + 1 + 2 + 2 + 1 + 1 + 3 + self.alphabets.len() * 4 + 4 + self.grid_lens.len() * 4
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub header: BitstreamHeader,
    /// Parameter section (module subheaders + coded integers); empty in
    /// no-params mode.
    pub param_bytes: Vec<u8>,
    /// One coded section per grid, fine-to-coarse.
    pub grid_bytes: Vec<Vec<u8>>,
}

impl Bitstream {
    pub fn serialize(&self) -> Vec<u8> {
        let h = &self.header;
        debug_assert_eq!(h.alphabets.len(), h.l as usize);
        debug_assert_eq!(h.grid_lens.len(), h.l as usize);
        debug_assert_eq!(h.param_len as usize, self.param_bytes.len());
        let mut out = Vec::with_capacity(h.byte_len());
        out.extend_from_slice(&MAGIC);
        out.push(h.version);
        out.push(h.flags);
        out.extend_from_slice(&h.h.to_le_bytes());
        out.extend_from_slice(&h.w.to_le_bytes());
        out.push(h.l);
        out.push(h.arch_id);
        out.extend_from_slice(&h.step_exps);
        for &(mn, mx) in &h.alphabets {
            out.extend_from_slice(&mn.to_le_bytes());
            out.extend_from_slice(&mx.to_le_bytes());
        }
        out.extend_from_slice(&h.param_len.to_le_bytes());
        for &gl in &h.grid_lens {
            out.extend_from_slice(&gl.to_le_bytes());
        }
        out.extend_from_slice(&self.param_bytes);
        for g in &self.grid_bytes {
            out.extend_from_slice(g);
        }
        out
    }

    pub fn parse(data: &[u8]) -> Result<Self> {
        let mut r = Reader { data, pos: 0 };
        if r.bytes(4)? != MAGIC {
            return Err(CodecError::Bitstream("bad magic".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(CodecError::Bitstream(format!("unsupported version {version}")));
        }
        let flags = r.u8()?;
        let h = r.u16()?;
        let w = r.u16()?;
        let l = r.u8()?;
        if l == 0 || l > 10 {
            return Err(CodecError::Bitstream(format!("bad grid count {l}")));
        }
        let arch_id = r.u8()?;
        let step_exps = [r.u8()?, r.u8()?, r.u8()?];
        let mut alphabets = Vec::with_capacity(l as usize);
        for _ in 0..l {
            let mn = r.i16()?;
            let mx = r.i16()?;
            if mn > mx {
                return Err(CodecError::Bitstream("inverted alphabet bounds".into()));
            }
            alphabets.push((mn, mx));
        }
        let param_len = r.u32()?;
        if flags & FLAG_NO_PARAMS != 0 && param_len != 0 {
            return Err(CodecError::Bitstream("no-params stream with parameter bytes".into()));
        }
        let mut grid_lens = Vec::with_capacity(l as usize);
        for _ in 0..l {
            grid_lens.push(r.u32()?);
        }
        let param_bytes = r.bytes(param_len as usize)?.to_vec();
        let mut grid_bytes = Vec::with_capacity(l as usize);
        for &gl in &grid_lens {
            grid_bytes.push(r.bytes(gl as usize)?.to_vec());
        }
        if r.pos != data.len() {
            return Err(CodecError::Bitstream(format!(
                "{} trailing bytes",
                data.len() - r.pos
            )));
        }
        Ok(Bitstream {
            header: BitstreamHeader {
                version,
                flags,
                h,
                w,
                l,
                arch_id,
                step_exps,
                alphabets,
                param_len,
                grid_lens,
            },
            param_bytes,
            grid_bytes,
        })
    }

    pub fn total_bytes(&self) -> usize {
        self.header.byte_len()
            + self.param_bytes.len()
            + self.grid_bytes.iter().map(Vec::len).sum::<usize>()
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(CodecError::Bitstream("truncated stream".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    fn i16(&mut self) -> Result<i16> {
        Ok(i16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }
}

/// Parameter-section subheader per module: min, max (i32), scale (u16),
/// coded length (u32), then the coded bytes.
pub fn write_module_section(out: &mut Vec<u8>, min: i32, max: i32, scale_fx: u16, bytes: &[u8]) {
    out.extend_from_slice(&min.to_le_bytes());
    out.extend_from_slice(&max.to_le_bytes());
    out.extend_from_slice(&scale_fx.to_le_bytes());
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

pub fn read_module_section(data: &[u8], pos: &mut usize) -> Result<(i32, i32, u16, Vec<u8>)> {
    let need = |p: usize, n: usize| {
        if p + n > data.len() {
            Err(CodecError::Bitstream("truncated parameter section".into()))
        } else {
            Ok(())
        }
    };
    need(*pos, 14)?;
    let min = i32::from_le_bytes(data[*pos..*pos + 4].try_into().unwrap());
    let max = i32::from_le_bytes(data[*pos + 4..*pos + 8].try_into().unwrap());
    let scale = u16::from_le_bytes(data[*pos + 8..*pos + 10].try_into().unwrap());
    let len = u32::from_le_bytes(data[*pos + 10..*pos + 14].try_into().unwrap()) as usize;
    *pos += 14;
    need(*pos, len)?;
    let bytes = data[*pos..*pos + len].to_vec();
    *pos += len;
    Ok((min, max, scale, bytes))
}

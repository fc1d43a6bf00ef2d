//! Binary clip (`OVID1`) and flow (`OFLW`) files.
//!
//! Clip: magic `OVID`, version byte 1, `C, T, H, W` as little-endian u32,
//! then `C*T*H*W` little-endian f32 in channel-major order.
//! Flow: magic `OFLW`, version byte 1, `pairs, H, W` as u32, then per pair
//! the forward and the backward `2 x H x W` f32 planes.

use std::fs;
use std::path::Path;

use headroute_core::degrade::FlowField;
use headroute_core::VideoClip;

use crate::error::{Error, Result};

pub const CLIP_MAGIC: &[u8; 4] = b"OVID";
pub const CLIP_VERSION: u8 = 1;
pub const FLOW_MAGIC: &[u8; 4] = b"OFLW";
pub const FLOW_VERSION: u8 = 1;

/// Little-endian cursor over a file's bytes.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(Error::format(
                self.path,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(magic)),
            ));
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::format(self.path, "length overflow"))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| Error::format(self.path, "length overflow"))?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub(crate) fn peek(&self, n: usize) -> Option<&'a [u8]> {
        self.bytes.get(self.pos..self.pos + n)
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if !self.at_end() {
            return Err(Error::format(
                self.path,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Usage(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_clip(clip: &VideoClip) -> Result<Vec<u8>> {
    let (c, t, h, w) = clip.dims();
    let mut out = Vec::with_capacity(21 + 4 * clip.data().len());
    out.extend_from_slice(CLIP_MAGIC);
    out.push(CLIP_VERSION);
    for v in [c, t, h, w] {
        put_u32(&mut out, v)?;
    }
    put_f32s(&mut out, clip.data());
    Ok(out)
}

pub fn decode_clip(bytes: &[u8], path: &Path) -> Result<VideoClip> {
    let mut r = Reader::new(bytes, path);
    r.magic(CLIP_MAGIC)?;
    let version = r.u8()?;
    if version != CLIP_VERSION {
        return Err(Error::format(path, format!("unsupported clip version {version}")));
    }
    let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|v| v as usize);
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(path, "clip size overflows"))?;
    let data = r.f32s(n)?;
    r.finish()?;
    Ok(VideoClip::new(dims[0], dims[1], dims[2], dims[3], data)?)
}

pub fn write_clip(path: &Path, clip: &VideoClip) -> Result<()> {
    write_file(path, &encode_clip(clip)?)
}

pub fn read_clip(path: &Path) -> Result<VideoClip> {
    decode_clip(&read_file(path)?, path)
}

pub fn encode_flow(flow: &FlowField) -> Result<Vec<u8>> {
    flow.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(FLOW_MAGIC);
    out.push(FLOW_VERSION);
    for v in [flow.pairs(), flow.height, flow.width] {
        put_u32(&mut out, v)?;
    }
    for (f, b) in flow.forward.iter().zip(&flow.backward) {
        put_f32s(&mut out, f);
        put_f32s(&mut out, b);
    }
    Ok(out)
}

pub fn decode_flow(bytes: &[u8], path: &Path) -> Result<FlowField> {
    let mut r = Reader::new(bytes, path);
    r.magic(FLOW_MAGIC)?;
    let version = r.u8()?;
    if version != FLOW_VERSION {
        return Err(Error::format(path, format!("unsupported flow version {version}")));
    }
    let (pairs, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let plane = 2 * h * w;
    let (mut forward, mut backward) = (Vec::with_capacity(pairs), Vec::with_capacity(pairs));
    for _ in 0..pairs {
        forward.push(r.f32s(plane)?);
        backward.push(r.f32s(plane)?);
    }
    r.finish()?;
    let flow = FlowField {
        height: h,
        width: w,
        forward,
        backward,
    };
    flow.validate()?;
    Ok(flow)
}

pub fn write_flow(path: &Path, flow: &FlowField) -> Result<()> {
    write_file(path, &encode_flow(flow)?)
}

pub fn read_flow(path: &Path) -> Result<FlowField> {
    decode_flow(&read_file(path)?, path)
}

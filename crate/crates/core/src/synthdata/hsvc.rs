//! HSVC v1 sequence container.
//!
//! ```text
//! 0   magic "HSVCUBE1"
//! 8   u32 version = 1
//! 12  u32 n, h, w, T, r
//! 32  T·n·h·w f32   frames, band-major then row-major
//!     n·r f32       endmember matrix, row-major
//!     T·r·h·w f32   abundances
//!     T·4 f32       boxes (x, y, w, h)
//!     u64           wrapping sum of all preceding bytes
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use super::SequenceRecord;
use crate::objectives::BBox;
use crate::tensor::Tensor;

pub const HSVC_MAGIC: &[u8; 8] = b"HSVCUBE1";
pub const HSVC_VERSION: u32 = 1;
const HEADER_LEN: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum HsvcError {
    #[error("bad magic at byte offset 0")]
    BadMagic,
    #[error("unsupported version {found} at byte offset 8")]
    Version { found: u32 },
    #[error("truncated at byte offset {offset}: {what} needs {needed} bytes, {available} available")]
    Truncated {
        offset: usize,
        what: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("checksum mismatch at byte offset {offset}: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { offset: usize, stored: u64, computed: u64 },
    #[error("{extra} trailing bytes at byte offset {offset}")]
    Trailing { offset: usize, extra: usize },
    #[error("invalid header at byte offset {offset}: {msg}")]
    Header { offset: usize, msg: String },
    #[error("inconsistent record: {0}")]
    Record(String),
    #[error("annotations: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn checksum(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0u64, |acc, &b| acc.wrapping_add(b as u64))
}

fn check_record(rec: &SequenceRecord) -> Result<(), HsvcError> {
    let (n, h, w) = (rec.bands, rec.height, rec.width);
    let r = rec.endmembers.shape().get(1).copied().unwrap_or(0);
    let bad = |m: String| Err(HsvcError::Record(m));
    if rec.endmembers.shape() != [n, r] {
        return bad(format!("endmembers {:?} for {n} bands", rec.endmembers.shape()));
    }
    let t = rec.frames.len();
    if rec.abundances.len() != t || rec.boxes.len() != t {
        return bad(format!(
            "{t} frames, {} abundance maps, {} boxes",
            rec.abundances.len(),
            rec.boxes.len()
        ));
    }
    for (f, a) in rec.frames.iter().zip(&rec.abundances) {
        if f.shape() != [n, h, w] || a.shape() != [r, h, w] {
            return bad(format!("frame {:?} / abundance {:?} vs n={n} r={r} h={h} w={w}", f.shape(), a.shape()));
        }
    }
    Ok(())
}

/// Serializes a record. Values are stored as f32.
pub fn encode_hsvc(rec: &SequenceRecord) -> Result<Vec<u8>, HsvcError> {
    check_record(rec)?;
    let r = rec.endmembers.shape()[1];
    let mut out = Vec::new();
    out.extend_from_slice(HSVC_MAGIC);
    for v in [HSVC_VERSION, rec.bands as u32, rec.height as u32, rec.width as u32, rec.frames.len() as u32, r as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut put = |vals: &[f64]| {
        for &v in vals {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    };
    for f in &rec.frames {
        put(f.data());
    }
    put(rec.endmembers.data());
    for a in &rec.abundances {
        put(a.data());
    }
    for b in &rec.boxes {
        put(&[b.x, b.y, b.w, b.h]);
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &'static str) -> Result<&'a [u8], HsvcError> {
        let available = self.bytes.len().saturating_sub(self.pos);
        if len > available {
            return Err(HsvcError::Truncated {
                offset: self.pos,
                what,
                needed: len,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, HsvcError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, count: usize, what: &'static str) -> Result<Vec<f64>, HsvcError> {
        let len = count.checked_mul(4).ok_or_else(|| HsvcError::Header {
            offset: self.pos,
            msg: format!("{what} size overflows"),
        })?;
        let raw = self.take(len, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

pub fn decode_hsvc(bytes: &[u8]) -> Result<SequenceRecord, HsvcError> {
    let mut rd = Reader { bytes, pos: 0 };
    if rd.take(8, "magic").map_err(|_| HsvcError::BadMagic)? != HSVC_MAGIC {
        return Err(HsvcError::BadMagic);
    }
    let version = rd.u32("version")?;
    if version != HSVC_VERSION {
        return Err(HsvcError::Version { found: version });
    }
    let mut dims = [0usize; 5];
    for (d, what) in dims.iter_mut().zip(["bands", "height", "width", "frames", "endmembers"]) {
        *d = rd.u32(what)? as usize;
    }
    let [n, h, w, t, r] = dims;
    debug_assert_eq!(rd.pos, HEADER_LEN);
    let plane = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| HsvcError::Header {
            offset: 12,
            msg: format!("frame size {n}×{h}×{w} overflows"),
        })?;
    let mut frames = Vec::with_capacity(t.min(4096));
    for _ in 0..t {
        frames.push(Tensor::from_parts(vec![n, h, w], rd.f32s(plane, "frame data")?));
    }
    let endmembers = Tensor::from_parts(vec![n, r], rd.f32s(n * r, "endmember matrix")?);
    let mut abundances = Vec::with_capacity(t.min(4096));
    for _ in 0..t {
        abundances.push(Tensor::from_parts(vec![r, h, w], rd.f32s(r * h * w, "abundance data")?));
    }
    let mut boxes = Vec::with_capacity(t.min(4096));
    for _ in 0..t {
        let b = rd.f32s(4, "box")?;
        boxes.push(BBox::new(b[0], b[1], b[2], b[3]));
    }
    let offset = rd.pos;
    let computed = checksum(&bytes[..offset]);
    let stored = u64::from_le_bytes(rd.take(8, "checksum")?.try_into().unwrap());
    if stored != computed {
        return Err(HsvcError::Checksum {
            offset,
            stored,
            computed,
        });
    }
    if rd.pos != bytes.len() {
        return Err(HsvcError::Trailing {
            offset: rd.pos,
            extra: bytes.len() - rd.pos,
        });
    }
    Ok(SequenceRecord {
        bands: n,
        height: h,
        width: w,
        endmembers,
        frames,
        abundances,
        boxes,
    })
}

pub fn write_hsvc(path: &Path, rec: &SequenceRecord) -> Result<(), HsvcError> {
    Ok(std::fs::write(path, encode_hsvc(rec)?)?)
}

pub fn read_hsvc(path: &Path) -> Result<SequenceRecord, HsvcError> {
    decode_hsvc(&std::fs::read(path)?)
}

/// `{"0": [x, y, w, h], ...}` keyed by frame index.
pub fn write_annotations(path: &Path, boxes: &[BBox]) -> Result<(), HsvcError> {
    let map: BTreeMap<usize, [f64; 4]> = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| (i, [b.x as f32 as f64, b.y as f32 as f64, b.w as f32 as f64, b.h as f32 as f64]))
        .collect();
    Ok(std::fs::write(path, serde_json::to_string_pretty(&map)?)?)
}

pub fn read_annotations(path: &Path) -> Result<Vec<BBox>, HsvcError> {
    let map: BTreeMap<usize, [f64; 4]> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let mut out = Vec::with_capacity(map.len());
    for (k, (i, b)) in map.into_iter().enumerate() {
        if i != k {
            return Err(HsvcError::Record(format!("annotation frames not contiguous at {k}")));
        }
        out.push(BBox::new(b[0], b[1], b[2], b[3]));
    }
    Ok(out)
}

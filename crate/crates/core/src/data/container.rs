//! The NWRS sequence container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   4 bytes  "NWRS"
//! version u16      currently 1
//! T       u32      frame count (≥ 1)
//! H       u32
//! W       u32
//! cell    f32      grid cell size, km
//! offsets T × i32  minute offsets, strictly increasing
//! frames  T × H × W × f32, row-major
//! ```

use std::path::Path;

use super::{DataError, GridMeta, RadarSequence, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"NWRS";
const VERSION: u16 = 1;

pub fn write_sequence(path: &Path, seq: &RadarSequence) -> Result<()> {
    let shape = seq.frames().shape();
    let (t, h, w) = (shape[0], shape[1], shape[2]);
    let mut bytes =
        Vec::with_capacity(4 + 2 + 12 + 4 + t * 4 + seq.frames().numel() * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(t as u32).to_le_bytes());
    bytes.extend_from_slice(&(h as u32).to_le_bytes());
    bytes.extend_from_slice(&(w as u32).to_le_bytes());
    bytes.extend_from_slice(&(seq.grid_meta.cell_km as f32).to_le_bytes());
    for m in seq.minute_offsets() {
        bytes.extend_from_slice(&m.to_le_bytes());
    }
    for v in seq.frames().data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(DataError::Format {
                pos: self.pos as u64,
                detail: format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.data.len() - self.pos
                ),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn read_sequence(path: &Path) -> Result<RadarSequence> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader {
        data: &bytes,
        pos: 0,
    };

    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(DataError::Format {
            pos: 0,
            detail: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(DataError::Format {
            pos: 4,
            detail: format!("unsupported version {version}"),
        });
    }
    let t = r.u32("frame count")? as usize;
    if t == 0 {
        return Err(DataError::Format {
            pos: 6,
            detail: "frame count must be at least 1".into(),
        });
    }
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let cell_km = r.f32("cell size")?;

    let mut offsets = Vec::with_capacity(t);
    for i in 0..t {
        let at = r.pos as u64;
        let m = r.i32("minute offset")?;
        if i > 0 && m <= offsets[i - 1] {
            return Err(DataError::Format {
                pos: at,
                detail: format!(
                    "minute offsets must be strictly increasing, got {m} after {}",
                    offsets[i - 1]
                ),
            });
        }
        offsets.push(m);
    }

    let n = t * h * w;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.f32("frame data")?);
    }
    if r.pos != bytes.len() {
        return Err(DataError::Format {
            pos: r.pos as u64,
            detail: format!("{} trailing bytes after frame data", bytes.len() - r.pos),
        });
    }

    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    RadarSequence::new(
        Tensor::new(vec![t, h, w], data),
        offsets,
        GridMeta {
            origin_km: (0.0, 0.0),
            cell_km: f64::from(cell_km),
        },
        id,
    )
}

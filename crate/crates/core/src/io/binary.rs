//! `SLAT` and `FFLD` binary files.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SLAT" or "FFLD"
//! 4       4     version (u32, = 1)
//! 8       4     grid resolution N (u32)
//! 12      4     channels C / feature dimension D (u32)
//! 16      4     voxel count L (u32)
//! 20      ...   L records: x, y, z (u16 each), then C values (f32)
//! ```
//!
//! All integers and floats are little-endian. Records are in canonical
//! `(z, y, x)` order. Values are stored as `f32`, so a latent survives a
//! round trip exactly when its entries are `f32`-representable.

use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::partition::FeatureField;
use crate::slat::{canonical_key, Position, StructuredLatent, MAX_RESOLUTION};

use super::{read_bytes, write_bytes};

pub const SLAT_MAGIC: [u8; 4] = *b"SLAT";
pub const FFLD_MAGIC: [u8; 4] = *b"FFLD";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// Contents of an `FFLD` file: features plus the voxels they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub resolution: u32,
    pub positions: Vec<Position>,
    pub field: FeatureField,
}

impl FeatureFile {
    /// Pairs a feature field with the voxels of `shape`.
    pub fn for_shape(shape: &StructuredLatent, field: FeatureField) -> Result<Self> {
        field.ensure_aligned(shape)?;
        Ok(Self {
            resolution: shape.resolution(),
            positions: shape.positions().to_vec(),
            field,
        })
    }

    /// Fails unless these features sit on exactly the voxels of `shape`.
    pub fn ensure_matches(&self, shape: &StructuredLatent) -> Result<()> {
        if self.resolution != shape.resolution() || self.positions != shape.positions() {
            return Err(Error::SchemaMismatch(
                "feature file voxels differ from the shape's voxels".into(),
            ));
        }
        Ok(())
    }
}

fn encode(magic: [u8; 4], resolution: u32, positions: &[Position], values: &Matrix) -> Vec<u8> {
    let width = values.cols();
    let mut out = Vec::with_capacity(HEADER_LEN + positions.len() * (6 + 4 * width));
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&resolution.to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(positions.len() as u32).to_le_bytes());
    for (p, row) in positions.iter().zip(values.row_iter()) {
        for c in p {
            out.extend_from_slice(&c.to_le_bytes());
        }
        for v in row {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    /// Takes `n` bytes; a short read reports the offset where it started.
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.offset.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.offset..end];
                self.offset = end;
                Ok(s)
            }
            None => Err(Error::TruncatedFile(self.offset as u64)),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

struct Decoded {
    resolution: u32,
    positions: Vec<Position>,
    values: Matrix,
}

fn decode(magic: [u8; 4], bytes: &[u8]) -> Result<Decoded> {
    let mut cur = Cursor { bytes, offset: 0 };
    let found: [u8; 4] = cur.take(4)?.try_into().expect("4 bytes");
    if found != magic {
        return Err(Error::BadMagic { expected: magic, found });
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::BadVersion(version));
    }
    let resolution = cur.u32()?;
    let width = cur.u32()? as usize;
    let count = cur.u32()? as usize;
    if resolution == 0 || resolution > MAX_RESOLUTION || width == 0 {
        return Err(Error::InvalidGrid(format!(
            "header declares resolution {resolution} and width {width}"
        )));
    }
    if count == 0 {
        return Err(Error::EmptyLatent);
    }
    // refuse to allocate for records the file cannot hold
    let record = 6 + 4 * width;
    let available = (bytes.len() - HEADER_LEN) / record;
    if available < count {
        return Err(Error::TruncatedFile((HEADER_LEN + available * record) as u64));
    }

    let mut positions: Vec<Position> = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * width);
    for index in 0..count {
        let p = [cur.u16()?, cur.u16()?, cur.u16()?];
        if p.iter().any(|&c| u32::from(c) >= resolution) {
            return Err(Error::OutOfBounds {
                index,
                position: p.map(u32::from),
                resolution,
            });
        }
        if let Some(prev) = positions.last() {
            if canonical_key(prev) >= canonical_key(&p) {
                return Err(Error::UnsortedPositions(index));
            }
        }
        positions.push(p);
        for _ in 0..width {
            let v = cur.f32()?;
            if !v.is_finite() {
                return Err(Error::NonFinite { index });
            }
            data.push(f64::from(v));
        }
    }
    if cur.offset != bytes.len() {
        return Err(Error::TrailingData((bytes.len() - cur.offset) as u64));
    }
    Ok(Decoded {
        resolution,
        positions,
        values: Matrix::from_vec(count, width, data),
    })
}

pub fn encode_slat(latent: &StructuredLatent) -> Vec<u8> {
    encode(SLAT_MAGIC, latent.resolution(), latent.positions(), latent.latents())
}

pub fn decode_slat(bytes: &[u8]) -> Result<StructuredLatent> {
    let d = decode(SLAT_MAGIC, bytes)?;
    StructuredLatent::from_canonical(d.resolution, d.positions, d.values)
}

pub fn encode_ffld(file: &FeatureFile) -> Vec<u8> {
    encode(FFLD_MAGIC, file.resolution, &file.positions, file.field.features())
}

/// Decodes an `FFLD` file. The field's `shape_id` is set to `shape_id`.
pub fn decode_ffld(bytes: &[u8], shape_id: &str) -> Result<FeatureFile> {
    let d = decode(FFLD_MAGIC, bytes)?;
    Ok(FeatureFile {
        resolution: d.resolution,
        positions: d.positions,
        field: FeatureField::new(shape_id, d.values)?,
    })
}

pub fn write_slat(path: &Path, latent: &StructuredLatent) -> Result<()> {
    write_bytes(path, &encode_slat(latent))
}

pub fn read_slat(path: &Path) -> Result<StructuredLatent> {
    decode_slat(&read_bytes(path)?)
}

pub fn write_ffld(path: &Path, file: &FeatureFile) -> Result<()> {
    write_bytes(path, &encode_ffld(file))
}

/// Reads an `FFLD` file, naming the field after the file stem.
pub fn read_ffld(path: &Path) -> Result<FeatureFile> {
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("features");
    decode_ffld(&read_bytes(path)?, id)
}

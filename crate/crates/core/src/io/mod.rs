//! File formats.
//!
//! * `SLAT` / `FFLD`: fixed little-endian binary layout for latents and
//!   per-voxel features (see [`binary`]);
//! * JSON documents for clusters, correspondences and trained parameters,
//!   each bound to its source files by SHA-256 digests (see [`docs`]);
//! * ASCII PLY point clouds colored by a PCA of the latents (see [`ply`]).

pub mod binary;
pub mod docs;
pub mod ply;

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::slat::Position;

pub use binary::{decode_ffld, decode_slat, encode_ffld, encode_slat, read_ffld, read_slat, write_ffld, write_slat, FeatureFile};
pub use docs::{ClusterSource, ClustersFile, CorrespondenceFile, ParamsFile};
pub use ply::{export_ply, pca_colors, render_ply};

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}

/// SHA-256 over the grid resolution and the canonical position records,
/// independent of the latent or feature values stored with them.
pub fn shape_digest(resolution: u32, positions: &[Position]) -> String {
    let mut h = Sha256::new();
    h.update(resolution.to_le_bytes());
    for p in positions {
        for c in p {
            h.update(c.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::ReadFailure {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::WriteFailure {
        path: path.to_path_buf(),
        source,
    })
}

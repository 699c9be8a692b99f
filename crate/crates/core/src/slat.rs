//! Sparse structured latents: latent vectors anchored on the active voxels
//! of an `N³` grid.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::seeded_rng;

/// Grid resolution used when none is given.
pub const DEFAULT_RESOLUTION: u32 = 64;

/// Largest supported grid resolution; coordinates must fit in a `u16`.
pub const MAX_RESOLUTION: u32 = 65535;

/// Voxel coordinates `(x, y, z)`.
pub type Position = [u16; 3];

/// Sort key for the canonical voxel order: lexicographic by `(z, y, x)`.
#[inline]
pub fn canonical_key(p: &Position) -> (u16, u16, u16) {
    (p[2], p[1], p[0])
}

/// A sparse set of `(position, latent)` pairs.
///
/// Voxels are kept in canonical `(z, y, x)` order, so two latents built from
/// the same entries in any order compare equal.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredLatent {
    resolution: u32,
    positions: Vec<Position>,
    latents: Matrix,
}

impl StructuredLatent {
    /// Validates and canonicalizes a list of voxel entries.
    ///
    /// Errors name the offending entry by its index in `entries`.
    pub fn new(resolution: u32, channels: usize, entries: Vec<([u32; 3], Vec<f64>)>) -> Result<Self> {
        check_grid(resolution, channels)?;
        if entries.is_empty() {
            return Err(Error::EmptyLatent);
        }
        for (index, (pos, latent)) in entries.iter().enumerate() {
            if pos.iter().any(|&c| c >= resolution) {
                return Err(Error::OutOfBounds {
                    index,
                    position: *pos,
                    resolution,
                });
            }
            if latent.len() != channels {
                return Err(Error::ChannelMismatch {
                    index,
                    expected: channels,
                    found: latent.len(),
                });
            }
            if latent.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { index });
            }
        }

        let mut order: Vec<usize> = (0..entries.len()).collect();
        let key = |i: usize| {
            let p = entries[i].0;
            (p[2], p[1], p[0])
        };
        order.sort_by_key(|&i| (key(i), i));
        for w in order.windows(2) {
            if key(w[0]) == key(w[1]) {
                return Err(Error::DuplicatePosition {
                    index: w[1],
                    position: entries[w[1]].0,
                });
            }
        }

        let positions = order
            .iter()
            .map(|&i| entries[i].0.map(|c| c as u16))
            .collect();
        let mut data = Vec::with_capacity(entries.len() * channels);
        for &i in &order {
            data.extend_from_slice(&entries[i].1);
        }
        Ok(Self {
            resolution,
            positions,
            latents: Matrix::from_vec(entries.len(), channels, data),
        })
    }

    /// Builds a latent from positions already in canonical order, with one
    /// latent row per position. Used by readers and the sampler, which
    /// preserve an existing order.
    pub fn from_canonical(resolution: u32, positions: Vec<Position>, latents: Matrix) -> Result<Self> {
        check_grid(resolution, latents.cols())?;
        if positions.is_empty() {
            return Err(Error::EmptyLatent);
        }
        if positions.len() != latents.rows() {
            return Err(Error::FeatureRowMismatch {
                features: latents.rows(),
                voxels: positions.len(),
            });
        }
        for (index, p) in positions.iter().enumerate() {
            if p.iter().any(|&c| u32::from(c) >= resolution) {
                return Err(Error::OutOfBounds {
                    index,
                    position: p.map(u32::from),
                    resolution,
                });
            }
            if index > 0 {
                let prev = canonical_key(&positions[index - 1]);
                let here = canonical_key(p);
                if prev == here {
                    return Err(Error::DuplicatePosition {
                        index,
                        position: p.map(u32::from),
                    });
                }
                if prev > here {
                    return Err(Error::UnsortedPositions(index));
                }
            }
            if latents.row(index).iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { index });
            }
        }
        Ok(Self {
            resolution,
            positions,
            latents,
        })
    }

    /// A latent with the given active voxels and all-zero latent vectors.
    pub fn from_positions(resolution: u32, channels: usize, positions: &[[u32; 3]]) -> Result<Self> {
        let entries = positions.iter().map(|&p| (p, vec![0.0; channels])).collect();
        Self::new(resolution, channels, entries)
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.latents.cols()
    }

    /// Number of active voxels, `L`.
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Position] {
        &self.positions
    }

    pub fn latents(&self) -> &Matrix {
        &self.latents
    }

    /// Same voxels, new latent values.
    pub fn with_latents(&self, latents: Matrix) -> Result<Self> {
        Self::from_canonical(self.resolution, self.positions.clone(), latents)
    }
}

fn check_grid(resolution: u32, channels: usize) -> Result<()> {
    if resolution == 0 || resolution > MAX_RESOLUTION {
        return Err(Error::InvalidGrid(format!(
            "resolution {resolution} outside 1..={MAX_RESOLUTION}"
        )));
    }
    if channels == 0 {
        return Err(Error::InvalidGrid("channel count must be positive".into()));
    }
    Ok(())
}

/// The evolving latent matrix of a sampler run over a frozen set of voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    base: StructuredLatent,
    pub values: Matrix,
    pub time: f64,
}

impl LatentState {
    pub fn new(base: StructuredLatent, values: Matrix, time: f64) -> Result<Self> {
        base.latents.ensure_same_shape(&values)?;
        Ok(Self { base, values, time })
    }

    /// The voxel layout this state was initialized from.
    pub fn base(&self) -> &StructuredLatent {
        &self.base
    }

    pub fn positions(&self) -> &[Position] {
        self.base.positions()
    }

    /// Packages the current values with the frozen positions.
    pub fn to_latent(&self) -> Result<StructuredLatent> {
        self.base.with_latents(self.values.clone())
    }
}

/// Draws i.i.d. standard normal latents for every voxel of `shape`, at `t = 1`.
///
/// Draws are taken row by row from a ChaCha8 stream seeded with `seed`.
pub fn init_latent_state(shape: &StructuredLatent, seed: u64) -> LatentState {
    let mut rng = seeded_rng(seed);
    let values = Matrix::from_fn(shape.len(), shape.channels(), |_, _| {
        rng.sample::<f64, _>(StandardNormal)
    });
    LatentState {
        base: shape.clone(),
        values,
        time: 1.0,
    }
}

/// Maps points in `[0, 1]³` to the set of voxels they fall in, in canonical
/// order. Coordinates are clamped to the grid, so `1.0` lands in the last cell.
pub fn voxelize_point_cloud(points: &[[f64; 3]], resolution: u32) -> Result<Vec<[u32; 3]>> {
    if points.is_empty() {
        return Err(Error::EmptyInput("point cloud"));
    }
    if resolution == 0 || resolution > MAX_RESOLUTION {
        return Err(Error::InvalidGrid(format!("resolution {resolution}")));
    }
    let n = f64::from(resolution);
    let max = resolution - 1;
    let mut voxels: Vec<[u32; 3]> = points
        .iter()
        .map(|p| {
            p.map(|c| {
                let cell = (c * n).floor();
                if cell.is_nan() || cell < 0.0 {
                    0
                } else {
                    (cell as u32).min(max)
                }
            })
        })
        .collect();
    voxels.sort_by_key(|v| (v[2], v[1], v[0]));
    voxels.dedup();
    Ok(voxels)
}

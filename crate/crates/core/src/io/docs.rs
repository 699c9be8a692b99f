//! JSON documents derived from shape files.
//!
//! Each document names its schema and version and records the SHA-256 of
//! the files it was computed from, so a correspondence or clustering cannot
//! silently be applied to a different shape.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::partition::{ClusterAssignment, CorrespondenceMap, CorrespondenceMethod};
use crate::toyflows::{Architecture, TrainableField};

use super::{read_bytes, write_bytes};

pub const CORRESPONDENCE_SCHEMA: &str = "flowguide/correspondence";
pub const CLUSTERS_SCHEMA: &str = "flowguide/clusters";
pub const PARAMS_SCHEMA: &str = "flowguide/params";
pub const DOC_VERSION: u32 = 1;

fn check_header(schema: &str, version: u32, expected: &str) -> Result<()> {
    if schema != expected {
        return Err(Error::SchemaMismatch(format!("schema {schema:?}, expected {expected:?}")));
    }
    if version != DOC_VERSION {
        return Err(Error::BadVersion(version));
    }
    Ok(())
}

fn check_digest(what: &str, expected: &str, actual: &str) -> Result<()> {
    if expected != actual {
        return Err(Error::DigestMismatch {
            what: what.into(),
            expected: expected.into(),
            actual: actual.into(),
        });
    }
    Ok(())
}

/// Pretty-printed JSON with a trailing newline.
pub fn to_json<T: Serialize>(doc: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(doc)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, doc: &T) -> Result<()> {
    write_bytes(path, to_json(doc)?.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::SchemaMismatch(format!("{}: {e}", path.display())))
}

/// A query → appearance voxel map bound to both `SLAT` files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrespondenceFile {
    pub schema: String,
    pub version: u32,
    pub method: CorrespondenceMethod,
    pub query_digest: String,
    pub appearance_digest: String,
    pub query_voxels: usize,
    pub appearance_voxels: usize,
    pub target: Vec<usize>,
}

impl CorrespondenceFile {
    pub fn new(map: &CorrespondenceMap, query_digest: String, appearance_digest: String, appearance_voxels: usize) -> Self {
        Self {
            schema: CORRESPONDENCE_SCHEMA.into(),
            version: DOC_VERSION,
            method: map.method,
            query_digest,
            appearance_digest,
            query_voxels: map.target.len(),
            appearance_voxels,
            target: map.target.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_header(&self.schema, self.version, CORRESPONDENCE_SCHEMA)?;
        if self.target.len() != self.query_voxels {
            return Err(Error::SchemaMismatch(format!(
                "{} targets for {} query voxels",
                self.target.len(),
                self.query_voxels
            )));
        }
        if let Some(bad) = self.target.iter().find(|&&m| m >= self.appearance_voxels) {
            return Err(Error::SchemaMismatch(format!(
                "target {bad} outside {} appearance voxels",
                self.appearance_voxels
            )));
        }
        Ok(())
    }

    /// Fails unless both digests match the provided source files.
    pub fn check_sources(&self, query_digest: &str, appearance_digest: &str) -> Result<()> {
        check_digest("query shape", &self.query_digest, query_digest)?;
        check_digest("appearance shape", &self.appearance_digest, appearance_digest)
    }

    pub fn to_map(&self) -> Result<CorrespondenceMap> {
        self.validate()?;
        Ok(CorrespondenceMap {
            target: self.target.clone(),
            method: self.method,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let doc: Self = read_json(path)?;
        doc.validate()?;
        Ok(doc)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Labels for one clustered shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSource {
    /// SHA-256 of the `FFLD` file that was clustered.
    pub features_digest: String,
    /// [`super::shape_digest`] of the voxels the features sit on.
    pub shape_digest: String,
    pub labels: Vec<usize>,
    pub inertia: f64,
}

/// Output of a (co-)segmentation: shared centroids and per-shape labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClustersFile {
    pub schema: String,
    pub version: u32,
    pub k: usize,
    pub seed: u64,
    pub centroids: Vec<Vec<f64>>,
    pub inertia_history: Vec<f64>,
    pub sources: Vec<ClusterSource>,
}

impl ClustersFile {
    /// `sources` pairs each assignment with its feature-file and shape digests.
    /// All assignments must share `k` and centroids.
    pub fn new(seed: u64, sources: Vec<(&ClusterAssignment, String, String)>) -> Result<Self> {
        let first = sources
            .first()
            .ok_or(Error::EmptyInput("cluster sources"))?
            .0;
        Ok(Self {
            schema: CLUSTERS_SCHEMA.into(),
            version: DOC_VERSION,
            k: first.k,
            seed,
            centroids: first.centroids.row_iter().map(<[f64]>::to_vec).collect(),
            inertia_history: first.inertia_history.clone(),
            sources: sources
                .into_iter()
                .map(|(a, features_digest, shape_digest)| ClusterSource {
                    features_digest,
                    shape_digest,
                    labels: a.labels.clone(),
                    inertia: a.inertia,
                })
                .collect(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        check_header(&self.schema, self.version, CLUSTERS_SCHEMA)?;
        if self.k == 0 || self.centroids.len() != self.k {
            return Err(Error::SchemaMismatch(format!(
                "{} centroids for k = {}",
                self.centroids.len(),
                self.k
            )));
        }
        if Matrix::from_rows(&self.centroids).is_none() {
            return Err(Error::SchemaMismatch("ragged centroid rows".into()));
        }
        for s in &self.sources {
            if let Some(bad) = s.labels.iter().find(|&&l| l >= self.k) {
                return Err(Error::SchemaMismatch(format!("label {bad} out of range for k = {}", self.k)));
            }
        }
        Ok(())
    }

    /// The assignment recorded for the shape with this shape digest.
    pub fn assignment_for_shape(&self, shape_digest: &str) -> Result<ClusterAssignment> {
        let source = self
            .sources
            .iter()
            .find(|s| s.shape_digest == shape_digest)
            .ok_or_else(|| Error::DigestMismatch {
                what: "clustered shape".into(),
                expected: self
                    .sources
                    .iter()
                    .map(|s| s.shape_digest.as_str())
                    .collect::<Vec<_>>()
                    .join(","),
                actual: shape_digest.into(),
            })?;
        Ok(self.assignment(source))
    }

    pub fn assignment(&self, source: &ClusterSource) -> ClusterAssignment {
        ClusterAssignment {
            labels: source.labels.clone(),
            k: self.k,
            centroids: Matrix::from_rows(&self.centroids).expect("validated centroids"),
            inertia: source.inertia,
            inertia_history: self.inertia_history.clone(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let doc: Self = read_json(path)?;
        doc.validate()?;
        Ok(doc)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Trained velocity-field parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    pub schema: String,
    pub version: u32,
    pub architecture: Architecture,
    pub channels: usize,
    pub condition_dim: usize,
    pub parameters: Vec<f64>,
}

impl ParamsFile {
    pub fn from_field(field: &TrainableField) -> Self {
        Self {
            schema: PARAMS_SCHEMA.into(),
            version: DOC_VERSION,
            architecture: field.architecture(),
            channels: field.channels(),
            condition_dim: field.condition_dim(),
            parameters: field.parameters().to_vec(),
        }
    }

    pub fn to_field(&self) -> Result<TrainableField> {
        check_header(&self.schema, self.version, PARAMS_SCHEMA)?;
        TrainableField::from_parameters(self.architecture, self.channels, self.condition_dim, self.parameters.clone())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let doc: Self = read_json(path)?;
        doc.to_field()?;
        Ok(doc)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

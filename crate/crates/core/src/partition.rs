//! Per-voxel geometric features, k-means co-segmentation, and the
//! query → appearance correspondence built on top of it.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, norm, squared_distance, Matrix};
use crate::rng::seeded_rng;
use crate::slat::{Position, StructuredLatent};

/// Default cluster count for co-segmentation.
pub const DEFAULT_K: usize = 8;

/// Per-voxel feature vectors, row `i` aligned with voxel `i` of a shape.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField {
    pub shape_id: String,
    features: Matrix,
}

impl FeatureField {
    pub fn new(shape_id: impl Into<String>, features: Matrix) -> Result<Self> {
        if features.cols() == 0 {
            return Err(Error::InvalidGrid("feature dimension must be positive".into()));
        }
        if let Some(index) = features.row_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            shape_id: shape_id.into(),
            features,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn dimension(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn ensure_aligned(&self, shape: &StructuredLatent) -> Result<()> {
        if self.len() != shape.len() {
            return Err(Error::FeatureRowMismatch {
                features: self.len(),
                voxels: shape.len(),
            });
        }
        Ok(())
    }
}

/// Hard cluster labels with their centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub k: usize,
    /// `k × D`. Empty clusters keep their last centroid.
    pub centroids: Matrix,
    /// Sum of squared distances from each point to its assigned centroid.
    pub inertia: f64,
    /// Inertia after each Lloyd iteration. Non-increasing.
    pub inertia_history: Vec<f64>,
}

impl ClusterAssignment {
    /// Indices of the members of each cluster.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.k];
        for (i, &l) in self.labels.iter().enumerate() {
            groups[l].push(i);
        }
        groups
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tol: f64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iters: 300,
            tol: 1e-10,
        }
    }
}

/// k-means++ seeding followed by Lloyd iterations.
///
/// Ties in assignment go to the lowest centroid index. A cluster that loses
/// all its members is reseeded with the point farthest from its current
/// centroid, taken from a cluster with at least two members.
pub fn kmeans(features: &FeatureField, config: &KMeansConfig) -> Result<ClusterAssignment> {
    kmeans_matrix(features.features(), config)
}

pub(crate) fn kmeans_matrix(points: &Matrix, config: &KMeansConfig) -> Result<ClusterAssignment> {
    let n = points.rows();
    let k = config.k;
    if n == 0 {
        return Err(Error::EmptyInput("feature field"));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if k > n {
        return Err(Error::KTooLarge { k, points: n });
    }

    let mut centroids = plus_plus_init(points, k, config.seed);
    let mut labels = vec![0usize; n];
    let mut dist = vec![0.0f64; n];
    let mut history = Vec::new();

    for _ in 0..config.max_iters.max(1) {
        assign(points, &centroids, &mut labels, &mut dist);
        repair_empty(points, &mut centroids, &mut labels, &mut dist, k);
        let updated = means(points, &labels, &centroids, k);
        let shift = (0..k)
            .map(|c| squared_distance(centroids.row(c), updated.row(c)).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        let inertia = inertia_of(points, &labels, &centroids);
        if let Some(&prev) = history.last() {
            debug_assert!(
                inertia <= prev * (1.0 + 1e-12) + 1e-300,
                "inertia increased: {prev} -> {inertia}"
            );
        }
        history.push(inertia);
        if shift < config.tol {
            break;
        }
    }

    Ok(ClusterAssignment {
        inertia: *history.last().expect("at least one iteration"),
        labels,
        k,
        centroids,
        inertia_history: history,
    })
}

fn plus_plus_init(points: &Matrix, k: usize, seed: u64) -> Matrix {
    let n = points.rows();
    let mut rng = seeded_rng(seed);
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if r < w {
                        break;
                    }
                    r -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // every point coincides with a chosen centroid
            rng.gen_range(0..n)
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(squared_distance(points.row(i), points.row(next)));
        }
    }
    points.select_rows(&chosen)
}

fn assign(points: &Matrix, centroids: &Matrix, labels: &mut [usize], dist: &mut [f64]) {
    for i in 0..points.rows() {
        let p = points.row(i);
        let mut best = (0, f64::INFINITY);
        for c in 0..centroids.rows() {
            let d = squared_distance(p, centroids.row(c));
            if d < best.1 {
                best = (c, d);
            }
        }
        labels[i] = best.0;
        dist[i] = best.1;
    }
}

fn repair_empty(points: &Matrix, centroids: &mut Matrix, labels: &mut [usize], dist: &mut [f64], k: usize) {
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let mut far: Option<usize> = None;
        for i in 0..points.rows() {
            if counts[labels[i]] > 1 && far.is_none_or(|f| dist[i] > dist[f]) {
                far = Some(i);
            }
        }
        // k <= n guarantees some cluster still has two members
        let i = far.expect("a cluster with at least two members");
        counts[labels[i]] -= 1;
        counts[c] = 1;
        labels[i] = c;
        dist[i] = 0.0;
        centroids.row_mut(c).copy_from_slice(points.row(i));
    }
}

fn means(points: &Matrix, labels: &[usize], previous: &Matrix, k: usize) -> Matrix {
    let d = points.cols();
    let mut sums = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, v) in sums.row_mut(l).iter_mut().zip(points.row(i)) {
            *s += v;
        }
    }
    for c in 0..k {
        if counts[c] == 0 {
            sums.row_mut(c).copy_from_slice(previous.row(c));
        } else {
            let n = counts[c] as f64;
            sums.row_mut(c).iter_mut().for_each(|s| *s /= n);
        }
    }
    sums
}

fn inertia_of(points: &Matrix, labels: &[usize], centroids: &Matrix) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| squared_distance(points.row(i), centroids.row(l)))
        .sum()
}

/// Clusters the union of both shapes' features once and splits the labels
/// back per shape, so cluster ids mean the same part in both.
///
/// Both returned assignments carry the joint centroids; each one's inertia
/// is the share contributed by its own points.
pub fn cosegment(
    query: &FeatureField,
    appearance: &FeatureField,
    config: &KMeansConfig,
) -> Result<(ClusterAssignment, ClusterAssignment)> {
    if query.dimension() != appearance.dimension() {
        return Err(Error::DimensionMismatch {
            left: query.dimension(),
            right: appearance.dimension(),
        });
    }
    let joint = query.features().vstack(appearance.features())?;
    let all = kmeans_matrix(&joint, config)?;
    let split = query.len();
    let part = |range: std::ops::Range<usize>, points: &Matrix| {
        let labels = all.labels[range].to_vec();
        let inertia = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| squared_distance(points.row(i), all.centroids.row(l)))
            .sum::<f64>();
        ClusterAssignment {
            labels,
            k: all.k,
            centroids: all.centroids.clone(),
            inertia,
            inertia_history: all.inertia_history.clone(),
        }
    };
    Ok((
        part(0..split, query.features()),
        part(split..all.labels.len(), appearance.features()),
    ))
}

/// How query voxels are matched to appearance voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrespondenceMethod {
    /// Unrestricted nearest neighbour by feature cosine similarity.
    GlobalNn,
    /// Nearest neighbour within the shared co-segmentation cluster.
    CosegNn,
    /// No per-voxel matching; guidance compares pooled statistics instead.
    GlobalPool,
}

impl CorrespondenceMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::GlobalNn => "global_nn",
            Self::CosegNn => "coseg_nn",
            Self::GlobalPool => "global_pool",
        }
    }
}

impl fmt::Display for CorrespondenceMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorrespondenceMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global_nn" => Ok(Self::GlobalNn),
            "coseg_nn" => Ok(Self::CosegNn),
            "global_pool" => Ok(Self::GlobalPool),
            other => Err(Error::InvalidConfig(format!("unknown correspondence mode {other:?}"))),
        }
    }
}

/// For each query voxel, the index of its matched appearance voxel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrespondenceMap {
    pub target: Vec<usize>,
    pub method: CorrespondenceMethod,
}

/// One side of a correspondence problem.
#[derive(Debug, Clone, Copy)]
pub struct ShapeFeatures<'a> {
    pub shape: &'a StructuredLatent,
    pub features: &'a FeatureField,
    pub clusters: Option<&'a ClusterAssignment>,
}

/// Matches every query voxel to an appearance voxel.
///
/// Similarity is cosine on feature rows; ties go to the smallest appearance
/// index. In `coseg_nn` mode the search is restricted to appearance voxels
/// sharing the query voxel's cluster id and falls back to the global search
/// when that cluster has no appearance members. `global_pool` produces the
/// all-zero map: the pooled loss ignores per-voxel targets.
pub fn build_correspondence(
    query: ShapeFeatures<'_>,
    appearance: ShapeFeatures<'_>,
    method: CorrespondenceMethod,
) -> Result<CorrespondenceMap> {
    if appearance.shape.is_empty() || appearance.features.is_empty() {
        return Err(Error::EmptyAppearance);
    }
    query.features.ensure_aligned(query.shape)?;
    appearance.features.ensure_aligned(appearance.shape)?;
    if query.features.dimension() != appearance.features.dimension() {
        return Err(Error::DimensionMismatch {
            left: query.features.dimension(),
            right: appearance.features.dimension(),
        });
    }

    if method == CorrespondenceMethod::GlobalPool {
        return Ok(CorrespondenceMap {
            target: vec![0; query.shape.len()],
            method,
        });
    }

    let q = normalized_rows(query.features.features())?;
    let a = normalized_rows(appearance.features.features())?;
    let all: Vec<usize> = (0..a.rows()).collect();

    let groups = match method {
        CorrespondenceMethod::CosegNn => {
            let (qc, ac) = match (query.clusters, appearance.clusters) {
                (Some(qc), Some(ac)) => (qc, ac),
                _ => return Err(Error::MissingLabels),
            };
            if qc.labels.len() != q.rows() || ac.labels.len() != a.rows() {
                return Err(Error::SchemaMismatch(
                    "cluster labels do not match the feature rows".into(),
                ));
            }
            let k = qc.k.max(ac.k);
            let mut groups = vec![Vec::new(); k];
            for (j, &l) in ac.labels.iter().enumerate() {
                groups[l].push(j);
            }
            Some((qc, groups))
        }
        _ => None,
    };

    let target = (0..q.rows())
        .map(|i| {
            let candidates = match &groups {
                Some((qc, groups)) => {
                    let g = &groups[qc.labels[i]];
                    if g.is_empty() {
                        &all
                    } else {
                        g
                    }
                }
                None => &all,
            };
            nearest_by_cosine(q.row(i), &a, candidates)
        })
        .collect();
    Ok(CorrespondenceMap { target, method })
}

fn nearest_by_cosine(query: &[f64], appearance: &Matrix, candidates: &[usize]) -> usize {
    let mut best = (candidates[0], f64::NEG_INFINITY);
    for &j in candidates {
        let s = dot(query, appearance.row(j));
        if s > best.1 {
            best = (j, s);
        }
    }
    best.0
}

fn normalized_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let n = norm(m.row(i));
        if n == 0.0 {
            return Err(Error::ZeroNormRow { row: i });
        }
        out.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// Pairwise cosine similarities between the rows of `a` and the rows of `b`,
/// clamped to `[-1, 1]`.
pub fn cosine_similarity_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch {
            left: a.cols(),
            right: b.cols(),
        });
    }
    let na = row_norms(a)?;
    let nb = row_norms(b)?;
    Ok(Matrix::from_fn(a.rows(), b.rows(), |i, j| {
        (dot(a.row(i), b.row(j)) / (na[i] * nb[j])).clamp(-1.0, 1.0)
    }))
}

fn row_norms(m: &Matrix) -> Result<Vec<f64>> {
    m.row_iter()
        .enumerate()
        .map(|(row, r)| {
            let n = norm(r);
            if n == 0.0 {
                Err(Error::ZeroNormRow { row })
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Inclusive axis-aligned voxel box marking one part of a shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartBox {
    pub min: [u16; 3],
    pub max: [u16; 3],
}

impl PartBox {
    pub fn contains(&self, p: &Position) -> bool {
        (0..3).all(|a| self.min[a] <= p[a] && p[a] <= self.max[a])
    }
}

/// Index of the first box containing `p`, or `parts.len()` for background.
pub fn part_index(parts: &[PartBox], p: &Position) -> usize {
    parts.iter().position(|b| b.contains(p)).unwrap_or(parts.len())
}

/// Toy stand-in for learned part features.
///
/// Features have dimension `parts.len() + 1`: voxel features are the unit
/// basis vector of the first box containing the voxel (the last basis vector
/// for voxels outside every box) plus i.i.d. Gaussian noise of standard
/// deviation `noise_std`.
pub fn synthesize_part_features(
    latent: &StructuredLatent,
    parts: &[PartBox],
    noise_std: f64,
    seed: u64,
) -> Result<FeatureField> {
    let dim = parts.len() + 1;
    let mut rng = seeded_rng(seed);
    let mut features = Matrix::zeros(latent.len(), dim);
    for (i, p) in latent.positions().iter().enumerate() {
        let row = features.row_mut(i);
        row[part_index(parts, p)] = 1.0;
        if noise_std > 0.0 {
            for v in row.iter_mut() {
                *v += noise_std * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    FeatureField::new("synthetic", features)
}

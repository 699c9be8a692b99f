//! Guidance objectives on the evolving query latents and their analytic
//! gradients.
//!
//! * appearance: mean squared distance from each query latent to its matched
//!   appearance latent;
//! * structure: a part-aware contrastive loss on the self-similarity of the
//!   query latents, with parts fixed from geometric clustering;
//! * global pool: distance between min/max/mean pooled statistics, the
//!   ablation that drops per-voxel matching.
//!
//! Every gradient here is written out by hand and checked against
//! [`crate::gradcheck::finite_difference_grad`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix};
use crate::optim::OptimizerConfig;
use crate::partition::{ClusterAssignment, CorrespondenceMap};

/// `(1/L) Σᵢ ‖valuesᵢ − targetᵢ‖²`.
pub fn appearance_loss(values: &Matrix, target: &Matrix) -> Result<f64> {
    values.ensure_same_shape(target)?;
    if values.rows() == 0 {
        return Err(Error::EmptyInput("appearance loss"));
    }
    Ok(values.sub(target).squared_norm() / values.rows() as f64)
}

/// `(2/L)(values − target)`.
pub fn appearance_loss_grad(values: &Matrix, target: &Matrix) -> Result<Matrix> {
    values.ensure_same_shape(target)?;
    if values.rows() == 0 {
        return Err(Error::EmptyInput("appearance loss"));
    }
    let mut g = values.sub(target);
    g.scale(2.0 / values.rows() as f64);
    Ok(g)
}

/// Gathers `appearance[map.target[i]]` for every query voxel `i`.
pub fn appearance_target(appearance: &Matrix, map: &CorrespondenceMap) -> Result<Matrix> {
    if let Some(&bad) = map.target.iter().find(|&&m| m >= appearance.rows()) {
        return Err(Error::SchemaMismatch(format!(
            "correspondence index {bad} outside an appearance shape of {} voxels",
            appearance.rows()
        )));
    }
    Ok(appearance.select_rows(&map.target))
}

/// Which voxels normalize the contrastive term of voxel `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// Only voxels in other clusters.
    Complement,
    /// Every voxel except `i` itself.
    #[default]
    AllPairs,
}

/// Contrastive self-similarity loss
///
/// ```text
/// L = −(1/L) Σᵢ log( Σ_{j∈P(i)} exp(sᵢⱼ) / Σ_{j∈D(i)} exp(sᵢⱼ) )
/// ```
///
/// with `sᵢⱼ` the cosine similarity of latent rows `i` and `j`, `P(i)` the
/// other members of `i`'s cluster and `D(i)` chosen by `denominator`. Both
/// sums are evaluated as max-shifted log-sum-exps.
pub fn structure_loss(values: &Matrix, labels: &[usize], denominator: Denominator) -> Result<f64> {
    Ok(structure_terms(values, labels, denominator, false)?.0)
}

/// Exact gradient of [`structure_loss`], including the cosine normalization.
pub fn structure_loss_grad(values: &Matrix, labels: &[usize], denominator: Denominator) -> Result<Matrix> {
    Ok(structure_terms(values, labels, denominator, true)?
        .1
        .expect("gradient requested"))
}

fn structure_terms(
    values: &Matrix,
    labels: &[usize],
    denominator: Denominator,
    want_grad: bool,
) -> Result<(f64, Option<Matrix>)> {
    let n = values.rows();
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            left: (n, values.cols()),
            right: (labels.len(), 1),
        });
    }
    if n == 0 {
        return Err(Error::EmptyInput("structure loss"));
    }
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    for (i, &l) in labels.iter().enumerate() {
        if sizes[l] < 2 {
            return Err(Error::EmptyPositiveSet(i));
        }
        if denominator == Denominator::Complement && sizes[l] == n {
            return Err(Error::EmptyComplement(i));
        }
    }

    let mut unit = values.clone();
    let mut norms = Vec::with_capacity(n);
    for i in 0..n {
        let r = norm(values.row(i));
        if r == 0.0 {
            return Err(Error::ZeroNormRow { row: i });
        }
        norms.push(r);
        unit.row_mut(i).iter_mut().for_each(|v| *v /= r);
    }
    let sim = Matrix::from_fn(n, n, |i, j| dot(unit.row(i), unit.row(j)));

    let in_pos = |i: usize, j: usize| j != i && labels[j] == labels[i];
    let in_den = |i: usize, j: usize| match denominator {
        Denominator::Complement => labels[j] != labels[i],
        Denominator::AllPairs => j != i,
    };

    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    // weights[i][j] = ∂L/∂s_ij taken through row i's term
    let mut weights = want_grad.then(|| Matrix::zeros(n, n));
    for i in 0..n {
        let row = sim.row(i);
        let lse_pos = log_sum_exp(row, |j| in_pos(i, j));
        let lse_den = log_sum_exp(row, |j| in_den(i, j));
        total += lse_den - lse_pos;
        if let Some(w) = weights.as_mut() {
            let wr = w.row_mut(i);
            for j in 0..n {
                let mut d = 0.0;
                if in_den(i, j) {
                    d += (row[j] - lse_den).exp();
                }
                if in_pos(i, j) {
                    d -= (row[j] - lse_pos).exp();
                }
                wr[j] = d * inv_n;
            }
        }
    }
    let loss = total * inv_n;

    let grad = weights.map(|w| {
        let c = values.cols();
        let mut g = Matrix::zeros(n, c);
        let mut gu = vec![0.0; c];
        for kk in 0..n {
            gu.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..n {
                if j == kk {
                    continue;
                }
                let coeff = w[(kk, j)] + w[(j, kk)];
                if coeff != 0.0 {
                    for (acc, u) in gu.iter_mut().zip(unit.row(j)) {
                        *acc += coeff * u;
                    }
                }
            }
            // project out the radial part: d(z/‖z‖)/dz = (I − u uᵀ)/‖z‖
            let uk = unit.row(kk);
            let radial = dot(uk, &gu);
            for ((out, gv), u) in g.row_mut(kk).iter_mut().zip(&gu).zip(uk) {
                *out = (gv - radial * u) / norms[kk];
            }
        }
        g
    });
    Ok((loss, grad))
}

fn log_sum_exp(row: &[f64], include: impl Fn(usize) -> bool) -> f64 {
    let max = row
        .iter()
        .enumerate()
        .filter(|(j, _)| include(*j))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row
        .iter()
        .enumerate()
        .filter(|(j, _)| include(*j))
        .map(|(_, &v)| (v - max).exp())
        .sum();
    max + sum.ln()
}

/// Per-channel `[min…, max…, mean…]`, with the row index attaining each
/// min and max (first index on ties).
fn pooled(m: &Matrix) -> (Vec<f64>, Vec<usize>, Vec<usize>) {
    let c = m.cols();
    let mut out = vec![0.0; 3 * c];
    let mut argmin = vec![0; c];
    let mut argmax = vec![0; c];
    for ch in 0..c {
        let (mut lo, mut hi, mut sum) = (m[(0, ch)], m[(0, ch)], 0.0);
        for i in 0..m.rows() {
            let v = m[(i, ch)];
            if v < lo {
                lo = v;
                argmin[ch] = i;
            }
            if v > hi {
                hi = v;
                argmax[ch] = i;
            }
            sum += v;
        }
        out[ch] = lo;
        out[c + ch] = hi;
        out[2 * c + ch] = sum / m.rows() as f64;
    }
    (out, argmin, argmax)
}

fn check_pool_inputs(values: &Matrix, appearance: &Matrix) -> Result<()> {
    if values.rows() == 0 || appearance.rows() == 0 {
        return Err(Error::EmptyInput("pooled features"));
    }
    if values.cols() != appearance.cols() {
        return Err(Error::DimensionMismatch {
            left: values.cols(),
            right: appearance.cols(),
        });
    }
    Ok(())
}

/// Squared distance between the concatenated min/max/mean pooled vectors of
/// `values` and of `appearance`.
pub fn global_pool_loss(values: &Matrix, appearance: &Matrix) -> Result<f64> {
    check_pool_inputs(values, appearance)?;
    let (a, _, _) = pooled(values);
    let (b, _, _) = pooled(appearance);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Gradient of [`global_pool_loss`] with respect to `values`. The min and max
/// subgradients go to the first row attaining the extreme.
pub fn global_pool_loss_grad(values: &Matrix, appearance: &Matrix) -> Result<Matrix> {
    check_pool_inputs(values, appearance)?;
    let c = values.cols();
    let (a, argmin, argmax) = pooled(values);
    let (b, _, _) = pooled(appearance);
    let n = values.rows() as f64;
    let mut g = Matrix::zeros(values.rows(), c);
    for ch in 0..c {
        let d_mean = 2.0 * (a[2 * c + ch] - b[2 * c + ch]) / n;
        for i in 0..values.rows() {
            g[(i, ch)] = d_mean;
        }
        g[(argmin[ch], ch)] += 2.0 * (a[ch] - b[ch]);
        g[(argmax[ch], ch)] += 2.0 * (a[c + ch] - b[c + ch]);
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceObjective {
    #[default]
    None,
    Appearance,
    Structure,
    GlobalPool,
}

/// How a guidance application changes the latents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// `values ← values − λ·∇L`, once.
    GradientStep,
    /// `inner_steps` AdamW steps on `λ·L`.
    #[default]
    OptimizerSteps,
}

/// Whether guidance runs after (default) or before the flow step of the same
/// iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceOrder {
    #[default]
    AfterFlow,
    BeforeFlow,
}

/// Everything the guided sampler needs to know about the guidance term.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceSpec {
    pub objective: GuidanceObjective,
    /// λ. Zero keeps the latents untouched while still reporting losses.
    pub weight: f64,
    pub mode: GuidanceMode,
    pub inner_steps: usize,
    /// Flow steps between guidance applications.
    pub apply_every: usize,
    pub order: GuidanceOrder,
    /// Start each application with fresh AdamW moments.
    pub reset_optimizer: bool,
    pub denominator: Denominator,
    pub optimizer: OptimizerConfig,
    /// Matched appearance latent per query voxel (appearance objective).
    pub appearance_target: Option<Matrix>,
    /// All appearance latents (global-pool objective).
    pub appearance_values: Option<Matrix>,
    /// Query-voxel clusters (structure objective).
    pub cluster_labels: Option<ClusterAssignment>,
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        Self {
            objective: GuidanceObjective::None,
            weight: 1.0,
            mode: GuidanceMode::OptimizerSteps,
            inner_steps: 1,
            apply_every: 1,
            order: GuidanceOrder::AfterFlow,
            reset_optimizer: false,
            denominator: Denominator::AllPairs,
            optimizer: OptimizerConfig::default(),
            appearance_target: None,
            appearance_values: None,
            cluster_labels: None,
        }
    }
}

impl GuidanceSpec {
    pub fn appearance(target: Matrix) -> Self {
        Self {
            objective: GuidanceObjective::Appearance,
            appearance_target: Some(target),
            ..Self::default()
        }
    }

    pub fn structure(labels: ClusterAssignment) -> Self {
        Self {
            objective: GuidanceObjective::Structure,
            cluster_labels: Some(labels),
            ..Self::default()
        }
    }

    pub fn global_pool(appearance_values: Matrix) -> Self {
        Self {
            objective: GuidanceObjective::GlobalPool,
            appearance_values: Some(appearance_values),
            ..Self::default()
        }
    }

    pub fn is_active(&self) -> bool {
        self.objective != GuidanceObjective::None
    }

    /// Checks that the inputs for the chosen objective are present and fit an
    /// `rows × cols` latent matrix.
    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return Err(Error::InvalidConfig(format!("guidance weight {} must be ≥ 0", self.weight)));
        }
        if self.inner_steps == 0 || self.apply_every == 0 {
            return Err(Error::InvalidConfig(
                "inner_steps and apply_every must be positive".into(),
            ));
        }
        self.optimizer.validate()?;
        match self.objective {
            GuidanceObjective::None => {}
            GuidanceObjective::Appearance => {
                let t = self.appearance_target.as_ref().ok_or(Error::MissingTarget)?;
                if t.shape() != (rows, cols) {
                    return Err(Error::ShapeMismatch {
                        left: (rows, cols),
                        right: t.shape(),
                    });
                }
            }
            GuidanceObjective::Structure => {
                let l = self.cluster_labels.as_ref().ok_or(Error::MissingLabels)?;
                if l.labels.len() != rows {
                    return Err(Error::ShapeMismatch {
                        left: (rows, cols),
                        right: (l.labels.len(), 1),
                    });
                }
            }
            GuidanceObjective::GlobalPool => {
                let a = self.appearance_values.as_ref().ok_or(Error::MissingTarget)?;
                if a.cols() != cols {
                    return Err(Error::DimensionMismatch {
                        left: cols,
                        right: a.cols(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Unweighted guidance loss at `values`. Zero for the `none` objective.
    pub fn loss(&self, values: &Matrix) -> Result<f64> {
        match self.objective {
            GuidanceObjective::None => Ok(0.0),
            GuidanceObjective::Appearance => {
                appearance_loss(values, self.appearance_target.as_ref().ok_or(Error::MissingTarget)?)
            }
            GuidanceObjective::Structure => structure_loss(
                values,
                &self.cluster_labels.as_ref().ok_or(Error::MissingLabels)?.labels,
                self.denominator,
            ),
            GuidanceObjective::GlobalPool => {
                global_pool_loss(values, self.appearance_values.as_ref().ok_or(Error::MissingTarget)?)
            }
        }
    }

    /// Unweighted gradient of [`GuidanceSpec::loss`].
    pub fn grad(&self, values: &Matrix) -> Result<Matrix> {
        match self.objective {
            GuidanceObjective::None => Ok(Matrix::zeros(values.rows(), values.cols())),
            GuidanceObjective::Appearance => {
                appearance_loss_grad(values, self.appearance_target.as_ref().ok_or(Error::MissingTarget)?)
            }
            GuidanceObjective::Structure => structure_loss_grad(
                values,
                &self.cluster_labels.as_ref().ok_or(Error::MissingLabels)?.labels,
                self.denominator,
            ),
            GuidanceObjective::GlobalPool => {
                global_pool_loss_grad(values, self.appearance_values.as_ref().ok_or(Error::MissingTarget)?)
            }
        }
    }
}

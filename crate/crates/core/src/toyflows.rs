//! Velocity fields with known answers, standing in for a pretrained network.
//!
//! For Gaussian data `z0 ~ N(μ, σ²I)` the conditional expectation of the
//! flow-matching target `ε − z0` given `z(t) = a·z0 + b·ε` (`a = 1 − t`,
//! `b = t`) is linear in `z`:
//!
//! ```text
//! E[ε − z0 | z] = −μ + (b − a·σ²) / (a²σ² + b²) · (z − a·μ)
//! ```
//!
//! which is the exact minimizer of the flow-matching loss. Integrating it
//! backwards from `N(0, I)` noise recovers `N(μ, σ²I)`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{check_time, CfmSample, Condition, FieldDescriptor, VelocityField};
use crate::matrix::Matrix;
use crate::optim::{adamw_step_in_place, OptimizerConfig, OptimizerState};
use crate::rng::{derive_seed, seeded_rng, SeededRng};

/// Hidden width of the one-layer MLP field unless configured otherwise.
pub const DEFAULT_HIDDEN: usize = 32;

/// Isotropic Gaussian data distribution, applied independently per voxel row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianFlowSpec {
    pub mean: Vec<f64>,
    pub std: f64,
}

impl GaussianFlowSpec {
    pub fn new(mean: Vec<f64>, std: f64) -> Result<Self> {
        let spec = Self { mean, std };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.is_empty() || self.mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("Gaussian mean must be non-empty and finite".into()));
        }
        if !(self.std > 0.0 && self.std.is_finite()) {
            return Err(Error::InvalidConfig(format!("Gaussian std {} must be positive", self.std)));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn draw(&self, rng: &mut SeededRng) -> Vec<f64> {
        self.mean
            .iter()
            .map(|m| m + self.std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

/// Closed-form velocity of the Gaussian rectified flow, row by row.
pub fn gaussian_analytic_velocity(spec: &GaussianFlowSpec, values: &Matrix, t: f64) -> Result<Matrix> {
    check_time(t)?;
    if values.cols() != spec.channels() {
        return Err(Error::DimensionMismatch {
            left: values.cols(),
            right: spec.channels(),
        });
    }
    let a = 1.0 - t;
    let b = t;
    let var = spec.std * spec.std;
    let gain = (b - a * var) / (a * a * var + b * b);
    let mut v = values.clone();
    for i in 0..v.rows() {
        for (x, m) in v.row_mut(i).iter_mut().zip(&spec.mean) {
            *x = gain * (*x - a * m) - m;
        }
    }
    Ok(v)
}

/// Analytic field for a single Gaussian. Ignores the condition.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianField(pub GaussianFlowSpec);

impl VelocityField for GaussianField {
    fn evaluate(&self, values: &Matrix, time: f64, _condition: &Condition) -> Result<Matrix> {
        gaussian_analytic_velocity(&self.0, values, time)
    }

    fn descriptor(&self) -> FieldDescriptor {
        FieldDescriptor {
            name: "gaussian".into(),
            parameter_count: 0,
        }
    }
}

/// Index of the single `1` in a one-hot condition over `count` components.
pub fn selected_component(condition: &Condition, count: usize) -> Result<usize> {
    let payload = match condition {
        Condition::Vector(p) => p,
        Condition::None => return Err(Error::BadCondition("mixture field needs a one-hot condition".into())),
    };
    if payload.len() != count {
        return Err(Error::BadCondition(format!(
            "condition has {} entries for {count} components",
            payload.len()
        )));
    }
    let ones: Vec<usize> = payload
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == 1.0)
        .map(|(i, _)| i)
        .collect();
    if ones.len() != 1 || payload.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::BadCondition("condition is not one-hot".into()));
    }
    Ok(ones[0])
}

/// Velocity of the component selected by a one-hot condition.
pub fn mixture_conditional_velocity(
    components: &[GaussianFlowSpec],
    values: &Matrix,
    t: f64,
    condition: &Condition,
) -> Result<Matrix> {
    let k = selected_component(condition, components.len())?;
    gaussian_analytic_velocity(&components[k], values, t)
}

/// Conditional Gaussian mixture: the condition picks the component.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureField(pub Vec<GaussianFlowSpec>);

impl VelocityField for MixtureField {
    fn evaluate(&self, values: &Matrix, time: f64, condition: &Condition) -> Result<Matrix> {
        mixture_conditional_velocity(&self.0, values, time, condition)
    }

    fn descriptor(&self) -> FieldDescriptor {
        FieldDescriptor {
            name: "mixture".into(),
            parameter_count: 0,
        }
    }
}

/// Data for flow-matching training.
#[derive(Debug, Clone, PartialEq)]
pub enum FlowData {
    Gaussian(GaussianFlowSpec),
    /// Equal-weight mixture; samples carry a one-hot condition naming their
    /// component.
    Mixture(Vec<GaussianFlowSpec>),
}

impl FlowData {
    pub fn channels(&self) -> usize {
        match self {
            Self::Gaussian(s) => s.channels(),
            Self::Mixture(c) => c.first().map_or(0, GaussianFlowSpec::channels),
        }
    }

    /// Width of the condition vector the samples carry.
    pub fn condition_dim(&self) -> usize {
        match self {
            Self::Gaussian(_) => 0,
            Self::Mixture(c) => c.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Gaussian(s) => s.validate(),
            Self::Mixture(c) => {
                if c.is_empty() {
                    return Err(Error::InvalidConfig("mixture needs a component".into()));
                }
                for s in c {
                    s.validate()?;
                    if s.channels() != c[0].channels() {
                        return Err(Error::DimensionMismatch {
                            left: c[0].channels(),
                            right: s.channels(),
                        });
                    }
                }
                Ok(())
            }
        }
    }

    /// The exact conditional-expectation velocity for this data.
    pub fn analytic_velocity(&self, values: &Matrix, t: f64, condition: &Condition) -> Result<Matrix> {
        match self {
            Self::Gaussian(s) => gaussian_analytic_velocity(s, values, t),
            Self::Mixture(c) => mixture_conditional_velocity(c, values, t, condition),
        }
    }

    fn draw_sample(&self, rng: &mut SeededRng) -> CfmSample {
        let (spec, condition) = match self {
            Self::Gaussian(s) => (s, Condition::None),
            Self::Mixture(c) => {
                let k = rng.gen_range(0..c.len());
                let mut onehot = vec![0.0; c.len()];
                onehot[k] = 1.0;
                (&c[k], Condition::Vector(onehot))
            }
        };
        let z0 = spec.draw(rng);
        let eps: Vec<f64> = (0..z0.len()).map(|_| rng.sample(StandardNormal)).collect();
        let t = rng.gen::<f64>();
        let c = z0.len();
        CfmSample {
            z0: Matrix::from_vec(1, c, z0),
            eps: Matrix::from_vec(1, c, eps),
            t,
            condition,
        }
    }

    /// `n` single-row samples with `t ~ U[0, 1)`, drawn from a stream seeded
    /// with `seed`.
    pub fn draw_batch(&self, n: usize, seed: u64) -> Vec<CfmSample> {
        let mut rng = seeded_rng(seed);
        (0..n).map(|_| self.draw_sample(&mut rng)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Architecture {
    /// `v = W·[z; t; c] + b`.
    Affine,
    /// `v = W₂·tanh(W₁·[z; t; c] + b₁) + b₂`.
    Mlp1 { hidden: usize },
}

/// A small velocity field with a flat parameter vector.
///
/// Parameter layout, all row-major: affine is `W (C × I)` then `b (C)`;
/// `mlp1` is `W₁ (H × I)`, `b₁ (H)`, `W₂ (C × H)`, `b₂ (C)`, where
/// `I = C + 1 + condition_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableField {
    architecture: Architecture,
    channels: usize,
    condition_dim: usize,
    params: Vec<f64>,
}

impl TrainableField {
    /// Affine fields start at zero; `mlp1` draws `W₁` from `N(0, 1/I)` and
    /// zeroes everything else.
    pub fn new(architecture: Architecture, channels: usize, condition_dim: usize, seed: u64) -> Result<Self> {
        let mut field = Self {
            architecture,
            channels,
            condition_dim,
            params: Vec::new(),
        };
        let count = field.expected_parameter_count()?;
        field.params = vec![0.0; count];
        if let Architecture::Mlp1 { hidden } = architecture {
            let mut rng = seeded_rng(seed);
            let inputs = field.input_dim();
            let scale = 1.0 / (inputs as f64).sqrt();
            for w in &mut field.params[..hidden * inputs] {
                *w = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(field)
    }

    pub fn from_parameters(
        architecture: Architecture,
        channels: usize,
        condition_dim: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut field = Self::new(architecture, channels, condition_dim, 0)?;
        if params.len() != field.params.len() {
            return Err(Error::SchemaMismatch(format!(
                "expected {} parameters, found {}",
                field.params.len(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::SchemaMismatch("non-finite parameter".into()));
        }
        field.params = params;
        Ok(field)
    }

    fn expected_parameter_count(&self) -> Result<usize> {
        if self.channels == 0 {
            return Err(Error::InvalidConfig("field needs at least one channel".into()));
        }
        let i = self.input_dim();
        let c = self.channels;
        Ok(match self.architecture {
            Architecture::Affine => c * i + c,
            Architecture::Mlp1 { hidden } => {
                if hidden == 0 {
                    return Err(Error::InvalidConfig("hidden width must be positive".into()));
                }
                hidden * i + hidden + c * hidden + c
            }
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn condition_dim(&self) -> usize {
        self.condition_dim
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    fn input_dim(&self) -> usize {
        self.channels + 1 + self.condition_dim
    }

    fn input(&self, z: &[f64], t: f64, c: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.input_dim());
        x.extend_from_slice(z);
        x.push(t);
        x.extend_from_slice(c);
        x
    }

    fn check_condition(&self, condition: &Condition) -> Result<()> {
        let got = condition.as_slice().len();
        if got != self.condition_dim {
            return Err(Error::BadCondition(format!(
                "field expects a condition of width {}, got {got}",
                self.condition_dim
            )));
        }
        Ok(())
    }

    /// Output for one input row; also returns hidden activations for `mlp1`.
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let i = self.input_dim();
        let c = self.channels;
        let p = &self.params;
        match self.architecture {
            Architecture::Affine => {
                let (w, b) = p.split_at(c * i);
                let out = (0..c)
                    .map(|r| b[r] + w[r * i..(r + 1) * i].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
                    .collect();
                (out, Vec::new())
            }
            Architecture::Mlp1 { hidden } => {
                let (w1, rest) = p.split_at(hidden * i);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(c * hidden);
                let h: Vec<f64> = (0..hidden)
                    .map(|r| {
                        (b1[r] + w1[r * i..(r + 1) * i].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).tanh()
                    })
                    .collect();
                let out = (0..c)
                    .map(|r| {
                        b2[r]
                            + w2[r * hidden..(r + 1) * hidden]
                                .iter()
                                .zip(&h)
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                    })
                    .collect();
                (out, h)
            }
        }
    }

    /// Accumulates `∂(gᵀ·v)/∂θ` for one input row into `grad`.
    fn backward(&self, x: &[f64], hidden_act: &[f64], g: &[f64], grad: &mut [f64]) {
        let i = self.input_dim();
        let c = self.channels;
        match self.architecture {
            Architecture::Affine => {
                let (gw, gb) = grad.split_at_mut(c * i);
                for r in 0..c {
                    for (acc, xv) in gw[r * i..(r + 1) * i].iter_mut().zip(x) {
                        *acc += g[r] * xv;
                    }
                    gb[r] += g[r];
                }
            }
            Architecture::Mlp1 { hidden } => {
                let w2 = &self.params[hidden * i + hidden..hidden * i + hidden + c * hidden];
                let (gw1, rest) = grad.split_at_mut(hidden * i);
                let (gb1, rest) = rest.split_at_mut(hidden);
                let (gw2, gb2) = rest.split_at_mut(c * hidden);
                for r in 0..c {
                    for (acc, h) in gw2[r * hidden..(r + 1) * hidden].iter_mut().zip(hidden_act) {
                        *acc += g[r] * h;
                    }
                    gb2[r] += g[r];
                }
                for j in 0..hidden {
                    let dh: f64 = (0..c).map(|r| w2[r * hidden + j] * g[r]).sum();
                    let da = dh * (1.0 - hidden_act[j] * hidden_act[j]);
                    for (acc, xv) in gw1[j * i..(j + 1) * i].iter_mut().zip(x) {
                        *acc += da * xv;
                    }
                    gb1[j] += da;
                }
            }
        }
    }

    /// Flow-matching loss (as [`crate::flow::cfm_loss`]) and its gradient
    /// with respect to the parameters.
    pub fn cfm_loss_and_grad(&self, batch: &[CfmSample]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let inv = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.params.len()];
        for s in batch {
            self.check_condition(&s.condition)?;
            let z = crate::flow::forward_interpolate(&s.z0, &s.eps, s.t)?;
            if z.cols() != self.channels {
                return Err(Error::DimensionMismatch {
                    left: z.cols(),
                    right: self.channels,
                });
            }
            for r in 0..z.rows() {
                let x = self.input(z.row(r), s.t, s.condition.as_slice());
                let (v, h) = self.forward(&x);
                let resid: Vec<f64> = v
                    .iter()
                    .zip(s.eps.row(r))
                    .zip(s.z0.row(r))
                    .map(|((v, e), z0)| v - (e - z0))
                    .collect();
                loss += resid.iter().map(|d| d * d).sum::<f64>() * inv;
                let g: Vec<f64> = resid.iter().map(|d| 2.0 * d * inv).collect();
                self.backward(&x, &h, &g, &mut grad);
            }
        }
        Ok((loss, grad))
    }
}

impl VelocityField for TrainableField {
    fn evaluate(&self, values: &Matrix, time: f64, condition: &Condition) -> Result<Matrix> {
        check_time(time)?;
        self.check_condition(condition)?;
        if values.cols() != self.channels {
            return Err(Error::DimensionMismatch {
                left: values.cols(),
                right: self.channels,
            });
        }
        let mut out = Matrix::zeros(values.rows(), self.channels);
        for r in 0..values.rows() {
            let x = self.input(values.row(r), time, condition.as_slice());
            out.row_mut(r).copy_from_slice(&self.forward(&x).0);
        }
        Ok(out)
    }

    fn descriptor(&self) -> FieldDescriptor {
        let name = match self.architecture {
            Architecture::Affine => "affine".to_string(),
            Architecture::Mlp1 { hidden } => format!("mlp1-{hidden}"),
        };
        FieldDescriptor {
            name,
            parameter_count: self.params.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Batch `s` is drawn from `derive_seed(seed, s)`.
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

/// Fits `field` to `data` with AdamW on the flow-matching loss.
///
/// Returns the trained field and the loss of every batch, measured before
/// that batch's update.
pub fn train_cfm(
    field: &TrainableField,
    data: &FlowData,
    config: &TrainConfig,
) -> Result<(TrainableField, Vec<f64>)> {
    data.validate()?;
    config.optimizer.validate()?;
    if data.channels() != field.channels || data.condition_dim() != field.condition_dim {
        return Err(Error::InvalidConfig(format!(
            "field expects {} channels / condition width {}, data has {} / {}",
            field.channels,
            field.condition_dim,
            data.channels(),
            data.condition_dim()
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut trained = field.clone();
    let mut params = Matrix::from_vec(1, trained.params.len(), std::mem::take(&mut trained.params));
    let mut state = OptimizerState::for_shape(&params);
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = data.draw_batch(config.batch_size, derive_seed(config.seed, step as u64));
        trained.params = params.into_vec();
        let (loss, grad) = trained.cfm_loss_and_grad(&batch)?;
        params = Matrix::from_vec(1, trained.params.len(), std::mem::take(&mut trained.params));
        adamw_step_in_place(&mut state, &mut params, &Matrix::from_vec(1, grad.len(), grad), &config.optimizer)?;
        if !params.is_finite() {
            return Err(Error::Diverged { step });
        }
        curve.push(loss);
    }
    trained.params = params.into_vec();
    Ok((trained, curve))
}

/// Mean squared difference (summed over channels, averaged over samples)
/// between `field` and the analytic velocity of `data` at the interpolated
/// points of `samples`.
pub fn velocity_mse(field: &dyn VelocityField, data: &FlowData, samples: &[CfmSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for s in samples {
        let z = crate::flow::forward_interpolate(&s.z0, &s.eps, s.t)?;
        let a = data.analytic_velocity(&z, s.t, &s.condition)?;
        let b = field.evaluate(&z, s.t, &s.condition)?;
        total += a.sub(&b).squared_norm();
    }
    Ok(total / samples.len() as f64)
}

//! Rectified-flow forward process, flow-matching loss, and the Euler
//! sampler with interleaved guidance.
//!
//! The forward process is `z(t) = (1 − t)·z0 + t·ε`, and a velocity field
//! predicts `ε − z0`, the data → noise direction. Sampling therefore runs
//! from `t = 1` down to `t = 0` with `z ← z − Δ·v(z, t)`, `Δ = 1/T`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{GuidanceMode, GuidanceObjective, GuidanceOrder, GuidanceSpec};
use crate::matrix::Matrix;
use crate::optim::{adamw_step_in_place, OptimizerState};
use crate::slat::{init_latent_state, LatentState, StructuredLatent};

/// Number of flow steps used unless configured otherwise.
pub const DEFAULT_STEPS: usize = 300;

/// Global conditioning signal. Stands in for an image or text embedding.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "payload")]
pub enum Condition {
    #[default]
    None,
    Vector(Vec<f64>),
}

impl Condition {
    pub fn vector(payload: Vec<f64>) -> Result<Self> {
        if payload.is_empty() || payload.iter().any(|v| !v.is_finite()) {
            return Err(Error::BadCondition("vector condition needs finite entries".into()));
        }
        Ok(Self::Vector(payload))
    }

    /// Payload entries; empty for [`Condition::None`].
    pub fn as_slice(&self) -> &[f64] {
        match self {
            Self::None => &[],
            Self::Vector(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldDescriptor {
    pub name: String,
    pub parameter_count: usize,
}

/// A time-dependent vector field `v(z, t | c)` evaluated on every latent row.
///
/// Implementations must be deterministic and return finite values for
/// finite inputs.
pub trait VelocityField: Send + Sync {
    fn evaluate(&self, values: &Matrix, time: f64, condition: &Condition) -> Result<Matrix>;

    fn descriptor(&self) -> FieldDescriptor;
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn evaluate(&self, values: &Matrix, time: f64, condition: &Condition) -> Result<Matrix> {
        (**self).evaluate(values, time, condition)
    }

    fn descriptor(&self) -> FieldDescriptor {
        (**self).descriptor()
    }
}

impl<F: VelocityField + ?Sized> VelocityField for Box<F> {
    fn evaluate(&self, values: &Matrix, time: f64, condition: &Condition) -> Result<Matrix> {
        (**self).evaluate(values, time, condition)
    }

    fn descriptor(&self) -> FieldDescriptor {
        (**self).descriptor()
    }
}

/// `v ≡ 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroField;

impl VelocityField for ZeroField {
    fn evaluate(&self, values: &Matrix, _time: f64, _condition: &Condition) -> Result<Matrix> {
        Ok(Matrix::zeros(values.rows(), values.cols()))
    }

    fn descriptor(&self) -> FieldDescriptor {
        FieldDescriptor {
            name: "zero".into(),
            parameter_count: 0,
        }
    }
}

pub(crate) fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::TimeOutOfRange(t))
    }
}

/// `(1 − t)·z0 + t·eps`.
pub fn forward_interpolate(z0: &Matrix, eps: &Matrix, t: f64) -> Result<Matrix> {
    z0.ensure_same_shape(eps)?;
    check_time(t)?;
    let mut out = z0.clone();
    for (o, e) in out.as_mut_slice().iter_mut().zip(eps.as_slice()) {
        *o = (1.0 - t) * *o + t * e;
    }
    Ok(out)
}

/// One flow-matching training example.
#[derive(Debug, Clone, PartialEq)]
pub struct CfmSample {
    pub z0: Matrix,
    pub eps: Matrix,
    pub t: f64,
    pub condition: Condition,
}

/// Squared error of `field` against the target `ε − z0` at `z(t)`, for one
/// sample. Summed over all entries.
pub fn cfm_sample_loss(field: &dyn VelocityField, sample: &CfmSample) -> Result<f64> {
    let z = forward_interpolate(&sample.z0, &sample.eps, sample.t)?;
    let v = field.evaluate(&z, sample.t, &sample.condition)?;
    let target = sample.eps.sub(&sample.z0);
    Ok(v.sub(&target).squared_norm())
}

/// Mean of [`cfm_sample_loss`] over a batch.
pub fn cfm_loss(field: &dyn VelocityField, batch: &[CfmSample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for s in batch {
        total += cfm_sample_loss(field, s)?;
    }
    Ok(total / batch.len() as f64)
}

/// One reverse Euler step from `t` to `t − dt`: `values − dt·v(values, t)`.
pub fn euler_step(
    values: &Matrix,
    t: f64,
    dt: f64,
    field: &dyn VelocityField,
    condition: &Condition,
) -> Result<Matrix> {
    check_time(t)?;
    if !(dt >= 0.0) || t - dt < -1e-12 {
        return Err(Error::TimeOutOfRange(t - dt));
    }
    let v = field.evaluate(values, t, condition)?;
    values.ensure_same_shape(&v)?;
    let mut out = values.clone();
    out.axpy(-dt, &v);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// `T`, the number of Euler steps on the linear grid.
    pub steps: usize,
    pub seed: u64,
    pub guidance: GuidanceSpec,
    /// Keep a copy of the latents after every step in the report.
    pub record_trajectory: bool,
}

impl SamplerConfig {
    pub fn new(steps: usize, seed: u64) -> Self {
        Self {
            steps,
            seed,
            guidance: GuidanceSpec::default(),
            record_trajectory: false,
        }
    }

    pub fn with_guidance(mut self, guidance: GuidanceSpec) -> Self {
        self.guidance = guidance;
        self
    }
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self::new(DEFAULT_STEPS, 0)
    }
}

/// The time at grid index `k` of a `T`-step linear schedule, `(T − k)/T`.
pub fn grid_time(k: usize, steps: usize) -> f64 {
    (steps - k) as f64 / steps as f64
}

/// One guidance application.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceRecord {
    /// Flow step index (0-based) the application belongs to.
    pub step: usize,
    /// Flow time of the latents the guidance acted on.
    pub time: f64,
    pub loss_before: f64,
    pub loss_after: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GuidanceReport {
    pub objective: GuidanceObjective,
    pub records: Vec<GuidanceRecord>,
    /// `(time, latents)` after every flow step, when requested.
    #[serde(skip)]
    pub trajectory: Vec<(f64, Matrix)>,
}

impl GuidanceReport {
    /// Losses after each application, in order.
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss_after).collect()
    }
}

/// Unguided reverse flow from seeded Gaussian noise at `t = 1` to `t = 0`.
///
/// The guidance part of `config` is ignored.
pub fn sample(
    shape: &StructuredLatent,
    field: &dyn VelocityField,
    condition: &Condition,
    config: &SamplerConfig,
) -> Result<LatentState> {
    let unguided = SamplerConfig {
        guidance: GuidanceSpec::default(),
        ..config.clone()
    };
    Ok(run(shape, field, condition, &unguided)?.0)
}

/// Reverse flow with guidance interleaved every `apply_every` steps.
///
/// With the `none` objective this is bit-identical to [`sample`].
pub fn sample_guided(
    shape: &StructuredLatent,
    field: &dyn VelocityField,
    condition: &Condition,
    config: &SamplerConfig,
) -> Result<(LatentState, GuidanceReport)> {
    run(shape, field, condition, config)
}

fn run(
    shape: &StructuredLatent,
    field: &dyn VelocityField,
    condition: &Condition,
    config: &SamplerConfig,
) -> Result<(LatentState, GuidanceReport)> {
    if config.steps == 0 {
        return Err(Error::InvalidConfig("sampler needs at least one step".into()));
    }
    let spec = &config.guidance;
    spec.validate(shape.len(), shape.channels())?;

    let mut state = init_latent_state(shape, config.seed);
    let mut report = GuidanceReport {
        objective: spec.objective,
        ..GuidanceReport::default()
    };
    let mut optimizer = OptimizerState::for_shape(&state.values);
    let steps = config.steps;
    let dt = 1.0 / steps as f64;

    for k in 0..steps {
        let t = grid_time(k, steps);
        let apply = spec.is_active() && k % spec.apply_every == 0;

        if apply && spec.order == GuidanceOrder::BeforeFlow {
            let record = guide(spec, &mut state.values, &mut optimizer, k, t)?;
            report.records.push(record);
        }
        state.values = euler_step(&state.values, t, dt, field, condition)?;
        state.time = grid_time(k + 1, steps);
        if apply && spec.order == GuidanceOrder::AfterFlow {
            let record = guide(spec, &mut state.values, &mut optimizer, k, state.time)?;
            report.records.push(record);
        }

        if !state.values.is_finite() {
            return Err(Error::Diverged { step: k });
        }
        if config.record_trajectory {
            report.trajectory.push((state.time, state.values.clone()));
        }
    }
    Ok((state, report))
}

fn guide(
    spec: &GuidanceSpec,
    values: &mut Matrix,
    optimizer: &mut OptimizerState,
    step: usize,
    time: f64,
) -> Result<GuidanceRecord> {
    let loss_before = spec.loss(values)?;
    if spec.weight > 0.0 {
        match spec.mode {
            GuidanceMode::GradientStep => {
                let g = spec.grad(values)?;
                values.axpy(-spec.weight, &g);
            }
            GuidanceMode::OptimizerSteps => {
                if spec.reset_optimizer {
                    *optimizer = OptimizerState::for_shape(values);
                }
                for _ in 0..spec.inner_steps {
                    let mut g = spec.grad(values)?;
                    g.scale(spec.weight);
                    adamw_step_in_place(optimizer, values, &g, &spec.optimizer)?;
                }
            }
        }
    }
    let loss_after = spec.loss(values)?;
    Ok(GuidanceRecord {
        step,
        time,
        loss_before,
        loss_after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct ConstField(f64);

    impl VelocityField for ConstField {
        fn evaluate(&self, values: &Matrix, _: f64, _: &Condition) -> Result<Matrix> {
            Ok(Matrix::filled(values.rows(), values.cols(), self.0))
        }

        fn descriptor(&self) -> FieldDescriptor {
            FieldDescriptor {
                name: "const".into(),
                parameter_count: 1,
            }
        }
    }

    fn shape() -> StructuredLatent {
        StructuredLatent::from_positions(4, 2, &[[0, 0, 0], [1, 0, 0], [0, 3, 1]]).unwrap()
    }

    #[test]
    fn interpolation_endpoints() {
        let z0 = Matrix::from_rows(&[[0.3, -1.0]]).unwrap();
        let eps = Matrix::from_rows(&[[2.0, 5.0]]).unwrap();
        assert_eq!(forward_interpolate(&z0, &eps, 0.0).unwrap(), z0);
        assert_eq!(forward_interpolate(&z0, &eps, 1.0).unwrap(), eps);
        let mid = forward_interpolate(&Matrix::zeros(1, 1), &Matrix::filled(1, 1, 2.0), 0.5).unwrap();
        assert_eq!(mid[(0, 0)], 1.0);
        assert!(matches!(forward_interpolate(&z0, &eps, 1.5), Err(Error::TimeOutOfRange(_))));
        assert!(forward_interpolate(&z0, &Matrix::zeros(2, 2), 0.5).is_err());
    }

    #[test]
    fn cfm_loss_cases() {
        let s = CfmSample {
            z0: Matrix::from_rows(&[[1.0, 1.0]]).unwrap(),
            eps: Matrix::from_rows(&[[4.0, 5.0]]).unwrap(),
            t: 0.3,
            condition: Condition::None,
        };
        assert_eq!(cfm_loss(&ZeroField, std::slice::from_ref(&s)).unwrap(), 25.0);
        assert!(matches!(cfm_loss(&ZeroField, &[]), Err(Error::EmptyBatch)));

        struct Exact;
        impl VelocityField for Exact {
            fn evaluate(&self, v: &Matrix, _: f64, _: &Condition) -> Result<Matrix> {
                Ok(Matrix::from_rows(&[[3.0, 4.0]]).unwrap().select_rows(&vec![0; v.rows()]))
            }
            fn descriptor(&self) -> FieldDescriptor {
                FieldDescriptor { name: "exact".into(), parameter_count: 0 }
            }
        }
        assert_eq!(cfm_loss(&Exact, &[s]).unwrap(), 0.0);
    }

    #[test]
    fn euler_step_sign() {
        let v = Matrix::filled(1, 1, 1.0);
        let out = euler_step(&v, 0.5, 0.1, &ConstField(2.0), &Condition::None).unwrap();
        assert!((out[(0, 0)] - 0.8).abs() < 1e-15);
        let same = euler_step(&v, 0.5, 0.1, &ZeroField, &Condition::None).unwrap();
        assert_eq!(same, v);
        assert!(euler_step(&v, 0.05, 0.1, &ZeroField, &Condition::None).is_err());
    }

    #[test]
    fn time_grid() {
        let steps = 300;
        assert_eq!(grid_time(0, steps), 1.0);
        assert_eq!(grid_time(steps, steps), 0.0);
        for k in 0..steps {
            let d = grid_time(k, steps) - grid_time(k + 1, steps);
            assert!((d - 1.0 / steps as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn one_step_zero_field_returns_noise() {
        let s = shape();
        let out = sample(&s, &ZeroField, &Condition::None, &SamplerConfig::new(1, 9)).unwrap();
        assert_eq!(out.values, init_latent_state(&s, 9).values);
        assert_eq!(out.time, 0.0);
        assert_eq!(out.positions(), s.positions());
    }

    #[test]
    fn deterministic() {
        let s = shape();
        let cfg = SamplerConfig::new(25, 3);
        let a = sample(&s, &ConstField(0.5), &Condition::None, &cfg).unwrap();
        let b = sample(&s, &ConstField(0.5), &Condition::None, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_weight_guidance_is_noop() {
        let s = shape();
        let target = Matrix::filled(3, 2, 0.25);
        for mode in [GuidanceMode::GradientStep, GuidanceMode::OptimizerSteps] {
            let spec = GuidanceSpec {
                weight: 0.0,
                mode,
                ..GuidanceSpec::appearance(target.clone())
            };
            let cfg = SamplerConfig::new(10, 1).with_guidance(spec);
            let plain = sample(&s, &ConstField(0.1), &Condition::None, &cfg).unwrap();
            let (guided, report) = sample_guided(&s, &ConstField(0.1), &Condition::None, &cfg).unwrap();
            assert_eq!(plain.values.as_slice(), guided.values.as_slice());
            assert_eq!(report.records.len(), 10);
        }
    }

    #[test]
    fn apply_every_and_order() {
        let s = shape();
        let spec = GuidanceSpec {
            apply_every: 3,
            mode: GuidanceMode::GradientStep,
            weight: 0.1,
            order: GuidanceOrder::BeforeFlow,
            ..GuidanceSpec::appearance(Matrix::zeros(3, 2))
        };
        let cfg = SamplerConfig {
            record_trajectory: true,
            ..SamplerConfig::new(10, 1).with_guidance(spec)
        };
        let (_, report) = sample_guided(&s, &ZeroField, &Condition::None, &cfg).unwrap();
        let steps: Vec<usize> = report.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 3, 6, 9]);
        assert_eq!(report.records[0].time, 1.0);
        assert_eq!(report.trajectory.len(), 10);
        // gradient step with λ = 0.1 on L = mean ‖z‖²: z ← (1 − 0.2/L) z
        for r in &report.records {
            assert!(r.loss_after < r.loss_before);
        }
    }

    #[test]
    fn missing_inputs() {
        let s = shape();
        let spec = GuidanceSpec {
            objective: GuidanceObjective::Appearance,
            ..GuidanceSpec::default()
        };
        let cfg = SamplerConfig::new(5, 0).with_guidance(spec);
        assert!(matches!(
            sample_guided(&s, &ZeroField, &Condition::None, &cfg),
            Err(Error::MissingTarget)
        ));
        assert!(sample(&s, &ZeroField, &Condition::None, &SamplerConfig::new(0, 0)).is_err());
    }
}

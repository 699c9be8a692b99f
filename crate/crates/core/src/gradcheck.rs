//! Central finite differences, used as an independent check on every
//! hand-derived gradient in the crate.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::flow::CfmSample;
use crate::guidance::{
    appearance_loss, appearance_loss_grad, global_pool_loss, global_pool_loss_grad, structure_loss,
    structure_loss_grad, Denominator,
};
use crate::matrix::Matrix;
use crate::rng::{derive_seed, seeded_rng, SeededRng};
use crate::toyflows::{Architecture, FlowData, GaussianFlowSpec, TrainableField};

/// Step used by the gradient sweeps.
pub const DEFAULT_STEP: f64 = 1e-4;

/// `(f(x + h·e) − f(x − h·e)) / 2h` for every entry of `point`.
///
/// Exact (up to rounding) for affine `f`.
pub fn finite_difference_grad(loss: impl Fn(&Matrix) -> f64, point: &Matrix, h: f64) -> Matrix {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = point.clone();
    let mut grad = Matrix::zeros(point.rows(), point.cols());
    for idx in 0..point.as_slice().len() {
        let x = point.as_slice()[idx];
        probe.as_mut_slice()[idx] = x + h;
        let up = loss(&probe);
        probe.as_mut_slice()[idx] = x - h;
        let down = loss(&probe);
        probe.as_mut_slice()[idx] = x;
        grad.as_mut_slice()[idx] = (up - down) / (2.0 * h);
    }
    grad
}

/// `‖analytic − numeric‖∞ / ‖numeric‖∞`.
///
/// When the numeric gradient is below `1e-8` everywhere the absolute
/// max-norm error is returned instead.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let err = analytic.sub(numeric).max_abs();
    let scale = numeric.max_abs();
    if scale > 1e-8 {
        err / scale
    } else {
        err
    }
}

/// A gradient implementation covered by [`gradient_sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradTarget {
    Appearance,
    StructureComplement,
    StructureAllPairs,
    GlobalPool,
    /// Flow-matching loss with respect to affine-field parameters.
    CfmAffine,
    /// Flow-matching loss with respect to one-hidden-layer parameters.
    CfmMlp,
}

impl GradTarget {
    pub const ALL: [GradTarget; 6] = [
        Self::Appearance,
        Self::StructureComplement,
        Self::StructureAllPairs,
        Self::GlobalPool,
        Self::CfmAffine,
        Self::CfmMlp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Appearance => "appearance",
            Self::StructureComplement => "structure_complement",
            Self::StructureAllPairs => "structure_all_pairs",
            Self::GlobalPool => "global_pool",
            Self::CfmAffine => "cfm_affine",
            Self::CfmMlp => "cfm_mlp",
        }
    }

    /// Acceptable relative error. Pooled and flow-matching gradients pass
    /// through more arithmetic and get a looser bound.
    pub fn tolerance(self) -> f64 {
        match self {
            Self::Appearance | Self::StructureComplement | Self::StructureAllPairs => 1e-5,
            Self::GlobalPool | Self::CfmAffine | Self::CfmMlp => 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub target: GradTarget,
    pub instances: usize,
    pub max_relative_error: f64,
    /// Index of the instance with the largest error.
    pub worst_instance: usize,
}

impl SweepResult {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.target.tolerance()
    }
}

/// Compares the analytic gradient of `target` with central differences on
/// `instances` random problems (`L ≤ 20`, `C ≤ 8`). Instance `i` is drawn
/// from `derive_seed(seed, i)`.
pub fn gradient_sweep(target: GradTarget, instances: usize, seed: u64) -> Result<SweepResult> {
    let mut result = SweepResult {
        target,
        instances,
        max_relative_error: 0.0,
        worst_instance: 0,
    };
    for i in 0..instances {
        let mut rng = seeded_rng(derive_seed(seed, i as u64));
        let err = instance_error(target, &mut rng)?;
        if err > result.max_relative_error || err.is_nan() {
            result.max_relative_error = err;
            result.worst_instance = i;
        }
    }
    Ok(result)
}

fn gaussian(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn instance_error(target: GradTarget, rng: &mut SeededRng) -> Result<f64> {
    match target {
        GradTarget::Appearance => {
            let (l, c) = (rng.gen_range(1..=20), rng.gen_range(1..=8));
            let z = gaussian(l, c, rng);
            let t = gaussian(l, c, rng);
            let numeric = finite_difference_grad(|x| appearance_loss(x, &t).unwrap(), &z, DEFAULT_STEP);
            Ok(relative_error(&appearance_loss_grad(&z, &t)?, &numeric))
        }
        GradTarget::StructureComplement | GradTarget::StructureAllPairs => {
            let denominator = if target == GradTarget::StructureComplement {
                Denominator::Complement
            } else {
                Denominator::AllPairs
            };
            // every cluster needs two members, and the complement mode a
            // second cluster
            let l = rng.gen_range(4..=20);
            let k = rng.gen_range(2..=l / 2);
            let mut labels: Vec<usize> = (0..l).map(|i| i % k).collect();
            labels.shuffle(rng);
            // cosine similarity is only smooth away from the origin
            let c = rng.gen_range(2..=8);
            let z = loop {
                let z = gaussian(l, c, rng);
                if z.row_iter().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 0.09) {
                    break z;
                }
            };
            let numeric = finite_difference_grad(
                |x| structure_loss(x, &labels, denominator).unwrap(),
                &z,
                DEFAULT_STEP,
            );
            Ok(relative_error(&structure_loss_grad(&z, &labels, denominator)?, &numeric))
        }
        GradTarget::GlobalPool => {
            let (l, c) = (rng.gen_range(2..=20), rng.gen_range(1..=8));
            // a probe must not move a different row into the min or max
            let z = loop {
                let z = gaussian(l, c, rng);
                if extremes_separated(&z, 100.0 * DEFAULT_STEP) {
                    break z;
                }
            };
            let m = rng.gen_range(1..=20);
            let a = gaussian(m, c, rng);
            let numeric = finite_difference_grad(|x| global_pool_loss(x, &a).unwrap(), &z, DEFAULT_STEP);
            Ok(relative_error(&global_pool_loss_grad(&z, &a)?, &numeric))
        }
        GradTarget::CfmAffine | GradTarget::CfmMlp => {
            let architecture = if target == GradTarget::CfmAffine {
                Architecture::Affine
            } else {
                Architecture::Mlp1 {
                    hidden: rng.gen_range(1..=6),
                }
            };
            let c = rng.gen_range(1..=4);
            let component = |rng: &mut SeededRng| GaussianFlowSpec {
                mean: (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                std: rng.gen_range(0.3..1.5),
            };
            let data = if rng.gen_bool(0.5) {
                FlowData::Gaussian(component(rng))
            } else {
                FlowData::Mixture(vec![component(rng), component(rng)])
            };
            let template = TrainableField::new(architecture, c, data.condition_dim(), 0)?;
            let p = template.parameters().len();
            let params = Matrix::from_fn(1, p, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
            let batch: Vec<CfmSample> = data.draw_batch(8, rng.gen());
            let loss = |x: &Matrix| {
                TrainableField::from_parameters(architecture, c, data.condition_dim(), x.as_slice().to_vec())
                    .and_then(|f| f.cfm_loss_and_grad(&batch))
                    .map(|(l, _)| l)
                    .unwrap()
            };
            let field =
                TrainableField::from_parameters(architecture, c, data.condition_dim(), params.as_slice().to_vec())?;
            let (_, grad) = field.cfm_loss_and_grad(&batch)?;
            let numeric = finite_difference_grad(loss, &params, DEFAULT_STEP);
            Ok(relative_error(&Matrix::from_vec(1, p, grad), &numeric))
        }
    }
}

/// Whether every column's min and max lead the runner-up by more than `gap`.
fn extremes_separated(z: &Matrix, gap: f64) -> bool {
    (0..z.cols()).all(|ch| {
        let mut col: Vec<f64> = (0..z.rows()).map(|r| z[(r, ch)]).collect();
        col.sort_by(f64::total_cmp);
        let n = col.len();
        col[1] - col[0] > gap && col[n - 1] - col[n - 2] > gap
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let p = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let g = finite_difference_grad(|x| x.squared_norm(), &p, 1e-5);
        assert!((g[(0, 0)] - 2.0).abs() < 1e-8);
        assert!((g[(0, 1)] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_and_linear() {
        let p = Matrix::from_rows(&[[0.25, -1.0], [3.0, 0.5]]).unwrap();
        let g = finite_difference_grad(|_| 7.0, &p, 1e-3);
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
        // dyadic point and step keep the arithmetic exact
        let g = finite_difference_grad(|x| x.as_slice().iter().sum(), &p, 0.125);
        assert!(g.as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sweeps_are_seeded() {
        for target in GradTarget::ALL {
            let a = gradient_sweep(target, 5, 3).unwrap();
            assert_eq!(a, gradient_sweep(target, 5, 3).unwrap());
            assert!(a.passed(), "{a:?}");
        }
    }
}

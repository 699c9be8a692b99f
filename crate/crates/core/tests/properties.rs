use flowguide::flow::{sample, sample_guided, Condition, SamplerConfig, ZeroField};
use flowguide::guidance::{structure_loss, Denominator, GuidanceSpec};
use flowguide::partition::{kmeans, FeatureField, KMeansConfig};
use flowguide::slat::{canonical_key, init_latent_state, StructuredLatent};
use flowguide::toyflows::{GaussianField, GaussianFlowSpec};
use flowguide::Matrix;
use proptest::prelude::*;

fn cells() -> impl Strategy<Value = Vec<[u32; 3]>> {
    prop::collection::btree_set([0u32..16, 0u32..16, 0u32..16], 1..60).prop_map(|s| s.into_iter().collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn construction_order_never_matters(cells in cells(), rotate in 0usize..60) {
        let entries: Vec<([u32; 3], Vec<f64>)> = cells.iter().map(|p| (*p, vec![p[0] as f64])).collect();
        let mut shuffled = entries.clone();
        let r = rotate % shuffled.len();
        shuffled.rotate_left(r);
        shuffled.reverse();
        let a = StructuredLatent::new(16, 1, entries).unwrap();
        let b = StructuredLatent::new(16, 1, shuffled).unwrap();
        prop_assert_eq!(&a, &b);
        let keys: Vec<_> = a.positions().iter().map(canonical_key).collect();
        prop_assert!(keys.windows(2).all(|w| w[0] < w[1]));
        // each latent stays attached to its voxel
        for (p, row) in a.positions().iter().zip(a.latents().row_iter()) {
            prop_assert_eq!(row[0], f64::from(p[0]));
        }
    }

    #[test]
    fn kmeans_history_and_labels(
        points in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 2..40),
        k in 1usize..6,
        seed in any::<u64>(),
    ) {
        prop_assume!(k <= points.len());
        let rows: Vec<f64> = points.concat();
        let field = FeatureField::new("p", Matrix::from_vec(points.len(), 3, rows)).unwrap();
        let config = KMeansConfig::new(k, seed);
        let a = kmeans(&field, &config).unwrap();
        prop_assert!(a.inertia_history.windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0].abs()));
        prop_assert!(a.labels.iter().all(|&l| l < k));
        // no cluster is left empty
        prop_assert!(a.members().iter().all(|m| !m.is_empty()));
        prop_assert_eq!(a, kmeans(&field, &config).unwrap());
    }

    #[test]
    fn structure_loss_ignores_row_scale(
        values in prop::collection::vec(0.1f64..2.0, 24),
        scales in prop::collection::vec(0.01f64..100.0, 8),
    ) {
        let z = Matrix::from_vec(8, 3, values);
        let labels = [0, 0, 1, 1, 2, 2, 0, 1];
        let mut scaled = z.clone();
        for (i, s) in scales.iter().enumerate() {
            scaled.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
        for d in [Denominator::Complement, Denominator::AllPairs] {
            let a = structure_loss(&z, &labels, d).unwrap();
            let b = structure_loss(&scaled, &labels, d).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}

fn shape() -> StructuredLatent {
    let cells: Vec<[u32; 3]> = (0..12).map(|i| [i % 3, i / 3, 1]).collect();
    StructuredLatent::from_positions(4, 3, &cells).unwrap()
}

#[test]
fn one_zero_field_step_returns_the_noise() {
    let s = shape();
    let out = sample(&s, &ZeroField, &Condition::None, &SamplerConfig::new(1, 42)).unwrap();
    assert_eq!(out.values, init_latent_state(&s, 42).values);
    assert_eq!(out.time, 0.0);
}

#[test]
fn sampling_is_reproducible() {
    let s = shape();
    let field = GaussianField(GaussianFlowSpec::new(vec![1.0, 0.0, -1.0], 0.5).unwrap());
    let config = SamplerConfig::new(50, 9);
    let a = sample(&s, &field, &Condition::None, &config).unwrap();
    let b = sample(&s, &field, &Condition::None, &config).unwrap();
    assert_eq!(a.values, b.values);
    let c = sample(&s, &field, &Condition::None, &SamplerConfig::new(50, 10)).unwrap();
    assert_ne!(a.values, c.values);
}

#[test]
fn guidance_every_other_step() {
    let s = shape();
    let mut spec = GuidanceSpec::appearance(Matrix::filled(12, 3, 0.5));
    spec.apply_every = 2;
    let (_, report) = sample_guided(&s, &ZeroField, &Condition::None, &SamplerConfig::new(10, 1).with_guidance(spec))
        .unwrap();
    let steps: Vec<usize> = report.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 2, 4, 6, 8]);
}

#[test]
fn plain_descent_on_appearance_loss() {
    use flowguide::guidance::{appearance_loss, appearance_loss_grad};
    use flowguide::rng::seeded_rng;
    use rand_distr::{Distribution, StandardNormal};
    // a single row contracts by (1 − 2·lr)² per step; more rows contract
    // more slowly because the loss averages over them
    for seed in 0..20 {
        let mut rng = seeded_rng(seed);
        let c = 1 + (seed as usize % 8);
        let target = Matrix::from_fn(1, c, |_, _| StandardNormal.sample(&mut rng));
        let mut x = Matrix::from_fn(1, c, |_, _| StandardNormal.sample(&mut rng));
        let initial = appearance_loss(&x, &target).unwrap();
        for _ in 0..500 {
            let g = appearance_loss_grad(&x, &target).unwrap();
            x.axpy(-1e-2, &g);
        }
        assert!(appearance_loss(&x, &target).unwrap() < 1e-6 * initial);
    }
}

#[test]
fn adamw_is_pure() {
    use flowguide::optim::{adamw_step, OptimizerConfig, OptimizerState};
    let values = Matrix::from_rows(&[[1.0, -2.0], [0.5, 0.0]]).unwrap();
    let grad = Matrix::from_rows(&[[0.3, 0.0], [-1.0, 2.0]]).unwrap();
    let state = OptimizerState::for_shape(&values);
    let config = OptimizerConfig::default();
    let a = adamw_step(&state, &values, &grad, &config).unwrap();
    let b = adamw_step(&state, &values, &grad, &config).unwrap();
    assert_eq!(a, b);
    assert_eq!(state, OptimizerState::for_shape(&values));
}

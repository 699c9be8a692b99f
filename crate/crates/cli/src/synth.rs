//! Toy query/appearance pairs: two chairs with different proportions whose
//! latents and features are built from per-part prototypes.

use std::collections::BTreeSet;

use flowguide::partition::{part_index, synthesize_part_features, FeatureField, PartBox};
use flowguide::rng::{derive_seed, seeded_rng};
use flowguide::slat::StructuredLatent;
use flowguide::{Matrix, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Box extents as fractions of the grid: `(lo, hi)` per axis, half-open.
type FracBox = [(f64, f64); 3];

/// Seat, back, then four legs.
fn chair(back_top: f64, leg_width: f64) -> Vec<FracBox> {
    let seat = [(0.2, 0.8), (0.4, 0.5), (0.2, 0.8)];
    let back = [(0.2, 0.8), (0.5, back_top), (0.7, 0.8)];
    let mut parts = vec![seat, back];
    for x in [0.2, 0.8 - leg_width] {
        for z in [0.2, 0.8 - leg_width] {
            parts.push([(x, x + leg_width), (0.0, 0.4), (z, z + leg_width)]);
        }
    }
    parts
}

fn to_voxels(b: &FracBox, n: u32) -> PartBox {
    let lo = |f: f64| (f * n as f64).round() as u16;
    let hi = |f: f64| ((f * n as f64).round() as u16).saturating_sub(1).max(lo(0.0));
    PartBox {
        min: [lo(b[0].0), lo(b[1].0), lo(b[2].0)],
        max: [hi(b[0].1), hi(b[1].1), hi(b[2].1)],
    }
}

pub struct SynthShape {
    pub latent: StructuredLatent,
    pub features: FeatureField,
}

/// Builds one chair. `variant` 0 is the query, 1 the appearance shape.
pub fn chair_shape(
    variant: u64,
    resolution: u32,
    channels: usize,
    noise: f64,
    seed: u64,
    shape_id: &str,
) -> Result<SynthShape> {
    let fracs = if variant == 0 { chair(0.9, 0.1) } else { chair(0.95, 0.15) };
    let parts: Vec<PartBox> = fracs.iter().map(|b| to_voxels(b, resolution)).collect();
    let mut cells = BTreeSet::new();
    for b in &parts {
        for x in b.min[0]..=b.max[0] {
            for y in b.min[1]..=b.max[1] {
                for z in b.min[2]..=b.max[2] {
                    cells.insert([u32::from(x), u32::from(y), u32::from(z)]);
                }
            }
        }
    }
    let cells: Vec<[u32; 3]> = cells.into_iter().collect();
    let bare = StructuredLatent::from_positions(resolution, channels, &cells)?;

    let mut rng = seeded_rng(derive_seed(seed, 2 * variant));
    let prototypes = Matrix::from_fn(parts.len() + 1, channels, |_, _| rng.sample(StandardNormal));
    let latents = Matrix::from_fn(bare.len(), channels, |i, c| {
        let part = part_index(&parts, &bare.positions()[i]);
        prototypes[(part, c)] + noise * rng.sample::<f64, _>(StandardNormal)
    });
    let latent = bare.with_latents(latents)?;
    let mut features = synthesize_part_features(&latent, &parts, noise, derive_seed(seed, 2 * variant + 1))?;
    features.shape_id = shape_id.to_string();
    Ok(SynthShape { latent, features })
}

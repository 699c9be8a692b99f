//! ASCII PLY export: one vertex per voxel at its cell center, colored by the
//! top three principal components of the latents.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::matrix::Matrix;
use crate::slat::StructuredLatent;

use super::write_bytes;

/// Color used for principal directions without variance.
pub const DEGENERATE_GRAY: u8 = 128;

/// Per-voxel RGB from a PCA of the latent rows.
///
/// Each of the top three components is min-max scaled to `0..=255`. A
/// component whose eigenvalue is negligible (or that does not exist because
/// there are fewer than three channels) maps to mid-gray. Eigenvector signs
/// are fixed so the largest-magnitude entry is positive.
pub fn pca_colors(latents: &Matrix) -> Vec<[u8; 3]> {
    let n = latents.rows();
    let c = latents.cols();
    let mut colors = vec![[DEGENERATE_GRAY; 3]; n];
    if n == 0 || c == 0 {
        return colors;
    }
    let means = latents.column_means();
    let mut cov = Matrix::zeros(c, c);
    for row in latents.row_iter() {
        for a in 0..c {
            let da = row[a] - means[a];
            for b in a..c {
                cov[(a, b)] += da * (row[b] - means[b]);
            }
        }
    }
    for a in 0..c {
        for b in a..c {
            let v = cov[(a, b)] / n as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let trace: f64 = (0..c).map(|a| cov[(a, a)]).sum();
    if trace <= 0.0 {
        return colors;
    }
    let (values, vectors) = symmetric_eigen(&cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));

    for (slot, &idx) in order.iter().take(3).enumerate() {
        if values[idx] <= 1e-12 * trace {
            continue;
        }
        let mut dir: Vec<f64> = (0..c).map(|r| vectors[(r, idx)]).collect();
        let pivot = dir
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if v.abs() > dir[best].abs() { i } else { best });
        if dir[pivot] < 0.0 {
            dir.iter_mut().for_each(|v| *v = -*v);
        }
        let proj: Vec<f64> = latents
            .row_iter()
            .map(|row| row.iter().zip(&means).zip(&dir).map(|((x, m), d)| (x - m) * d).sum())
            .collect();
        let lo = proj.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = proj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo <= 1e-12 * trace.sqrt() {
            continue;
        }
        for (color, p) in colors.iter_mut().zip(&proj) {
            color[slot] = ((p - lo) / (hi - lo) * 255.0).round() as u8;
        }
    }
    colors
}

/// Cyclic Jacobi eigen decomposition of a symmetric matrix. Returns the
/// eigenvalues and a matrix whose columns are the matching unit eigenvectors.
fn symmetric_eigen(m: &Matrix) -> (Vec<f64>, Matrix) {
    let n = m.rows();
    let mut a = m.clone();
    let mut v = Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 });
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        let scale: f64 = (0..n).map(|i| a[(i, i)] * a[(i, i)]).sum::<f64>() + off;
        if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let cos = 1.0 / (t * t + 1.0).sqrt();
                let sin = t * cos;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = cos * akp - sin * akq;
                    a[(k, q)] = sin * akp + cos * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = cos * apk - sin * aqk;
                    a[(q, k)] = sin * apk + cos * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = cos * vkp - sin * vkq;
                    v[(k, q)] = sin * vkp + cos * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[(i, i)]).collect(), v)
}

/// The PLY document for `latent`.
pub fn render_ply(latent: &StructuredLatent) -> String {
    let colors = pca_colors(latent.latents());
    let n = f64::from(latent.resolution());
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\ncomment flowguide structured latent\n");
    let _ = writeln!(out, "element vertex {}", latent.len());
    for axis in ["x", "y", "z"] {
        let _ = writeln!(out, "property float {axis}");
    }
    for channel in ["red", "green", "blue"] {
        let _ = writeln!(out, "property uchar {channel}");
    }
    out.push_str("end_header\n");
    for (p, [r, g, b]) in latent.positions().iter().zip(colors) {
        // declared as float, so print the f32 value
        let [x, y, z] = p.map(|c| ((f64::from(c) + 0.5) / n) as f32);
        let _ = writeln!(out, "{x} {y} {z} {r} {g} {b}");
    }
    out
}

pub fn export_ply(latent: &StructuredLatent, path: &Path) -> Result<()> {
    write_bytes(path, render_ply(latent).as_bytes())
}

use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::Dataset;

/// Distance of every cluster center from the origin.
pub const SYNTHETIC_RADIUS: f64 = 1.0;

/// `class_count` isotropic Gaussian clusters around random centers on the
/// sphere of radius [`SYNTHETIC_RADIUS`]; `per_class` samples each, grouped
/// by label.
pub fn generate_synthetic(
    class_count: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if class_count < 2 || dim < 2 || per_class < 1 {
        return Err(invalid(format!(
            "synthetic data needs c >= 2, h >= 2, m >= 1 (got c={class_count}, h={dim}, m={per_class})"
        )));
    }
    if !(spread >= 0.0) || !spread.is_finite() {
        return Err(invalid(format!("spread {spread} must be non-negative")));
    }
    let mut rng = Rng::seed_from(seed);
    let centers: Vec<Vec<f64>> = (0..class_count)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| SYNTHETIC_RADIUS * x / norm).collect()
        })
        .collect();

    let n = class_count * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(center.iter().map(|c| c + spread * rng.standard_normal()));
            labels.push(class);
        }
    }
    Dataset::new(Tensor::new(vec![n, dim], data)?, labels, class_count)
}

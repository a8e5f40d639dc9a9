use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(invalid(format!(
                "features must be n x h, got {:?}",
                features.shape()
            )));
        }
        if labels.len() != features.rows() {
            return Err(invalid(format!(
                "{} labels for {} samples",
                labels.len(),
                features.rows()
            )));
        }
        if class_count < 2 {
            return Err(invalid("need at least two classes"));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(invalid(format!("label {bad} out of range for {class_count} classes")));
        }
        if !features.all_finite() {
            return Err(invalid("features contain non-finite values"));
        }
        Ok(Self {
            features,
            labels,
            class_count,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let features = self.features.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Dataset {
            features,
            labels,
            class_count: self.class_count,
        })
    }

    /// Stratified split: from every class, `round(fraction · n_class)` samples
    /// (seeded choice) go to the second dataset.
    pub fn split_stratified(&self, fraction: f64, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(invalid(format!("split fraction {fraction} outside (0, 1)")));
        }
        let mut keep = Vec::new();
        let mut held = Vec::new();
        for class in 0..self.class_count {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            rng.shuffle(&mut idx);
            let take = (fraction * idx.len() as f64).round() as usize;
            held.extend_from_slice(&idx[..take]);
            keep.extend_from_slice(&idx[take..]);
        }
        keep.sort_unstable();
        held.sort_unstable();
        Ok((self.subset(&keep)?, self.subset(&held)?))
    }
}

/// Per-feature standardization statistics (population std).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn compute(features: &Tensor) -> Self {
        let n = features.rows() as f64;
        let mean: Vec<f64> = features.sum_rows().into_iter().map(|s| s / n).collect();
        let mut var = vec![0.0; mean.len()];
        for row in features.row_iter() {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m).powi(2);
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
        Self { mean, std }
    }
}

/// Standardizes features. Computes statistics from `dataset` unless `stats`
/// is given (test sets reuse the training statistics). Columns whose std is
/// at or below [`STD_FLOOR`] map to zero.
pub fn normalize(dataset: &Dataset, stats: Option<&FeatureStats>) -> Result<(Dataset, FeatureStats)> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => FeatureStats::compute(&dataset.features),
    };
    if stats.mean.len() != dataset.dim() || stats.std.len() != dataset.dim() {
        return Err(invalid(format!(
            "statistics cover {} features, dataset has {}",
            stats.mean.len(),
            dataset.dim()
        )));
    }
    let mut features = dataset.features.clone();
    let h = features.cols();
    for row in features.data_mut().chunks_exact_mut(h) {
        for ((x, m), s) in row.iter_mut().zip(&stats.mean).zip(&stats.std) {
            *x = if *s <= STD_FLOOR { 0.0 } else { (*x - m) / s };
        }
    }
    let out = Dataset {
        features,
        labels: dataset.labels.clone(),
        class_count: dataset.class_count,
    };
    Ok((out, stats))
}

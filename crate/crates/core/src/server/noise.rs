use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{ForwardMode, MlpModel};
use crate::prob::{entropy, entropy_grad, gaussian_sample};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseGenConfig {
    /// Entropy (nats) a sample must reach to be kept.
    pub threshold: f64,
    /// Input-space step size.
    pub step_size: f64,
    pub max_iterations: usize,
    /// Pseudo-samples per client as a fraction of its real sample count.
    pub sample_fraction: f64,
    pub init_mean: f64,
    pub init_std: f64,
}

impl Default for NoiseGenConfig {
    fn default() -> Self {
        Self {
            threshold: 0.01,
            step_size: 0.5,
            max_iterations: 500,
            sample_fraction: 0.5,
            init_mean: 0.0,
            init_std: 1.0,
        }
    }
}

impl NoiseGenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) {
            return Err(invalid(format!("noise threshold {} must be > 0", self.threshold)));
        }
        if !(self.step_size > 0.0) {
            return Err(invalid(format!("noise step size {} must be > 0", self.step_size)));
        }
        if self.max_iterations == 0 {
            return Err(invalid("noise max_iterations must be at least 1"));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(invalid(format!(
                "noise sample fraction {} outside (0, 1]",
                self.sample_fraction
            )));
        }
        if !(self.init_std > 0.0) || !self.init_mean.is_finite() {
            return Err(invalid("noise init distribution needs finite mean and std > 0"));
        }
        Ok(())
    }

    /// Pseudo-sample count for a client holding `real_samples`.
    pub fn count_for(&self, real_samples: usize) -> usize {
        ((self.sample_fraction * real_samples as f64).round() as usize).max(1)
    }
}

/// Pseudo-samples that one model classifies confidently, with that model's
/// soft labels.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBatch {
    pub source_client: usize,
    pub samples: Tensor,
    pub soft_labels: Tensor,
    /// Final entropy of each retained sample.
    pub achieved_loss: Vec<f64>,
    /// Entropy of each retained sample at its (last) initialization.
    pub initial_loss: Vec<f64>,
    /// Descent steps spent on each retained sample, retries included.
    pub iterations_used: Vec<u32>,
}

impl NoiseBatch {
    pub fn len(&self) -> usize {
        self.achieved_loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.achieved_loss.is_empty()
    }

    pub fn mean_iterations(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.iterations_used.iter().map(|&i| i as f64).sum::<f64>() / self.len() as f64
    }
}

struct DescentState {
    x: Tensor,
    loss: Vec<f64>,
    initial: Vec<f64>,
    iters: Vec<u32>,
}

/// Gradient descent on the rows listed in `rows` until each one's entropy
/// is at most the threshold or the iteration budget runs out.
fn descend(model: &MlpModel, cfg: &NoiseGenConfig, state: &mut DescentState, rows: &[usize]) -> Result<()> {
    let mut active: Vec<usize> = rows.to_vec();
    for it in 0..=cfg.max_iterations {
        if active.is_empty() {
            break;
        }
        let xa = state.x.select_rows(&active)?;
        let (p, cache) = model.forward(&xa, ForwardMode::Eval)?;
        let h = entropy(&p)?;
        for (&row, &hv) in active.iter().zip(&h) {
            state.loss[row] = hv;
            if it == 0 {
                state.initial[row] = hv;
            }
        }
        if it == cfg.max_iterations {
            break;
        }
        let mut d_logits = entropy_grad(&p, cache.log_probs());
        let mut still = Vec::with_capacity(active.len());
        for (k, (&row, &hv)) in active.iter().zip(&h).enumerate() {
            if hv <= cfg.threshold {
                d_logits.row_mut(k).iter_mut().for_each(|v| *v = 0.0);
            } else {
                still.push((k, row));
            }
        }
        if still.is_empty() {
            break;
        }
        let grads = model.backward(&cache, &d_logits)?;
        for &(k, row) in &still {
            let g = grads.d_input.row(k);
            for (x, gv) in state.x.row_mut(row).iter_mut().zip(g) {
                *x -= cfg.step_size * gv;
            }
            state.iters[row] += 1;
        }
        active = still.into_iter().map(|(_, row)| row).collect();
    }
    Ok(())
}

/// Draws `count` Gaussian inputs and pushes each one down the entropy of
/// `model`'s eval-mode prediction. Samples that miss the threshold are
/// re-drawn once, then dropped. The model is never modified.
pub fn generate_noise_batch(
    model: &MlpModel,
    cfg: &NoiseGenConfig,
    count: usize,
    source_client: usize,
    rng: &mut Rng,
) -> Result<NoiseBatch> {
    cfg.validate()?;
    if count == 0 {
        return Err(invalid("noise batch needs at least one sample"));
    }
    let h = model.input_dim();
    let mut state = DescentState {
        x: gaussian_sample(rng, &[count, h], cfg.init_mean, cfg.init_std)?,
        loss: vec![f64::INFINITY; count],
        initial: vec![f64::INFINITY; count],
        iters: vec![0; count],
    };
    let all: Vec<usize> = (0..count).collect();
    descend(model, cfg, &mut state, &all)?;

    let failed: Vec<usize> = all.iter().copied().filter(|&i| state.loss[i] > cfg.threshold).collect();
    if !failed.is_empty() {
        let fresh = gaussian_sample(rng, &[failed.len(), h], cfg.init_mean, cfg.init_std)?;
        for (k, &row) in failed.iter().enumerate() {
            state.x.row_mut(row).copy_from_slice(fresh.row(k));
        }
        descend(model, cfg, &mut state, &failed)?;
    }

    let kept: Vec<usize> = all.iter().copied().filter(|&i| state.loss[i] <= cfg.threshold).collect();
    if kept.is_empty() {
        return Err(Error::EmptyNoiseBatch {
            client: source_client,
            threshold: cfg.threshold,
        });
    }
    let samples = state.x.select_rows(&kept)?;
    let soft_labels = model.predict(&samples)?;
    let achieved = entropy(&soft_labels)?;
    // Keep only what the final, independent pass confirms.
    let confirmed: Vec<usize> = (0..kept.len()).filter(|&k| achieved[k] <= cfg.threshold).collect();
    if confirmed.is_empty() {
        return Err(Error::EmptyNoiseBatch {
            client: source_client,
            threshold: cfg.threshold,
        });
    }
    Ok(NoiseBatch {
        source_client,
        samples: samples.select_rows(&confirmed)?,
        soft_labels: soft_labels.select_rows(&confirmed)?,
        achieved_loss: confirmed.iter().map(|&k| achieved[k]).collect(),
        initial_loss: confirmed.iter().map(|&k| state.initial[kept[k]]).collect(),
        iterations_used: confirmed.iter().map(|&k| state.iters[kept[k]]).collect(),
    })
}

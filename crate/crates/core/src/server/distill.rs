use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::nn::{ForwardMode, MlpModel};
use crate::prob::{kl_divergence, kl_grad_wrt_second};
use crate::rng::{derive_seed, Rng};

use super::NoiseBatch;

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    /// Peer batches each model is distilled on; 0 disables distillation.
    pub participants: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

/// KL values observed while distilling one model on one peer's batch, one
/// entry per SGD step (measured before the step).
#[derive(Debug, Clone, PartialEq)]
pub struct DistillTrace {
    pub client: usize,
    pub peer: usize,
    pub kl_per_step: Vec<f64>,
    /// Whole-batch KL before the first step.
    pub kl_before: f64,
    /// Whole-batch KL after the last step.
    pub kl_after: f64,
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    /// Distilled models in input order.
    pub models: Vec<MlpModel>,
    pub traces: Vec<DistillTrace>,
}

fn distill_one(
    client: usize,
    model: &MlpModel,
    batches: &[NoiseBatch],
    cfg: &DistillConfig,
    rng: &mut Rng,
) -> Result<(MlpModel, Vec<DistillTrace>)> {
    let peers: Vec<&NoiseBatch> = batches.iter().filter(|b| b.source_client != client).collect();
    if cfg.participants > peers.len() {
        return Err(invalid(format!(
            "{} distillation participants requested but client {client} has {} peers",
            cfg.participants,
            peers.len()
        )));
    }
    let mut model = model.clone();
    model.set_trainable(true);
    let mut traces = Vec::with_capacity(cfg.participants);
    for pick in rng.sample_indices(peers.len(), cfg.participants) {
        let batch = peers[pick];
        let order: Vec<usize> = (0..batch.len()).collect();
        let kl_before = kl_divergence(&batch.soft_labels, &model.predict(&batch.samples)?)?;
        let mut kl_per_step = Vec::new();
        for _ in 0..cfg.epochs {
            for chunk in order.chunks(cfg.batch_size) {
                let x = batch.samples.select_rows(chunk)?;
                let target = batch.soft_labels.select_rows(chunk)?;
                let (h, cache) = model.forward(&x, ForwardMode::Eval)?;
                kl_per_step.push(kl_divergence(&target, &h)?);
                let grads = model.backward(&cache, &kl_grad_wrt_second(&target, &h))?;
                model.apply_sgd(&grads, cfg.lr)?;
            }
        }
        let kl_after = kl_divergence(&batch.soft_labels, &model.predict(&batch.samples)?)?;
        traces.push(DistillTrace {
            client,
            peer: batch.source_client,
            kl_per_step,
            kl_before,
            kl_after,
        });
    }
    Ok((model, traces))
}

/// Cross-distillation: every model is pulled toward the soft labels of
/// `participants` randomly chosen peer batches (never its own), minimizing
/// `KL(ŷ ‖ ĥ)` with eval-mode forwards. Models are processed independently
/// and in parallel; each draws its peers from a seed derived from one draw of
/// `rng` and its client id.
pub fn noise_distill(
    models: &[(usize, MlpModel)],
    batches: &[NoiseBatch],
    cfg: &DistillConfig,
    rng: &mut Rng,
) -> Result<DistillOutcome> {
    if !(cfg.lr >= 0.0) || cfg.batch_size == 0 {
        return Err(invalid("distillation needs lr >= 0 and batch size >= 1"));
    }
    if let Some(b) = batches.iter().find(|b| !models.iter().any(|(id, _)| *id == b.source_client)) {
        return Err(invalid(format!(
            "noise batch from client {} has no matching model",
            b.source_client
        )));
    }
    if cfg.participants > models.len() {
        return Err(invalid(format!(
            "{} participants exceed {} models",
            cfg.participants,
            models.len()
        )));
    }
    if cfg.participants == 0 || cfg.lr == 0.0 || cfg.epochs == 0 {
        return Ok(DistillOutcome {
            models: models.iter().map(|(_, m)| m.clone()).collect(),
            traces: Vec::new(),
        });
    }
    let base = rng.next_u64();
    let results: Vec<Result<(MlpModel, Vec<DistillTrace>)>> = models
        .par_iter()
        .map(|(client, model)| {
            let mut local = Rng::seed_from(derive_seed(base, "distill-peers", 0, *client as u64));
            distill_one(*client, model, batches, cfg, &mut local)
        })
        .collect();
    let mut out = DistillOutcome {
        models: Vec::with_capacity(models.len()),
        traces: Vec::new(),
    };
    for r in results {
        let (m, t) = r?;
        out.models.push(m);
        out.traces.extend(t);
    }
    Ok(out)
}

//! Local training on one client's data: self-distillation against two
//! dropout passes and a frozen epoch-start copy, or plain cross-entropy SGD.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::nn::{ForwardMode, Gradients, MlpModel};
use crate::prob::{
    cross_entropy, cross_entropy_grad, kl_divergence, kl_grad_wrt_first, kl_grad_wrt_second,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfDistillConfig {
    /// Weight of the supervised term.
    pub alpha: f64,
    /// Weight of the dropout-pair KL term.
    pub beta: f64,
    /// Weight of the KL term against the frozen epoch-start model.
    pub gamma: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// `false` trains with plain cross-entropy (vanilla FedAvg client).
    pub enabled: bool,
}

impl Default for SelfDistillConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.5,
            gamma: 0.5,
            local_epochs: 10,
            batch_size: 32,
            lr: 0.05,
            enabled: true,
        }
    }
}

impl SelfDistillConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma].iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(invalid("self-distillation weights must be non-negative"));
        }
        if self.local_epochs == 0 || self.batch_size == 0 {
            return Err(invalid("local epochs and batch size must be at least 1"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(invalid(format!("learning rate {} must be non-negative", self.lr)));
        }
        Ok(())
    }
}

/// Loss components of one step or one epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

#[derive(Debug, Clone)]
pub struct SelfDistillStep {
    pub losses: LossBreakdown,
    pub grads: Gradients,
}

#[derive(Debug, Clone)]
pub struct LocalTrainReport {
    /// Sample-weighted mean losses per local epoch.
    pub epochs: Vec<LossBreakdown>,
    pub sample_count: usize,
    pub model: MlpModel,
}

impl LocalTrainReport {
    pub fn final_losses(&self) -> LossBreakdown {
        self.epochs.last().copied().unwrap_or_default()
    }
}

fn self_distill_with(
    model: &MlpModel,
    frozen_prev: &MlpModel,
    x: &Tensor,
    y: &[usize],
    weights: (f64, f64, f64),
    first: ForwardMode<'_>,
    second: ForwardMode<'_>,
) -> Result<SelfDistillStep> {
    if !model.same_architecture(frozen_prev) {
        return Err(invalid(format!(
            "teacher architecture {:?} differs from student {:?}",
            frozen_prev.layer_dims(),
            model.layer_dims()
        )));
    }
    if frozen_prev.is_trainable() {
        return Err(Error::InvalidState("teacher model must be frozen".into()));
    }
    let (alpha, beta, gamma) = weights;
    let (p1, c1) = model.forward(x, first)?;
    let (p2, c2) = model.forward(x, second)?;
    let (p3, c3) = frozen_prev.forward(x, ForwardMode::Eval)?;

    let l1 = cross_entropy(&p1, y)? + cross_entropy(&p2, y)?;
    let l2 = kl_divergence(&p1, &p2)?;
    let l3 = kl_divergence(&p1, &p3)? + kl_divergence(&p2, &p3)?;
    let total = alpha * l1 + beta * l2 + gamma * l3;

    let (lp1, lp2, lp3) = (c1.log_probs(), c2.log_probs(), c3.log_probs());
    let mut d1 = cross_entropy_grad(&p1, y);
    d1.scale(alpha);
    d1.add_scaled(&kl_grad_wrt_first(&p1, lp1, lp2), beta)?;
    d1.add_scaled(&kl_grad_wrt_first(&p1, lp1, lp3), gamma)?;
    let mut d2 = cross_entropy_grad(&p2, y);
    d2.scale(alpha);
    d2.add_scaled(&kl_grad_wrt_second(&p1, &p2), beta)?;
    d2.add_scaled(&kl_grad_wrt_first(&p2, lp2, lp3), gamma)?;

    let mut grads = model.backward(&c1, &d1)?;
    grads.add_scaled(&model.backward(&c2, &d2)?, 1.0)?;
    Ok(SelfDistillStep {
        losses: LossBreakdown { total, l1, l2, l3 },
        grads,
    })
}

/// The composite loss `α·L1 + β·L2 + γ·L3` on one batch and its gradient
/// w.r.t. `model`. `f1` and `f2` are independent dropout passes of `model`;
/// `f3` is an eval pass of `frozen_prev`, treated as a constant.
pub fn self_distill_loss(
    model: &MlpModel,
    frozen_prev: &MlpModel,
    x: &Tensor,
    y: &[usize],
    cfg: &SelfDistillConfig,
    rng: &mut Rng,
) -> Result<SelfDistillStep> {
    // Two sequential borrows of the same generator give independent masks.
    let mut rng2 = Rng::seed_from(rng.next_u64());
    self_distill_with(
        model,
        frozen_prev,
        x,
        y,
        (cfg.alpha, cfg.beta, cfg.gamma),
        ForwardMode::TrainStochastic(rng),
        ForwardMode::TrainStochastic(&mut rng2),
    )
}

/// [`self_distill_loss`] with both dropout passes pinned to given masks.
pub fn self_distill_loss_pinned(
    model: &MlpModel,
    frozen_prev: &MlpModel,
    x: &Tensor,
    y: &[usize],
    cfg: &SelfDistillConfig,
    masks: (&[Option<Tensor>], &[Option<Tensor>]),
) -> Result<SelfDistillStep> {
    self_distill_with(
        model,
        frozen_prev,
        x,
        y,
        (cfg.alpha, cfg.beta, cfg.gamma),
        ForwardMode::Pinned(masks.0),
        ForwardMode::Pinned(masks.1),
    )
}

/// One plain cross-entropy step through a dropout pass.
pub fn cross_entropy_step(model: &MlpModel, x: &Tensor, y: &[usize], rng: &mut Rng) -> Result<(f64, Gradients)> {
    let (p, cache) = model.forward(x, ForwardMode::TrainStochastic(rng))?;
    let loss = cross_entropy(&p, y)?;
    let grads = model.backward(&cache, &cross_entropy_grad(&p, y))?;
    Ok((loss, grads))
}

/// Local training: `E` epochs of seeded-shuffle mini-batch SGD. Each epoch
/// freezes its starting model as the self-distillation teacher. The last
/// short batch is kept.
pub fn client_update(
    model_in: &MlpModel,
    data: &Dataset,
    cfg: &SelfDistillConfig,
    rng: &mut Rng,
) -> Result<LocalTrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("client has no samples"));
    }
    let mut model = model_in.clone();
    model.set_trainable(true);
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epochs = Vec::with_capacity(cfg.local_epochs);

    for _ in 0..cfg.local_epochs {
        let teacher = model.frozen();
        rng.shuffle(&mut order);
        let mut acc = LossBreakdown::default();
        for chunk in order.chunks(cfg.batch_size) {
            let x = data.features().select_rows(chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| data.labels()[i]).collect();
            let (losses, grads) = if cfg.enabled {
                let step = self_distill_loss(&model, &teacher, &x, &y, cfg, rng)?;
                (step.losses, step.grads)
            } else {
                let (ce, grads) = cross_entropy_step(&model, &x, &y, rng)?;
                let losses = LossBreakdown {
                    total: ce,
                    l1: ce,
                    l2: 0.0,
                    l3: 0.0,
                };
                (losses, grads)
            };
            model.apply_sgd(&grads, cfg.lr)?;
            let w = chunk.len() as f64 / n as f64;
            acc.total += w * losses.total;
            acc.l1 += w * losses.l1;
            acc.l2 += w * losses.l2;
            acc.l3 += w * losses.l3;
        }
        epochs.push(acc);
    }
    Ok(LocalTrainReport {
        epochs,
        sample_count: n,
        model,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_ce: f64,
}

const EVAL_CHUNK: usize = 1024;

/// Eval-mode accuracy (argmax, ties to the lowest class) and mean
/// cross-entropy.
pub fn evaluate(model: &MlpModel, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(invalid("cannot evaluate on an empty dataset"));
    }
    let n = data.len();
    let mut correct = 0usize;
    let mut ce_sum = 0.0;
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let x = data.features().select_rows(chunk)?;
        let y: Vec<usize> = chunk.iter().map(|&i| data.labels()[i]).collect();
        let p = model.predict(&x)?;
        ce_sum += cross_entropy(&p, &y)? * chunk.len() as f64;
        for (row, &label) in p.row_iter().zip(&y) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == label {
                correct += 1;
            }
        }
    }
    Ok(Evaluation {
        accuracy: correct as f64 / n as f64,
        mean_ce: ce_sum / n as f64,
    })
}

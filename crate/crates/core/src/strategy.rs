//! Interchangeable pieces of a federated method, registered by name.
//!
//! A *method* pairs a [`LocalTrainer`] (what clients do) with a
//! [`ServerStage`] (what the server does to uploaded models before
//! averaging). An [`Aggregator`] is chosen separately. The built-in registry
//! holds:
//!
//! | method          | trainer        | server stage    |
//! |-----------------|----------------|-----------------|
//! | `fedavg`        | `sgd`          | `passthrough`   |
//! | `self-distill`  | `self-distill` | `passthrough`   |
//! | `noise-distill` | `sgd`          | `noise-distill` |
//! | `fedsnd`        | `self-distill` | `noise-distill` |

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::client::{client_update, LocalTrainReport, LossBreakdown, SelfDistillConfig};
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::nn::MlpModel;
use crate::rng::{site_rng, Rng};
use crate::server::{
    aggregate, generate_noise_batch, noise_distill, DistillConfig, DistillTrace, NoiseBatch,
    NoiseGenConfig,
};

/// A locally trained model as it arrives at the server.
#[derive(Debug, Clone)]
pub struct Upload {
    pub client: usize,
    pub model: MlpModel,
    pub sample_count: usize,
    pub losses: LossBreakdown,
}

impl Upload {
    pub fn from_report(client: usize, report: LocalTrainReport) -> Self {
        Self {
            client,
            losses: report.final_losses(),
            sample_count: report.sample_count,
            model: report.model,
        }
    }
}

pub trait LocalTrainer: Send + Sync {
    fn name(&self) -> &'static str;

    fn train(
        &self,
        model: &MlpModel,
        data: &Dataset,
        cfg: &SelfDistillConfig,
        rng: &mut Rng,
    ) -> Result<LocalTrainReport>;
}

/// Plain cross-entropy SGD (the FedAvg client).
pub struct SgdTrainer;

impl LocalTrainer for SgdTrainer {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn train(&self, model: &MlpModel, data: &Dataset, cfg: &SelfDistillConfig, rng: &mut Rng) -> Result<LocalTrainReport> {
        let cfg = SelfDistillConfig {
            enabled: false,
            ..cfg.clone()
        };
        client_update(model, data, &cfg, rng)
    }
}

pub struct SelfDistillTrainer;

impl LocalTrainer for SelfDistillTrainer {
    fn name(&self) -> &'static str {
        "self-distill"
    }

    fn train(&self, model: &MlpModel, data: &Dataset, cfg: &SelfDistillConfig, rng: &mut Rng) -> Result<LocalTrainReport> {
        let cfg = SelfDistillConfig {
            enabled: true,
            ..cfg.clone()
        };
        client_update(model, data, &cfg, rng)
    }
}

/// Settings the server stage sees for one round.
#[derive(Debug, Clone)]
pub struct ServerContext<'a> {
    pub master_seed: u64,
    pub round: u64,
    pub noise: &'a NoiseGenConfig,
    /// Fraction of uploaded models each model is distilled against.
    pub participant_fraction: f64,
    pub distill_lr: f64,
    pub distill_epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ServerReport {
    pub noise_retained: usize,
    pub noise_mean_iterations: f64,
    /// Clients whose model yielded no usable pseudo-sample.
    pub empty_batches: Vec<usize>,
    pub participants: usize,
    pub traces: Vec<DistillTrace>,
}

pub trait ServerStage: Send + Sync {
    fn name(&self) -> &'static str;

    fn refine(&self, uploads: Vec<Upload>, ctx: &ServerContext<'_>) -> Result<(Vec<Upload>, ServerReport)>;
}

/// Leaves uploads untouched.
pub struct PassThrough;

impl ServerStage for PassThrough {
    fn name(&self) -> &'static str {
        "passthrough"
    }

    fn refine(&self, uploads: Vec<Upload>, _ctx: &ServerContext<'_>) -> Result<(Vec<Upload>, ServerReport)> {
        Ok((uploads, ServerReport::default()))
    }
}

/// Pseudo-sample generation per uploaded model followed by cross-client
/// distillation.
pub struct NoiseDistillStage;

impl NoiseDistillStage {
    /// One batch per upload; uploads whose model cannot reach the threshold
    /// contribute none.
    pub fn generate_batches(uploads: &[Upload], ctx: &ServerContext<'_>) -> Result<(Vec<NoiseBatch>, Vec<usize>)> {
        let results: Vec<Result<NoiseBatch>> = uploads
            .par_iter()
            .map(|u| {
                let mut rng = site_rng(ctx.master_seed, "noise", ctx.round, u.client as u64);
                generate_noise_batch(&u.model, ctx.noise, ctx.noise.count_for(u.sample_count), u.client, &mut rng)
            })
            .collect();
        let mut batches = Vec::new();
        let mut empty = Vec::new();
        for (u, r) in uploads.iter().zip(results) {
            match r {
                Ok(b) => batches.push(b),
                Err(Error::EmptyNoiseBatch { .. }) => empty.push(u.client),
                Err(e) => return Err(e),
            }
        }
        Ok((batches, empty))
    }
}

impl ServerStage for NoiseDistillStage {
    fn name(&self) -> &'static str {
        "noise-distill"
    }

    fn refine(&self, uploads: Vec<Upload>, ctx: &ServerContext<'_>) -> Result<(Vec<Upload>, ServerReport)> {
        let (batches, empty_batches) = Self::generate_batches(&uploads, ctx)?;
        let retained: usize = batches.iter().map(NoiseBatch::len).sum();
        let iterations: f64 = batches
            .iter()
            .flat_map(|b| b.iterations_used.iter())
            .map(|&i| i as f64)
            .sum();
        let wanted = (ctx.participant_fraction * uploads.len() as f64).floor() as usize;
        let participants = wanted.min(batches.len().saturating_sub(1));
        let models: Vec<(usize, MlpModel)> = uploads.iter().map(|u| (u.client, u.model.clone())).collect();
        let cfg = DistillConfig {
            participants,
            lr: ctx.distill_lr,
            epochs: ctx.distill_epochs,
            batch_size: ctx.batch_size,
        };
        let mut rng = site_rng(ctx.master_seed, "distill", ctx.round, 0);
        let outcome = noise_distill(&models, &batches, &cfg, &mut rng)?;
        let refined = uploads
            .into_iter()
            .zip(outcome.models)
            .map(|(u, model)| Upload { model, ..u })
            .collect();
        let report = ServerReport {
            noise_retained: retained,
            noise_mean_iterations: if retained > 0 { iterations / retained as f64 } else { 0.0 },
            empty_batches,
            participants,
            traces: outcome.traces,
        };
        Ok((refined, report))
    }
}

pub trait Aggregator: Send + Sync {
    fn name(&self) -> &'static str;

    fn aggregate(&self, uploads: &[Upload]) -> Result<MlpModel>;
}

/// Mean weighted by client sample counts.
pub struct WeightedMean;

impl Aggregator for WeightedMean {
    fn name(&self) -> &'static str {
        "weighted"
    }

    fn aggregate(&self, uploads: &[Upload]) -> Result<MlpModel> {
        let models: Vec<(usize, &MlpModel)> = uploads.iter().map(|u| (u.client, &u.model)).collect();
        let weights: Vec<f64> = uploads.iter().map(|u| u.sample_count as f64).collect();
        aggregate(&models, &weights)
    }
}

/// Unweighted parameter mean.
pub struct UniformMean;

impl Aggregator for UniformMean {
    fn name(&self) -> &'static str {
        "uniform"
    }

    fn aggregate(&self, uploads: &[Upload]) -> Result<MlpModel> {
        let models: Vec<(usize, &MlpModel)> = uploads.iter().map(|u| (u.client, &u.model)).collect();
        aggregate(&models, &vec![1.0; uploads.len()])
    }
}

/// A resolved method: the client and server halves.
#[derive(Clone)]
pub struct Method {
    pub name: String,
    pub trainer: Arc<dyn LocalTrainer>,
    pub server: Arc<dyn ServerStage>,
}

impl std::fmt::Debug for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Method")
            .field("name", &self.name)
            .field("trainer", &self.trainer.name())
            .field("server", &self.server.name())
            .finish()
    }
}

#[derive(Default)]
pub struct Registry {
    trainers: BTreeMap<&'static str, Arc<dyn LocalTrainer>>,
    servers: BTreeMap<&'static str, Arc<dyn ServerStage>>,
    aggregators: BTreeMap<&'static str, Arc<dyn Aggregator>>,
    methods: BTreeMap<String, (String, String)>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn builtin() -> Self {
        let mut r = Self::new();
        r.register_trainer(SgdTrainer);
        r.register_trainer(SelfDistillTrainer);
        r.register_server(PassThrough);
        r.register_server(NoiseDistillStage);
        r.register_aggregator(WeightedMean);
        r.register_aggregator(UniformMean);
        for (method, trainer, server) in [
            ("fedavg", "sgd", "passthrough"),
            ("self-distill", "self-distill", "passthrough"),
            ("noise-distill", "sgd", "noise-distill"),
            ("fedsnd", "self-distill", "noise-distill"),
        ] {
            r.register_method(method, trainer, server).expect("built-in parts exist");
        }
        r
    }

    pub fn register_trainer(&mut self, trainer: impl LocalTrainer + 'static) {
        self.trainers.insert(trainer.name(), Arc::new(trainer));
    }

    pub fn register_server(&mut self, stage: impl ServerStage + 'static) {
        self.servers.insert(stage.name(), Arc::new(stage));
    }

    pub fn register_aggregator(&mut self, aggregator: impl Aggregator + 'static) {
        self.aggregators.insert(aggregator.name(), Arc::new(aggregator));
    }

    /// Names a (trainer, server stage) pair. Both must already be registered.
    pub fn register_method(&mut self, name: &str, trainer: &str, server: &str) -> Result<()> {
        if !self.trainers.contains_key(trainer) {
            return Err(invalid(format!("unknown local trainer \"{trainer}\"")));
        }
        if !self.servers.contains_key(server) {
            return Err(invalid(format!("unknown server stage \"{server}\"")));
        }
        self.methods.insert(name.to_owned(), (trainer.to_owned(), server.to_owned()));
        Ok(())
    }

    pub fn method_names(&self) -> Vec<&str> {
        self.methods.keys().map(String::as_str).collect()
    }

    pub fn aggregator_names(&self) -> Vec<&'static str> {
        self.aggregators.keys().copied().collect()
    }

    pub fn method(&self, name: &str) -> Result<Method> {
        let (trainer, server) = self.methods.get(name).ok_or_else(|| {
            invalid(format!(
                "unknown method \"{name}\" (available: {})",
                self.method_names().join(", ")
            ))
        })?;
        Ok(Method {
            name: name.to_owned(),
            trainer: Arc::clone(&self.trainers[trainer.as_str()]),
            server: Arc::clone(&self.servers[server.as_str()]),
        })
    }

    pub fn aggregator(&self, name: &str) -> Result<Arc<dyn Aggregator>> {
        self.aggregators.get(name).cloned().ok_or_else(|| {
            invalid(format!(
                "unknown aggregation \"{name}\" (available: {})",
                self.aggregator_names().join(", ")
            ))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_methods_resolve() {
        let r = Registry::builtin();
        assert_eq!(r.method_names(), vec!["fedavg", "fedsnd", "noise-distill", "self-distill"]);
        let m = r.method("fedsnd").unwrap();
        assert_eq!((m.trainer.name(), m.server.name()), ("self-distill", "noise-distill"));
        let m = r.method("fedavg").unwrap();
        assert_eq!((m.trainer.name(), m.server.name()), ("sgd", "passthrough"));
        assert!(r.method("fedprox").is_err());
        assert!(r.aggregator("weighted").is_ok());
        assert!(r.aggregator("median").is_err());
    }

    #[test]
    fn method_parts_must_exist() {
        let mut r = Registry::new();
        r.register_trainer(SgdTrainer);
        assert!(r.register_method("x", "sgd", "passthrough").is_err());
        r.register_server(PassThrough);
        r.register_method("x", "sgd", "passthrough").unwrap();
        assert_eq!(r.method("x").unwrap().name, "x");
    }

    struct Halver;

    impl Aggregator for Halver {
        fn name(&self) -> &'static str {
            "halver"
        }

        fn aggregate(&self, uploads: &[Upload]) -> Result<MlpModel> {
            let m = &uploads[0].model;
            m.unflatten_params(&m.flatten_params().map(|v| v / 2.0))
        }
    }

    #[test]
    fn custom_aggregator_registers() {
        let mut r = Registry::builtin();
        r.register_aggregator(Halver);
        assert_eq!(r.aggregator("halver").unwrap().name(), "halver");
    }
}

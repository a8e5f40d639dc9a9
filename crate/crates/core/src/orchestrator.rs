//! The round loop: client sampling, parallel local training, the server
//! stage, aggregation and evaluation.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use crate::client::{evaluate, LossBreakdown};
use crate::config::{DatasetKind, ExperimentConfig};
use crate::data::{dirichlet_partition, generate_synthetic, load_idx_dataset, normalize, Dataset, Partition};
use crate::error::{invalid, Error, Result};
use crate::nn::MlpModel;
use crate::rng::{derive_seed, site_rng};
use crate::strategy::{Aggregator, Method, Registry, ServerContext, Upload};

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "FEDNOISE_THREADS";

/// Worker count from [`THREADS_ENV`], else the available parallelism.
pub fn worker_count_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(invalid(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// `max(floor(C·K), 1)` distinct clients, sorted, drawn uniformly from a
/// generator seeded by `(master_seed, round)`.
pub fn sample_active_clients(client_count: usize, active_fraction: f64, round: u64, master_seed: u64) -> Vec<usize> {
    let m = ((active_fraction * client_count as f64).floor() as usize).clamp(1, client_count.max(1));
    let mut rng = site_rng(master_seed, "sample", round, 0);
    let mut picked = rng.sample_indices(client_count, m);
    picked.sort_unstable();
    picked
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    /// 1-based.
    pub round: usize,
    pub active: Vec<usize>,
    pub accuracy: f64,
    pub test_ce: f64,
    /// Last-epoch losses per active client.
    pub client_losses: Vec<(usize, LossBreakdown)>,
    pub noise_retained: usize,
    pub noise_mean_iterations: f64,
    /// Clients whose model produced no retained pseudo-sample.
    pub empty_noise_clients: Vec<usize>,
    pub wall_ms: f64,
}

impl RoundMetrics {
    /// Unweighted mean of the clients' final losses.
    pub fn mean_losses(&self) -> LossBreakdown {
        let n = self.client_losses.len().max(1) as f64;
        let mut out = LossBreakdown::default();
        for (_, l) in &self.client_losses {
            out.total += l.total / n;
            out.l1 += l.l1 / n;
            out.l2 += l.l2 / n;
            out.l3 += l.l3 / n;
        }
        out
    }
}

/// Train and test sets, standardized with training statistics.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let ds = &cfg.dataset;
    let (train, test) = match ds.kind {
        DatasetKind::Synthetic => {
            let all = generate_synthetic(
                ds.class_count,
                ds.dim,
                ds.per_class,
                ds.spread,
                derive_seed(cfg.seed, "dataset", 0, 0),
            )?;
            all.split_stratified(ds.test_fraction, &mut site_rng(cfg.seed, "test-split", 0, 0))?
        }
        DatasetKind::Idx => {
            let read = |p: &Option<std::path::PathBuf>| -> Result<Vec<u8>> {
                let path = p.as_ref().ok_or_else(|| invalid("missing idx path"))?;
                std::fs::read(path).map_err(|e| {
                    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
                })
            };
            let train = load_idx_dataset(&read(&ds.train_images)?, &read(&ds.train_labels)?, ds.class_count)?;
            let test = load_idx_dataset(&read(&ds.test_images)?, &read(&ds.test_labels)?, ds.class_count)?;
            (train, test)
        }
    };
    let (train, stats) = normalize(&train, None)?;
    let (test, _) = normalize(&test, Some(&stats))?;
    Ok((train, test))
}

/// Partition of the training set for `cfg`.
pub fn partition_for(cfg: &ExperimentConfig, train: &Dataset) -> Result<Partition> {
    dirichlet_partition(
        train.labels(),
        cfg.clients,
        cfg.dirichlet_alpha,
        cfg.min_per_client,
        derive_seed(cfg.seed, "partition", 0, 0),
    )
    .map_err(|e| match e {
        Error::InfeasiblePartition(msg) => Error::InfeasiblePartition(format!(
            "{msg}; config: clients={}, dirichlet_alpha={}, min_per_client={}, training samples={}",
            cfg.clients,
            cfg.dirichlet_alpha,
            cfg.min_per_client,
            train.len()
        )),
        other => other,
    })
}

/// Global model before the first round.
pub fn initial_model(cfg: &ExperimentConfig, input_dim: usize, class_count: usize) -> Result<MlpModel> {
    MlpModel::new_random(
        &cfg.layer_dims(input_dim, class_count),
        &cfg.dropout_rates(),
        &mut site_rng(cfg.seed, "init", 0, 0),
    )
}

pub struct Simulation {
    cfg: ExperimentConfig,
    method: Method,
    aggregator: Arc<dyn Aggregator>,
    test: Dataset,
    partition: Partition,
    client_data: Vec<Dataset>,
    global: MlpModel,
    rounds_done: usize,
    pool: rayon::ThreadPool,
}

impl Simulation {
    /// Builds data, partition and initial model. `threads` of `None` reads
    /// the worker count from the environment.
    pub fn new(cfg: &ExperimentConfig, registry: &Registry, threads: Option<usize>) -> Result<Self> {
        cfg.validate()?;
        let method = registry.method(&cfg.method)?;
        let aggregator = registry.aggregator(cfg.aggregation.name())?;
        let (train, test) = prepare_data(cfg)?;
        let partition = partition_for(cfg, &train)?;
        let client_data = partition
            .clients
            .iter()
            .map(|idx| train.subset(idx))
            .collect::<Result<Vec<_>>>()?;
        let global = initial_model(cfg, train.dim(), train.class_count())?;
        let threads = match threads {
            Some(n) => n.max(1),
            None => worker_count_from_env()?,
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidState(format!("worker pool: {e}")))?;
        Ok(Self {
            cfg: cfg.clone(),
            method,
            aggregator,
            test,
            partition,
            client_data,
            global,
            rounds_done: 0,
            pool,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn global_model(&self) -> &MlpModel {
        &self.global
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn client_data(&self, client: usize) -> &Dataset {
        &self.client_data[client]
    }

    pub fn test_data(&self) -> &Dataset {
        &self.test
    }

    pub fn rounds_done(&self) -> usize {
        self.rounds_done
    }

    /// Local training of `client` from the current global model, as round
    /// `round` would run it.
    pub fn local_update(&self, round: usize, client: usize) -> Result<Upload> {
        let data = self
            .client_data
            .get(client)
            .ok_or_else(|| invalid(format!("no client {client}")))?;
        let mut rng = site_rng(self.cfg.seed, "client", round as u64, client as u64);
        let report = self
            .method
            .trainer
            .train(&self.global, data, &self.cfg.local_config(), &mut rng)?;
        Ok(Upload::from_report(client, report))
    }

    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let start = Instant::now();
        let round = self.rounds_done + 1;
        let active = sample_active_clients(self.cfg.clients, self.cfg.active_fraction, round as u64, self.cfg.seed);
        let ctx = ServerContext {
            master_seed: self.cfg.seed,
            round: round as u64,
            noise: &self.cfg.noise,
            participant_fraction: self.cfg.distill.participant_fraction,
            distill_lr: self.cfg.lr * self.cfg.distill.lr_scale,
            distill_epochs: self.cfg.distill.epochs,
            batch_size: self.cfg.batch_size,
        };
        let this = &*self;
        let (uploads, report) = this.pool.install(|| {
            let uploads = active
                .par_iter()
                .map(|&k| this.local_update(round, k))
                .collect::<Result<Vec<_>>>()?;
            this.method.server.refine(uploads, &ctx)
        })?;
        let client_losses = uploads.iter().map(|u| (u.client, u.losses)).collect();
        let global = self.aggregator.aggregate(&uploads)?;
        let eval = evaluate(&global, &self.test)?;
        self.global = global;
        self.rounds_done = round;
        Ok(RoundMetrics {
            round,
            active,
            accuracy: eval.accuracy,
            test_ce: eval.mean_ce,
            client_losses,
            noise_retained: report.noise_retained,
            noise_mean_iterations: report.noise_mean_iterations,
            empty_noise_clients: report.empty_batches,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub history: Vec<RoundMetrics>,
    pub final_model: MlpModel,
    pub partition: Partition,
}

/// Runs every round, calling `on_round` after each one with the new global
/// model.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    registry: &Registry,
    threads: Option<usize>,
    mut on_round: impl FnMut(&RoundMetrics, &MlpModel) -> Result<()>,
) -> Result<ExperimentResult> {
    let mut sim = Simulation::new(cfg, registry, threads)?;
    let mut history = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let m = sim.run_round()?;
        on_round(&m, sim.global_model())?;
        history.push(m);
    }
    Ok(ExperimentResult {
        history,
        final_model: sim.global,
        partition: sim.partition,
    })
}

/// [`run_experiment_with`] using the built-in registry and the environment's
/// worker count.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    run_experiment_with(cfg, &Registry::builtin(), None, |_, _| Ok(()))
}

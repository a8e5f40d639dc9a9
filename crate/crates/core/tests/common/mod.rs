//! Oracles and toy setups shared by the integration tests.
#![allow(dead_code)]

use fednoise_core::client::{client_update, evaluate, SelfDistillConfig};
use fednoise_core::config::ExperimentConfig;
use fednoise_core::data::{generate_synthetic, normalize, Dataset};
use fednoise_core::metrics::format_sig9;
use fednoise_core::nn::{serialize, ForwardMode, MlpModel};
use fednoise_core::orchestrator::{initial_model, partition_for, prepare_data};
use fednoise_core::rng::{derive_seed, site_rng, Rng};
use fednoise_core::server::{generate_noise_batch, noise_distill, DistillConfig, NoiseGenConfig};
use fednoise_core::tensor::Tensor;

/// IDX writer: `00 00 08 ndim`, big-endian dims, raw bytes.
pub fn write_idx(shape: &[usize], payload: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, shape.len() as u8];
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

/// Inverse of the parser's value mapping.
pub fn idx_bytes_from_tensor(t: &Tensor) -> Vec<u8> {
    let scale = if t.shape().len() == 1 { 1.0 } else { 255.0 };
    t.data().iter().map(|v| (v * scale).round() as u8).collect()
}

/// Share of a client's samples held by its three largest classes.
pub fn top3_mass(counts: &[usize]) -> f64 {
    let mut c = counts.to_vec();
    c.sort_unstable_by(|a, b| b.cmp(a));
    let total: usize = c.iter().sum();
    c.iter().take(3).sum::<usize>() as f64 / total as f64
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Plain FedAvg written directly against the model primitives: uniform
/// client sampling, shuffled mini-batch cross-entropy SGD, sample-weighted
/// parameter mean. Data, partition, initial model and per-site seeds come
/// from the library so both sides start from the same state.
///
/// Returns CSV rows (without header) and the final model bytes.
pub fn reference_fedavg(cfg: &ExperimentConfig) -> (Vec<String>, Vec<u8>) {
    let (train, test) = prepare_data(cfg).unwrap();
    let partition = partition_for(cfg, &train).unwrap();
    let mut global = initial_model(cfg, train.dim(), train.class_count()).unwrap();
    let m = ((cfg.active_fraction * cfg.clients as f64).floor() as usize).max(1);
    let mut rows = Vec::new();

    for t in 1..=cfg.rounds as u64 {
        let mut active = site_rng(cfg.seed, "sample", t, 0).sample_indices(cfg.clients, m);
        active.sort_unstable();

        let mut locals: Vec<(Vec<f64>, f64, f64)> = Vec::new();
        for &k in &active {
            let idx = &partition.clients[k];
            let n_k = idx.len();
            let mut rng = site_rng(cfg.seed, "client", t, k as u64);
            let mut model = global.clone();
            let mut order: Vec<usize> = (0..n_k).collect();
            let mut last_epoch_ce = 0.0;
            for _ in 0..cfg.local_epochs {
                rng.shuffle(&mut order);
                let mut epoch_ce = 0.0;
                for chunk in order.chunks(cfg.batch_size) {
                    let rows_k: Vec<usize> = chunk.iter().map(|&i| idx[i]).collect();
                    let x = train.features().select_rows(&rows_k).unwrap();
                    let y: Vec<usize> = rows_k.iter().map(|&i| train.labels()[i]).collect();
                    let (p, cache) = model.forward(&x, ForwardMode::TrainStochastic(&mut rng)).unwrap();
                    let b = y.len() as f64;
                    let mut d = p.clone();
                    let mut ce = 0.0;
                    for (i, &label) in y.iter().enumerate() {
                        ce -= p.row(i)[label].max(1e-12).ln();
                        d.row_mut(i)[label] -= 1.0;
                    }
                    ce /= b;
                    d.data_mut().iter_mut().for_each(|v| *v *= 1.0 / b);
                    let g = model.backward(&cache, &d).unwrap().flatten_params();
                    let mut theta = model.flatten_params().into_data();
                    for (w, gv) in theta.iter_mut().zip(&g) {
                        *w -= cfg.lr * gv;
                    }
                    model = model.unflatten_params(&Tensor::new(vec![theta.len()], theta).unwrap()).unwrap();
                    epoch_ce += chunk.len() as f64 / n_k as f64 * ce;
                }
                last_epoch_ce = epoch_ce;
            }
            locals.push((model.flatten_params().into_data(), n_k as f64, last_epoch_ce));
        }

        let total: f64 = locals.iter().map(|l| l.1).sum();
        let mut avg = vec![0.0; locals[0].0.len()];
        for (j, a) in avg.iter_mut().enumerate() {
            let mut s = locals[0].1 / total * locals[0].0[j];
            for l in &locals[1..] {
                s += l.1 / total * l.0[j];
            }
            let lo = locals.iter().map(|l| l.0[j]).fold(f64::INFINITY, f64::min);
            let hi = locals.iter().map(|l| l.0[j]).fold(f64::NEG_INFINITY, f64::max);
            *a = s.clamp(lo, hi);
        }
        global = global.unflatten_params(&Tensor::new(vec![avg.len()], avg).unwrap()).unwrap();

        let p = global.predict(test.features()).unwrap();
        let mut correct = 0;
        let mut ce = 0.0;
        for (i, &label) in test.labels().iter().enumerate() {
            let row = p.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            correct += usize::from(best == label);
            ce -= row[label].max(1e-12).ln();
        }
        let n = test.len() as f64;
        let mean_l1 = locals.iter().map(|l| l.2).sum::<f64>() / locals.len() as f64;
        rows.push(format!(
            "{t},{},{},{},0,0,0,0,0",
            format_sig9(correct as f64 / n),
            format_sig9(ce / n),
            format_sig9(mean_l1)
        ));
    }
    (rows, serialize(&global))
}

/// Standardized two-class separable data and a model trained on it.
pub fn toy_two_class(seed: u64) -> (MlpModel, Dataset, f64) {
    let raw = generate_synthetic(2, 4, 100, 0.3, derive_seed(seed, "toy-data", 0, 0)).unwrap();
    let (data, _) = normalize(&raw, None).unwrap();
    let model = MlpModel::new_random(&[4, 16, 2], &[0.0], &mut Rng::seed_from(derive_seed(seed, "toy-init", 0, 0))).unwrap();
    let cfg = SelfDistillConfig {
        local_epochs: 20,
        batch_size: 16,
        lr: 0.1,
        enabled: false,
        ..Default::default()
    };
    let report = client_update(&model, &data, &cfg, &mut Rng::seed_from(derive_seed(seed, "toy-train", 0, 0))).unwrap();
    let acc = evaluate(&report.model, &data).unwrap().accuracy;
    (report.model, data, acc)
}

/// Two models trained on disjoint label halves of a 4-class set; model 0 is
/// distilled on model 1's pseudo-samples. Returns whole-batch
/// `KL(ŷ ‖ ĥ)` before and after.
pub fn distill_pair_trial(seed: u64) -> (f64, f64) {
    let raw = generate_synthetic(4, 6, 60, 0.4, derive_seed(seed, "pair-data", 0, 0)).unwrap();
    let (data, _) = normalize(&raw, None).unwrap();
    let halves = [[0usize, 1], [2, 3]];
    let cfg = SelfDistillConfig {
        local_epochs: 10,
        batch_size: 16,
        lr: 0.1,
        enabled: false,
        ..Default::default()
    };
    let noise_cfg = NoiseGenConfig::default();
    let mut models = Vec::new();
    let mut batches = Vec::new();
    for (k, classes) in halves.iter().enumerate() {
        let idx: Vec<usize> = (0..data.len()).filter(|&i| classes.contains(&data.labels()[i])).collect();
        let local = data.subset(&idx).unwrap();
        let init = MlpModel::new_random(&[6, 16, 4], &[0.2], &mut site_rng(seed, "pair-init", 0, k as u64)).unwrap();
        let model = client_update(&init, &local, &cfg, &mut site_rng(seed, "pair-train", 0, k as u64)).unwrap().model;
        let batch = generate_noise_batch(&model, &noise_cfg, 60, k, &mut site_rng(seed, "pair-noise", 0, k as u64)).unwrap();
        models.push((k, model));
        batches.push(batch);
    }
    let dcfg = DistillConfig {
        participants: 1,
        lr: 0.05,
        epochs: 1,
        batch_size: 10,
    };
    let out = noise_distill(&models, &batches, &dcfg, &mut site_rng(seed, "pair-distill", 0, 0)).unwrap();
    let trace = out.traces.iter().find(|t| t.client == 0).unwrap();
    assert_eq!(trace.peer, 1);
    (trace.kl_before, trace.kl_after)
}

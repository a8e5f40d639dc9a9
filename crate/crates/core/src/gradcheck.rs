//! Finite-difference battery over every differentiable loss in the crate.
//!
//! Each family draws random small models (at most `[6, 8, 5]`), random
//! batches and pinned dropout masks, then compares the backward pass against
//! fourth-order central differences coordinate by coordinate.

use crate::client::{self_distill_loss_pinned, SelfDistillConfig};
use crate::error::Result;
use crate::finite_diff::{finite_diff_gradient_o4, relative_error, O4_STEP};
use crate::nn::{Dense, ForwardMode, MlpModel};
use crate::prob::{
    cross_entropy, cross_entropy_grad, entropy, entropy_grad, kl_divergence, kl_grad_wrt_first,
    kl_grad_wrt_second, softmax,
};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_FLOOR: f64 = 1e-7;
/// Hidden pre-activations closer than this to the ReLU kink are redrawn.
/// Well above the largest shift a `2h` probe can cause.
const KINK_MARGIN: f64 = 0.05;
const DROPOUT: f64 = 0.3;

pub const FAMILIES: [&str; 7] = [
    "cross_entropy",
    "kl_dropout_pair",
    "kl_teacher",
    "self_distill_composite",
    "entropy_params",
    "entropy_input",
    "distill_kl",
];

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub instances: usize,
    /// Added to the first analytic coordinate of every instance, so the
    /// detector can be shown to trip.
    pub perturbation: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 20,
            perturbation: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamilyReport {
    pub name: &'static str,
    pub instances: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst_instance: usize,
    pub worst_coordinate: usize,
}

impl FamilyReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

struct Instance {
    model: MlpModel,
    teacher: MlpModel,
    x: Tensor,
    y: Vec<usize>,
    masks: (Vec<Option<Tensor>>, Vec<Option<Tensor>>),
    target: Tensor,
    weights: (f64, f64, f64),
}

fn random_model(dims: &[usize], rng: &mut Rng) -> MlpModel {
    let layers = dims
        .windows(2)
        .map(|w| Dense {
            weight: Tensor::new(vec![w[0], w[1]], (0..w[0] * w[1]).map(|_| 0.5 * rng.standard_normal()).collect())
                .expect("sized"),
            bias: (0..w[1]).map(|_| 0.2 * rng.standard_normal()).collect(),
        })
        .collect();
    MlpModel::from_layers(layers, vec![DROPOUT]).expect("valid layers")
}

fn clear_of_kink(model: &MlpModel, x: &Tensor) -> bool {
    let l = &model.layers()[0];
    let mut z = x.matmul(&l.weight).expect("shapes");
    z.add_row_vector(&l.bias).expect("shapes");
    z.data().iter().all(|v| v.abs() > KINK_MARGIN)
}

fn draw_instance(rng: &mut Rng) -> Instance {
    loop {
        let dims = [
            2 + rng.sample_indices(5, 1)[0],
            2 + rng.sample_indices(7, 1)[0],
            2 + rng.sample_indices(4, 1)[0],
        ];
        let n = 2 + rng.sample_indices(4, 1)[0];
        let model = random_model(&dims, rng);
        let teacher = random_model(&dims, rng).frozen();
        let x = Tensor::new(vec![n, dims[0]], (0..n * dims[0]).map(|_| rng.standard_normal()).collect())
            .expect("sized");
        if !clear_of_kink(&model, &x) {
            continue;
        }
        let y = (0..n).map(|_| rng.sample_indices(dims[2], 1)[0]).collect();
        let m1 = model.forward(&x, ForwardMode::TrainStochastic(rng)).expect("forward").1.masks().to_vec();
        let m2 = model.forward(&x, ForwardMode::TrainStochastic(rng)).expect("forward").1.masks().to_vec();
        let logits = Tensor::new(vec![n, dims[2]], (0..n * dims[2]).map(|_| 2.0 * rng.standard_normal()).collect())
            .expect("sized");
        let target = softmax(&logits).expect("softmax");
        let weights = (rng.uniform_range(0.1, 2.0), rng.uniform_range(0.1, 2.0), rng.uniform_range(0.1, 2.0));
        return Instance {
            model,
            teacher,
            x,
            y,
            masks: (m1, m2),
            target,
            weights,
        };
    }
}

fn probs(model: &MlpModel, x: &Tensor, mode: ForwardMode<'_>) -> Tensor {
    model.forward(x, mode).expect("forward").0
}

fn with_params(inst: &Instance, params: &Tensor) -> MlpModel {
    inst.model.unflatten_params(params).expect("same size")
}

/// Loss value as a function of the flattened parameters (or of the input,
/// for `entropy_input`). Written from the probability primitives, not from
/// the backward code.
fn loss_value(family: &str, inst: &Instance, v: &Tensor) -> f64 {
    let (m1, m2) = (&inst.masks.0, &inst.masks.1);
    match family {
        "entropy_input" => entropy(&inst.model.predict(v).expect("predict")).expect("entropy").iter().sum(),
        _ => {
            let m = with_params(inst, v);
            let x = &inst.x;
            match family {
                "cross_entropy" => cross_entropy(&probs(&m, x, ForwardMode::Pinned(m1)), &inst.y).unwrap(),
                "kl_dropout_pair" => {
                    kl_divergence(&probs(&m, x, ForwardMode::Pinned(m1)), &probs(&m, x, ForwardMode::Pinned(m2))).unwrap()
                }
                "kl_teacher" => {
                    let p3 = inst.teacher.predict(x).unwrap();
                    kl_divergence(&probs(&m, x, ForwardMode::Pinned(m1)), &p3).unwrap()
                        + kl_divergence(&probs(&m, x, ForwardMode::Pinned(m2)), &p3).unwrap()
                }
                "self_distill_composite" => {
                    let (a, b, g) = inst.weights;
                    let p1 = probs(&m, x, ForwardMode::Pinned(m1));
                    let p2 = probs(&m, x, ForwardMode::Pinned(m2));
                    let p3 = inst.teacher.predict(x).unwrap();
                    a * (cross_entropy(&p1, &inst.y).unwrap() + cross_entropy(&p2, &inst.y).unwrap())
                        + b * kl_divergence(&p1, &p2).unwrap()
                        + g * (kl_divergence(&p1, &p3).unwrap() + kl_divergence(&p2, &p3).unwrap())
                }
                "entropy_params" => entropy(&m.predict(x).unwrap()).unwrap().iter().sum(),
                "distill_kl" => kl_divergence(&inst.target, &m.predict(x).unwrap()).unwrap(),
                other => unreachable!("unknown family {other}"),
            }
        }
    }
}

fn analytic(family: &str, inst: &Instance) -> Result<Vec<f64>> {
    let m = &inst.model;
    let x = &inst.x;
    let (m1, m2) = (&inst.masks.0, &inst.masks.1);
    let grads = match family {
        "cross_entropy" => {
            let (p, c) = m.forward(x, ForwardMode::Pinned(m1))?;
            m.backward(&c, &cross_entropy_grad(&p, &inst.y))?
        }
        "kl_dropout_pair" => {
            let (p1, c1) = m.forward(x, ForwardMode::Pinned(m1))?;
            let (p2, c2) = m.forward(x, ForwardMode::Pinned(m2))?;
            let mut g = m.backward(&c1, &kl_grad_wrt_first(&p1, c1.log_probs(), c2.log_probs()))?;
            g.add_scaled(&m.backward(&c2, &kl_grad_wrt_second(&p1, &p2))?, 1.0)?;
            g
        }
        "kl_teacher" => {
            let (_, c3) = inst.teacher.forward(x, ForwardMode::Eval)?;
            let (p1, c1) = m.forward(x, ForwardMode::Pinned(m1))?;
            let (p2, c2) = m.forward(x, ForwardMode::Pinned(m2))?;
            let mut g = m.backward(&c1, &kl_grad_wrt_first(&p1, c1.log_probs(), c3.log_probs()))?;
            g.add_scaled(&m.backward(&c2, &kl_grad_wrt_first(&p2, c2.log_probs(), c3.log_probs()))?, 1.0)?;
            g
        }
        "self_distill_composite" => {
            let (alpha, beta, gamma) = inst.weights;
            let cfg = SelfDistillConfig {
                alpha,
                beta,
                gamma,
                ..Default::default()
            };
            self_distill_loss_pinned(m, &inst.teacher, x, &inst.y, &cfg, (m1, m2))?.grads
        }
        "entropy_params" | "entropy_input" => {
            let (p, c) = m.forward(x, ForwardMode::Eval)?;
            let g = m.backward(&c, &entropy_grad(&p, c.log_probs()))?;
            if family == "entropy_input" {
                return Ok(g.d_input.into_data());
            }
            g
        }
        "distill_kl" => {
            let (p, c) = m.forward(x, ForwardMode::Eval)?;
            m.backward(&c, &kl_grad_wrt_second(&inst.target, &p))?
        }
        other => unreachable!("unknown family {other}"),
    };
    Ok(grads.flatten_params())
}

fn check_family(family: &'static str, opts: &GradcheckOptions) -> Result<FamilyReport> {
    let mut report = FamilyReport {
        name: family,
        instances: opts.instances,
        coordinates: 0,
        max_rel_error: 0.0,
        worst_instance: 0,
        worst_coordinate: 0,
    };
    for i in 0..opts.instances {
        let mut rng = Rng::seed_from(derive_seed(opts.seed, family, i as u64, 0));
        let inst = draw_instance(&mut rng);
        let mut a = analytic(family, &inst)?;
        a[0] += opts.perturbation;
        let point = if family == "entropy_input" {
            inst.x.clone()
        } else {
            inst.model.flatten_params()
        };
        let numeric = finite_diff_gradient_o4(|v| loss_value(family, &inst, v), &point, O4_STEP);
        for (j, (&av, &nv)) in a.iter().zip(numeric.data()).enumerate() {
            let err = relative_error(av, nv, GRADCHECK_FLOOR);
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst_instance = i;
                report.worst_coordinate = j;
            }
        }
        report.coordinates += a.len();
    }
    Ok(report)
}

/// Runs every family in [`FAMILIES`].
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<Vec<FamilyReport>> {
    FAMILIES.iter().map(|f| check_family(f, opts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn battery_passes() {
        let reports = run_gradcheck(&GradcheckOptions {
            seed: 11,
            instances: 5,
            perturbation: 0.0,
        })
        .unwrap();
        assert_eq!(reports.len(), FAMILIES.len());
        for r in &reports {
            assert!(r.passed(), "{r:?}");
            assert!(r.coordinates > 0);
        }
    }

    #[test]
    fn perturbation_is_detected() {
        let reports = run_gradcheck(&GradcheckOptions {
            seed: 11,
            instances: 2,
            perturbation: 1e-2,
        })
        .unwrap();
        assert!(reports.iter().all(|r| !r.passed()));
        assert!(reports.iter().all(|r| r.worst_coordinate == 0));
    }
}

use crate::error::{invalid, Result};
use crate::nn::MlpModel;
use crate::tensor::Tensor;

/// Weighted parameter mean `Σ (w_k / Σ w_j) · θ_k`. Entries are summed in
/// ascending client-id order, and the result is clamped coordinatewise into
/// the inputs' range.
pub fn aggregate(models: &[(usize, &MlpModel)], weights: &[f64]) -> Result<MlpModel> {
    if models.is_empty() {
        return Err(invalid("nothing to aggregate"));
    }
    if weights.len() != models.len() {
        return Err(invalid(format!(
            "{} weights for {} models",
            weights.len(),
            models.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
        return Err(invalid(format!("aggregation weight {w} must be positive")));
    }
    let template = models[0].1;
    if let Some((id, _)) = models.iter().find(|(_, m)| !m.same_architecture(template)) {
        return Err(invalid(format!("model from client {id} has a different architecture")));
    }
    let mut order: Vec<usize> = (0..models.len()).collect();
    order.sort_by_key(|&i| models[i].0);

    let total: f64 = order.iter().map(|&i| weights[i]).sum();
    let params: Vec<Tensor> = order.iter().map(|&i| models[i].1.flatten_params()).collect();
    let mut acc: Vec<f64> = Vec::new();
    for (k, &i) in order.iter().enumerate() {
        let share = weights[i] / total;
        if k == 0 {
            acc = params[0].data().iter().map(|v| share * v).collect();
        } else {
            for (a, v) in acc.iter_mut().zip(params[k].data()) {
                *a += share * v;
            }
        }
    }
    for (j, a) in acc.iter_mut().enumerate() {
        let (lo, hi) = params
            .iter()
            .map(|p| p.data()[j])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        *a = a.clamp(lo, hi);
    }
    let mut out = template.unflatten_params(&Tensor::new(vec![acc.len()], acc)?)?;
    out.set_trainable(true);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn filled(value: f64) -> MlpModel {
        let m = MlpModel::zeros(&[3, 4, 2], &[0.1]).unwrap();
        let theta = m.flatten_params().map(|_| value);
        m.unflatten_params(&theta).unwrap()
    }

    #[test]
    fn single_model_unchanged() {
        let m = MlpModel::new_random(&[3, 4, 2], &[0.1], &mut Rng::seed_from(1)).unwrap();
        assert_eq!(aggregate(&[(5, &m)], &[17.0]).unwrap(), m);
    }

    #[test]
    fn equal_weights_mean() {
        let (a, b) = (filled(2.0), filled(4.0));
        let g = aggregate(&[(0, &a), (1, &b)], &[1.0, 1.0]).unwrap();
        assert!(g.flatten_params().data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn architecture_mismatch() {
        let a = filled(1.0);
        let b = MlpModel::zeros(&[3, 5, 2], &[0.1]).unwrap();
        assert!(aggregate(&[(0, &a), (1, &b)], &[1.0, 1.0]).is_err());
        assert!(aggregate(&[(0, &a)], &[0.0]).is_err());
        assert!(aggregate(&[], &[]).is_err());
    }
}

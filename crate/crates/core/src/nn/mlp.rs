use crate::error::{invalid, Error, Result};
use crate::prob::{log_softmax, softmax};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One affine layer. `weight` is `fan_in x fan_out`, so a batch maps as
/// `x · W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl Dense {
    fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    layers: Vec<Dense>,
    dropout_rates: Vec<f64>,
    trainable: bool,
}

/// How hidden-layer dropout behaves during a forward pass.
pub enum ForwardMode<'a> {
    /// No masking.
    Eval,
    /// Fresh inverted-dropout masks drawn from the generator.
    TrainStochastic(&'a mut Rng),
    /// Reuse the masks of an earlier pass (one per hidden layer; `None`
    /// means all ones).
    Pinned(&'a [Option<Tensor>]),
}

/// Intermediate values of one forward pass, consumed by [`MlpModel::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layer_dims: Vec<usize>,
    input: Tensor,
    pre_activations: Vec<Tensor>,
    activations: Vec<Tensor>,
    masks: Vec<Option<Tensor>>,
    probs: Tensor,
    log_probs: Tensor,
}

impl ForwardCache {
    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn log_probs(&self) -> &Tensor {
        &self.log_probs
    }

    pub fn logits(&self) -> &Tensor {
        self.pre_activations.last().expect("at least one layer")
    }

    /// Dropout masks per hidden layer, already scaled by `1/(1-rate)`.
    /// `None` stands for an all-ones mask.
    pub fn masks(&self) -> &[Option<Tensor>] {
        &self.masks
    }

    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

/// Gradients of a scalar loss w.r.t. every parameter and the input batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<DenseGrad>,
    pub d_input: Tensor,
}

impl Gradients {
    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &Gradients, factor: f64) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(invalid("gradient layer counts differ"));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_scaled(&b.weight, factor)?;
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += factor * y;
            }
        }
        self.d_input.add_scaled(&other.d_input, factor)
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.layers {
            g.weight.scale(factor);
            g.bias.iter_mut().for_each(|v| *v *= factor);
        }
        self.d_input.scale(factor);
    }

    /// Parameter gradients in the same order as [`MlpModel::flatten_params`].
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend_from_slice(g.weight.data());
            out.extend_from_slice(&g.bias);
        }
        out
    }
}

fn relu_in_place(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

fn draw_mask(rng: &mut Rng, shape: &[usize], rate: f64) -> Tensor {
    let keep = 1.0 / (1.0 - rate);
    let mut m = Tensor::zeros(shape);
    for v in m.data_mut() {
        if rng.uniform() >= rate {
            *v = keep;
        }
    }
    m
}

impl MlpModel {
    fn validate_dims(layer_dims: &[usize], dropout_rates: &[f64]) -> Result<()> {
        if layer_dims.len() < 2 || layer_dims.iter().any(|&d| d == 0) {
            return Err(invalid(format!(
                "layer dims {layer_dims:?} need at least input and output, all positive"
            )));
        }
        if dropout_rates.len() != layer_dims.len() - 2 {
            return Err(invalid(format!(
                "{} dropout rates for {} hidden layers",
                dropout_rates.len(),
                layer_dims.len() - 2
            )));
        }
        if let Some(r) = dropout_rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(invalid(format!("dropout rate {r} outside [0, 1)")));
        }
        Ok(())
    }

    /// Glorot-uniform weights, zero biases.
    pub fn new_random(layer_dims: &[usize], dropout_rates: &[f64], rng: &mut Rng) -> Result<Self> {
        Self::validate_dims(layer_dims, dropout_rates)?;
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.uniform_range(-limit, limit))
                    .collect();
                Dense {
                    weight: Tensor::new(vec![fan_in, fan_out], data).expect("sized"),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            layers,
            dropout_rates: dropout_rates.to_vec(),
            trainable: true,
        })
    }

    pub fn zeros(layer_dims: &[usize], dropout_rates: &[f64]) -> Result<Self> {
        Self::validate_dims(layer_dims, dropout_rates)?;
        let layers = layer_dims
            .windows(2)
            .map(|w| Dense {
                weight: Tensor::zeros(&[w[0], w[1]]),
                bias: vec![0.0; w[1]],
            })
            .collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            layers,
            dropout_rates: dropout_rates.to_vec(),
            trainable: true,
        })
    }

    /// Assembles a model from explicit layers.
    pub fn from_layers(layers: Vec<Dense>, dropout_rates: Vec<f64>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| invalid("model needs a layer"))?;
        let mut dims = vec![first.fan_in()];
        for layer in &layers {
            if layer.fan_in() != *dims.last().unwrap() {
                return Err(invalid(format!(
                    "layer expects {} inputs but previous layer emits {}",
                    layer.fan_in(),
                    dims.last().unwrap()
                )));
            }
            if layer.bias.len() != layer.fan_out() {
                return Err(invalid("bias length does not match layer width"));
            }
            dims.push(layer.fan_out());
        }
        Self::validate_dims(&dims, &dropout_rates)?;
        Ok(Self {
            layer_dims: dims,
            layers,
            dropout_rates,
            trainable: true,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn dropout_rates(&self) -> &[f64] {
        &self.dropout_rates
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    /// A non-trainable copy, used as a fixed teacher.
    pub fn frozen(&self) -> Self {
        let mut m = self.clone();
        m.trainable = false;
        m
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn same_architecture(&self, other: &MlpModel) -> bool {
        self.layer_dims == other.layer_dims
    }

    pub fn forward(&self, batch: &Tensor, mode: ForwardMode<'_>) -> Result<(Tensor, ForwardCache)> {
        if batch.shape().len() != 2 || batch.cols() != self.input_dim() {
            return Err(invalid(format!(
                "batch shape {:?} does not match input dim {}",
                batch.shape(),
                self.input_dim()
            )));
        }
        let hidden = self.layers.len() - 1;
        if let ForwardMode::Pinned(masks) = &mode {
            if masks.len() != hidden {
                return Err(invalid(format!(
                    "{} pinned masks for {hidden} hidden layers",
                    masks.len()
                )));
            }
        }
        let mut mode = mode;
        let n = batch.rows();
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut activations = Vec::with_capacity(hidden);
        let mut masks = Vec::with_capacity(hidden);

        for (l, layer) in self.layers.iter().enumerate() {
            let input = if l == 0 { batch } else { &activations[l - 1] };
            let mut z = input.matmul(&layer.weight)?;
            z.add_row_vector(&layer.bias)?;
            if l == hidden {
                pre_activations.push(z);
                break;
            }
            let mut a = z.clone();
            relu_in_place(&mut a);
            let rate = self.dropout_rates[l];
            let mask = match &mut mode {
                ForwardMode::Eval => None,
                ForwardMode::TrainStochastic(rng) => {
                    (rate > 0.0).then(|| draw_mask(rng, &[n, layer.fan_out()], rate))
                }
                ForwardMode::Pinned(pinned) => pinned[l].clone(),
            };
            if let Some(m) = &mask {
                a.mul_assign(m)?;
            }
            pre_activations.push(z);
            activations.push(a);
            masks.push(mask);
        }

        let logits = pre_activations.last().unwrap();
        let probs = softmax(logits)?;
        let log_probs = log_softmax(logits)?;
        let cache = ForwardCache {
            layer_dims: self.layer_dims.clone(),
            input: batch.clone(),
            pre_activations,
            activations,
            masks,
            probs: probs.clone(),
            log_probs,
        };
        Ok((probs, cache))
    }

    /// Eval-mode class probabilities.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward(batch, ForwardMode::Eval)?.0)
    }

    /// Back-propagates `d_logits` (the loss gradient w.r.t. the final affine
    /// output) through the masks recorded in `cache`.
    pub fn backward(&self, cache: &ForwardCache, d_logits: &Tensor) -> Result<Gradients> {
        if cache.layer_dims != self.layer_dims
            || cache.pre_activations.len() != self.layers.len()
        {
            return Err(Error::InvalidState(
                "forward cache was produced by a different architecture".into(),
            ));
        }
        if d_logits.shape() != cache.logits().shape() {
            return Err(Error::InvalidState(format!(
                "upstream gradient shape {:?} does not match cached logits {:?}",
                d_logits.shape(),
                cache.logits().shape()
            )));
        }

        let mut grads: Vec<DenseGrad> = Vec::with_capacity(self.layers.len());
        let mut delta = d_logits.clone();
        let mut d_input = None;
        for l in (0..self.layers.len()).rev() {
            let input = if l == 0 { &cache.input } else { &cache.activations[l - 1] };
            grads.push(DenseGrad {
                weight: input.t_matmul(&delta)?,
                bias: delta.sum_rows(),
            });
            let mut d_prev = delta.matmul_t(&self.layers[l].weight)?;
            if l == 0 {
                d_input = Some(d_prev);
                break;
            }
            if let Some(mask) = &cache.masks[l - 1] {
                d_prev.mul_assign(mask)?;
            }
            let z = &cache.pre_activations[l - 1];
            for (d, &zv) in d_prev.data_mut().iter_mut().zip(z.data()) {
                if zv <= 0.0 {
                    *d = 0.0;
                }
            }
            delta = d_prev;
        }
        grads.reverse();
        Ok(Gradients {
            layers: grads,
            d_input: d_input.expect("loop reaches layer 0"),
        })
    }

    fn check_grads(&self, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != self.layers.len()
            || grads
                .layers
                .iter()
                .zip(&self.layers)
                .any(|(g, l)| g.weight.shape() != l.weight.shape() || g.bias.len() != l.bias.len())
        {
            return Err(invalid("gradient shapes do not match the model"));
        }
        Ok(())
    }

    /// In-place `w ← w − lr·dw`.
    pub fn apply_sgd(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if !self.trainable {
            return Err(Error::InvalidState("model is frozen".into()));
        }
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(invalid(format!("learning rate {lr} must be non-negative")));
        }
        self.check_grads(grads)?;
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            layer.weight.add_scaled(&g.weight, -lr)?;
            for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gb;
            }
        }
        Ok(())
    }

    pub fn sgd_step(&self, grads: &Gradients, lr: f64) -> Result<MlpModel> {
        let mut next = self.clone();
        next.apply_sgd(grads, lr)?;
        Ok(next)
    }

    /// All parameters as one vector: per layer, the weight matrix row-major
    /// followed by its bias.
    pub fn flatten_params(&self) -> Tensor {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        Tensor::new(vec![out.len()], out).expect("non-empty")
    }

    /// A copy of this model with parameters replaced by `params`.
    pub fn unflatten_params(&self, params: &Tensor) -> Result<MlpModel> {
        if params.len() != self.param_count() {
            return Err(invalid(format!(
                "parameter vector has {} entries, model needs {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut next = self.clone();
        let mut offset = 0;
        let src = params.data();
        for l in &mut next.layers {
            let w = l.weight.len();
            l.weight.data_mut().copy_from_slice(&src[offset..offset + w]);
            offset += w;
            let b = l.bias.len();
            l.bias.copy_from_slice(&src[offset..offset + b]);
            offset += b;
        }
        Ok(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finite_diff::{finite_diff_gradient, relative_error, DEFAULT_STEP};
    use crate::prob::{cross_entropy, cross_entropy_grad};

    fn random_batch(rng: &mut Rng, n: usize, h: usize) -> Tensor {
        Tensor::new(vec![n, h], (0..n * h).map(|_| rng.standard_normal()).collect()).unwrap()
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(MlpModel::zeros(&[3], &[]).is_err());
        assert!(MlpModel::zeros(&[3, 4, 2], &[]).is_err());
        assert!(MlpModel::zeros(&[3, 4, 2], &[1.0]).is_err());
        assert!(MlpModel::zeros(&[3, 0, 2], &[0.1]).is_err());
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = MlpModel::zeros(&[4, 5, 3], &[0.2]).unwrap();
        let mut rng = Rng::seed_from(0);
        let x = random_batch(&mut rng, 6, 4);
        let p = m.predict(&x).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn rate_zero_train_equals_eval() {
        let mut rng = Rng::seed_from(1);
        let m = MlpModel::new_random(&[4, 6, 5, 3], &[0.0, 0.0], &mut rng).unwrap();
        let x = random_batch(&mut rng, 5, 4);
        let (train, _) = m.forward(&x, ForwardMode::TrainStochastic(&mut rng)).unwrap();
        assert_eq!(train, m.predict(&x).unwrap());
    }

    #[test]
    fn single_layer_hand_computed() {
        // W = [[1, 0], [0, 2]], b = [0, -1], x = [1, 1] → z = [1, 1].
        let layer = Dense {
            weight: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap(),
            bias: vec![0.0, -1.0],
        };
        let m = MlpModel::from_layers(vec![layer.clone()], vec![]).unwrap();
        let p = m.predict(&Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap()).unwrap();
        assert!((p.data()[0] - 0.5).abs() < 1e-15);

        // x = [2, 0] → z = [2, -1]; softmax = [e^3/(e^3+1), 1/(e^3+1)].
        let p = m.predict(&Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap()).unwrap();
        let e3 = 3f64.exp();
        assert!((p.data()[0] - e3 / (e3 + 1.0)).abs() < 1e-15);
        assert!((p.data()[1] - 1.0 / (e3 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn linear_model_input_gradient_is_upstream_times_wt() {
        let mut rng = Rng::seed_from(2);
        let m = MlpModel::new_random(&[3, 4], &[], &mut rng).unwrap();
        let x = random_batch(&mut rng, 2, 3);
        let (_, cache) = m.forward(&x, ForwardMode::Eval).unwrap();
        let upstream = random_batch(&mut rng, 2, 4);
        let g = m.backward(&cache, &upstream).unwrap();
        let expected = upstream.matmul_t(&m.layers()[0].weight).unwrap();
        assert_eq!(g.d_input, expected);
    }

    #[test]
    fn ce_gradient_matches_finite_differences_with_pinned_masks() {
        let mut rng = Rng::seed_from(3);
        let mut m = MlpModel::new_random(&[5, 7, 6, 4], &[0.3, 0.2], &mut rng).unwrap();
        // Zero biases put fully dropped rows exactly on the ReLU kink.
        for l in &mut m.layers {
            l.bias.iter_mut().for_each(|b| *b = 0.3 * rng.standard_normal());
        }
        let x = random_batch(&mut rng, 4, 5);
        let labels = [0, 3, 1, 2];
        let (probs, cache) = m.forward(&x, ForwardMode::TrainStochastic(&mut rng)).unwrap();
        let masks = cache.masks().to_vec();
        let g = m.backward(&cache, &cross_entropy_grad(&probs, &labels)).unwrap();

        let numeric = finite_diff_gradient(
            |theta| {
                let mm = m.unflatten_params(theta).unwrap();
                let (p, _) = mm.forward(&x, ForwardMode::Pinned(&masks)).unwrap();
                cross_entropy(&p, &labels).unwrap()
            },
            &m.flatten_params(),
            DEFAULT_STEP,
        );
        for (a, n) in g.flatten_params().iter().zip(numeric.data()) {
            assert!(relative_error(*a, *n, 1e-7) < 1e-4, "{a} vs {n}");
        }
    }

    #[test]
    fn stale_cache_rejected() {
        let mut rng = Rng::seed_from(4);
        let a = MlpModel::new_random(&[3, 4, 2], &[0.1], &mut rng).unwrap();
        let b = MlpModel::new_random(&[3, 5, 2], &[0.1], &mut rng).unwrap();
        let x = random_batch(&mut rng, 2, 3);
        let (p, cache) = a.forward(&x, ForwardMode::Eval).unwrap();
        assert!(matches!(b.backward(&cache, &p), Err(Error::InvalidState(_))));
        let wrong = Tensor::zeros(&[3, 2]);
        assert!(matches!(a.backward(&cache, &wrong), Err(Error::InvalidState(_))));
    }

    #[test]
    fn sgd_contracts() {
        let mut rng = Rng::seed_from(5);
        let m = MlpModel::new_random(&[3, 4, 2], &[0.1], &mut rng).unwrap();
        let x = random_batch(&mut rng, 2, 3);
        let (p, cache) = m.forward(&x, ForwardMode::Eval).unwrap();
        let mut g = m.backward(&cache, &cross_entropy_grad(&p, &[0, 1])).unwrap();

        let mut zero = g.clone();
        zero.scale(0.0);
        assert_eq!(m.sgd_step(&zero, 0.7).unwrap(), m);

        let twice = m.sgd_step(&g, 0.1).unwrap().sgd_step(&g, 0.1).unwrap();
        let once = m.sgd_step(&g, 0.2).unwrap();
        for (a, b) in twice.flatten_params().data().iter().zip(once.flatten_params().data()) {
            assert!((a - b).abs() < 1e-14);
        }

        // dW = W with lr = 1 zeroes every parameter.
        for (gl, l) in g.layers.iter_mut().zip(m.layers()) {
            gl.weight = l.weight.clone();
            gl.bias = l.bias.clone();
        }
        let z = m.sgd_step(&g, 1.0).unwrap();
        assert!(z.flatten_params().data().iter().all(|&v| v == 0.0));

        assert!(matches!(m.frozen().sgd_step(&g, 0.1), Err(Error::InvalidState(_))));
    }

    #[test]
    fn flatten_lengths_and_round_trip() {
        let z = MlpModel::zeros(&[4, 3, 2], &[0.0]).unwrap();
        let flat = z.flatten_params();
        assert_eq!(flat.len(), 23);
        assert!(flat.data().iter().all(|&v| v == 0.0));

        let mut rng = Rng::seed_from(6);
        let m = MlpModel::new_random(&[6, 8, 5], &[0.25], &mut rng).unwrap();
        assert_eq!(m.unflatten_params(&m.flatten_params()).unwrap(), m);
        let short = Tensor::zeros(&[3]);
        assert!(m.unflatten_params(&short).is_err());
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        let mut rng = Rng::seed_from(7);
        let rate = 0.3;
        let draws = 10_000;
        let activation = 1.7;
        let samples: Vec<f64> = (0..draws)
            .map(|_| activation * draw_mask(&mut rng, &[1, 1], rate).data()[0])
            .collect();
        let mean = samples.iter().sum::<f64>() / draws as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        let se = (var / draws as f64).sqrt();
        assert!((mean - activation).abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn eval_forward_is_pure() {
        let mut rng = Rng::seed_from(8);
        let m = MlpModel::new_random(&[3, 4, 2], &[0.5], &mut rng).unwrap();
        let x = random_batch(&mut rng, 3, 3);
        assert_eq!(m.predict(&x).unwrap(), m.predict(&x).unwrap());
    }
}

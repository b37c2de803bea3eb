//! A small dense network with ReLU hidden layers and a logistic head, exact
//! gradients for weighted soft-label losses, and Adam.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{config_err, Error, Result};

pub const PRED_MIN: f64 = 1e-7;
pub const PRED_MAX: f64 = 1.0 - 1e-7;

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Parameters live in one flat vector: for each layer, the `[out][in]`
/// weight matrix row-major, then the bias vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    dims: Vec<usize>,
    params: Vec<f64>,
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl DenseNet {
    /// `dims = [input, hidden..., 1]`, initialized uniformly in
    /// `±1/√fan_in`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        let mut offset = 0;
        for w in dims.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for p in &mut net.params[offset..offset + w[0] * w[1] + w[1]] {
                *p = rng.random_range(-bound..bound);
            }
            offset += w[0] * w[1] + w[1];
        }
        Ok(net)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return config_err("layer dims need an input and an output, all positive");
        }
        if *dims.last().unwrap() != 1 {
            return config_err("the output layer must have width 1");
        }
        Ok(DenseNet { dims: dims.to_vec(), params: vec![0.0; param_count(dims)] })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Pre-activation of the output unit, keeping every layer's activations
    /// in `acts` for the backward pass.
    fn forward_cached(&self, input: &[f64], acts: &mut Vec<Vec<f64>>) -> f64 {
        acts.clear();
        acts.push(input.to_vec());
        let mut offset = 0;
        let last = self.dims.len() - 2;
        for (l, w) in self.dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = &self.params[offset..offset + fan_in * fan_out];
            let biases = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            let prev = &acts[l];
            let mut out = Vec::with_capacity(fan_out);
            for j in 0..fan_out {
                let row = &weights[j * fan_in..(j + 1) * fan_in];
                let z: f64 = biases[j] + row.iter().zip(prev).map(|(a, b)| a * b).sum::<f64>();
                out.push(if l == last { z } else { z.max(0.0) });
            }
            acts.push(out);
            offset += fan_in * fan_out + fan_out;
        }
        acts.last().unwrap()[0]
    }

    pub fn logit(&self, input: &[f64]) -> Result<f64> {
        self.check_width(input.len())?;
        Ok(self.forward_cached(input, &mut Vec::new()))
    }

    /// Clamped logistic output in `[1e-7, 1 − 1e-7]`.
    pub fn predict(&self, input: &[f64]) -> Result<f64> {
        Ok(logistic(self.logit(input)?).clamp(PRED_MIN, PRED_MAX))
    }

    pub fn forward(&self, inputs: &[Vec<f64>]) -> Result<Vec<f64>> {
        inputs.iter().map(|x| self.predict(x)).collect()
    }

    fn check_width(&self, width: usize) -> Result<()> {
        if width != self.dims[0] {
            return config_err(format!("input width {width}, network expects {}", self.dims[0]));
        }
        Ok(())
    }

    /// Accumulates `scale · ∂z/∂θ` into `grad`, where `acts` came from the
    /// matching forward pass.
    fn backward(&self, acts: &[Vec<f64>], scale: f64, grad: &mut [f64]) {
        let mut offsets = Vec::with_capacity(self.dims.len() - 1);
        let mut offset = 0;
        for w in self.dims.windows(2) {
            offsets.push(offset);
            offset += w[0] * w[1] + w[1];
        }
        let mut delta = vec![scale];
        for l in (0..self.dims.len() - 1).rev() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let off = offsets[l];
            let prev = &acts[l];
            for j in 0..fan_out {
                let d = delta[j];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[off + j * fan_in..off + (j + 1) * fan_in];
                for (g, a) in row.iter_mut().zip(prev) {
                    *g += d * a;
                }
                grad[off + fan_in * fan_out + j] += d;
            }
            if l == 0 {
                break;
            }
            let weights = &self.params[off..off + fan_in * fan_out];
            let mut next = vec![0.0; fan_in];
            for (j, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (n, w) in next.iter_mut().zip(&weights[j * fan_in..(j + 1) * fan_in]) {
                    *n += d * w;
                }
            }
            // ReLU derivative: the stored activation is positive iff active.
            for (n, a) in next.iter_mut().zip(prev) {
                if *a <= 0.0 {
                    *n = 0.0;
                }
            }
            delta = next;
        }
    }

    fn weighted_gradient<L>(&self, batch: &LabeledBatch, per_example: L) -> Result<(f64, Vec<f64>)>
    where
        L: Fn(f64, f64, f64) -> (f64, f64),
    {
        self.check_width(batch.width)?;
        let n = batch.len();
        if n == 0 {
            return config_err("empty batch");
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut acts = Vec::new();
        let mut loss = 0.0;
        for i in 0..n {
            let z = self.forward_cached(batch.input(i), &mut acts);
            let (l, dl_dz) = per_example(z, batch.labels[i], batch.weights[i]);
            loss += l;
            if dl_dz != 0.0 {
                self.backward(&acts, dl_dz / n as f64, &mut grad);
            }
        }
        Ok((loss / n as f64, grad))
    }

    /// `mean_i w_i · CE(c_i, y_i)` and its exact gradient.
    pub fn weighted_ce_gradient(&self, batch: &LabeledBatch) -> Result<(f64, Vec<f64>)> {
        self.weighted_gradient(batch, |z, y, w| {
            let raw = logistic(z);
            let c = raw.clamp(PRED_MIN, PRED_MAX);
            let l = -y * c.ln() - (1.0 - y) * (1.0 - c).ln();
            let d = if raw == c { c - y } else { 0.0 };
            (w * l, w * d)
        })
    }

    /// `mean_i w_i · (c_i − y_i)²` and its exact gradient.
    pub fn weighted_mse_gradient(&self, batch: &LabeledBatch) -> Result<(f64, Vec<f64>)> {
        self.weighted_gradient(batch, |z, y, w| {
            let raw = logistic(z);
            let c = raw.clamp(PRED_MIN, PRED_MAX);
            let l = (c - y) * (c - y);
            let d = if raw == c { 2.0 * (c - y) * c * (1.0 - c) } else { 0.0 };
            (w * l, w * d)
        })
    }

    /// Little-endian: dims count and dims as u64, then all parameters as
    /// f64 in layer order (weights row-major, then biases).
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(&(self.dims.len() as u64).to_le_bytes())?;
        for &d in &self.dims {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for &p in &self.params {
            out.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self> {
        let mut word = [0u8; 8];
        let mut next = |input: &mut R| -> Result<[u8; 8]> {
            input
                .read_exact(&mut word)
                .map_err(|e| Error::Parse(format!("truncated checkpoint: {e}")))?;
            Ok(word)
        };
        let count = u64::from_le_bytes(next(&mut input)?) as usize;
        if count > 64 {
            return Err(Error::Parse(format!("implausible layer count {count}")));
        }
        let mut dims = Vec::with_capacity(count);
        for _ in 0..count {
            dims.push(u64::from_le_bytes(next(&mut input)?) as usize);
        }
        let mut net = DenseNet::zeros(&dims).map_err(|e| Error::Parse(e.to_string()))?;
        for p in &mut net.params {
            *p = f64::from_le_bytes(next(&mut input)?);
        }
        Ok(net)
    }
}

/// Polyak averaging: `target ← (1 − τ) target + τ source`.
pub fn soft_update(target: &mut DenseNet, source: &DenseNet, tau: f64) {
    debug_assert_eq!(target.dims, source.dims);
    for (t, s) in target.params.iter_mut().zip(&source.params) {
        *t = (1.0 - tau) * *t + tau * s;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        AdamState {
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState) {
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grad[i];
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        params[i] -= state.learning_rate * (*m / c1) / ((*v / c2).sqrt() + state.epsilon);
    }
}

/// Inputs stored row-major with soft labels and per-example weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledBatch {
    width: usize,
    inputs: Vec<f64>,
    pub labels: Vec<f64>,
    pub weights: Vec<f64>,
}

impl LabeledBatch {
    pub fn new(width: usize) -> Self {
        LabeledBatch { width, ..Default::default() }
    }

    pub fn with_capacity(width: usize, n: usize) -> Self {
        LabeledBatch {
            width,
            inputs: Vec::with_capacity(width * n),
            labels: Vec::with_capacity(n),
            weights: Vec::with_capacity(n),
        }
    }

    pub fn push(&mut self, input: &[f64], label: f64, weight: f64) -> Result<()> {
        if input.len() != self.width {
            return config_err(format!("input width {}, batch expects {}", input.len(), self.width));
        }
        if !(0.0..=1.0).contains(&label) {
            return config_err(format!("label {label} outside [0, 1]"));
        }
        if !(weight >= 0.0 && weight.is_finite()) {
            return config_err(format!("weight {weight} must be finite and non-negative"));
        }
        self.inputs.extend_from_slice(input);
        self.labels.push(label);
        self.weights.push(weight);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.width..(i + 1) * self.width]
    }

    pub fn scale_weights(&mut self, factor: f64) {
        self.weights.iter_mut().for_each(|w| *w *= factor);
    }
}

/// `[state | one-hot action | goal]`.
pub fn encode_input(state_obs: &[f64], action: usize, goal_obs: &[f64], num_actions: usize) -> Vec<f64> {
    debug_assert!(action < num_actions);
    let mut v = Vec::with_capacity(state_obs.len() + num_actions + goal_obs.len());
    v.extend_from_slice(state_obs);
    v.extend((0..num_actions).map(|a| if a == action { 1.0 } else { 0.0 }));
    v.extend_from_slice(goal_obs);
    v
}

/// Inverse of [`encode_input`].
pub fn decode_input(input: &[f64], obs_dim: usize, num_actions: usize) -> Result<(Vec<f64>, usize, Vec<f64>)> {
    if input.len() != 2 * obs_dim + num_actions {
        return Err(Error::Decode(format!("input width {} does not match layout", input.len())));
    }
    let one_hot = &input[obs_dim..obs_dim + num_actions];
    let hot: Vec<usize> = (0..num_actions).filter(|&a| one_hot[a] == 1.0).collect();
    if hot.len() != 1 || one_hot.iter().filter(|&&x| x != 0.0).count() != 1 {
        return Err(Error::Decode("action block is not one-hot".into()));
    }
    Ok((input[..obs_dim].to_vec(), hot[0], input[obs_dim + num_actions..].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn zero_net_predicts_half() {
        let net = DenseNet::zeros(&[3, 4, 1]).unwrap();
        assert_eq!(net.predict(&[1.0, -2.0, 3.0]).unwrap(), 0.5);
        assert!(net.predict(&[1.0]).is_err());
    }

    #[test]
    fn single_layer_is_logistic_regression() {
        let mut net = DenseNet::zeros(&[2, 1]).unwrap();
        net.params_mut().copy_from_slice(&[0.5, -1.5, 0.0]);
        let x = [2.0, 1.0];
        assert_eq!(net.predict(&x).unwrap(), logistic(0.5 * 2.0 - 1.5));
    }

    #[test]
    fn extreme_inputs_stay_inside_unit_interval() {
        let mut net = DenseNet::zeros(&[1, 1]).unwrap();
        net.params_mut()[0] = 1.0;
        for x in [1e6, -1e6, 1e300] {
            let c = net.predict(&[x]).unwrap();
            assert!(c > 0.0 && c < 1.0);
        }
    }

    #[test]
    fn matched_labels_give_zero_head_gradient() {
        let net = DenseNet::new(&[2, 5, 1], &mut seeded(0)).unwrap();
        let mut batch = LabeledBatch::new(2);
        for x in [[0.1, 0.2], [-1.0, 0.5]] {
            let c = net.predict(&x).unwrap();
            batch.push(&x, c, 1.0).unwrap();
        }
        let (_, grad) = net.weighted_ce_gradient(&batch).unwrap();
        let head_bias = *grad.last().unwrap();
        assert!(head_bias.abs() < 1e-12);
    }

    #[test]
    fn doubling_weights_doubles_loss_and_gradient() {
        let mut rng = seeded(1);
        let net = DenseNet::new(&[3, 6, 1], &mut rng).unwrap();
        let mut batch = LabeledBatch::new(3);
        for _ in 0..10 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            batch.push(&x, rng.random(), rng.random()).unwrap();
        }
        let (l1, g1) = net.weighted_ce_gradient(&batch).unwrap();
        batch.scale_weights(2.0);
        let (l2, g2) = net.weighted_ce_gradient(&batch).unwrap();
        assert_eq!(l2, 2.0 * l1);
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(*b, 2.0 * a);
        }
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let mut params = vec![1.0, 2.0, 3.0];
        let mut state = AdamState::new(3, 0.01);
        adam_step(&mut params, &[0.5, -3.0, 0.0], &mut state);
        assert!((params[0] - (1.0 - 0.01)).abs() < 1e-8);
        assert!((params[1] - (2.0 + 0.01)).abs() < 1e-8);
        assert_eq!(params[2], 3.0);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn adam_minimizes_scalar_quadratic() {
        let mut p = vec![0.0];
        let mut state = AdamState::new(1, 3e-3);
        for _ in 0..1000 {
            let g = [2.0 * (p[0] - 0.7)];
            adam_step(&mut p, &g, &mut state);
        }
        assert!((p[0] - 0.7).abs() < 1e-3, "{}", p[0]);
    }

    #[test]
    fn encode_layout() {
        let v = encode_input(&[0.5, 1.5], 0, &[2.0, 3.0], 4);
        assert_eq!(v.len(), 8);
        assert_eq!(&v[2..6], &[1.0, 0.0, 0.0, 0.0]);
        let (s, a, g) = decode_input(&v, 2, 4).unwrap();
        assert_eq!((s, a, g), (vec![0.5, 1.5], 0, vec![2.0, 3.0]));
        assert!(decode_input(&v[..7], 2, 4).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = DenseNet::new(&[4, 7, 3, 1], &mut seeded(2)).unwrap();
        let mut bytes = Vec::new();
        net.write_checkpoint(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 8 * (1 + 4 + param_count(&[4, 7, 3, 1])));
        assert_eq!(DenseNet::read_checkpoint(bytes.as_slice()).unwrap(), net);
        assert!(DenseNet::read_checkpoint(&bytes[..20]).is_err());
    }

    #[test]
    fn soft_update_interpolates() {
        let mut a = DenseNet::zeros(&[1, 1]).unwrap();
        let mut b = DenseNet::zeros(&[1, 1]).unwrap();
        b.params_mut().fill(1.0);
        soft_update(&mut a, &b, 0.25);
        assert!(a.params().iter().all(|&p| p == 0.25));
    }
}

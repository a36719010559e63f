//! Two-layer ReLU classifier with exact analytic gradients.
//!
//! The model is a fixed MLP `input -> hidden (ReLU) -> classes`, small enough
//! to gradient-check exhaustively but with a genuine penultimate feature
//! layer. All parameters live in one flat [`ParameterVector`] so server-side
//! aggregation rules can treat updates as plain vectors.

use crate::error::{Result, SimError};
use crate::rng::Rng;

/// Architecture of the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl ModelDims {
    pub fn new(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Result<Self> {
        let dims = ModelDims {
            input_dim,
            hidden_dim,
            num_classes,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1 || self.hidden_dim < 1 {
            return Err(SimError::invalid("input_dim and hidden_dim must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(SimError::invalid("num_classes must be >= 2"));
        }
        Ok(())
    }

    /// Total scalar parameter count: W1 (h x d), b1 (h), W2 (C x h), b2 (C).
    pub fn param_len(&self) -> usize {
        let (d, h, c) = (self.input_dim, self.hidden_dim, self.num_classes);
        h * d + h + c * h + c
    }

    fn w1_end(&self) -> usize {
        self.hidden_dim * self.input_dim
    }

    fn b1_end(&self) -> usize {
        self.w1_end() + self.hidden_dim
    }

    fn w2_end(&self) -> usize {
        self.b1_end() + self.num_classes * self.hidden_dim
    }
}

/// Flat, ordered parameter storage. Layout: W1 row-major, b1, W2 row-major,
/// b2. This is the single currency exchanged between clients and server.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
}

impl ParameterVector {
    pub fn from_values(values: Vec<f64>) -> Self {
        ParameterVector { values }
    }

    pub fn zeros(len: usize) -> Self {
        ParameterVector {
            values: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn l2_distance(&self, other: &ParameterVector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    fn check_dims(&self, dims: &ModelDims) -> Result<()> {
        if self.len() != dims.param_len() {
            return Err(SimError::mismatch(format!(
                "parameter vector has length {}, model needs {}",
                self.len(),
                dims.param_len()
            )));
        }
        Ok(())
    }
}

/// Output of a single forward pass.
#[derive(Clone, Debug)]
pub struct ForwardResult {
    /// Penultimate activations, `ReLU(W1 x + b1)`; entrywise nonnegative.
    pub features: Vec<f64>,
    /// Class scores, `W2 features + b2`.
    pub logits: Vec<f64>,
}

/// SGD hyperparameters shared by every client in a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(SimError::invalid("learning_rate must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(SimError::invalid("momentum must be in [0, 1)"));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(SimError::invalid("weight_decay must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Momentum buffer plus hyperparameters; one per client per round.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: SgdConfig,
    momentum_buffer: Vec<f64>,
}

impl OptimizerState {
    pub fn new(config: SgdConfig, param_len: usize) -> Result<Self> {
        config.validate()?;
        Ok(OptimizerState {
            config,
            momentum_buffer: vec![0.0; param_len],
        })
    }

    pub fn buffer(&self) -> &[f64] {
        &self.momentum_buffer
    }
}

/// Draws initial weights i.i.d. uniform on `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`
/// per layer; biases start at zero. Bit-identical for identical `(dims, seed)`.
pub fn init_model(dims: &ModelDims, seed: u64) -> ParameterVector {
    let mut rng = Rng::new(seed);
    let mut values = vec![0.0; dims.param_len()];
    let w1_bound = 1.0 / (dims.input_dim as f64).sqrt();
    for v in &mut values[..dims.w1_end()] {
        *v = rng.uniform(-w1_bound, w1_bound);
    }
    let w2_bound = 1.0 / (dims.hidden_dim as f64).sqrt();
    for v in &mut values[dims.b1_end()..dims.w2_end()] {
        *v = rng.uniform(-w2_bound, w2_bound);
    }
    ParameterVector::from_values(values)
}

/// Single forward pass exposing the penultimate features.
pub fn forward(params: &ParameterVector, dims: &ModelDims, x: &[f64]) -> Result<ForwardResult> {
    params.check_dims(dims)?;
    if x.len() != dims.input_dim {
        return Err(SimError::mismatch(format!(
            "input has length {}, model expects {}",
            x.len(),
            dims.input_dim
        )));
    }
    let (d, h, c) = (dims.input_dim, dims.hidden_dim, dims.num_classes);
    let v = params.values();
    let w1 = &v[..dims.w1_end()];
    let b1 = &v[dims.w1_end()..dims.b1_end()];
    let w2 = &v[dims.b1_end()..dims.w2_end()];
    let b2 = &v[dims.w2_end()..];

    let mut features = vec![0.0; h];
    for i in 0..h {
        let mut z = b1[i];
        let row = &w1[i * d..(i + 1) * d];
        for (wij, xj) in row.iter().zip(x) {
            z += wij * xj;
        }
        features[i] = if z > 0.0 { z } else { 0.0 };
    }
    let mut logits = vec![0.0; c];
    for k in 0..c {
        let mut z = b2[k];
        let row = &w2[k * h..(k + 1) * h];
        for (wki, fi) in row.iter().zip(&features) {
            z += wki * fi;
        }
        logits[k] = z;
    }
    Ok(ForwardResult { features, logits })
}

/// Numerically stable softmax probabilities (max-subtracted).
pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy `-log softmax(logits)[label]`, computed through
/// max-subtracted log-sum-exp so extreme logits do not overflow.
pub fn softmax_ce(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(SimError::invalid(format!(
            "label {} out of range for {} classes",
            label,
            logits.len()
        )));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    Ok(m + lse - logits[label])
}

/// Adds the unscaled gradient of `CE(f(x), label)` into `grad` and returns the
/// loss value. Shared by the benign and malicious objectives so that their
/// reductions agree bit for bit.
pub(crate) fn accumulate_ce_grad(
    params: &ParameterVector,
    dims: &ModelDims,
    x: &[f64],
    label: usize,
    grad: &mut [f64],
) -> Result<f64> {
    let fr = forward(params, dims, x)?;
    let loss = softmax_ce(&fr.logits, label)?;
    let (d, h, c) = (dims.input_dim, dims.hidden_dim, dims.num_classes);
    let v = params.values();
    let w2 = &v[dims.b1_end()..dims.w2_end()];

    // dL/dz2 = softmax - onehot
    let mut dz2 = softmax(&fr.logits);
    dz2[label] -= 1.0;

    let (gw1, rest) = grad.split_at_mut(dims.w1_end());
    let (gb1, rest) = rest.split_at_mut(h);
    let (gw2, gb2) = rest.split_at_mut(c * h);

    for k in 0..c {
        gb2[k] += dz2[k];
        let row = &mut gw2[k * h..(k + 1) * h];
        for (g, fi) in row.iter_mut().zip(&fr.features) {
            *g += dz2[k] * fi;
        }
    }
    // Backprop through ReLU: active iff the feature is strictly positive
    // (subgradient 0 at exactly 0).
    for i in 0..h {
        if fr.features[i] > 0.0 {
            let mut da = 0.0;
            for k in 0..c {
                da += w2[k * h + i] * dz2[k];
            }
            gb1[i] += da;
            let row = &mut gw1[i * d..(i + 1) * d];
            for (g, xj) in row.iter_mut().zip(x) {
                *g += da * xj;
            }
        }
    }
    Ok(loss)
}

/// Mean cross-entropy over a batch together with its exact analytic gradient.
pub fn grad_batch_ce(
    params: &ParameterVector,
    dims: &ModelDims,
    batch: &[(&[f64], usize)],
) -> Result<(f64, ParameterVector)> {
    if batch.is_empty() {
        return Err(SimError::empty("grad_batch_ce needs a nonempty batch"));
    }
    params.check_dims(dims)?;
    let mut grad = vec![0.0; dims.param_len()];
    let mut loss_sum = 0.0;
    for &(x, label) in batch {
        loss_sum += accumulate_ce_grad(params, dims, x, label, &mut grad)?;
    }
    let inv_n = 1.0 / batch.len() as f64;
    for g in &mut grad {
        *g *= inv_n;
    }
    Ok((loss_sum * inv_n, ParameterVector::from_values(grad)))
}

/// One SGD step with momentum and weight decay:
/// `g <- grad + wd * params; buf <- momentum * buf + g; params <- params - lr * buf`.
pub fn sgd_step(
    params: &ParameterVector,
    grad: &ParameterVector,
    state: &OptimizerState,
) -> Result<(ParameterVector, OptimizerState)> {
    if params.len() != grad.len() || params.len() != state.momentum_buffer.len() {
        return Err(SimError::mismatch(format!(
            "sgd_step lengths differ: params {}, grad {}, buffer {}",
            params.len(),
            grad.len(),
            state.momentum_buffer.len()
        )));
    }
    let cfg = state.config;
    let mut new_params = params.values().to_vec();
    let mut new_buf = state.momentum_buffer.clone();
    for i in 0..new_params.len() {
        let g = grad.values()[i] + cfg.weight_decay * new_params[i];
        new_buf[i] = cfg.momentum * new_buf[i] + g;
        new_params[i] -= cfg.learning_rate * new_buf[i];
    }
    Ok((
        ParameterVector::from_values(new_params),
        OptimizerState {
            config: cfg,
            momentum_buffer: new_buf,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(d: usize, h: usize, c: usize) -> ModelDims {
        ModelDims::new(d, h, c).unwrap()
    }

    /// Central finite differences over an arbitrary scalar function of the
    /// parameter vector; the numerical oracle for every gradient test.
    fn central_diff<F: Fn(&ParameterVector) -> f64>(
        f: F,
        at: &ParameterVector,
        eps: f64,
    ) -> Vec<f64> {
        let mut out = Vec::with_capacity(at.len());
        for i in 0..at.len() {
            let mut plus = at.clone();
            plus.values_mut()[i] += eps;
            let mut minus = at.clone();
            minus.values_mut()[i] -= eps;
            out.push((f(&plus) - f(&minus)) / (2.0 * eps));
        }
        out
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn init_is_deterministic() {
        let d = dims(2, 2, 2);
        assert_eq!(init_model(&d, 7), init_model(&d, 7));
        assert_ne!(init_model(&d, 7), init_model(&d, 8));
    }

    #[test]
    fn init_biases_are_zero_and_weights_bounded() {
        let d = dims(3, 4, 2);
        let p = init_model(&d, 1);
        assert_eq!(p.len(), 3 * 4 + 4 + 2 * 4 + 2);
        let v = p.values();
        let w1_bound = 1.0 / 3.0f64.sqrt();
        let w2_bound = 1.0 / 4.0f64.sqrt();
        assert!(v[..12].iter().all(|w| w.abs() <= w1_bound));
        assert!(v[12..16].iter().all(|&b| b == 0.0));
        assert!(v[16..24].iter().all(|w| w.abs() <= w2_bound));
        assert!(v[24..].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn forward_zero_params_gives_zeros() {
        let d = dims(3, 2, 4);
        let p = ParameterVector::zeros(d.param_len());
        let fr = forward(&p, &d, &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(fr.features, vec![0.0, 0.0]);
        assert_eq!(fr.logits, vec![0.0; 4]);
    }

    #[test]
    fn forward_hand_case_relu_clips() {
        // d=1, h=1, C=2: W1=[2], b1=[-1].
        let d = dims(1, 1, 2);
        let mut p = ParameterVector::zeros(d.param_len());
        p.values_mut()[0] = 2.0;
        p.values_mut()[1] = -1.0;
        assert_eq!(forward(&p, &d, &[1.0]).unwrap().features, vec![1.0]);
        assert_eq!(forward(&p, &d, &[0.0]).unwrap().features, vec![0.0]);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn forward_matches_naive_matmul_oracle() {
        let d = dims(5, 3, 4);
        let p = init_model(&d, 42);
        let mut rng = crate::rng::Rng::new(9);
        let x: Vec<f64> = (0..5).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let fr = forward(&p, &d, &x).unwrap();

        // Independent naive recomputation from the flat layout.
        let v = p.values();
        let mut feats = [0.0; 3];
        for i in 0..3 {
            let mut z = v[15 + i];
            for j in 0..5 {
                z += v[i * 5 + j] * x[j];
            }
            feats[i] = z.max(0.0);
        }
        let mut logits = [0.0; 4];
        for k in 0..4 {
            let mut z = v[18 + 12 + k];
            for i in 0..3 {
                z += v[18 + k * 3 + i] * feats[i];
            }
            logits[k] = z;
        }
        for i in 0..3 {
            assert!((fr.features[i] - feats[i]).abs() < 1e-12);
        }
        for k in 0..4 {
            assert!((fr.logits[k] - logits[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_wrong_input_length() {
        let d = dims(3, 2, 2);
        let p = ParameterVector::zeros(d.param_len());
        assert!(forward(&p, &d, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn forward_features_nonnegative() {
        let d = dims(6, 5, 3);
        let mut rng = crate::rng::Rng::new(31);
        for seed in 0..20 {
            let p = init_model(&d, seed);
            let x: Vec<f64> = (0..6).map(|_| rng.uniform(-3.0, 3.0)).collect();
            let fr = forward(&p, &d, &x).unwrap();
            assert!(fr.features.iter().all(|&f| f >= 0.0));
        }
    }

    #[test]
    fn softmax_ce_uniform_logits() {
        let loss = softmax_ce(&[0.3, 0.3, 0.3, 0.3], 1).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_extreme_logits_stable() {
        let loss = softmax_ce(&[1000.0, 0.0], 0).unwrap();
        assert!(loss.is_finite());
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_closed_form() {
        let loss = softmax_ce(&[1.0, 2.0, 3.0], 2).unwrap();
        let expected = -((3.0f64.exp()) / (1.0f64.exp() + 2.0f64.exp() + 3.0f64.exp())).ln();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_rejects_out_of_range_label() {
        assert!(softmax_ce(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn softmax_ce_nonnegative_and_ln_c_iff_constant() {
        let mut rng = crate::rng::Rng::new(77);
        for _ in 0..200 {
            let logits: Vec<f64> = (0..4).map(|_| rng.uniform(-5.0, 5.0)).collect();
            let loss = softmax_ce(&logits, rng.index(4)).unwrap();
            assert!(loss >= 0.0);
        }
        assert!((softmax_ce(&[2.0, 2.0, 2.0], 0).unwrap() - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn grad_zero_params_two_classes() {
        let d = dims(2, 2, 2);
        let p = ParameterVector::zeros(d.param_len());
        let x = [1.0, 1.0];
        let (_, g) = grad_batch_ce(&p, &d, &[(&x, 0)]).unwrap();
        // b2 gradient = softmax - onehot = [-0.5, 0.5]; everything upstream is
        // zero because the features are zero.
        let b2 = &g.values()[d.w2_end()..];
        assert!((b2[0] + 0.5).abs() < 1e-15);
        assert!((b2[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn grad_matches_finite_differences() {
        let d = dims(5, 4, 3);
        let mut rng = crate::rng::Rng::new(1234);
        for trial in 0..100 {
            // Resample until no preactivation sits on the ReLU kink.
            let (p, x, label) = loop {
                let p = init_model(&d, 1000 + trial * 17 + rng.index(1000) as u64);
                let x: Vec<f64> = (0..5).map(|_| rng.uniform(-2.0, 2.0)).collect();
                let label = rng.index(3);
                let v = p.values();
                let kink = (0..4).any(|i| {
                    let mut z = v[20 + i];
                    for j in 0..5 {
                        z += v[i * 5 + j] * x[j];
                    }
                    z.abs() < 1e-6
                });
                if !kink {
                    break (p, x, label);
                }
            };
            let (_, g) = grad_batch_ce(&p, &d, &[(&x, label)]).unwrap();
            let numeric = central_diff(
                |q| {
                    let fr = forward(q, &d, &x).unwrap();
                    softmax_ce(&fr.logits, label).unwrap()
                },
                &p,
                1e-5,
            );
            let max_err = g
                .values()
                .iter()
                .zip(&numeric)
                .map(|(&a, &n)| rel_err(a, n))
                .fold(0.0, f64::max);
            assert!(max_err <= 1e-4, "trial {trial}: max rel err {max_err}");
        }
    }

    #[test]
    fn grad_mean_is_invariant_under_duplication() {
        let d = dims(3, 2, 2);
        let p = init_model(&d, 5);
        let x = [0.3, -0.7, 1.1];
        let single = grad_batch_ce(&p, &d, &[(&x, 1)]).unwrap();
        let doubled = grad_batch_ce(&p, &d, &[(&x, 1), (&x, 1)]).unwrap();
        assert_eq!(single.0, doubled.0);
        assert_eq!(single.1, doubled.1);
    }

    #[test]
    fn grad_rejects_empty_batch() {
        let d = dims(2, 2, 2);
        let p = ParameterVector::zeros(d.param_len());
        assert!(grad_batch_ce(&p, &d, &[]).is_err());
    }

    #[test]
    fn sgd_plain_step() {
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let params = ParameterVector::zeros(3);
        let grad = ParameterVector::from_values(vec![1.0, -2.0, 0.5]);
        let state = OptimizerState::new(cfg, 3).unwrap();
        let (p2, _) = sgd_step(&params, &grad, &state).unwrap();
        assert_eq!(p2.values(), &[-0.1, 0.2, -0.05]);
    }

    #[test]
    fn sgd_zero_grad_is_fixed_point() {
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let params = ParameterVector::from_values(vec![1.0, 2.0]);
        let state = OptimizerState::new(cfg, 2).unwrap();
        let (p2, _) = sgd_step(&params, &ParameterVector::zeros(2), &state).unwrap();
        assert_eq!(p2, params);
    }

    #[test]
    fn sgd_zero_learning_rate_is_identity() {
        let cfg = SgdConfig {
            learning_rate: 0.0,
            momentum: 0.9,
            weight_decay: 0.01,
        };
        let params = ParameterVector::from_values(vec![0.5, -0.5]);
        let grad = ParameterVector::from_values(vec![3.0, 4.0]);
        let state = OptimizerState::new(cfg, 2).unwrap();
        let (p2, _) = sgd_step(&params, &grad, &state).unwrap();
        assert_eq!(p2, params);
    }

    #[test]
    fn sgd_momentum_matches_hand_unrolled_recurrence() {
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.05,
        };
        let p0 = ParameterVector::from_values(vec![1.0, -1.0]);
        let g1 = ParameterVector::from_values(vec![0.5, 0.25]);
        let g2 = ParameterVector::from_values(vec![-0.2, 0.4]);
        let state = OptimizerState::new(cfg, 2).unwrap();
        let (p1, state) = sgd_step(&p0, &g1, &state).unwrap();
        let (p2, _) = sgd_step(&p1, &g2, &state).unwrap();

        // Hand unroll.
        for i in 0..2 {
            let e1 = g1.values()[i] + 0.05 * p0.values()[i];
            let b1 = e1;
            let q1 = p0.values()[i] - 0.1 * b1;
            let e2 = g2.values()[i] + 0.05 * q1;
            let b2 = 0.9 * b1 + e2;
            let q2 = q1 - 0.1 * b2;
            assert!((p1.values()[i] - q1).abs() < 1e-12);
            assert!((p2.values()[i] - q2).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_rejects_length_mismatch() {
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let state = OptimizerState::new(cfg, 2).unwrap();
        let r = sgd_step(
            &ParameterVector::zeros(3),
            &ParameterVector::zeros(2),
            &state,
        );
        assert!(r.is_err());
    }
}

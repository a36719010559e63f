//! Malicious local objective: paired cross-entropy, margin-based feature
//! separation, parameter regularization toward the global model, and
//! optional importance-based gradient masking. Every term comes with its
//! exact analytic gradient.

use crate::data::{PairedSample, Sample};
use crate::error::{Result, SimError};
use crate::model::{accumulate_ce_grad, forward, softmax_ce, ModelDims, ParameterVector};

/// Attack hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaliciousHyper {
    /// Weight of the feature-separation term.
    pub lambda_sep: f64,
    /// Weight of the pull toward the global parameters.
    pub lambda_reg: f64,
    /// Margin for the feature-separation hinge.
    pub margin_delta: f64,
    /// Backdoor target class.
    pub target_label: usize,
    /// Fraction of coordinates (largest clean-gradient magnitude) whose
    /// updates are zeroed. 0 disables masking.
    pub mask_fraction: f64,
}

impl MaliciousHyper {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !self.lambda_sep.is_finite() || self.lambda_sep < 0.0 {
            return Err(SimError::invalid("lambda_sep must be finite and >= 0"));
        }
        if !self.lambda_reg.is_finite() || self.lambda_reg < 0.0 {
            return Err(SimError::invalid("lambda_reg must be finite and >= 0"));
        }
        if self.margin_delta.is_nan() || self.margin_delta <= 0.0 || !self.margin_delta.is_finite() {
            return Err(SimError::invalid("margin_delta must be finite and > 0"));
        }
        if self.target_label >= num_classes {
            return Err(SimError::invalid(format!(
                "target_label {} out of range for {} classes",
                self.target_label, num_classes
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_fraction) {
            return Err(SimError::invalid("mask_fraction must be in [0, 1]"));
        }
        Ok(())
    }
}

/// Per-component contributions to the malicious loss. `sep` and `reg` are
/// already scaled by their lambdas, so the total loss is exactly the sum of
/// the fields.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MaliciousTerms {
    pub ce_pair: f64,
    pub ce_clean: f64,
    pub ce_trig: f64,
    pub sep: f64,
    pub reg: f64,
}

impl MaliciousTerms {
    pub fn total(&self) -> f64 {
        self.ce_pair + self.ce_clean + self.ce_trig + self.sep + self.reg
    }
}

/// Paired cross-entropy for one clean/triggered pair:
/// `(CE(f(x_c), y) + CE(f(x_t), y_t)) / 2`.
pub fn pair_ce(
    params: &ParameterVector,
    dims: &ModelDims,
    pair: &PairedSample,
    target_label: usize,
) -> Result<f64> {
    if pair.clean_label >= dims.num_classes || target_label >= dims.num_classes {
        return Err(SimError::invalid("pair label out of range"));
    }
    let clean = forward(params, dims, &pair.x_clean)?;
    let trig = forward(params, dims, &pair.x_trig)?;
    let ce_clean = softmax_ce(&clean.logits, pair.clean_label)?;
    let ce_trig = softmax_ce(&trig.logits, target_label)?;
    Ok(0.5 * (ce_clean + ce_trig))
}

/// Margin hinge on the squared distance between the penultimate features of
/// the clean and triggered views: `max(0, delta - ||phi_c - phi_t||^2)`.
pub fn sep_loss(
    params: &ParameterVector,
    dims: &ModelDims,
    pair: &PairedSample,
    margin_delta: f64,
) -> Result<f64> {
    if margin_delta.is_nan() || margin_delta <= 0.0 {
        return Err(SimError::invalid("margin_delta must be > 0"));
    }
    let clean = forward(params, dims, &pair.x_clean)?;
    let trig = forward(params, dims, &pair.x_trig)?;
    let sq_dist: f64 = clean
        .features
        .iter()
        .zip(&trig.features)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((margin_delta - sq_dist).max(0.0))
}

/// Mean squared deviation of the local parameters from the global ones,
/// normalized by the total scalar parameter count.
pub fn reg_loss(params: &ParameterVector, global: &ParameterVector) -> Result<f64> {
    if params.len() != global.len() {
        return Err(SimError::mismatch(format!(
            "reg_loss lengths differ: {} vs {}",
            params.len(),
            global.len()
        )));
    }
    if params.is_empty() {
        return Err(SimError::empty("reg_loss over zero parameters"));
    }
    let sum: f64 = params
        .values()
        .iter()
        .zip(global.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / params.len() as f64)
}

/// Accumulates the gradient of the separation hinge for one pair into `grad`,
/// scaled by `coef`, and returns the hinge value. Inactive pairs (squared
/// feature distance >= delta, boundary included) contribute nothing.
fn accumulate_sep_grad(
    params: &ParameterVector,
    dims: &ModelDims,
    pair: &PairedSample,
    margin_delta: f64,
    coef: f64,
    grad: &mut [f64],
) -> Result<f64> {
    let clean = forward(params, dims, &pair.x_clean)?;
    let trig = forward(params, dims, &pair.x_trig)?;
    let sq_dist: f64 = clean
        .features
        .iter()
        .zip(&trig.features)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let value = (margin_delta - sq_dist).max(0.0);
    if value <= 0.0 {
        return Ok(value);
    }
    let (d, h) = (dims.input_dim, dims.hidden_dim);
    // d(hinge)/d(phi_c[i]) = -2 (phi_c[i] - phi_t[i]); opposite sign for phi_t.
    // Only W1 and b1 receive gradient; the ReLU gate is open iff the feature
    // is strictly positive.
    let (gw1, rest) = grad.split_at_mut(h * d);
    let (gb1, _) = rest.split_at_mut(h);
    for i in 0..h {
        let diff = clean.features[i] - trig.features[i];
        if clean.features[i] > 0.0 {
            let dz = coef * -2.0 * diff;
            gb1[i] += dz;
            for (g, xj) in gw1[i * d..(i + 1) * d].iter_mut().zip(&pair.x_clean) {
                *g += dz * xj;
            }
        }
        if trig.features[i] > 0.0 {
            let dz = coef * 2.0 * diff;
            gb1[i] += dz;
            for (g, xj) in gw1[i * d..(i + 1) * d].iter_mut().zip(&pair.x_trig) {
                *g += dz * xj;
            }
        }
    }
    Ok(value)
}

/// Full malicious objective for one mini-batch, split by provenance:
///
/// * paired CE, mean over both views of each pair (when pairs are present);
/// * clean-only and trigger-only CE, each a mean over its own subset;
/// * `lambda_sep` times the mean separation hinge (only when pairs are
///   present);
/// * `lambda_reg` times the deviation from the global parameters.
///
/// Returns the loss, its exact gradient, and the per-component terms, whose
/// sum reproduces the loss exactly.
pub fn malicious_loss_and_grad(
    params: &ParameterVector,
    dims: &ModelDims,
    batch_pair: &[&PairedSample],
    batch_clean: &[&Sample],
    batch_trig: &[&Sample],
    global: &ParameterVector,
    hyper: &MaliciousHyper,
) -> Result<(f64, ParameterVector, MaliciousTerms)> {
    if batch_pair.is_empty() && batch_clean.is_empty() && batch_trig.is_empty() {
        return Err(SimError::empty("malicious loss needs at least one batch"));
    }
    hyper.validate(dims.num_classes)?;
    if params.len() != global.len() {
        return Err(SimError::mismatch(
            "local and global parameter lengths differ",
        ));
    }

    let mut grad = vec![0.0; dims.param_len()];
    let mut terms = MaliciousTerms::default();

    if !batch_pair.is_empty() {
        let mut acc = vec![0.0; dims.param_len()];
        let mut loss_sum = 0.0;
        for pair in batch_pair {
            loss_sum += accumulate_ce_grad(params, dims, &pair.x_clean, pair.clean_label, &mut acc)?;
            loss_sum +=
                accumulate_ce_grad(params, dims, &pair.x_trig, hyper.target_label, &mut acc)?;
        }
        let coef = 1.0 / (2.0 * batch_pair.len() as f64);
        terms.ce_pair = loss_sum * coef;
        for (g, a) in grad.iter_mut().zip(&acc) {
            *g += coef * a;
        }
    }

    if !batch_clean.is_empty() {
        let mut acc = vec![0.0; dims.param_len()];
        let mut loss_sum = 0.0;
        for s in batch_clean {
            loss_sum += accumulate_ce_grad(params, dims, &s.x, s.label, &mut acc)?;
        }
        let coef = 1.0 / batch_clean.len() as f64;
        terms.ce_clean = loss_sum * coef;
        for (g, a) in grad.iter_mut().zip(&acc) {
            *g += coef * a;
        }
    }

    if !batch_trig.is_empty() {
        let mut acc = vec![0.0; dims.param_len()];
        let mut loss_sum = 0.0;
        for s in batch_trig {
            loss_sum += accumulate_ce_grad(params, dims, &s.x, s.label, &mut acc)?;
        }
        let coef = 1.0 / batch_trig.len() as f64;
        terms.ce_trig = loss_sum * coef;
        for (g, a) in grad.iter_mut().zip(&acc) {
            *g += coef * a;
        }
    }

    if hyper.lambda_sep > 0.0 && !batch_pair.is_empty() {
        let coef = hyper.lambda_sep / batch_pair.len() as f64;
        let mut sep_sum = 0.0;
        for pair in batch_pair {
            sep_sum += accumulate_sep_grad(params, dims, pair, hyper.margin_delta, coef, &mut grad)?;
        }
        terms.sep = hyper.lambda_sep * sep_sum / batch_pair.len() as f64;
    }

    if hyper.lambda_reg > 0.0 {
        terms.reg = hyper.lambda_reg * reg_loss(params, global)?;
        let coef = hyper.lambda_reg * 2.0 / params.len() as f64;
        for ((g, p), q) in grad.iter_mut().zip(params.values()).zip(global.values()) {
            *g += coef * (p - q);
        }
    }

    Ok((terms.total(), ParameterVector::from_values(grad), terms))
}

/// Builds a binary mask that zeroes the `ceil(mask_fraction * len)`
/// coordinates with the largest clean-gradient magnitude (ties broken toward
/// the lower index). `false` marks an attenuated coordinate.
pub fn importance_mask(clean_grad: &ParameterVector, mask_fraction: f64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&mask_fraction) {
        return Err(SimError::invalid("mask_fraction must be in [0, 1]"));
    }
    let len = clean_grad.len();
    let k = ((mask_fraction * len as f64).ceil() as usize).min(len);
    let mut mask = vec![true; len];
    if k == 0 {
        return Ok(mask);
    }
    let mut order: Vec<usize> = (0..len).collect();
    let g = clean_grad.values();
    order.sort_by(|&a, &b| {
        g[b].abs()
            .partial_cmp(&g[a].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    for &idx in order.iter().take(k) {
        mask[idx] = false;
    }
    Ok(mask)
}

/// Elementwise product of a gradient with a binary mask.
pub fn apply_mask(grad: &ParameterVector, mask: &[bool]) -> Result<ParameterVector> {
    if grad.len() != mask.len() {
        return Err(SimError::mismatch(format!(
            "mask length {} differs from gradient length {}",
            mask.len(),
            grad.len()
        )));
    }
    Ok(ParameterVector::from_values(
        grad.values()
            .iter()
            .zip(mask)
            .map(|(&g, &m)| if m { g } else { 0.0 })
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{grad_batch_ce, init_model};
    use crate::rng::Rng;

    fn dims(d: usize, h: usize, c: usize) -> ModelDims {
        ModelDims::new(d, h, c).unwrap()
    }

    fn hyper(lambda_sep: f64, lambda_reg: f64, delta: f64, target: usize) -> MaliciousHyper {
        MaliciousHyper {
            lambda_sep,
            lambda_reg,
            margin_delta: delta,
            target_label: target,
            mask_fraction: 0.0,
        }
    }

    fn random_pair(rng: &mut Rng, d: usize, c: usize, target: usize) -> PairedSample {
        PairedSample {
            base_id: rng.next_u64(),
            x_clean: (0..d).map(|_| rng.uniform(-2.0, 2.0)).collect(),
            clean_label: rng.index(c),
            x_trig: (0..d).map(|_| rng.uniform(-2.0, 2.0)).collect(),
            trig_label: target,
        }
    }

    fn random_sample(rng: &mut Rng, d: usize, label: usize) -> Sample {
        Sample {
            base_id: rng.next_u64(),
            x: (0..d).map(|_| rng.uniform(-2.0, 2.0)).collect(),
            label,
            is_triggered: false,
        }
    }

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
    fn pair_ce_coincides_when_views_match() {
        let d = dims(3, 4, 4);
        let p = init_model(&d, 1);
        let mut rng = Rng::new(2);
        let mut pair = random_pair(&mut rng, 3, 4, 2);
        pair.x_trig = pair.x_clean.clone();
        pair.clean_label = 2;
        let loss = pair_ce(&p, &d, &pair, 2).unwrap();
        let fr = forward(&p, &d, &pair.x_clean).unwrap();
        let ce = softmax_ce(&fr.logits, 2).unwrap();
        assert_eq!(loss, ce);
    }

    #[test]
    fn pair_ce_zero_params_is_ln_c() {
        let d = dims(3, 2, 4);
        let p = ParameterVector::zeros(d.param_len());
        let mut rng = Rng::new(3);
        let pair = random_pair(&mut rng, 3, 4, 1);
        let loss = pair_ce(&p, &d, &pair, 1).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn pair_ce_composes_primitives() {
        let d = dims(4, 3, 3);
        let p = init_model(&d, 5);
        let mut rng = Rng::new(6);
        let pair = random_pair(&mut rng, 4, 3, 0);
        let loss = pair_ce(&p, &d, &pair, 0).unwrap();
        let ce_c = softmax_ce(
            &forward(&p, &d, &pair.x_clean).unwrap().logits,
            pair.clean_label,
        )
        .unwrap();
        let ce_t = softmax_ce(&forward(&p, &d, &pair.x_trig).unwrap().logits, 0).unwrap();
        assert!((loss - 0.5 * (ce_c + ce_t)).abs() < 1e-15);
    }

    #[test]
    fn pair_ce_rejects_bad_label() {
        let d = dims(2, 2, 2);
        let p = ParameterVector::zeros(d.param_len());
        let mut rng = Rng::new(7);
        let pair = random_pair(&mut rng, 2, 2, 0);
        assert!(pair_ce(&p, &d, &pair, 5).is_err());
    }

    #[test]
    fn sep_loss_equal_views_saturates_at_delta() {
        let d = dims(3, 3, 2);
        let p = init_model(&d, 8);
        let mut rng = Rng::new(9);
        let mut pair = random_pair(&mut rng, 3, 2, 1);
        pair.x_trig = pair.x_clean.clone();
        assert_eq!(sep_loss(&p, &d, &pair, 1.5).unwrap(), 1.5);
    }

    #[test]
    fn sep_loss_with_identity_first_layer() {
        // W1 = I, b1 = 0 makes features = ReLU(x), so the feature distance is
        // under direct control.
        let d = dims(2, 2, 2);
        let mut p = ParameterVector::zeros(d.param_len());
        p.values_mut()[0] = 1.0; // W1[0,0]
        p.values_mut()[3] = 1.0; // W1[1,1]
        let pair = PairedSample {
            base_id: 0,
            x_clean: vec![1.0, 2.0],
            clean_label: 0,
            x_trig: vec![3.0, 3.0], // squared feature distance = 4 + 1 = 5
            trig_label: 1,
        };
        assert_eq!(sep_loss(&p, &d, &pair, 1.0).unwrap(), 0.0);

        let pair_close = PairedSample {
            x_trig: vec![1.0 + 0.5f64.sqrt(), 2.0], // squared distance 0.5
            ..pair
        };
        let loss = sep_loss(&p, &d, &pair_close, 2.0).unwrap();
        assert!((loss - 1.5).abs() < 1e-12);
    }

    #[test]
    fn sep_loss_stays_within_range() {
        let d = dims(4, 3, 2);
        let mut rng = Rng::new(11);
        for seed in 0..50 {
            let p = init_model(&d, seed);
            let pair = random_pair(&mut rng, 4, 2, 1);
            let delta = rng.uniform(0.1, 3.0);
            let loss = sep_loss(&p, &d, &pair, delta).unwrap();
            assert!((0.0..=delta).contains(&loss));
        }
    }

    #[test]
    fn reg_loss_basics() {
        let a = ParameterVector::from_values(vec![1.0, 2.0, 3.0]);
        assert_eq!(reg_loss(&a, &a).unwrap(), 0.0);

        let b = ParameterVector::from_values(vec![2.0, 3.0, 4.0]);
        assert_eq!(reg_loss(&b, &a).unwrap(), 1.0);

        let c = ParameterVector::from_values(vec![0.0, 0.0]);
        assert!(reg_loss(&a, &c).is_err());
    }

    #[test]
    fn reg_loss_matches_naive_elementwise_oracle() {
        let mut rng = Rng::new(13);
        let a = ParameterVector::from_values((0..40).map(|_| rng.uniform(-2.0, 2.0)).collect());
        let b = ParameterVector::from_values((0..40).map(|_| rng.uniform(-2.0, 2.0)).collect());
        let mut acc = 0.0;
        for i in 0..40 {
            let diff = a.values()[i] - b.values()[i];
            acc += diff * diff;
        }
        assert!((reg_loss(&a, &b).unwrap() - acc / 40.0).abs() < 1e-15);
    }

    #[test]
    fn reg_loss_invariant_under_joint_permutation() {
        let mut rng = Rng::new(14);
        let a: Vec<f64> = (0..20).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..20).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut idx: Vec<usize> = (0..20).collect();
        rng.shuffle(&mut idx);
        let ap: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
        let bp: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
        let r1 = reg_loss(
            &ParameterVector::from_values(a),
            &ParameterVector::from_values(b),
        )
        .unwrap();
        let r2 = reg_loss(
            &ParameterVector::from_values(ap),
            &ParameterVector::from_values(bp),
        )
        .unwrap();
        assert!((r1 - r2).abs() < 1e-12);
    }

    #[test]
    fn malicious_loss_reduces_to_plain_ce() {
        let d = dims(4, 3, 3);
        let p = init_model(&d, 15);
        let global = init_model(&d, 16);
        let mut rng = Rng::new(17);
        let samples: Vec<Sample> = (0..5)
            .map(|_| {
                let label = rng.index(3);
                random_sample(&mut rng, 4, label)
            })
            .collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let h = hyper(0.0, 0.0, 1.0, 0);
        let (loss, grad, terms) =
            malicious_loss_and_grad(&p, &d, &[], &refs, &[], &global, &h).unwrap();

        let tuples: Vec<(&[f64], usize)> = samples.iter().map(|s| (s.x.as_slice(), s.label)).collect();
        let (ce, ce_grad) = grad_batch_ce(&p, &d, &tuples).unwrap();
        assert_eq!(loss, ce);
        assert_eq!(grad, ce_grad);
        assert_eq!(terms.ce_clean, ce);
        assert_eq!(terms.sep, 0.0);
        assert_eq!(terms.reg, 0.0);
    }

    #[test]
    fn malicious_loss_saturated_pair_case() {
        // x_c = x_t and y = y_t: CE terms coincide and the hinge saturates,
        // so loss = CE + delta.
        let d = dims(3, 4, 4);
        let p = init_model(&d, 18);
        let mut rng = Rng::new(19);
        let mut pair = random_pair(&mut rng, 3, 4, 1);
        pair.x_trig = pair.x_clean.clone();
        pair.clean_label = 1;
        let h = hyper(1.0, 0.0, 0.7, 1);
        let (loss, _, terms) =
            malicious_loss_and_grad(&p, &d, &[&pair], &[], &[], &p, &h).unwrap();
        let ce = softmax_ce(&forward(&p, &d, &pair.x_clean).unwrap().logits, 1).unwrap();
        assert!((loss - (ce + 0.7)).abs() < 1e-12);
        assert!((terms.sep - 0.7).abs() < 1e-15);
    }

    #[test]
    fn malicious_loss_rejects_all_empty() {
        let d = dims(2, 2, 2);
        let p = ParameterVector::zeros(d.param_len());
        let h = hyper(1.0, 1.0, 1.0, 0);
        assert!(malicious_loss_and_grad(&p, &d, &[], &[], &[], &p, &h).is_err());
    }

    #[test]
    fn malicious_terms_sum_to_loss_exactly() {
        let d = dims(5, 4, 3);
        let mut rng = Rng::new(20);
        for seed in 0..20 {
            let p = init_model(&d, 100 + seed);
            let global = init_model(&d, 200 + seed);
            let pairs: Vec<PairedSample> =
                (0..3).map(|_| random_pair(&mut rng, 5, 3, 0)).collect();
            let cleans: Vec<Sample> = (0..2)
                .map(|_| {
                    let label = rng.index(3);
                    random_sample(&mut rng, 5, label)
                })
                .collect();
            let trigs: Vec<Sample> = (0..2)
                .map(|_| {
                    let mut s = random_sample(&mut rng, 5, 0);
                    s.is_triggered = true;
                    s
                })
                .collect();
            let h = hyper(rng.uniform(0.1, 2.0), rng.uniform(0.1, 2.0), 1.0, 0);
            let (loss, _, terms) = malicious_loss_and_grad(
                &p,
                &d,
                &pairs.iter().collect::<Vec<_>>(),
                &cleans.iter().collect::<Vec<_>>(),
                &trigs.iter().collect::<Vec<_>>(),
                &global,
                &h,
            )
            .unwrap();
            assert!((loss - terms.total()).abs() < 1e-12);
        }
    }

    #[test]
    fn malicious_grad_matches_finite_differences() {
        let d = dims(5, 4, 3);
        let mut rng = Rng::new(21);
        for trial in 0..10 {
            let global = init_model(&d, 300 + trial);
            // Resample until no preactivation or hinge boundary is too close
            // to a kink.
            let (p, pairs, cleans, trigs, h) = loop {
                let p = init_model(&d, 400 + trial * 31 + rng.index(1000) as u64);
                let pairs: Vec<PairedSample> =
                    (0..2).map(|_| random_pair(&mut rng, 5, 3, 1)).collect();
                let cleans: Vec<Sample> = (0..2)
                    .map(|_| {
                        let label = rng.index(3);
                        random_sample(&mut rng, 5, label)
                    })
                    .collect();
                let trigs: Vec<Sample> = (0..2)
                    .map(|_| random_sample(&mut rng, 5, 1))
                    .collect();
                let h = hyper(0.8, 0.6, 1.2, 1);

                let mut ok = true;
                let inputs: Vec<&[f64]> = pairs
                    .iter()
                    .flat_map(|q| [q.x_clean.as_slice(), q.x_trig.as_slice()])
                    .chain(cleans.iter().map(|s| s.x.as_slice()))
                    .chain(trigs.iter().map(|s| s.x.as_slice()))
                    .collect();
                for x in inputs {
                    let v = p.values();
                    for i in 0..4 {
                        let mut z = v[20 + i];
                        for j in 0..5 {
                            z += v[i * 5 + j] * x[j];
                        }
                        if z.abs() < 1e-4 {
                            ok = false;
                        }
                    }
                }
                for q in &pairs {
                    let fc = forward(&p, &d, &q.x_clean).unwrap().features;
                    let ft = forward(&p, &d, &q.x_trig).unwrap().features;
                    let sq: f64 = fc.iter().zip(&ft).map(|(a, b)| (a - b) * (a - b)).sum();
                    if (sq - h.margin_delta).abs() < 1e-4 {
                        ok = false;
                    }
                }
                if ok {
                    break (p, pairs, cleans, trigs, h);
                }
            };

            let pair_refs: Vec<&PairedSample> = pairs.iter().collect();
            let clean_refs: Vec<&Sample> = cleans.iter().collect();
            let trig_refs: Vec<&Sample> = trigs.iter().collect();
            let (_, grad, _) = malicious_loss_and_grad(
                &p, &d, &pair_refs, &clean_refs, &trig_refs, &global, &h,
            )
            .unwrap();

            let numeric = central_diff(
                |q| {
                    malicious_loss_and_grad(
                        q, &d, &pair_refs, &clean_refs, &trig_refs, &global, &h,
                    )
                    .unwrap()
                    .0
                },
                &p,
                1e-5,
            );
            let max_err = grad
                .values()
                .iter()
                .zip(&numeric)
                .map(|(&a, &n)| rel_err(a, n))
                .fold(0.0, f64::max);
            assert!(max_err <= 1e-4, "trial {trial}: max rel err {max_err}");
        }
    }

    #[test]
    fn importance_mask_extremes() {
        let g = ParameterVector::from_values(vec![1.0, -2.0, 3.0]);
        assert_eq!(importance_mask(&g, 0.0).unwrap(), vec![true; 3]);
        assert_eq!(importance_mask(&g, 1.0).unwrap(), vec![false; 3]);
    }

    #[test]
    fn importance_mask_picks_largest_magnitudes() {
        let g = ParameterVector::from_values(vec![3.0, -5.0, 1.0, 2.0]);
        let mask = importance_mask(&g, 0.5).unwrap();
        assert_eq!(mask, vec![false, false, true, true]);
    }

    #[test]
    fn importance_mask_breaks_ties_toward_lower_index() {
        let g = ParameterVector::from_values(vec![2.0, -2.0, 2.0, 1.0]);
        let mask = importance_mask(&g, 0.5).unwrap();
        assert_eq!(mask, vec![false, false, true, true]);
    }

    #[test]
    fn apply_mask_basics() {
        let g = ParameterVector::from_values(vec![1.0, -2.0, 3.0]);
        assert_eq!(apply_mask(&g, &[true, true, true]).unwrap(), g);
        assert_eq!(
            apply_mask(&g, &[false, false, false]).unwrap(),
            ParameterVector::zeros(3)
        );
        let mixed = apply_mask(&g, &[true, false, true]).unwrap();
        assert_eq!(mixed.values(), &[1.0, 0.0, 3.0]);
        assert!(apply_mask(&g, &[true]).is_err());
    }
}

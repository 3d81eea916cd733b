//! Scalar loss terms and their analytic gradients: cross-entropy, tempered
//! knowledge distillation, the composite stage losses of the NFL procedure,
//! the corrected NFL+ variant, and the autoencoder / drift / bias
//! regularizers.
//!
//! All functions are pure. Distillation takes pre-softmax logits on both
//! sides; probabilities and tempering are applied internally. Mean-square
//! norms average over all tensor entries so the weight hyperparameters stay
//! scale-free across batch sizes.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("probability vector has a negative component")]
    NegativeProbability,
    #[error("probability vector sums to {0}, not 1")]
    NotNormalized(f64),
    #[error("hyperparameter out of range: {0}")]
    BadHyperparam(String),
}

/// Weights of the composite losses. Defaults are the desk-scale settings;
/// every field is overridable from the run config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    /// New-task cross-entropy weight in the shared-retraining stage.
    pub lambda: f64,
    /// New-task cross-entropy weight in the fine-tuning stage.
    pub omega: f64,
    /// Mix between recorded and recomputed soft targets in the final stage.
    pub alpha: f64,
    /// New-task cross-entropy weight in the final stage.
    pub beta: f64,
    /// Distillation temperature; must be > 1.
    pub temperature: f64,
    /// Reconstruction weight in the autoencoder objective.
    pub recon_weight: f64,
    /// Mix between corrected and recomputed soft targets in the corrected final stage.
    pub eta: f64,
    /// New-task cross-entropy weight in the corrected final stage.
    pub phi: f64,
    /// Encoder-drift regularizer weight.
    pub rho: f64,
    /// Bias-to-identity regularizer weight.
    pub tau: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            lambda: 1.0,
            omega: 1.0,
            alpha: 0.5,
            beta: 1.0,
            temperature: 2.0,
            recon_weight: 1.0,
            eta: 0.5,
            phi: 1.0,
            rho: 0.1,
            tau: 0.1,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), LossError> {
        let nonneg = [
            ("lambda", self.lambda),
            ("omega", self.omega),
            ("beta", self.beta),
            ("recon_weight", self.recon_weight),
            ("phi", self.phi),
            ("rho", self.rho),
            ("tau", self.tau),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(LossError::BadHyperparam(format!("{name} = {v}")));
            }
        }
        for (name, v) in [("alpha", self.alpha), ("eta", self.eta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(LossError::BadHyperparam(format!("{name} = {v} not in [0,1]")));
            }
        }
        if !(self.temperature > 1.0) {
            return Err(LossError::BadHyperparam(format!(
                "temperature = {} must be > 1",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Soft targets recorded for one task transition: `h` holds the recorded
/// logits of all old heads (task order, concatenated columns), `h_tilde` the
/// recomputed targets, `h_prime` the bias-corrected targets.
#[derive(Debug, Clone)]
pub struct LogitRecord {
    pub h: Array2<f64>,
    pub h_tilde: Option<Array2<f64>>,
    pub h_prime: Option<Array2<f64>>,
}

impl LogitRecord {
    pub fn new(h: Array2<f64>) -> Result<Self, LossError> {
        if !h.iter().all(|v| v.is_finite()) {
            return Err(LossError::NonFinite("recorded logits"));
        }
        Ok(LogitRecord { h, h_tilde: None, h_prime: None })
    }
}

fn check_same_shape(a: &Array2<f64>, b: &Array2<f64>, _ctx: &'static str) -> Result<(), LossError> {
    if a.raw_dim() != b.raw_dim() {
        return Err(LossError::ShapeMismatch {
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        });
    }
    Ok(())
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<(), LossError> {
    if labels.len() != rows {
        return Err(LossError::ShapeMismatch {
            expected: format!("{rows} labels"),
            got: format!("{} labels", labels.len()),
        });
    }
    for &l in labels {
        if l >= classes {
            return Err(LossError::LabelOutOfRange { label: l, classes });
        }
    }
    Ok(())
}

/// Mean over rows of `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<f64, LossError> {
    check_labels(labels, logits.nrows(), logits.ncols())?;
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(LossError::NonFinite("logits"));
    }
    let log_probs = log_softmax_rows(logits);
    let n = logits.nrows() as f64;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -log_probs[[i, l]])
        .sum();
    Ok(total / n)
}

/// dCE/dlogits = (softmax - onehot) / N.
pub fn cross_entropy_grad(logits: &Array2<f64>, labels: &[usize]) -> Result<Array2<f64>, LossError> {
    check_labels(labels, logits.nrows(), logits.ncols())?;
    let mut grad = softmax_rows(logits);
    let n = logits.nrows() as f64;
    for (i, &l) in labels.iter().enumerate() {
        grad[[i, l]] -= 1.0;
    }
    grad.mapv_inplace(|v| v / n);
    Ok(grad)
}

/// Raises each component of a probability vector to `1/p` and renormalizes.
pub fn temper(probs: &Array1<f64>, p: f64) -> Result<Array1<f64>, LossError> {
    if probs.iter().any(|&v| v < 0.0) {
        return Err(LossError::NegativeProbability);
    }
    let sum: f64 = probs.sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(LossError::NotNormalized(sum));
    }
    let mut out = probs.mapv(|v| v.powf(1.0 / p));
    let z: f64 = out.sum();
    out.mapv_inplace(|v| v / z);
    Ok(out)
}

/// Distillation loss between recorded and current logits.
///
/// Both logit sets are converted to probabilities row-wise and tempered with
/// exponent `1/p`; the result is the mean row-wise cross-entropy of the
/// tempered current distribution against the tempered recorded one. Computed
/// via the identity `temper(softmax(z), p) = softmax(z / p)`, which avoids
/// exponentiating twice.
pub fn kd_loss(recorded: &Array2<f64>, current: &Array2<f64>, p: f64) -> Result<f64, LossError> {
    check_same_shape(recorded, current, "kd")?;
    if !recorded.iter().chain(current.iter()).all(|v| v.is_finite()) {
        return Err(LossError::NonFinite("kd logits"));
    }
    let targets = softmax_rows(&recorded.mapv(|v| v / p));
    let log_out = log_softmax_rows(&current.mapv(|v| v / p));
    let n = recorded.nrows() as f64;
    Ok(-(targets * log_out).sum() / n)
}

/// dKD/dcurrent = (softmax(current/p) - softmax(recorded/p)) / (p * N).
pub fn kd_grad(recorded: &Array2<f64>, current: &Array2<f64>, p: f64) -> Result<Array2<f64>, LossError> {
    check_same_shape(recorded, current, "kd")?;
    let targets = softmax_rows(&recorded.mapv(|v| v / p));
    let out = softmax_rows(&current.mapv(|v| v / p));
    let n = recorded.nrows() as f64;
    Ok((out - targets) / (p * n))
}

/// Shared-retraining stage loss: distillation toward the recorded targets on
/// the old heads plus `lambda` times cross-entropy on the new head.
pub fn shared_retrain_loss(
    h: &Array2<f64>,
    old_logits: &Array2<f64>,
    new_labels: &[usize],
    new_logits: &Array2<f64>,
    hp: &Hyperparams,
) -> Result<f64, LossError> {
    Ok(kd_loss(h, old_logits, hp.temperature)? + hp.lambda * cross_entropy(new_logits, new_labels)?)
}

/// Fine-tuning stage loss: same form as [`shared_retrain_loss`] with weight `omega`.
pub fn finetune_loss(
    h: &Array2<f64>,
    old_logits: &Array2<f64>,
    new_labels: &[usize],
    new_logits: &Array2<f64>,
    hp: &Hyperparams,
) -> Result<f64, LossError> {
    Ok(kd_loss(h, old_logits, hp.temperature)? + hp.omega * cross_entropy(new_logits, new_labels)?)
}

/// Final-stage loss with two distillation targets:
/// `alpha * KD(h, old) + (1 - alpha) * KD(h_tilde, old_updated) + beta * CE(new)`.
pub fn dual_distill_loss(
    h: &Array2<f64>,
    old_logits: &Array2<f64>,
    h_tilde: &Array2<f64>,
    old_updated_logits: &Array2<f64>,
    new_labels: &[usize],
    new_logits: &Array2<f64>,
    hp: &Hyperparams,
) -> Result<f64, LossError> {
    check_same_shape(h, old_logits, "dual distill")?;
    check_same_shape(h_tilde, old_updated_logits, "dual distill")?;
    Ok(hp.alpha * kd_loss(h, old_logits, hp.temperature)?
        + (1.0 - hp.alpha) * kd_loss(h_tilde, old_updated_logits, hp.temperature)?
        + hp.beta * cross_entropy(new_logits, new_labels)?)
}

/// Mean squared difference over all entries.
fn mean_sq_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let d = a - b;
    d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64
}

/// Autoencoder objective: `recon_weight` times mean squared reconstruction
/// error plus cross-entropy of the task head applied to the reconstruction.
pub fn ae_objective(
    features: &Array2<f64>,
    reconstructed: &Array2<f64>,
    head_logits_on_reconstruction: &Array2<f64>,
    labels: &[usize],
    recon_weight: f64,
) -> Result<f64, LossError> {
    check_same_shape(features, reconstructed, "ae")?;
    Ok(recon_weight * mean_sq_diff(reconstructed, features)
        + cross_entropy(head_logits_on_reconstruction, labels)?)
}

/// Mean squared distance between two encoded batches.
pub fn drift_reg(code_current: &Array2<f64>, code_reference: &Array2<f64>) -> Result<f64, LossError> {
    check_same_shape(code_current, code_reference, "drift")?;
    Ok(mean_sq_diff(code_current, code_reference))
}

/// d drift / d code_current = 2 (code_current - code_reference) / numel.
pub fn drift_reg_grad(
    code_current: &Array2<f64>,
    code_reference: &Array2<f64>,
) -> Result<Array2<f64>, LossError> {
    check_same_shape(code_current, code_reference, "drift")?;
    let n = code_current.len() as f64;
    Ok((code_current - code_reference).mapv(|v| 2.0 * v / n))
}

/// Mean squared distance of the bias-transform outputs to the all-ones tensor.
pub fn bias_reg(gamma_outputs: &Array2<f64>) -> Result<f64, LossError> {
    if !gamma_outputs.iter().all(|v| v.is_finite()) {
        return Err(LossError::NonFinite("gamma outputs"));
    }
    let n = gamma_outputs.len() as f64;
    Ok(gamma_outputs.iter().map(|v| (v - 1.0) * (v - 1.0)).sum::<f64>() / n)
}

/// d bias / d gamma = 2 (gamma - 1) / numel.
pub fn bias_reg_grad(gamma_outputs: &Array2<f64>) -> Array2<f64> {
    let n = gamma_outputs.len() as f64;
    gamma_outputs.mapv(|v| 2.0 * (v - 1.0) / n)
}

/// Corrected final-stage loss:
/// `eta * KD(h_prime, old) + (1 - eta) * KD(h_tilde, old_updated) + phi * CE(new)
///  + rho * drift + tau * bias`.
#[allow(clippy::too_many_arguments)]
pub fn dual_distill_plus_loss(
    h_prime: &Array2<f64>,
    old_logits: &Array2<f64>,
    h_tilde: &Array2<f64>,
    old_updated_logits: &Array2<f64>,
    new_labels: &[usize],
    new_logits: &Array2<f64>,
    code_current: &Array2<f64>,
    code_reference: &Array2<f64>,
    gamma_outputs: &Array2<f64>,
    hp: &Hyperparams,
) -> Result<f64, LossError> {
    Ok(hp.eta * kd_loss(h_prime, old_logits, hp.temperature)?
        + (1.0 - hp.eta) * kd_loss(h_tilde, old_updated_logits, hp.temperature)?
        + hp.phi * cross_entropy(new_logits, new_labels)?
        + hp.rho * drift_reg(code_current, code_reference)?
        + hp.tau * bias_reg(gamma_outputs)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn cross_entropy_uniform_logits_is_ln_c() {
        let logits = Array2::zeros((3, 4));
        let v = cross_entropy(&logits, &[0, 1, 3]).unwrap();
        assert_abs_diff_eq!(v, (4f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_saturates_toward_zero() {
        let mut logits = Array2::zeros((1, 3));
        logits[[0, 2]] = 50.0;
        let v = cross_entropy(&logits, &[2]).unwrap();
        assert!(v < 1e-20, "loss {v}");
    }

    #[test]
    fn cross_entropy_averages_rows() {
        let logits = array![[2.0, 0.0, -1.0], [0.5, 0.3, 0.1]];
        let full = cross_entropy(&logits, &[0, 2]).unwrap();
        let a = cross_entropy(&logits.slice(ndarray::s![0..1, ..]).to_owned(), &[0]).unwrap();
        let b = cross_entropy(&logits.slice(ndarray::s![1..2, ..]).to_owned(), &[2]).unwrap();
        assert_abs_diff_eq!(full, (a + b) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let logits = Array2::zeros((2, 3));
        assert!(matches!(
            cross_entropy(&logits, &[0, 3]),
            Err(LossError::LabelOutOfRange { .. })
        ));
        let mut bad = Array2::zeros((1, 2));
        bad[[0, 0]] = f64::INFINITY;
        assert!(matches!(cross_entropy(&bad, &[0]), Err(LossError::NonFinite(_))));
    }

    #[test]
    fn temper_hand_value() {
        let out = temper(&array![0.25, 0.75], 2.0).unwrap();
        assert_abs_diff_eq!(out[0], 0.36603, epsilon = 1e-5);
        assert_abs_diff_eq!(out[1], 0.63397, epsilon = 1e-5);
    }

    #[test]
    fn temper_near_identity_exponent() {
        let out = temper(&array![0.25, 0.75], 1.0 + 1e-12).unwrap();
        assert_abs_diff_eq!(out[0], 0.25, epsilon = 1e-9);
        assert_abs_diff_eq!(out[1], 0.75, epsilon = 1e-9);
    }

    #[test]
    fn temper_uniform_fixed_point() {
        let out = temper(&array![0.25, 0.25, 0.25, 0.25], 3.7).unwrap();
        for v in out.iter() {
            assert_abs_diff_eq!(*v, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn temper_rejects_negative_and_unnormalized() {
        assert!(matches!(temper(&array![-0.1, 1.1], 2.0), Err(LossError::NegativeProbability)));
        assert!(matches!(temper(&array![0.3, 0.3], 2.0), Err(LossError::NotNormalized(_))));
    }

    #[test]
    fn kd_uniform_pair_is_ln_2() {
        let z = Array2::zeros((2, 2));
        let v = kd_loss(&z, &z, 2.0).unwrap();
        assert_abs_diff_eq!(v, (2f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn kd_hand_value_p1() {
        let recorded = array![[(2f64).ln(), 0.0]];
        let current = array![[0.0, 0.0]];
        let v = kd_loss(&recorded, &current, 1.0).unwrap();
        assert_abs_diff_eq!(v, (2f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn kd_is_minimized_at_matching_logits() {
        let recorded = array![[1.0, -0.5, 0.3], [0.2, 0.0, -1.0]];
        let base = kd_loss(&recorded, &recorded, 2.0).unwrap();
        // any perturbation of the current side increases the loss
        for (i, j, d) in [(0, 0, 0.3), (1, 2, -0.4), (0, 2, 0.05)] {
            let mut cur = recorded.clone();
            cur[[i, j]] += d;
            assert!(kd_loss(&recorded, &cur, 2.0).unwrap() > base);
        }
        // and the value at the minimum is the entropy of the tempered targets
        let t = softmax_rows(&recorded.mapv(|v| v / 2.0));
        let entropy = -t
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&p| p * p.ln()).sum::<f64>())
            .sum::<f64>()
            / 2.0;
        assert_abs_diff_eq!(base, entropy, epsilon = 1e-12);
    }

    #[test]
    fn kd_matches_explicit_softmax_then_temper_route() {
        // independent route: softmax each row, temper, then cross-entropy
        let recorded = array![[0.4, -1.2, 2.0], [0.0, 0.1, -0.3]];
        let current = array![[1.0, 0.5, -0.5], [-2.0, 0.3, 0.9]];
        let p = 3.0;
        let mut expected = 0.0;
        for i in 0..recorded.nrows() {
            let h = temper(&softmax_rows(&recorded).row(i).to_owned(), p).unwrap();
            let o = temper(&softmax_rows(&current).row(i).to_owned(), p).unwrap();
            expected += -h.iter().zip(o.iter()).map(|(&a, &b)| a * b.ln()).sum::<f64>();
        }
        expected /= recorded.nrows() as f64;
        assert_abs_diff_eq!(kd_loss(&recorded, &current, p).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn shared_retrain_loss_is_sum_of_parts() {
        let h = array![[0.0, 0.0]];
        let old = array![[0.0, 0.0]];
        let new = array![[0.0, 0.0, 0.0]];
        let labels = [1usize];
        let mut hp = Hyperparams::default();
        hp.lambda = 0.0;
        let kd_only = shared_retrain_loss(&h, &old, &labels, &new, &hp).unwrap();
        assert_abs_diff_eq!(kd_only, (2f64).ln(), epsilon = 1e-12);
        hp.lambda = 1.0;
        let both = shared_retrain_loss(&h, &old, &labels, &new, &hp).unwrap();
        assert_abs_diff_eq!(both, (2f64).ln() + (3f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn retrain_and_finetune_agree_when_weights_match() {
        let h = array![[0.4, -0.2]];
        let old = array![[0.1, 0.2]];
        let new = array![[1.0, -1.0]];
        let labels = [0usize];
        let mut hp = Hyperparams::default();
        hp.lambda = 1.7;
        hp.omega = 1.7;
        assert_abs_diff_eq!(
            shared_retrain_loss(&h, &old, &labels, &new, &hp).unwrap(),
            finetune_loss(&h, &old, &labels, &new, &hp).unwrap(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn composite_losses_are_affine_in_weights() {
        let h = array![[0.4, -0.2], [0.0, 0.3]];
        let old = array![[0.1, 0.2], [-0.4, 0.0]];
        let new = array![[1.0, -1.0], [0.2, 0.5]];
        let labels = [0usize, 1];
        let at = |lambda: f64| {
            let hp = Hyperparams { lambda, ..Hyperparams::default() };
            shared_retrain_loss(&h, &old, &labels, &new, &hp).unwrap()
        };
        let ce = cross_entropy(&new, &labels).unwrap();
        assert_abs_diff_eq!(at(2.0) - at(1.0), ce, epsilon = 1e-12);
        assert_abs_diff_eq!(at(2.0) - at(0.0), 2.0 * ce, epsilon = 1e-12);
    }

    #[test]
    fn dual_distill_weight_limits() {
        let h = array![[0.4, -0.2]];
        let ht = array![[0.9, 0.1]];
        let old = array![[0.1, 0.2]];
        let old_u = array![[-0.3, 0.6]];
        let new = array![[1.0, -1.0]];
        let labels = [0usize];
        let hp = |alpha: f64, beta: f64| Hyperparams { alpha, beta, ..Hyperparams::default() };

        let a1 = dual_distill_loss(&h, &old, &ht, &old_u, &labels, &new, &hp(1.0, 0.0)).unwrap();
        assert_abs_diff_eq!(a1, kd_loss(&h, &old, 2.0).unwrap(), epsilon = 1e-12);

        let a0 = dual_distill_loss(&h, &old, &ht, &old_u, &labels, &new, &hp(0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(a0, kd_loss(&ht, &old_u, 2.0).unwrap(), epsilon = 1e-12);

        // equal targets collapse the convex combination to a single term
        let mid = dual_distill_loss(&h, &old, &h, &old, &labels, &new, &hp(0.5, 1.0)).unwrap();
        assert_abs_diff_eq!(
            mid,
            kd_loss(&h, &old, 2.0).unwrap() + cross_entropy(&new, &labels).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn ae_objective_hand_value() {
        let features = array![[1.0, 0.0]];
        let recon = array![[0.0, 0.0]];
        let logits = array![[0.0, 0.0]]; // CE = ln 2
        let v = ae_objective(&features, &recon, &logits, &[0], 1.0).unwrap();
        assert_abs_diff_eq!(v, 0.5 + (2f64).ln(), epsilon = 1e-12);
        // recon weight 0 leaves pure cross-entropy
        let v0 = ae_objective(&features, &recon, &logits, &[0], 0.0).unwrap();
        assert_abs_diff_eq!(v0, (2f64).ln(), epsilon = 1e-12);
        // perfect reconstruction with a huge margin sits at the CE floor
        let sharp = array![[60.0, 0.0]];
        let vf = ae_objective(&features, &features, &sharp, &[0], 1.0).unwrap();
        assert!(vf < 1e-20);
    }

    #[test]
    fn drift_reg_values() {
        let a = array![[0.2, 0.4], [0.6, 0.8]];
        assert_abs_diff_eq!(drift_reg(&a, &a).unwrap(), 0.0);
        let b = a.mapv(|v| v + 1.0);
        assert_abs_diff_eq!(drift_reg(&a, &b).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            drift_reg(&a, &b).unwrap(),
            drift_reg(&b, &a).unwrap(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn bias_reg_values() {
        assert_abs_diff_eq!(bias_reg(&Array2::ones((3, 2))).unwrap(), 0.0);
        assert_abs_diff_eq!(bias_reg(&Array2::zeros((3, 2))).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(bias_reg(&Array2::from_elem((3, 2), 2.0)).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn plus_loss_reduces_to_dual_distill() {
        let h = array![[0.4, -0.2]];
        let ht = array![[0.9, 0.1]];
        let old = array![[0.1, 0.2]];
        let old_u = array![[-0.3, 0.6]];
        let new = array![[1.0, -1.0]];
        let labels = [0usize];
        let codes = array![[0.5, 0.5]];
        let gamma = Array2::ones((1, 2));
        let hp = Hyperparams { rho: 0.0, tau: 0.0, eta: 0.37, phi: 1.3, alpha: 0.37, beta: 1.3, ..Hyperparams::default() };
        let plus = dual_distill_plus_loss(
            &h, &old, &ht, &old_u, &labels, &new, &codes, &codes, &gamma, &hp,
        )
        .unwrap();
        let base = dual_distill_loss(&h, &old, &ht, &old_u, &labels, &new, &hp).unwrap();
        assert_abs_diff_eq!(plus, base, epsilon = 1e-12);
    }

    #[test]
    fn plus_loss_sums_unit_weight_parts() {
        let h = array![[0.0, 0.0]];
        let old = array![[0.0, 0.0]];
        let new = array![[0.0, 0.0]];
        let labels = [0usize];
        let code_cur = array![[1.0, 1.0]];
        let code_ref = array![[0.0, 0.0]];
        let gamma = array![[0.0, 0.0]];
        let hp = Hyperparams {
            eta: 0.5,
            phi: 1.0,
            rho: 1.0,
            tau: 1.0,
            ..Hyperparams::default()
        };
        // both KD terms are ln 2, CE is ln 2, drift is 1, bias is 1
        let v = dual_distill_plus_loss(
            &h, &old, &h, &old, &labels, &new, &code_cur, &code_ref, &gamma, &hp,
        )
        .unwrap();
        assert_abs_diff_eq!(v, (2f64).ln() + (2f64).ln() + 1.0 + 1.0, epsilon = 1e-12);

        let hp_ce_only = Hyperparams { eta: 0.0, phi: 1.0, rho: 0.0, tau: 0.0, ..hp };
        let kd_at_eta0 = kd_loss(&h, &old, hp_ce_only.temperature).unwrap();
        let v2 = dual_distill_plus_loss(
            &h, &old, &h, &old, &labels, &new, &code_cur, &code_ref, &gamma, &hp_ce_only,
        )
        .unwrap();
        assert_abs_diff_eq!(v2 - kd_at_eta0, cross_entropy(&new, &labels).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn hyperparams_validation() {
        assert!(Hyperparams::default().validate().is_ok());
        assert!(Hyperparams { temperature: 1.0, ..Default::default() }.validate().is_err());
        assert!(Hyperparams { alpha: 1.5, ..Default::default() }.validate().is_err());
        assert!(Hyperparams { rho: -0.1, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn temper_preserves_simplex_and_argmax(
            raw in proptest::collection::vec(0.01f64..10.0, 2..8),
            p in 1.000001f64..20.0,
        ) {
            let sum: f64 = raw.iter().sum();
            let probs = Array1::from_vec(raw.iter().map(|v| v / sum).collect());
            let out = temper(&probs, p).unwrap();
            let total: f64 = out.sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            let argmax_in = probs.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
            let argmax_out = out.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
            prop_assert_eq!(argmax_in, argmax_out);
        }

        #[test]
        fn losses_are_finite_and_nonnegative(
            vals in proptest::collection::vec(-5.0f64..5.0, 12),
            p in 1.1f64..10.0,
        ) {
            let recorded = Array2::from_shape_vec((3, 4), vals.clone()).unwrap();
            let current = Array2::from_shape_vec((3, 4), vals.iter().rev().copied().collect()).unwrap();
            let kd = kd_loss(&recorded, &current, p).unwrap();
            prop_assert!(kd.is_finite() && kd >= 0.0);
            let ce = cross_entropy(&current, &[0, 1, 3]).unwrap();
            prop_assert!(ce.is_finite() && ce >= 0.0);
        }
    }
}

//! Classification losses on probability vectors and on logits.
//!
//! The focal loss of a sample whose true-class probability is `p_t` is
//! `-alpha_t * (1 - p_t)^gamma * ln(p_t)`. With `gamma = 0` it reduces to
//! weighted cross-entropy, and tying `alpha_t` to the class-weight vector
//! gives the class-weighted focal loss.
//!
//! Probability inputs are clamped to `[EPS, 1 - EPS]` before the logarithm.
//! The logit path ([`Loss::value_and_grad`]) uses a log-softmax instead, so
//! it needs no clamp and its gradient is exact everywhere.

use serde::{Deserialize, Serialize};

use crate::catalog::ClassWeights;
use crate::error::{Error, Result};
use crate::label::NUM_CLASSES;

pub const EPS: f64 = 1e-7;
pub const DEFAULT_GAMMA: f64 = 2.0;

/// A softmax output: seven entries in `[0, 1]` summing to one within 1e-5.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbabilityVector([f64; NUM_CLASSES]);

impl ProbabilityVector {
    pub const SUM_TOLERANCE: f64 = 1e-5;

    pub fn new(probs: [f64; NUM_CLASSES]) -> Result<Self> {
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid(format!("probabilities must lie in [0, 1]: {probs:?}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::invalid(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(ProbabilityVector(probs))
    }

    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.len() != NUM_CLASSES {
            return Err(Error::invalid(format!(
                "expected {NUM_CLASSES} logits, got {}",
                logits.len()
            )));
        }
        let p = softmax(logits);
        Ok(ProbabilityVector(p.try_into().expect("length checked")))
    }

    pub fn as_array(&self) -> &[f64; NUM_CLASSES] {
        &self.0
    }

    pub fn get(&self, index: usize) -> Option<f64> {
        self.0.get(index).copied()
    }

    /// Index of the largest probability; ties go to the lower index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..NUM_CLASSES {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        best
    }
}

impl TryFrom<Vec<f64>> for ProbabilityVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        let arr: [f64; NUM_CLASSES] = v
            .try_into()
            .map_err(|v: Vec<f64>| Error::invalid(format!("expected {NUM_CLASSES} probabilities, got {}", v.len())))?;
        ProbabilityVector::new(arr)
    }
}

impl From<ProbabilityVector> for Vec<f64> {
    fn from(p: ProbabilityVector) -> Self {
        p.0.to_vec()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: [f64; NUM_CLASSES],
}

impl FocalParams {
    pub fn new(gamma: f64, alpha: [f64; NUM_CLASSES]) -> Result<Self> {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be finite and >= 0, got {gamma}")));
        }
        if alpha.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(Error::Config("every alpha must be positive and finite".into()));
        }
        Ok(FocalParams { gamma, alpha })
    }

    /// The same `alpha` for every class.
    pub fn scalar(gamma: f64, alpha: f64) -> Result<Self> {
        Self::new(gamma, [alpha; NUM_CLASSES])
    }
}

/// `-alpha * (1 - p)^gamma * ln p` with `p` clamped to `[EPS, 1 - EPS]`.
pub fn focal_term(p_t: f64, alpha: f64, gamma: f64) -> f64 {
    let p = p_t.clamp(EPS, 1.0 - EPS);
    let modulation = if gamma == 0.0 { 1.0 } else { (1.0 - p).powf(gamma) };
    -alpha * modulation * p.ln()
}

fn target_prob(probs: &ProbabilityVector, target: usize) -> Result<f64> {
    probs
        .get(target)
        .ok_or_else(|| Error::invalid(format!("target index {target} out of range 0..{NUM_CLASSES}")))
}

pub fn focal_loss(probs: &ProbabilityVector, target: usize, params: &FocalParams) -> Result<f64> {
    let p = target_prob(probs, target)?;
    Ok(focal_term(p, params.alpha[target], params.gamma))
}

pub fn weighted_cross_entropy(probs: &ProbabilityVector, target: usize, weights: &ClassWeights) -> Result<f64> {
    let p = target_prob(probs, target)?;
    Ok(focal_term(p, weights.weights[target], 0.0))
}

pub fn class_weighted_focal_loss(
    probs: &ProbabilityVector,
    target: usize,
    weights: &ClassWeights,
    gamma: f64,
) -> Result<f64> {
    let p = target_prob(probs, target)?;
    Ok(focal_term(p, weights.weights[target], gamma))
}

/// Arithmetic mean of per-sample focal losses.
pub fn mean_focal_loss(batch: &[(ProbabilityVector, usize)], params: &FocalParams) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut sum = 0.0;
    for (p, t) in batch {
        sum += focal_loss(p, *t, params)?;
    }
    Ok(sum / batch.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Focal loss; alpha comes from the class weights when present, else 1.
    Focal,
    /// Cross-entropy scaled by the class weights.
    WeightedCe,
    /// Plain cross-entropy; class weights are ignored.
    Ce,
}

/// A configured loss over logits, for any number of classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Loss {
    pub kind: LossKind,
    pub gamma: f64,
    pub weights: Option<Vec<f64>>,
}

impl Loss {
    pub fn new(kind: LossKind, gamma: f64, weights: Option<Vec<f64>>) -> Result<Self> {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be finite and >= 0, got {gamma}")));
        }
        if let Some(w) = &weights {
            if w.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                return Err(Error::Config("class weights must be positive and finite".into()));
            }
        }
        Ok(Loss { kind, gamma, weights })
    }

    fn alpha(&self, target: usize) -> f64 {
        match self.kind {
            LossKind::Ce => 1.0,
            _ => self.weights.as_ref().map_or(1.0, |w| w[target]),
        }
    }

    fn effective_gamma(&self) -> f64 {
        match self.kind {
            LossKind::Focal => self.gamma,
            _ => 0.0,
        }
    }

    /// Loss value and its gradient with respect to the logits.
    pub fn value_and_grad(&self, logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::invalid("non-finite logits"));
        }
        if target >= logits.len() {
            return Err(Error::invalid(format!(
                "target index {target} out of range 0..{}",
                logits.len()
            )));
        }
        if let Some(w) = &self.weights {
            if w.len() != logits.len() {
                return Err(Error::invalid(format!(
                    "{} weights for {} classes",
                    w.len(),
                    logits.len()
                )));
            }
        }
        let alpha = self.alpha(target);
        let gamma = self.effective_gamma();
        let logp = log_softmax(logits);
        let lp = logp[target];
        let pt = lp.exp();
        // 1 - p_t, accurate near p_t = 1
        let q = -lp.exp_m1();
        let (value, coef) = if gamma == 0.0 {
            (-alpha * lp, -alpha)
        } else {
            let m = q.powf(gamma);
            let focus = if q > 0.0 {
                gamma * q.powf(gamma - 1.0) * pt * lp
            } else {
                0.0
            };
            (-alpha * m * lp, alpha * (focus - m))
        };
        let grad = logp
            .iter()
            .enumerate()
            .map(|(j, l)| {
                let delta = if j == target { 1.0 } else { 0.0 };
                coef * (delta - l.exp())
            })
            .collect();
        Ok((value, grad))
    }
}

/// Gradient of `loss` at `logits` for class `target`.
pub fn loss_gradient(logits: &[f64], target: usize, loss: &Loss) -> Result<Vec<f64>> {
    loss.value_and_grad(logits, target).map(|(_, g)| g)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn pv_with_target(p_t: f64, target: usize) -> ProbabilityVector {
        let rest = (1.0 - p_t) / 6.0;
        let mut a = [rest; NUM_CLASSES];
        a[target] = p_t;
        ProbabilityVector::new(a).unwrap()
    }

    #[test]
    fn perfect_prediction_vanishes() {
        let p = pv_with_target(1.0, 2);
        for params in [
            FocalParams::scalar(0.0, 1.0).unwrap(),
            FocalParams::scalar(2.0, 3.0).unwrap(),
        ] {
            assert!(focal_loss(&p, 2, &params).unwrap() < 1e-6);
        }
        assert!(weighted_cross_entropy(&p, 2, &ClassWeights::uniform()).unwrap() < 1e-6);
    }

    #[test]
    fn gamma_zero_is_cross_entropy() {
        let p = pv_with_target(0.5, 0);
        let v = focal_loss(&p, 0, &FocalParams::scalar(0.0, 1.0).unwrap()).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-7);
        let ce = weighted_cross_entropy(&p, 0, &ClassWeights::uniform()).unwrap();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-7);
    }

    #[test]
    fn focal_reference_value() {
        // -0.25 * 0.1^2 * ln 0.9 = 2.6340129e-4
        let p = pv_with_target(0.9, 4);
        let v = focal_loss(&p, 4, &FocalParams::scalar(2.0, 0.25).unwrap()).unwrap();
        assert!((v - 2.634_012_891_4e-4).abs() < 1e-13, "{v}");
    }

    #[test]
    fn weighted_reference_values() {
        let mut w = [1.0; NUM_CLASSES];
        w[3] = 2.5;
        let weights = ClassWeights::new(w).unwrap();
        let v = weighted_cross_entropy(&pv_with_target(0.5, 3), 3, &weights).unwrap();
        assert!((v - 1.7328680).abs() < 1e-7);
        let v = class_weighted_focal_loss(&pv_with_target(0.9, 3), 3, &weights, 2.0).unwrap();
        assert!((v - 2.6340e-3).abs() < 1e-7, "{v}");
        let v = class_weighted_focal_loss(&pv_with_target(0.999999, 3), 3, &weights, DEFAULT_GAMMA).unwrap();
        assert!(v <= 1e-5);
    }

    #[test]
    fn invalid_target_and_vectors() {
        let p = pv_with_target(0.5, 0);
        assert!(focal_loss(&p, 7, &FocalParams::scalar(2.0, 1.0).unwrap()).is_err());
        assert!(ProbabilityVector::new([0.5; NUM_CLASSES]).is_err());
        assert!(ProbabilityVector::try_from(vec![1.0]).is_err());
        assert!(FocalParams::scalar(-1.0, 1.0).is_err());
        assert!(FocalParams::scalar(1.0, 0.0).is_err());
        let loss = Loss::new(LossKind::Focal, 2.0, None).unwrap();
        assert!(loss_gradient(&[0.0, f64::NAN], 0, &loss).is_err());
        assert!(loss_gradient(&[0.0, 1.0], 2, &loss).is_err());
    }

    #[test]
    fn batch_mean() {
        let params = FocalParams::scalar(0.0, 1.0).unwrap();
        let batch = [(pv_with_target(0.5, 0), 0), (pv_with_target(0.25, 1), 1)];
        let m = mean_focal_loss(&batch, &params).unwrap();
        assert!((m - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-12);
        assert!(mean_focal_loss(&[], &params).is_err());
    }

    #[test]
    fn uniform_logits_ce_gradient_is_p_minus_onehot() {
        let loss = Loss::new(LossKind::Focal, 0.0, None).unwrap();
        let g = loss_gradient(&[0.3; NUM_CLASSES], 5, &loss).unwrap();
        for (j, gj) in g.iter().enumerate() {
            let expect = 1.0 / 7.0 - if j == 5 { 1.0 } else { 0.0 };
            assert!((gj - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_vanishes_at_confidence() {
        let loss = Loss::new(LossKind::Focal, 2.0, None).unwrap();
        let mut logits = [0.0; NUM_CLASSES];
        logits[1] = 40.0;
        let g = loss_gradient(&logits, 1, &loss).unwrap();
        assert!(g.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-12);
    }

    #[test]
    fn logit_and_probability_paths_agree() {
        let logits = [0.2, -1.0, 0.5, 2.0, -0.3, 0.0, 1.1];
        let probs = ProbabilityVector::from_logits(&logits).unwrap();
        let mut w = [1.0; NUM_CLASSES];
        w[3] = 1.7;
        let weights = ClassWeights::new(w).unwrap();
        let loss = Loss::new(LossKind::Focal, 2.0, Some(w.to_vec())).unwrap();
        let (v, _) = loss.value_and_grad(&logits, 3).unwrap();
        let p = class_weighted_focal_loss(&probs, 3, &weights, 2.0).unwrap();
        assert!((v - p).abs() < 1e-12);
        let ce = Loss::new(LossKind::Ce, 2.0, Some(w.to_vec())).unwrap();
        let (v, _) = ce.value_and_grad(&logits, 3).unwrap();
        assert!((v + probs.as_array()[3].ln()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn non_negative_and_damped(p in 1e-6f64..1.0, gamma in 0.0f64..6.0, alpha in 0.01f64..10.0) {
            let f = focal_term(p, alpha, gamma);
            prop_assert!(f >= 0.0);
            prop_assert!(f <= focal_term(p, alpha, 0.0) + 1e-15);
        }

        #[test]
        fn strictly_decreasing_in_p(a in 1e-6f64..0.999, b in 1e-6f64..0.999, gamma in 0.0f64..5.0) {
            prop_assume!((a - b).abs() > 1e-9);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(focal_term(lo, 1.0, gamma) > focal_term(hi, 1.0, gamma));
        }

        #[test]
        fn gamma_zero_matches_weighted_ce(logits in proptest::array::uniform7(-8.0f64..8.0), t in 0usize..7, w in 0.1f64..5.0) {
            let probs = ProbabilityVector::from_logits(&logits).unwrap();
            let mut arr = [1.0; NUM_CLASSES];
            arr[t] = w;
            let weights = ClassWeights::new(arr).unwrap();
            let a = class_weighted_focal_loss(&probs, t, &weights, 0.0).unwrap();
            let b = weighted_cross_entropy(&probs, t, &weights).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn hard_examples_gain_relative_weight() {
        let ratio = |g| focal_term(0.1, 1.0, g) / focal_term(0.9, 1.0, g);
        for g in [0.5, 1.0, 2.0, 5.0] {
            assert!(ratio(g) > ratio(0.0));
        }
    }
}

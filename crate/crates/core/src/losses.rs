//! Detection and keypoint losses with analytic gradients.
//!
//! All three terms normalize by `max(N, 1)` where `N` is the number of
//! positive samples; [`LossValue::no_positives`] reports when `N` was zero.

use crate::error::{Error, Result};
use crate::geometry::BoxDelta;
use crate::matching::{Label, MatchResult};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub lambda_kp: f64,
    pub smooth_l1_beta: f64,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            lambda_kp: 0.25,
            smooth_l1_beta: 1.0,
            epsilon: 1e-12,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha > 0.0
            && self.alpha < 1.0
            && self.gamma >= 0.0
            && self.lambda_kp >= 0.0
            && self.smooth_l1_beta > 0.0
            && self.epsilon > 0.0
            && self.epsilon < 0.5;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid loss configuration {self:?}")))
        }
    }
}

/// A scalar loss and its gradient with respect to the loss inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<T, G = T> {
    pub value: T,
    pub grad: Vec<G>,
    pub no_positives: bool,
}

#[inline]
fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn clamp_prob<T: Scalar>(p: T, eps: T) -> T {
    p.max(eps).min(T::one() - eps)
}

/// Un-normalized focal term for one anchor given its probability.
#[inline]
fn focal_term<T: Scalar>(p: T, label: Label, alpha: T, gamma: T, eps: T) -> T {
    let p = clamp_prob(p, eps);
    match label {
        Label::Positive => -alpha * (T::one() - p).powf(gamma) * p.ln(),
        Label::Negative => -(T::one() - alpha) * p.powf(gamma) * (T::one() - p).ln(),
        Label::Ignore => T::zero(),
    }
}

/// Focal classification loss evaluated on probabilities (no gradient).
pub fn focal_loss_from_probs<T: Scalar>(probs: &[T], m: &MatchResult, cfg: &LossConfig) -> Result<T> {
    check_len("focal_loss", probs.len(), m.len())?;
    let (alpha, gamma, eps) = (T::of(cfg.alpha), T::of(cfg.gamma), T::of(cfg.epsilon));
    let sum: T = probs
        .iter()
        .zip(&m.labels)
        .map(|(&p, &l)| focal_term(p, l, alpha, gamma, eps))
        .sum();
    Ok(sum / T::of_usize(m.num_pos.max(1)))
}

/// Focal classification loss on logits, with the gradient wrt each logit.
pub fn focal_loss<T: Scalar>(logits: &[T], m: &MatchResult, cfg: &LossConfig) -> Result<LossValue<T>> {
    check_len("focal_loss", logits.len(), m.len())?;
    let (alpha, gamma, eps) = (T::of(cfg.alpha), T::of(cfg.gamma), T::of(cfg.epsilon));
    let norm = T::of_usize(m.num_pos.max(1));
    let one = T::one();
    let mut value = T::zero();
    let mut grad = vec![T::zero(); logits.len()];
    for (i, (&z, &label)) in logits.iter().zip(&m.labels).enumerate() {
        if label == Label::Ignore {
            continue;
        }
        let p = clamp_prob(sigmoid(z), eps);
        value = value + focal_term(p, label, alpha, gamma, eps);
        // d/dz of the per-anchor term, using dp/dz = p (1 - p).
        grad[i] = match label {
            Label::Positive => alpha * (one - p).powf(gamma) * (gamma * p * p.ln() - (one - p)),
            Label::Negative => (one - alpha) * p.powf(gamma) * (p - gamma * (one - p) * (one - p).ln()),
            Label::Ignore => unreachable!(),
        } / norm;
    }
    Ok(LossValue {
        value: value / norm,
        grad,
        no_positives: m.num_pos == 0,
    })
}

#[inline]
pub fn smooth_l1<T: Scalar>(x: T, beta: T) -> T {
    let a = x.abs();
    if a < beta {
        T::of(0.5) * x * x / beta
    } else {
        a - T::of(0.5) * beta
    }
}

#[inline]
pub fn smooth_l1_grad<T: Scalar>(x: T, beta: T) -> T {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

/// Smooth-L1 regression loss over aligned prediction/target lists, one
/// entry per positive anchor. The gradient has the layout of `pred`.
pub fn smooth_l1_loss<T: Scalar>(
    pred: &[BoxDelta<T>],
    target: &[BoxDelta<T>],
    num_pos: usize,
    cfg: &LossConfig,
) -> Result<LossValue<T, BoxDelta<T>>> {
    check_len("smooth_l1_loss", pred.len(), target.len())?;
    let beta = T::of(cfg.smooth_l1_beta);
    let norm = T::of_usize(num_pos.max(1));
    let mut value = T::zero();
    let mut grad = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(target) {
        let (pa, ta) = (p.to_array(), t.to_array());
        let mut g = [T::zero(); 4];
        for c in 0..4 {
            let d = pa[c] - ta[c];
            value = value + smooth_l1(d, beta);
            g[c] = smooth_l1_grad(d, beta) / norm;
        }
        grad.push(BoxDelta::from_array(g));
    }
    Ok(LossValue {
        value: value / norm,
        grad,
        no_positives: num_pos == 0,
    })
}

/// Target cell `(row, col)` per keypoint; `None` for excluded keypoints.
pub type KeypointTarget = Vec<Option<(usize, usize)>>;

/// Spatial cross-entropy over `K x m x m` logit masks.
///
/// `logits[i]` holds sample `i` as `K` row-major `m x m` planes. Each
/// sample contributes the mean over its valid keypoints, and the sum is
/// divided by the number of samples with at least one valid keypoint.
pub fn keypoint_ce_loss<T: Scalar>(
    logits: &[Vec<T>],
    targets: &[KeypointTarget],
    m: usize,
) -> Result<LossValue<T, Vec<T>>> {
    check_len("keypoint_ce_loss", logits.len(), targets.len())?;
    let plane = m * m;
    let counted = targets.iter().filter(|t| t.iter().any(Option::is_some)).count();
    let norm = T::of_usize(counted.max(1));
    let mut value = T::zero();
    let mut grads = Vec::with_capacity(logits.len());
    for (sample, target) in logits.iter().zip(targets) {
        if sample.len() != target.len() * plane {
            return Err(Error::ShapeMismatch {
                op: "keypoint_ce_loss",
                lhs: vec![sample.len()],
                rhs: vec![target.len(), m, m],
            });
        }
        let mut g = vec![T::zero(); sample.len()];
        let valid = target.iter().filter(|t| t.is_some()).count();
        if valid > 0 {
            let scale = T::one() / (T::of_usize(valid) * norm);
            for (k, cell) in target.iter().enumerate() {
                let Some((j, l)) = *cell else { continue };
                if j >= m || l >= m {
                    return Err(Error::Config(format!("keypoint target ({j}, {l}) outside {m}x{m} mask")));
                }
                let row = &sample[k * plane..(k + 1) * plane];
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
                let log_z = max + sum.ln();
                let idx = j * m + l;
                value = value + (log_z - row[idx]) * scale;
                let gk = &mut g[k * plane..(k + 1) * plane];
                for (gv, &v) in gk.iter_mut().zip(row) {
                    *gv = (v - log_z).exp() * scale;
                }
                gk[idx] = gk[idx] - scale;
            }
        }
        grads.push(g);
    }
    Ok(LossValue {
        value,
        grad: grads,
        no_positives: counted == 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_cls: f64,
    pub l_box: f64,
    pub l_kp: f64,
    pub l_total: f64,
    pub num_pos: usize,
}

/// `L_cls + L_box + lambda_kp * L_kp`.
pub fn total_loss(l_cls: f64, l_box: f64, l_kp: f64, num_pos: usize, cfg: &LossConfig) -> LossReport {
    LossReport {
        l_cls,
        l_box,
        l_kp,
        l_total: l_cls + l_box + cfg.lambda_kp * l_kp,
        num_pos,
    }
}

fn check_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { op, lhs: vec![a], rhs: vec![b] })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn labels(ls: &[Label]) -> MatchResult {
        let matched = ls.iter().map(|&l| (l == Label::Positive).then_some(0)).collect();
        MatchResult {
            labels: ls.to_vec(),
            matched,
            num_pos: ls.iter().filter(|&&l| l == Label::Positive).count(),
        }
    }

    #[test]
    fn focal_single_positive() {
        let m = labels(&[Label::Positive]);
        let v = focal_loss_from_probs(&[0.9], &m, &LossConfig::default()).unwrap();
        assert_abs_diff_eq!(v, 0.25 * 0.01 * -(0.9f64.ln()), epsilon = 1e-15);
        assert_abs_diff_eq!(v, 2.634e-4, epsilon = 1e-7);
        let near_one = focal_loss_from_probs(&[1.0 - 1e-9], &m, &LossConfig::default()).unwrap();
        assert!(near_one < 1e-18);
    }

    #[test]
    fn focal_negative_and_perfect_positive() {
        let m = labels(&[Label::Negative, Label::Positive]);
        let v = focal_loss_from_probs(&[0.1, 1.0], &m, &LossConfig::default()).unwrap();
        assert_abs_diff_eq!(v, 0.75 * 0.01 * -(0.9f64.ln()), epsilon = 1e-12);
        assert_abs_diff_eq!(v, 7.902e-4, epsilon = 1e-7);
    }

    #[test]
    fn focal_ignores_ignored_and_flags_empty() {
        let m = labels(&[Label::Ignore, Label::Negative]);
        let out = focal_loss(&[3.0, -2.0], &m, &LossConfig::default()).unwrap();
        assert!(out.no_positives);
        assert_eq!(out.grad[0], 0.0);
        let p = 1.0 / (1.0 + 2f64.exp());
        assert_abs_diff_eq!(out.value, -0.75 * p * p * (1.0 - p).ln(), epsilon = 1e-15);
    }

    #[test]
    fn smooth_l1_examples() {
        let cfg = LossConfig::default();
        let z = BoxDelta::zero();
        let half = dx_only(0.5);
        assert_abs_diff_eq!(smooth_l1_loss(&[half], &[z], 1, &cfg).unwrap().value, 0.125, epsilon = 1e-15);
        assert_eq!(smooth_l1_loss(&[half], &[half], 1, &cfg).unwrap().value, 0.0);
        let two = dx_only(2.0);
        assert_abs_diff_eq!(smooth_l1_loss(&[two], &[z], 1, &cfg).unwrap().value, 1.5, epsilon = 1e-15);
    }

    fn dx_only(dx: f64) -> BoxDelta<f64> {
        BoxDelta::new(dx, 0.0, 0.0, 0.0)
    }

    #[test]
    fn smooth_l1_c1_at_beta() {
        let beta = 1.0;
        let h = 1e-9;
        assert_abs_diff_eq!(smooth_l1(beta - h, beta), smooth_l1(beta + h, beta), epsilon = 1e-8);
        assert_abs_diff_eq!(smooth_l1_grad(beta - h, beta), smooth_l1_grad(beta + h, beta), epsilon = 1e-8);
    }

    #[test]
    fn keypoint_uniform_and_small() {
        let m = 56;
        let out = keypoint_ce_loss(&[vec![0.0; m * m]], &[vec![Some((3, 7))]], m).unwrap();
        assert_abs_diff_eq!(out.value, (3136f64).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(out.value, 8.0507, epsilon = 1e-4);

        let logits = vec![3f64.ln(), 0.0, 0.0, 0.0];
        let out = keypoint_ce_loss(&[logits], &[vec![Some((0, 0))]], 2).unwrap();
        assert_abs_diff_eq!(out.value, -(0.5f64.ln()), epsilon = 1e-12);

        let mut sharp = vec![0.0; 4];
        sharp[3] = 50.0;
        let out = keypoint_ce_loss(&[sharp], &[vec![Some((1, 1))]], 2).unwrap();
        assert!(out.value < 1e-20);
    }

    #[test]
    fn keypoint_excludes_invalid() {
        let m = 2;
        let sample = vec![0.0, 1.0, 2.0, 3.0, 5.0, 0.0, 0.0, 0.0];
        let both = keypoint_ce_loss(std::slice::from_ref(&sample), &[vec![Some((0, 1)), None]], m).unwrap();
        let single = keypoint_ce_loss(&[sample[..4].to_vec()], &[vec![Some((0, 1))]], m).unwrap();
        assert_abs_diff_eq!(both.value, single.value, epsilon = 1e-15);
        assert!(both.grad[0][4..].iter().all(|&g| g == 0.0));

        let none = keypoint_ce_loss(&[sample], &[vec![None, None]], m).unwrap();
        assert_eq!(none.value, 0.0);
        assert!(none.no_positives);
    }

    #[test]
    fn total_is_weighted_sum() {
        let cfg = LossConfig::default();
        assert_eq!(total_loss(1.0, 0.5, 2.0, 1, &cfg).l_total, 2.0);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0, &cfg).l_total, 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { alpha: 1.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { smooth_l1_beta: 0.0, ..Default::default() }.validate().is_err());
    }
}

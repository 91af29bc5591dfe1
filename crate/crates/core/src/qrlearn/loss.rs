//! Scalar losses and their derivatives.

use crate::distdp::quantile_midpoints;
use crate::error::{Error, Result};

/// Huber penalty `rho_kappa(u)`.
pub fn huber(u: f64, kappa: f64) -> f64 {
    let a = u.abs();
    if a <= kappa {
        0.5 * u * u
    } else {
        kappa * (a - 0.5 * kappa)
    }
}

/// Asymmetric quantile Huber penalty `|tau - 1(u < 0)| * rho_kappa(u) / kappa`.
pub fn quantile_huber(u: f64, tau: f64, kappa: f64) -> f64 {
    (tau - indicator(u < 0.0)).abs() * huber(u, kappa) / kappa
}

/// Derivative of [`quantile_huber`] with respect to `u`. At `|u| = kappa` the
/// two branches agree, so no subgradient choice is needed there.
pub fn quantile_huber_grad(u: f64, tau: f64, kappa: f64) -> f64 {
    let weight = (tau - indicator(u < 0.0)).abs();
    let slope = if u.abs() <= kappa { u } else { kappa * u.signum() };
    weight * slope / kappa
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// `(1/N) sum_i sum_j rho^kappa_{tau_hat_i}(target_j - pred_i)` where `pred`
/// holds one estimate per quantile midpoint and `N = targets.len()`.
pub fn quantile_huber_loss(pred: &[f64], targets: &[f64], kappa: f64) -> Result<f64> {
    Ok(quantile_huber_loss_grad(pred, targets, kappa)?.0)
}

/// Loss value plus its gradient with respect to `pred`.
pub fn quantile_huber_loss_grad(
    pred: &[f64],
    targets: &[f64],
    kappa: f64,
) -> Result<(f64, Vec<f64>)> {
    if !(kappa > 0.0) {
        return Err(Error::validation(format!("kappa must be > 0, got {kappa}")));
    }
    if pred.is_empty() || targets.is_empty() {
        return Err(Error::validation("quantile loss needs predictions and targets"));
    }
    let n = targets.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for ((theta, tau), g) in pred.iter().zip(quantile_midpoints(pred.len())).zip(&mut grad) {
        for t in targets {
            let u = t - theta;
            loss += quantile_huber(u, tau, kappa);
            *g -= quantile_huber_grad(u, tau, kappa);
        }
    }
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

/// `0.5 * (target - pred)^2`, averaged over targets; gradient w.r.t. `pred`.
pub fn squared_loss_grad(pred: f64, targets: &[f64]) -> (f64, f64) {
    let n = targets.len() as f64;
    let loss = targets.iter().map(|t| 0.5 * (t - pred).powi(2)).sum::<f64>() / n;
    let grad = targets.iter().map(|t| pred - t).sum::<f64>() / n;
    (loss, grad)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Binary cross-entropy of a logit against flag `e`, and its derivative
/// with respect to the logit.
pub fn bce_with_logits(logit: f64, e: bool) -> (f64, f64) {
    let target = indicator(e);
    (softplus(logit) - target * logit, sigmoid(logit) - target)
}

/// `-e log p - (1 - e) log(1 - p)`, evaluated through the logit of `p`.
pub fn bce_loss(ell_pred: f64, e: bool) -> f64 {
    let p = ell_pred.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
    bce_with_logits(p.ln() - (-p).ln_1p(), e).0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_huber_hand_values() {
        assert_eq!(quantile_huber_loss(&[0.3], &[0.3], 1.0).unwrap(), 0.0);
        assert_eq!(quantile_huber_loss(&[0.0], &[2.0], 1.0).unwrap(), 0.75);
        assert_eq!(quantile_huber_loss(&[1.0], &[0.5], 1.0).unwrap(), 0.0625);
        assert!(quantile_huber_loss(&[1.0], &[0.5], 0.0).is_err());
    }

    #[test]
    fn bce_hand_values() {
        assert!((bce_loss(0.5, true) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_loss(0.9, false) - 10f64.ln()).abs() < 1e-12);
        assert!(bce_loss(1.0 - 1e-12, true) < 1e-11);
        assert!(bce_loss(1.0, false).is_finite());
        assert!(bce_loss(0.0, true).is_finite());
    }

    #[test]
    fn grad_matches_finite_difference_away_from_kinks() {
        let targets = [0.1, 1.7, -0.4, 2.5];
        let pred = [0.2, 0.9, 1.4];
        let (_, grad) = quantile_huber_loss_grad(&pred, &targets, 1.0).unwrap();
        let h = 1e-6;
        for i in 0..pred.len() {
            let mut up = pred;
            let mut down = pred;
            up[i] += h;
            down[i] -= h;
            let fd = (quantile_huber_loss(&up, &targets, 1.0).unwrap()
                - quantile_huber_loss(&down, &targets, 1.0).unwrap())
                / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-8, "{i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn logit_bce_is_stable_at_extremes() {
        let (l, g) = bce_with_logits(800.0, false);
        assert_eq!(l, 800.0);
        assert_eq!(g, 1.0);
        let (l, g) = bce_with_logits(-800.0, false);
        assert_eq!(l, 0.0);
        assert_eq!(g, 0.0);
    }
}

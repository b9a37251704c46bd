//! Central finite differences, used as the independent oracle for every
//! hand-written backward pass.

use crate::error::{Error, Result};

/// Denominator floor for relative errors. Gradient entries smaller than this are
/// compared in absolute terms; below it, central differences at eps 1e-5 are
/// dominated by float rounding of the loss.
pub const REL_ERR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct FiniteDiff {
    pub grads: Vec<f64>,
    /// Coordinates where the loss is not smooth within `eps` (a ReLU kink was
    /// crossed); their estimates are not comparable to an analytic gradient.
    pub nonsmooth: Vec<bool>,
}

impl FiniteDiff {
    pub fn nonsmooth_count(&self) -> usize {
        self.nonsmooth.iter().filter(|&&b| b).count()
    }
}

/// Central-difference gradient of `loss` at `params`.
///
/// Each coordinate is also estimated at half the step; when the two estimates
/// disagree beyond what truncation error allows, a kink lies inside the stencil
/// and the coordinate is flagged.
pub fn finite_diff_grad<F>(mut loss: F, params: &[f64], eps: f64) -> Result<FiniteDiff>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step must be > 0, got {eps}")));
    }
    let mut theta = params.to_vec();
    let mut eval = |theta: &[f64]| -> Result<f64> {
        let v = loss(theta)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("loss evaluated to {v}")))
        }
    };
    eval(&theta)?;
    let mut grads = Vec::with_capacity(params.len());
    let mut nonsmooth = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let x0 = params[i];
        let mut at = |x: f64, theta: &mut Vec<f64>| {
            theta[i] = x;
            eval(theta)
        };
        let full = (at(x0 + eps, &mut theta)? - at(x0 - eps, &mut theta)?) / (2.0 * eps);
        let half = (at(x0 + eps / 2.0, &mut theta)? - at(x0 - eps / 2.0, &mut theta)?) / eps;
        theta[i] = x0;
        grads.push(full);
        nonsmooth.push((full - half).abs() > 1e-7 * full.abs().max(1.0));
    }
    Ok(FiniteDiff { grads, nonsmooth })
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Largest relative error over coordinates not flagged in `skip`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], skip: &[bool]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .filter(|(i, _)| !skip.get(*i).copied().unwrap_or(false))
        .map(|(_, (a, n))| relative_error(*a, *n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_loss_has_zero_gradient() {
        let fd = finite_diff_grad(|_| Ok(3.5), &[1.0, -2.0, 0.25], 1e-5).unwrap();
        assert!(fd.grads.iter().all(|g| g.abs() < 1e-9));
    }

    #[test]
    fn sum_of_squares() {
        let p = [0.3, -1.2, 2.0, 0.0];
        let fd = finite_diff_grad(|x| Ok(x.iter().map(|v| v * v).sum()), &p, 1e-5).unwrap();
        for (g, x) in fd.grads.iter().zip(p) {
            assert!((g - 2.0 * x).abs() < 1e-9);
        }
        assert_eq!(fd.nonsmooth_count(), 0);
    }

    #[test]
    fn kink_is_flagged() {
        // |x| at x = 2e-6 has its kink inside the stencil
        let fd = finite_diff_grad(|x| Ok(x[0].abs() + x[1].abs()), &[2e-6, 1.0], 1e-5).unwrap();
        assert_eq!(fd.nonsmooth, vec![true, false]);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let r = finite_diff_grad(|x| Ok(x[0].ln()), &[5e-6], 1e-5);
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert!(finite_diff_grad(|_| Ok(0.0), &[1.0], 0.0).is_err());
    }
}

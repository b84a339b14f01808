//! Quantitative invertibility windows along interpolation scales and the
//! two-stage (time, then space) extrapolation-interval estimator.
//!
//! All interval arithmetic happens in reciprocal exponents (1/r, 1/q),
//! where interpolation acts affinely; results map back to exponent
//! intervals at the end. The estimator composes explicit, hand-checkable
//! formulas and records every application in a provenance list; it is an
//! estimate with committed constants, not a sharp interval.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Invertibility window around an interpolation parameter.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SneibergWindow {
    pub theta_center: f64,
    /// radius = (1/6) min(theta, 1-theta) / (1 + 2 beta gamma_op)
    pub radius: f64,
    /// Norm bound for the inverse anywhere in the window: 8 beta.
    pub inverse_bound: f64,
    pub beta: f64,
    pub gamma_op: f64,
    /// (lo, hi) clamped to (0, 1).
    pub window: (f64, f64),
}

/// Window of persistent invertibility around `theta`, for an operator with
/// inverse bound `beta` at `theta` and scale-uniform norm bound `gamma_op`.
pub fn sneiberg_window(theta: f64, beta: f64, gamma_op: f64) -> Result<SneibergWindow> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::Parameter(format!("theta = {theta} outside (0, 1)")));
    }
    if !(beta > 0.0) || !(gamma_op > 0.0) {
        return Err(Error::Parameter(format!(
            "beta and gamma_op must be positive, got ({beta}, {gamma_op})"
        )));
    }
    let radius = (1.0 / 6.0) * theta.min(1.0 - theta) / (1.0 + 2.0 * beta * gamma_op);
    let window = ((theta - radius).max(0.0), (theta + radius).min(1.0));
    Ok(SneibergWindow {
        theta_center: theta,
        radius,
        inverse_bound: 8.0 * beta,
        beta,
        gamma_op,
        window,
    })
}

/// One recorded window application in the estimator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WindowApplication {
    pub stage: String,
    pub theta: f64,
    pub beta: f64,
    pub gamma_op: f64,
    pub radius: f64,
    pub inverse_bound: f64,
}

/// Estimated integrability intervals around (r, q) = (2, 2).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExtrapolationEstimate {
    /// Time-integrability interval (open), contains 2.
    pub interval_r: (f64, f64),
    /// Space-integrability interval (open), contains 2.
    pub interval_q: (f64, f64),
    pub lambda: f64,
    pub gamma: f64,
    pub m_norm: f64,
    pub lambda_shift: f64,
    pub provenance: Vec<WindowApplication>,
}

/// Two-stage estimator for the class (lambda, gamma, M) with shift Lambda:
///
/// * stage 1 (time): inverse bound beta0 = solution-operator constant
///   (min(Lambda - lambda, gamma) + M + Lambda)/min(Lambda - lambda, gamma),
///   operator-norm bound gamma0 = 1 + M + |Lambda|; window at theta = 1/2 on
///   the 1/r axis.
/// * stage 2 (space): same gamma0, inverse bound 8 beta0 inherited from
///   stage 1, window at theta = 1/2 on the 1/q axis.
///
/// `q_anchor_delta`, when given, narrows the stage-2 anchors from
/// (1, infinity) to [2 - delta, 2 + delta]; the window radius in 1/q then
/// scales by the anchor width.
pub fn estimate_intervals(
    lambda: f64,
    gamma: f64,
    m_norm: f64,
    lambda_shift: f64,
    q_anchor_delta: Option<f64>,
) -> Result<ExtrapolationEstimate> {
    if lambda < 0.0 || gamma <= 0.0 || m_norm < 0.0 {
        return Err(Error::Parameter(format!(
            "class parameters need lambda >= 0, gamma > 0, M >= 0; got ({lambda}, {gamma}, {m_norm})"
        )));
    }
    if lambda_shift <= lambda {
        return Err(Error::Parameter(format!(
            "Lambda = {lambda_shift} must exceed lambda = {lambda}"
        )));
    }
    let kappa = (lambda_shift - lambda).min(gamma);
    let beta0 = (kappa + m_norm + lambda_shift) / kappa;
    let gamma0 = 1.0 + m_norm + lambda_shift.abs();
    let mut provenance = Vec::new();

    // Stage 1: the 1/r axis with anchors (0, 1), so 1/r = theta.
    let w1 = sneiberg_window(0.5, beta0, gamma0)?;
    provenance.push(WindowApplication {
        stage: "time".into(),
        theta: 0.5,
        beta: beta0,
        gamma_op: gamma0,
        radius: w1.radius,
        inverse_bound: w1.inverse_bound,
    });
    let interval_r = (1.0 / (0.5 + w1.radius), 1.0 / (0.5 - w1.radius));

    // Stage 2: the 1/q axis, at each endpoint of the r-interval; the data
    // (beta, gamma) does not depend on r, so the intersection over
    // endpoints is the window itself.
    let beta1 = w1.inverse_bound;
    let w2 = sneiberg_window(0.5, beta1, gamma0)?;
    provenance.push(WindowApplication {
        stage: "space".into(),
        theta: 0.5,
        beta: beta1,
        gamma_op: gamma0,
        radius: w2.radius,
        inverse_bound: w2.inverse_bound,
    });
    let radius_q = match q_anchor_delta {
        None => w2.radius,
        Some(delta) => {
            if !(delta > 0.0 && delta < 1.0) {
                return Err(Error::Parameter(format!(
                    "q anchor delta = {delta} outside (0, 1)"
                )));
            }
            // Anchors q = 2 -/+ delta: the affine map from the window
            // parameter to 1/q has slope |1/(2+delta) - 1/(2-delta)|.
            let lo = 1.0 / (2.0 + delta);
            let hi = 1.0 / (2.0 - delta);
            w2.radius * (hi - lo)
        }
    };
    let interval_q = (1.0 / (0.5 + radius_q), 1.0 / (0.5 - radius_q));

    Ok(ExtrapolationEstimate {
        interval_r,
        interval_q,
        lambda,
        gamma,
        m_norm,
        lambda_shift,
        provenance,
    })
}

//! Closed-form approximation of the risk-sensitive cost
//! `J = -sigma^{-1} ln E[exp(-sigma L)]` along a candidate trajectory with
//! controls held fixed.
//!
//! The dynamics are linearized and the cost expanded to second order in the
//! state only, so the expectation reduces to a chain of Gaussian integrals.
//! For linear dynamics with quadratic cost the result is exact.

use crate::backward::{convolve_noise, risk_log_det};
use crate::error::{Error, Result};
use crate::linalg::{lu_solve_vec, symmetrized, Mat, Vector};
use crate::model::{Linearization, NoiseModel};

/// Below this `|sigma|` the analytic risk-neutral limit is used.
pub const SIGMA_ZERO_BAND: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct RiskCostBreakdown {
    pub sigma: f64,
    /// The approximated risk-sensitive cost.
    pub total: f64,
    /// `sigma^{-1} ln(alpha)`, the determinant contribution.
    pub log_det_term: f64,
    /// `ln det(I + sigma V_t Omega_t)` for `t = 1..=T`.
    pub step_log_dets: Vec<f64>,
    /// `ln det(I + sigma V_0 chi_0)`.
    pub initial_log_det: f64,
    pub big_v0: Mat,
    pub v0: Vector,
    pub vbar0: f64,
}

/// Evaluates the risk cost for the state-only expansion held in `lin`.
///
/// The initial deviation is taken as `x_0 - x_hat_0 ~ N(0, chi_0)`, i.e. the
/// nominal starts at the belief mean.
pub fn evaluate_risk_cost(lin: &Linearization, noise: &NoiseModel, sigma: f64) -> Result<RiskCostBreakdown> {
    if sigma.abs() < SIGMA_ZERO_BAND {
        return Ok(risk_neutral_limit(lin, noise, sigma));
    }
    let horizon = lin.horizon();
    let mut big_v = symmetrized(lin.terminal.lxx.clone());
    let mut v = lin.terminal.lx.clone();
    let mut vbar = lin.terminal.l;
    let mut step_log_dets = vec![0.0; horizon];

    for t in (0..horizon).rev() {
        let step = &lin.steps[t];
        let conv = convolve_noise(noise.process(t), &big_v, &v, sigma, t)?;
        step_log_dets[t] = conv.log_det;
        let drift = &conv.m * &step.gap + &conv.n;
        let next_v = &step.cost.lxx + step.fx.transpose() * &conv.m * &step.fx;
        let next_grad = &step.cost.lx + step.fx.transpose() * &drift;
        vbar = step.cost.l
            + vbar
            + step.gap.dot(&conv.n)
            + 0.5 * step.gap.dot(&(&conv.m * &step.gap))
            + conv.c;
        big_v = symmetrized(next_v);
        v = next_grad;
        if !vbar.is_finite() {
            return Err(Error::NonFinite {
                step: t,
                what: "risk cost",
            });
        }
    }

    let chi = &noise.initial_cov;
    let initial_log_det = risk_log_det(chi, &big_v, sigma, 0)?;
    let n = big_v.nrows();
    let a = Mat::identity(n, n) + chi.matrix() * &big_v * sigma;
    // -1/2 v'(V + sigma^{-1} chi^{-1})^{-1} v = -1/2 sigma v'(I + sigma chi V)^{-1} chi v
    let w = lu_solve_vec(&a, &(chi.matrix() * &v)).ok_or(Error::NeuroticBreakdown {
        step: 0,
        det: crate::linalg::determinant(&a),
    })?;
    let correction = -0.5 * sigma * v.dot(&w);
    let log_alpha = 0.5 * (initial_log_det + step_log_dets.iter().sum::<f64>());
    let log_det_term = log_alpha / sigma;
    let total = log_det_term + vbar + correction;
    if !total.is_finite() {
        return Err(Error::NonFinite {
            step: 0,
            what: "risk cost",
        });
    }
    Ok(RiskCostBreakdown {
        sigma,
        total,
        log_det_term,
        step_log_dets,
        initial_log_det,
        big_v0: big_v,
        v0: v,
        vbar0: vbar,
    })
}

/// Expected value of the expanded cost under the linearized propagation,
/// `E[L] = sum_t lbar_t + lx'mu_t + 1/2 mu'lxx mu + 1/2 tr(lxx Sigma_t)`,
/// with `mu_{t+1} = f^x mu + gap` and `Sigma_{t+1} = f^x Sigma f^x' + Omega`.
pub fn expected_cost(lin: &Linearization, noise: &NoiseModel) -> f64 {
    let n = lin.state_dim();
    let mut mean = Vector::zeros(n);
    let mut cov = noise.initial_cov.matrix().clone();
    let mut total = 0.0;
    for (t, step) in lin.steps.iter().enumerate() {
        let c = &step.cost;
        total += c.l + c.lx.dot(&mean) + 0.5 * mean.dot(&(&c.lxx * &mean)) + 0.5 * (&c.lxx * &cov).trace();
        mean = &step.fx * &mean + &step.gap;
        cov = symmetrized(&step.fx * &cov * step.fx.transpose() + noise.process(t).matrix());
    }
    let term = &lin.terminal;
    total + term.l + term.lx.dot(&mean) + 0.5 * mean.dot(&(&term.lxx * &mean)) + 0.5 * (&term.lxx * &cov).trace()
}

fn risk_neutral_limit(lin: &Linearization, noise: &NoiseModel, sigma: f64) -> RiskCostBreakdown {
    let total = expected_cost(lin, noise);
    let n = lin.state_dim();
    RiskCostBreakdown {
        sigma,
        total,
        log_det_term: 0.0,
        step_log_dets: vec![0.0; lin.horizon()],
        initial_log_det: 0.0,
        big_v0: Mat::zeros(n, n),
        v0: Vector::zeros(n),
        vbar0: total,
    }
}

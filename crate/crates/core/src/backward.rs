//! Risk-sensitive backward pass.
//!
//! The future stress `F(dx) = 1/2 dx'V dx + dx'v + vbar` is propagated from
//! the terminal cost back to `t = 0`. Each step first extremizes over the
//! noisy successor state, which turns `(V, v)` into
//!
//! ```text
//! M = V (I + sigma Omega V)^{-1},   N = (I + sigma V Omega)^{-1} v
//! ```
//!
//! and then minimizes the resulting Q-function over the control deviation,
//! `du = -k - K dx`. At `sigma = 0` this is exactly the Gauss-Newton
//! iLQG/DDP Riccati recursion with feasibility gaps.

use crate::error::{Error, Result};
use crate::linalg::{determinant, lu_solve, lu_solve_vec, spd_log_det, symmetrized, Mat, Vector};
use crate::model::{Covariance, Linearization, NoiseModel};

/// Smallest and largest Levenberg shift tried on a non-convex `Q_uu`.
pub const MU_MIN: f64 = 1e-6;
pub const MU_MAX: f64 = 1e6;

/// Gains and future-stress data per step.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardPassResult {
    pub sigma: f64,
    /// Feedforward `k_t`, `t = 0..T`.
    pub k: Vec<Vector>,
    /// Feedback `K_t`, `t = 0..T`.
    pub big_k: Vec<Mat>,
    /// Value Hessians `V_t`, `t = 0..=T`.
    pub big_v: Vec<Mat>,
    /// Value gradients `v_t`, `t = 0..=T`.
    pub v: Vec<Vector>,
    /// Value constants, `t = 0..=T`.
    pub vbar: Vec<f64>,
    /// Largest regularization added to any `Q_uu` (0 when none was needed).
    pub max_mu: f64,
}

impl BackwardPassResult {
    pub fn max_feedforward_norm(&self) -> f64 {
        self.k.iter().map(|k| k.norm()).fold(0.0, f64::max)
    }
}

/// Result of extremizing `F(x') + (2 sigma)^{-1} |x' - z|^2_{Omega^{-1}}` over the
/// successor `x'`, as a quadratic in `z`: `1/2 z'Mz + z'N + c`.
#[derive(Debug, Clone)]
pub(crate) struct NoiseConvolution {
    pub m: Mat,
    pub n: Vector,
    pub c: f64,
    /// `ln det(I + sigma Omega V)`.
    pub log_det: f64,
}

/// Well-posedness test and log-determinant of `I + sigma Cov V`.
///
/// Uses the symmetric form `I + sigma R V R` with `R = Cov^{1/2}`, whose
/// Cholesky factorization exists exactly when the extremization is a proper
/// minimum of `sigma * stress`.
pub(crate) fn risk_log_det(cov: &Covariance, value_hessian: &Mat, sigma: f64, step: usize) -> Result<f64> {
    if sigma == 0.0 {
        return Ok(0.0);
    }
    let n = value_hessian.nrows();
    let r = cov.sqrt();
    let s = Mat::identity(n, n) + (r * value_hessian * r) * sigma;
    spd_log_det(&s).ok_or_else(|| {
        let a = Mat::identity(n, n) + cov.matrix() * value_hessian * sigma;
        Error::NeuroticBreakdown {
            step,
            det: determinant(&a),
        }
    })
}

pub(crate) fn convolve_noise(
    cov: &Covariance,
    big_v: &Mat,
    v: &Vector,
    sigma: f64,
    step: usize,
) -> Result<NoiseConvolution> {
    if sigma == 0.0 {
        return Ok(NoiseConvolution {
            m: big_v.clone(),
            n: v.clone(),
            c: 0.0,
            log_det: 0.0,
        });
    }
    let log_det = risk_log_det(cov, big_v, sigma, step)?;
    let dim = big_v.nrows();
    let omega = cov.matrix();
    let a = Mat::identity(dim, dim) + omega * big_v * sigma;
    let at = a.transpose();
    let singular = || Error::NeuroticBreakdown {
        step,
        det: determinant(&a),
    };
    // M' = A^{-T} V, N = A^{-T} v, and A^{-1} Omega v for the constant.
    let m = lu_solve(&at, big_v).ok_or_else(singular)?.transpose();
    let n = lu_solve_vec(&at, v).ok_or_else(singular)?;
    let w = lu_solve_vec(&a, &(omega * v)).ok_or_else(singular)?;
    Ok(NoiseConvolution {
        m: symmetrized(m),
        n,
        c: -0.5 * sigma * v.dot(&w),
        log_det,
    })
}

/// Factorizes `Q_uu`, shifting it by `mu I` (mu doubling from [`MU_MIN`])
/// until positive definite. Returns the factor and the shift used.
pub(crate) fn regularized_cholesky(
    quu: &Mat,
    step: usize,
) -> Result<(nalgebra::Cholesky<f64, nalgebra::Dyn>, f64)> {
    let m = quu.nrows();
    let base = symmetrized(quu.clone());
    if let Some(ch) = base.clone().cholesky() {
        return Ok((ch, 0.0));
    }
    let mut mu = MU_MIN;
    while mu <= MU_MAX {
        if let Some(ch) = (&base + Mat::identity(m, m) * mu).cholesky() {
            return Ok((ch, mu));
        }
        mu *= 2.0;
    }
    Err(Error::NonConvexQ {
        step,
        max_mu: MU_MAX,
    })
}

/// Runs the risk-sensitive backward pass over `lin`.
pub fn backward_pass(lin: &Linearization, noise: &NoiseModel, sigma: f64) -> Result<BackwardPassResult> {
    let horizon = lin.horizon();
    let mut big_v = vec![Mat::zeros(0, 0); horizon + 1];
    let mut v = vec![Vector::zeros(0); horizon + 1];
    let mut vbar = vec![0.0; horizon + 1];
    let mut k = vec![Vector::zeros(0); horizon];
    let mut big_k = vec![Mat::zeros(0, 0); horizon];
    let mut max_mu = 0.0f64;

    big_v[horizon] = symmetrized(lin.terminal.lxx.clone());
    v[horizon] = lin.terminal.lx.clone();
    vbar[horizon] = lin.terminal.l;

    for t in (0..horizon).rev() {
        let step = &lin.steps[t];
        let c = &step.cost;
        let conv = convolve_noise(noise.process(t), &big_v[t + 1], &v[t + 1], sigma, t)?;
        let (fx, fu, gap) = (&step.fx, &step.fu, &step.gap);

        let drift = &conv.m * gap + &conv.n;
        let qx = &c.lx + fx.transpose() * &drift;
        let qu = &c.lu + fu.transpose() * &drift;
        let mfx = &conv.m * fx;
        let qxx = &c.lxx + fx.transpose() * &mfx;
        let quu = &c.luu + fu.transpose() * &conv.m * fu;
        let qux = &c.lux + fu.transpose() * &mfx;
        let half_qbar = c.l + vbar[t + 1] + 0.5 * gap.dot(&(&conv.m * gap)) + gap.dot(&conv.n) + conv.c;

        let (chol, mu) = regularized_cholesky(&quu, t)?;
        max_mu = max_mu.max(mu);
        let kt = chol.solve(&qu);
        let big_kt = chol.solve(&qux);

        // Substituting du = -k - K dx into the Q-function.
        let kt_quu = big_kt.transpose() * &quu;
        let vt = &qxx + &kt_quu * &big_kt - big_kt.transpose() * &qux - qux.transpose() * &big_kt;
        let v_grad = &qx + &kt_quu * &kt - big_kt.transpose() * &qu - qux.transpose() * &kt;
        let value = half_qbar - kt.dot(&qu) + 0.5 * kt.dot(&(&quu * &kt));

        if !value.is_finite() || vt.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                step: t,
                what: "value function",
            });
        }
        big_v[t] = symmetrized(vt);
        v[t] = v_grad;
        vbar[t] = value;
        k[t] = kt;
        big_k[t] = big_kt;
    }

    Ok(BackwardPassResult {
        sigma,
        k,
        big_k,
        big_v,
        v,
        vbar,
        max_mu,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{linearize, LinearModel, QuadraticCost, Trajectory};

    fn scalar_problem(horizon: usize) -> (LinearModel, QuadraticCost, NoiseModel) {
        let one = Mat::identity(1, 1);
        let model = LinearModel::time_invariant(one.clone(), one.clone(), one.clone(), horizon);
        let cost = QuadraticCost::regulator(one.clone(), one.clone(), one, horizon);
        let noise = NoiseModel::diagonal(&[0.1], &[0.1], &[0.1], Vector::zeros(1)).unwrap();
        (model, cost, noise)
    }

    fn scalar_lin(x0: f64) -> Linearization {
        let (model, cost, _) = scalar_problem(2);
        let traj = Trajectory::rollout(&model, Vector::from_element(1, x0), vec![Vector::zeros(1); 2]).unwrap();
        linearize(&model, &cost, &traj).unwrap()
    }

    #[test]
    fn sigma_zero_convolution_is_identity() {
        let cov = Covariance::diagonal(&[0.3, 0.2], "process").unwrap();
        let vm = Mat::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let vv = Vector::from_vec(vec![1.0, -1.0]);
        let c = convolve_noise(&cov, &vm, &vv, 0.0, 0).unwrap();
        assert_eq!(c.m, vm);
        assert_eq!(c.n, vv);
        assert_eq!(c.c, 0.0);
    }

    #[test]
    fn convolution_matches_inverse_form() {
        // M = (sigma Omega + V^{-1})^{-1} when V is invertible.
        let cov = Covariance::diagonal(&[0.3, 0.2], "process").unwrap();
        let vm = Mat::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let vv = Vector::from_vec(vec![1.0, -1.0]);
        let sigma = -0.7;
        let c = convolve_noise(&cov, &vm, &vv, sigma, 0).unwrap();
        let direct = (cov.matrix() * sigma + vm.clone().try_inverse().unwrap())
            .try_inverse()
            .unwrap();
        assert!((&c.m - &direct).amax() < 1e-12);
        let n_direct = &vv - &direct * cov.matrix() * &vv * sigma;
        assert!((&c.n - n_direct).amax() < 1e-12);
        // c = -1/2 v'(V + sigma^{-1} Omega^{-1})^{-1} v
        let inner = (&vm + cov.matrix().clone().try_inverse().unwrap() / sigma)
            .try_inverse()
            .unwrap();
        assert!((c.c + 0.5 * vv.dot(&(inner * &vv))).abs() < 1e-12);
    }

    #[test]
    fn scalar_instance_admissible_and_breaks_down() {
        let (_, _, noise) = scalar_problem(2);
        let lin = scalar_lin(1.0);
        assert!(backward_pass(&lin, &noise, -0.5).is_ok());
        match backward_pass(&lin, &noise, -100.0) {
            Err(Error::NeuroticBreakdown { step, det }) => {
                assert_eq!(step, 1);
                assert!((det - (1.0 - 100.0 * 0.1)).abs() < 1e-12);
            }
            other => panic!("expected breakdown, got {other:?}"),
        }
    }

    #[test]
    fn scalar_hand_values() {
        // V_2 = 1, M = 1/0.95, Q_xx = Q_uu = 1 + M, Q_ux = M.
        let (_, _, noise) = scalar_problem(2);
        let bp = backward_pass(&scalar_lin(1.0), &noise, -0.5).unwrap();
        let m = 1.0 / 0.95;
        let expected_k = m / (1.0 + m);
        assert!((bp.big_k[1][(0, 0)] - expected_k).abs() < 1e-14);
        let expected_v = 1.0 + m - m * m / (1.0 + m);
        assert!((bp.big_v[1][(0, 0)] - expected_v).abs() < 1e-14);
    }

    #[test]
    fn non_convex_q_is_reported() {
        let (model, mut cost, noise) = scalar_problem(1);
        cost.r[0] = Mat::from_element(1, 1, -1e9);
        let traj = Trajectory::rollout(&model, Vector::zeros(1), vec![Vector::zeros(1)]).unwrap();
        let lin = linearize(&model, &cost, &traj).unwrap();
        assert!(matches!(
            backward_pass(&lin, &noise, 0.0),
            Err(Error::NonConvexQ { step: 0, .. })
        ));
    }

    #[test]
    fn mild_non_convexity_is_regularized() {
        let (model, mut cost, noise) = scalar_problem(1);
        cost.r[0] = Mat::from_element(1, 1, -1.5);
        let traj = Trajectory::rollout(&model, Vector::zeros(1), vec![Vector::zeros(1)]).unwrap();
        let lin = linearize(&model, &cost, &traj).unwrap();
        let bp = backward_pass(&lin, &noise, 0.0).unwrap();
        assert!(bp.max_mu >= 0.5 && bp.max_mu <= 1.0);
    }
}

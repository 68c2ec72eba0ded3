//! Risk-neutral reference: Gauss-Newton iLQG with feasibility gaps, ranked by
//! the expected quadratic cost, and a covariance-form Kalman filter on the
//! plan's linearization.

use crate::backward::{regularized_cholesky, BackwardPassResult};
use crate::error::{Error, Result};
use crate::linalg::{symmetrized, Mat, Vector};
use crate::model::{CostModel, Linearization, LinearizedStep, NoiseModel, SystemModel, Trajectory};
use crate::planner::{solve_with, PlanArtifacts, PlanOptions};
use crate::filter::Controller;
use crate::risk_cost::expected_cost;

/// Standard DDP/iLQG Riccati recursion (no noise terms).
pub fn ilqg_backward(lin: &Linearization) -> Result<BackwardPassResult> {
    let horizon = lin.horizon();
    let mut big_v = Vec::with_capacity(horizon + 1);
    let mut v = Vec::with_capacity(horizon + 1);
    let mut vbar = Vec::with_capacity(horizon + 1);
    let mut k = Vec::with_capacity(horizon);
    let mut big_k = Vec::with_capacity(horizon);
    let mut max_mu = 0.0f64;

    let mut vxx = symmetrized(lin.terminal.lxx.clone());
    let mut vx = lin.terminal.lx.clone();
    let mut v0 = lin.terminal.l;
    big_v.push(vxx.clone());
    v.push(vx.clone());
    vbar.push(v0);

    for t in (0..horizon).rev() {
        let LinearizedStep { fx, fu, gap, cost: c, .. } = &lin.steps[t];
        // Value gradient at the successor knot, shifted by the defect.
        let vx_next = &vx + &vxx * gap;
        let qx = &c.lx + fx.transpose() * &vx_next;
        let qu = &c.lu + fu.transpose() * &vx_next;
        let qxx = &c.lxx + fx.transpose() * &vxx * fx;
        let qux = &c.lux + fu.transpose() * &vxx * fx;
        let quu = &c.luu + fu.transpose() * &vxx * fu;
        let (chol, mu) = regularized_cholesky(&quu, t)?;
        max_mu = max_mu.max(mu);
        let kt = chol.solve(&qu);
        let big_kt = chol.solve(&qux);

        let q0 = c.l + v0 + gap.dot(&vx) + 0.5 * gap.dot(&(&vxx * gap));
        v0 = q0 - qu.dot(&kt) + 0.5 * kt.dot(&(&quu * &kt));
        vx = &qx - big_kt.transpose() * &qu - qux.transpose() * &kt + big_kt.transpose() * (&quu * &kt);
        vxx = symmetrized(
            &qxx - big_kt.transpose() * &qux - qux.transpose() * &big_kt + big_kt.transpose() * &quu * &big_kt,
        );
        if !v0.is_finite() {
            return Err(Error::NonFinite {
                step: t,
                what: "value function",
            });
        }
        big_v.push(vxx.clone());
        v.push(vx.clone());
        vbar.push(v0);
        k.push(kt);
        big_k.push(big_kt);
    }
    big_v.reverse();
    v.reverse();
    vbar.reverse();
    k.reverse();
    big_k.reverse();
    Ok(BackwardPassResult {
        sigma: 0.0,
        k,
        big_k,
        big_v,
        v,
        vbar,
        max_mu,
    })
}

/// Risk-neutral planner with the same loop, line search and gap handling as
/// [`crate::planner::solve`].
pub fn ilqg_solve(
    model: &dyn SystemModel,
    cost: &dyn CostModel,
    noise: &NoiseModel,
    init: Trajectory,
    opts: &PlanOptions,
) -> Result<PlanArtifacts> {
    solve_with(model, cost, init, opts, 0.0, ilqg_backward, |lin| {
        Ok(expected_cost(lin, noise))
    })
}

/// Mean (deviation from the nominal) and covariance of `x_t` given `y_{1..t}`.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanBelief {
    pub mean: Vector,
    pub cov: Mat,
    pub t: usize,
}

impl KalmanBelief {
    pub fn initial(noise: &NoiseModel) -> Self {
        Self {
            mean: Vector::zeros(noise.initial_mean.len()),
            cov: noise.initial_cov.matrix().clone(),
            t: 0,
        }
    }
}

/// Measurement update of `x_t` with `dy_{t+1}` followed by the prediction to
/// `t + 1`, in covariance form.
pub fn kf_step(
    belief: &KalmanBelief,
    du: &Vector,
    dy: &Vector,
    step: &LinearizedStep,
    noise: &NoiseModel,
) -> Result<KalmanBelief> {
    let t = belief.t;
    let hx = &step.hx;
    let innovation_cov = symmetrized(hx * &belief.cov * hx.transpose() + noise.measurement(t).matrix());
    let chol = innovation_cov.cholesky().ok_or(Error::FilterBreakdown {
        step: t,
        reason: "innovation covariance not positive definite",
    })?;
    // K = P H' S^{-1}
    let gain = chol.solve(&(hx * &belief.cov)).transpose();
    let n = belief.mean.len();
    let updated_mean = &belief.mean + &gain * (dy - hx * &belief.mean);
    // Joseph form keeps the posterior symmetric positive semi-definite.
    let i_kh = Mat::identity(n, n) - &gain * hx;
    let updated_cov = symmetrized(
        &i_kh * &belief.cov * i_kh.transpose() + &gain * noise.measurement(t).matrix() * gain.transpose(),
    );

    let mean = &step.fx * updated_mean + &step.fu * du + &step.gap;
    let cov = symmetrized(&step.fx * updated_cov * step.fx.transpose() + noise.process(t).matrix());
    if cov.clone().cholesky().is_none() {
        return Err(Error::FilterBreakdown {
            step: t,
            reason: "Kalman covariance not positive definite",
        });
    }
    Ok(KalmanBelief { mean, cov, t: t + 1 })
}

/// iLQG feedback on the Kalman mean: `u = u^n - K dx_hat`.
pub struct KalmanController<'a> {
    plan: &'a PlanArtifacts,
    lin: &'a Linearization,
    noise: &'a NoiseModel,
    nominal_obs: Vec<Vector>,
    belief: KalmanBelief,
}

impl<'a> KalmanController<'a> {
    pub fn new(model: &dyn SystemModel, plan: &'a PlanArtifacts, lin: &'a Linearization, noise: &'a NoiseModel) -> Self {
        let nominal_obs = (0..plan.horizon())
            .map(|t| model.observe(t, &plan.trajectory.states[t]))
            .collect();
        Self {
            plan,
            lin,
            noise,
            nominal_obs,
            belief: KalmanBelief::initial(noise),
        }
    }

    pub fn belief(&self) -> &KalmanBelief {
        &self.belief
    }
}

impl Controller for KalmanController<'_> {
    fn control(&mut self) -> Result<Vector> {
        let t = self.belief.t;
        Ok(&self.plan.trajectory.controls[t] - &self.plan.big_k[t] * &self.belief.mean)
    }

    fn observe(&mut self, u: &Vector, y: &Vector) -> Result<()> {
        let t = self.belief.t;
        let du = u - &self.plan.trajectory.controls[t];
        let dy = y - &self.nominal_obs[t];
        self.belief = kf_step(&self.belief, &du, &dy, &self.lin.steps[t], self.noise)?;
        Ok(())
    }
}

//! Run-time stage: past-stress propagation, minimum-stress estimate and the
//! resulting control law.
//!
//! The past stress is kept as the quadratic
//! `sigma P(dx) = 1/2 (dx - dx_hat)' P^{-1} (dx - dx_hat)`; only `dx_hat` and `P`
//! are carried between steps, so memory is constant in the horizon. All
//! quantities are deviations from the plan's nominal trajectory and use the
//! plan's linearization.

use crate::error::{Error, Result};
use crate::linalg::{lu_solve_vec, symmetrized, Mat, Vector};
use crate::model::{Linearization, LinearizedStep, NoiseModel, SystemModel};
use crate::planner::PlanArtifacts;

/// Past-stress center and curvature at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct StressBelief {
    pub mean: Vector,
    pub curvature: Mat,
    pub t: usize,
}

impl StressBelief {
    /// `dx_hat_0 = 0`, `P_0 = chi_0`.
    pub fn initial(noise: &NoiseModel) -> Self {
        let n = noise.initial_mean.len();
        Self {
            mean: Vector::zeros(n),
            curvature: noise.initial_cov.matrix().clone(),
            t: 0,
        }
    }
}

fn spd_inverse(m: &Mat, step: usize, reason: &'static str) -> Result<Mat> {
    symmetrized(m.clone())
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(Error::FilterBreakdown { step, reason })
}

/// Propagates the belief from `t` to `t + 1` given the applied control
/// deviation `du_t` and the measurement deviation `dy_{t+1} = y_{t+1} - h(x^n_t)`.
pub fn filter_step(
    belief: &StressBelief,
    du: &Vector,
    dy: &Vector,
    step: &LinearizedStep,
    noise: &NoiseModel,
    sigma: f64,
) -> Result<StressBelief> {
    let t = belief.t;
    let p_inv = spd_inverse(&belief.curvature, t, "past-stress curvature not positive definite")?;
    let gamma_inv = spd_inverse(noise.measurement(t).matrix(), t, "measurement covariance singular")?;
    let (fx, fu, hx) = (&step.fx, &step.fu, &step.hx);
    let c = &step.cost;

    let info = p_inv + hx.transpose() * &gamma_inv * hx + &c.lxx * sigma;
    let h = spd_inverse(&info, t, "information matrix not positive definite")?;
    let fx_h = fx * &h;
    let gain = &fx_h * hx.transpose() * &gamma_inv;
    let curvature = symmetrized(noise.process(t).matrix() + &fx_h * fx.transpose());

    let innovation = dy - hx * &belief.mean;
    let cost_pull = &c.lxx * &belief.mean + c.lux.transpose() * du + &c.lx;
    let mean = fx * &belief.mean + fu * du + &step.gap + gain * innovation - fx_h * cost_pull * sigma;

    if mean.iter().any(|x| !x.is_finite()) {
        return Err(Error::FilterBreakdown {
            step: t,
            reason: "non-finite estimate",
        });
    }
    Ok(StressBelief {
        mean,
        curvature,
        t: t + 1,
    })
}

/// `dx_check = (I + sigma P V)^{-1} (dx_hat - sigma P v)`, the state deviation
/// extremizing past plus future stress.
pub fn min_stress_estimate(belief: &StressBelief, big_v: &Mat, v: &Vector, sigma: f64) -> Result<Vector> {
    if sigma == 0.0 {
        return Ok(belief.mean.clone());
    }
    let n = belief.mean.len();
    let p = &belief.curvature;
    let a = Mat::identity(n, n) + p * big_v * sigma;
    let rhs = &belief.mean - p * v * sigma;
    lu_solve_vec(&a, &rhs).ok_or(Error::FilterBreakdown {
        step: belief.t,
        reason: "I + sigma P V singular",
    })
}

/// First-order condition of the minimum-stress problem,
/// `P^{-1}(dx_check - dx_hat) + sigma (V dx_check + v)`.
pub fn stationarity_residual(belief: &StressBelief, big_v: &Mat, v: &Vector, sigma: f64, check: &Vector) -> Result<Vector> {
    let p_inv = spd_inverse(&belief.curvature, belief.t, "past-stress curvature not positive definite")?;
    Ok(p_inv * (check - &belief.mean) + (big_v * check + v) * sigma)
}

/// `u* = u^n - K dx_check`.
pub fn control(check: &Vector, nominal: &Vector, big_k: &Mat) -> Vector {
    nominal - big_k * check
}

/// Observation-in, control-out interface used by the closed-loop harness.
pub trait Controller {
    /// Control for the current time step.
    fn control(&mut self) -> Result<Vector>;

    /// Feeds back the applied control `u_t` and the measurement `y_{t+1}`.
    fn observe(&mut self, u: &Vector, y: &Vector) -> Result<()>;
}

/// What to do when the risk-sensitive filter loses positive definiteness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FilterFallback {
    #[default]
    Abort,
    /// Redo the failing step with `sigma = 0`.
    RiskNeutral,
}

/// Stress-filter controller running one session along a stored plan.
pub struct StressController<'a> {
    plan: &'a PlanArtifacts,
    lin: &'a Linearization,
    noise: &'a NoiseModel,
    nominal_obs: Vec<Vector>,
    sigma: f64,
    fallback: FilterFallback,
    belief: StressBelief,
    last_check: Option<Vector>,
    pub fallbacks: usize,
    /// Worst stationarity residual norm seen so far.
    pub max_residual: f64,
    pub track_residual: bool,
}

impl<'a> StressController<'a> {
    pub fn new(
        model: &dyn SystemModel,
        plan: &'a PlanArtifacts,
        lin: &'a Linearization,
        noise: &'a NoiseModel,
        fallback: FilterFallback,
    ) -> Self {
        let nominal_obs = (0..plan.horizon())
            .map(|t| model.observe(t, &plan.trajectory.states[t]))
            .collect();
        Self {
            plan,
            lin,
            noise,
            nominal_obs,
            sigma: plan.sigma,
            fallback,
            belief: StressBelief::initial(noise),
            last_check: None,
            fallbacks: 0,
            max_residual: 0.0,
            track_residual: false,
        }
    }

    pub fn belief(&self) -> &StressBelief {
        &self.belief
    }

    /// Minimum-stress state estimate in absolute coordinates.
    pub fn state_estimate(&self) -> Option<Vector> {
        self.last_check
            .as_ref()
            .map(|dx| &self.plan.trajectory.states[self.belief.t] + dx)
    }
}

impl Controller for StressController<'_> {
    fn control(&mut self) -> Result<Vector> {
        let t = self.belief.t;
        let (big_v, v) = (&self.plan.big_v[t], &self.plan.v[t]);
        let check = min_stress_estimate(&self.belief, big_v, v, self.sigma)?;
        if self.track_residual {
            let r = stationarity_residual(&self.belief, big_v, v, self.sigma, &check)?;
            self.max_residual = self.max_residual.max(r.amax());
        }
        let u = control(&check, &self.plan.trajectory.controls[t], &self.plan.big_k[t]);
        self.last_check = Some(check);
        Ok(u)
    }

    fn observe(&mut self, u: &Vector, y: &Vector) -> Result<()> {
        let t = self.belief.t;
        let du = u - &self.plan.trajectory.controls[t];
        let dy = y - &self.nominal_obs[t];
        let step = &self.lin.steps[t];
        self.belief = match filter_step(&self.belief, &du, &dy, step, self.noise, self.sigma) {
            Ok(b) => b,
            Err(Error::FilterBreakdown { .. }) if self.fallback == FilterFallback::RiskNeutral => {
                self.fallbacks += 1;
                filter_step(&self.belief, &du, &dy, step, self.noise, 0.0)?
            }
            Err(e) => return Err(e),
        };
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CostExpansion, Covariance, CovarianceSchedule};

    fn scalar_step(lx: f64) -> LinearizedStep {
        let one = Mat::identity(1, 1);
        LinearizedStep {
            fx: one.clone(),
            fu: one.clone(),
            hx: one.clone(),
            gap: Vector::zeros(1),
            cost: CostExpansion {
                l: 0.0,
                lx: Vector::from_element(1, lx),
                lu: Vector::zeros(1),
                lxx: one.clone(),
                luu: one,
                lux: Mat::zeros(1, 1),
            },
        }
    }

    fn scalar_noise(meas: f64) -> NoiseModel {
        NoiseModel::new(
            CovarianceSchedule::constant(Covariance::diagonal(&[0.1], "process").unwrap()),
            CovarianceSchedule::constant(Covariance::diagonal(&[meas], "measurement").unwrap()),
            Covariance::diagonal(&[1.0], "initial").unwrap(),
            Vector::zeros(1),
        )
        .unwrap()
    }

    fn b(mean: f64, p: f64) -> StressBelief {
        StressBelief {
            mean: Vector::from_element(1, mean),
            curvature: Mat::from_element(1, 1, p),
            t: 0,
        }
    }

    #[test]
    fn scalar_min_stress_hand_value() {
        let v = Vector::from_element(1, 1.0);
        let check = min_stress_estimate(&b(0.0, 1.0), &Mat::identity(1, 1), &v, -0.5).unwrap();
        assert!((check[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn risk_neutral_estimate_is_the_filter_mean() {
        let belief = b(0.3, 2.0);
        let check = min_stress_estimate(&belief, &Mat::identity(1, 1), &Vector::from_element(1, 5.0), 0.0).unwrap();
        assert_eq!(check, belief.mean);
    }

    #[test]
    fn control_law_arithmetic() {
        let u = control(
            &Vector::from_element(1, 0.25),
            &Vector::from_element(1, 1.0),
            &Mat::from_element(1, 1, 2.0),
        );
        assert_eq!(u[0], 0.5);
        let on_plan = control(&Vector::zeros(1), &Vector::from_element(1, 1.0), &Mat::from_element(1, 1, 2.0));
        assert_eq!(on_plan[0], 1.0);
    }

    #[test]
    fn uninformative_measurement_is_pure_prediction() {
        let noise = scalar_noise(1e14);
        let du = Vector::from_element(1, 0.2);
        let dy = Vector::from_element(1, 5.0);
        let next = filter_step(&b(0.7, 1.0), &du, &dy, &scalar_step(0.0), &noise, 0.0).unwrap();
        assert!((next.mean[0] - 0.9).abs() < 1e-12);
        assert!((next.curvature[(0, 0)] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn risk_aversion_biases_along_cost_gradient() {
        // sigma < 0 pushes the estimate along +lx (pessimistic), sigma > 0 along -lx.
        let noise = scalar_noise(0.5);
        let du = Vector::zeros(1);
        let dy = Vector::from_element(1, 0.1);
        let step = scalar_step(2.0);
        let neutral = filter_step(&b(0.0, 1.0), &du, &dy, &step, &noise, 0.0).unwrap();
        let averse = filter_step(&b(0.0, 1.0), &du, &dy, &step, &noise, -0.5).unwrap();
        let seeking = filter_step(&b(0.0, 1.0), &du, &dy, &step, &noise, 0.5).unwrap();
        assert!(averse.mean[0] > neutral.mean[0]);
        assert!(seeking.mean[0] < neutral.mean[0]);
    }

    #[test]
    fn indefinite_information_is_a_breakdown() {
        let noise = scalar_noise(0.5);
        let z = Vector::zeros(1);
        let err = filter_step(&b(0.0, 1.0), &z, &z, &scalar_step(0.0), &noise, -10.0).unwrap_err();
        assert!(matches!(err, Error::FilterBreakdown { step: 0, .. }));
    }

    #[test]
    fn singular_min_stress_is_a_breakdown() {
        let v = Vector::zeros(1);
        let err = min_stress_estimate(&b(0.0, 1.0), &Mat::identity(1, 1), &v, -1.0).unwrap_err();
        assert!(matches!(err, Error::FilterBreakdown { .. }));
    }
}

//! System models, trajectories, noise description and the gap-aware
//! linearization used by every recursion in the crate.
//!
//! Time indexing follows the discrete process
//!
//! ```text
//! x_{t+1} = f_t(x_t, u_t) + w_{t+1},   w ~ N(0, Omega_{t+1})
//! y_{t+1} = h_t(x_t)      + g_{t+1},   g ~ N(0, Gamma_{t+1})
//! ```
//!
//! so the observation that arrives at `t + 1` measures the state at `t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite_mat, all_finite_vec, psd_sqrt, Mat, Vector};

/// Relative step used by the central-difference fallback.
pub const FD_RELATIVE_STEP: f64 = 1e-6;

/// Discrete-time process and measurement model.
///
/// Implementors that do not override the Jacobians get central finite
/// differences with step `1e-6 * max(1, |x_i|)`.
pub trait SystemModel: Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;

    fn step(&self, t: usize, x: &Vector, u: &Vector) -> Vector;

    fn observe(&self, t: usize, x: &Vector) -> Vector;

    /// `(f^x, f^u)` at `(x, u)`.
    fn dynamics_jacobians(&self, t: usize, x: &Vector, u: &Vector) -> (Mat, Mat) {
        let fx = central_difference(x, |xp| self.step(t, xp, u));
        let fu = central_difference(u, |up| self.step(t, x, up));
        (fx, fu)
    }

    fn observation_jacobian(&self, t: usize, x: &Vector) -> Mat {
        central_difference(x, |xp| self.observe(t, xp))
    }
}

/// Central difference Jacobian of `g` at `at`.
pub fn central_difference(at: &Vector, g: impl Fn(&Vector) -> Vector) -> Mat {
    let out_dim = g(at).len();
    let mut jac = Mat::zeros(out_dim, at.len());
    let mut probe = at.clone();
    for j in 0..at.len() {
        let h = FD_RELATIVE_STEP * at[j].abs().max(1.0);
        probe[j] = at[j] + h;
        let plus = g(&probe);
        probe[j] = at[j] - h;
        let minus = g(&probe);
        probe[j] = at[j];
        jac.set_column(j, &((plus - minus) / (2.0 * h)));
    }
    jac
}

/// Second-order expansion of a running cost at `(x, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostExpansion {
    pub l: f64,
    pub lx: Vector,
    pub lu: Vector,
    pub lxx: Mat,
    pub luu: Mat,
    /// `l^{ux}` (m x n); `l^{xu}` is its transpose.
    pub lux: Mat,
}

/// Second-order expansion of the terminal cost at `x_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalExpansion {
    pub l: f64,
    pub lx: Vector,
    pub lxx: Mat,
}

pub trait CostModel: Sync {
    fn running(&self, t: usize, x: &Vector, u: &Vector) -> CostExpansion;

    fn terminal(&self, x: &Vector) -> TerminalExpansion;

    fn running_value(&self, t: usize, x: &Vector, u: &Vector) -> f64 {
        self.running(t, x, u).l
    }

    fn terminal_value(&self, x: &Vector) -> f64 {
        self.terminal(x).l
    }

    /// Accumulated cost `sum_t l_t(x_t, u_t) + l_T(x_T)` of a state/control sequence.
    fn total(&self, states: &[Vector], controls: &[Vector]) -> f64 {
        let running: f64 = controls
            .iter()
            .enumerate()
            .map(|(t, u)| self.running_value(t, &states[t], u))
            .sum();
        running + self.terminal_value(&states[controls.len()])
    }
}

/// Covariance matrix together with its symmetric square root.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariance {
    matrix: Mat,
    sqrt: Mat,
}

impl Covariance {
    pub fn new(matrix: Mat, name: &'static str) -> Result<Self> {
        let sqrt = psd_sqrt(&matrix).ok_or(Error::InvalidCovariance { name })?;
        Ok(Self { matrix, sqrt })
    }

    pub fn diagonal(diag: &[f64], name: &'static str) -> Result<Self> {
        Self::new(Mat::from_diagonal(&Vector::from_row_slice(diag)), name)
    }

    pub fn matrix(&self) -> &Mat {
        &self.matrix
    }

    pub fn sqrt(&self) -> &Mat {
        &self.sqrt
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Per-step covariances; a single entry is broadcast over the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSchedule(Vec<Covariance>);

impl CovarianceSchedule {
    pub fn constant(cov: Covariance) -> Self {
        Self(vec![cov])
    }

    pub fn per_step(covs: Vec<Covariance>) -> Self {
        assert!(!covs.is_empty(), "empty covariance schedule");
        Self(covs)
    }

    pub fn at(&self, t: usize) -> &Covariance {
        if self.0.len() == 1 {
            &self.0[0]
        } else {
            &self.0[t.min(self.0.len() - 1)]
        }
    }
}

/// Gaussian noise description: process, measurement and initial belief.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    process: CovarianceSchedule,
    measurement: CovarianceSchedule,
    pub initial_cov: Covariance,
    pub initial_mean: Vector,
}

impl NoiseModel {
    pub fn new(
        process: CovarianceSchedule,
        measurement: CovarianceSchedule,
        initial_cov: Covariance,
        initial_mean: Vector,
    ) -> Result<Self> {
        if initial_cov.dim() != initial_mean.len() || process.at(0).dim() != initial_mean.len() {
            return Err(Error::DimensionMismatch {
                context: "noise model".into(),
                expected: initial_mean.len(),
                actual: process.at(0).dim(),
            });
        }
        Ok(Self {
            process,
            measurement,
            initial_cov,
            initial_mean,
        })
    }

    /// Time-invariant diagonal noise.
    pub fn diagonal(
        process: &[f64],
        measurement: &[f64],
        initial: &[f64],
        initial_mean: Vector,
    ) -> Result<Self> {
        Self::new(
            CovarianceSchedule::constant(Covariance::diagonal(process, "process")?),
            CovarianceSchedule::constant(Covariance::diagonal(measurement, "measurement")?),
            Covariance::diagonal(initial, "initial")?,
            initial_mean,
        )
    }

    /// Covariance of the process noise entering `x_{t+1}` (Omega_{t+1}).
    pub fn process(&self, t: usize) -> &Covariance {
        self.process.at(t)
    }

    /// Covariance of the measurement noise on `y_{t+1}` (Gamma_{t+1}).
    pub fn measurement(&self, t: usize) -> &Covariance {
        self.measurement.at(t)
    }
}

/// Nominal states, controls and feasibility gaps `gap_t = f_t(x_t, u_t) - x_{t+1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    #[serde(with = "crate::linalg::serde_mat::vectors")]
    pub states: Vec<Vector>,
    #[serde(with = "crate::linalg::serde_mat::vectors")]
    pub controls: Vec<Vector>,
    #[serde(with = "crate::linalg::serde_mat::vectors")]
    pub gaps: Vec<Vector>,
}

impl Trajectory {
    /// Builds a trajectory from arbitrary knots, computing the gaps.
    pub fn from_knots(
        model: &dyn SystemModel,
        states: Vec<Vector>,
        controls: Vec<Vector>,
    ) -> Result<Self> {
        check_knots(model, &states, &controls)?;
        let gaps = compute_gaps(model, &states, &controls);
        Ok(Self {
            states,
            controls,
            gaps,
        })
    }

    /// Feasible trajectory obtained by rolling `controls` out from `x0`.
    pub fn rollout(model: &dyn SystemModel, x0: Vector, controls: Vec<Vector>) -> Result<Self> {
        let mut states = Vec::with_capacity(controls.len() + 1);
        states.push(x0);
        for (t, u) in controls.iter().enumerate() {
            let next = model.step(t, &states[t], u);
            states.push(next);
        }
        let n = model.state_dim();
        let gaps = vec![Vector::zeros(n); controls.len()];
        check_knots(model, &states, &controls)?;
        Ok(Self {
            states,
            controls,
            gaps,
        })
    }

    /// Number of control steps `T`.
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn max_gap_norm(&self) -> f64 {
        self.gaps.iter().map(|g| g.norm()).fold(0.0, f64::max)
    }
}

fn check_knots(model: &dyn SystemModel, states: &[Vector], controls: &[Vector]) -> Result<()> {
    if states.len() != controls.len() + 1 {
        return Err(Error::DimensionMismatch {
            context: "trajectory length".into(),
            expected: controls.len() + 1,
            actual: states.len(),
        });
    }
    for x in states {
        if x.len() != model.state_dim() {
            return Err(Error::DimensionMismatch {
                context: "state".into(),
                expected: model.state_dim(),
                actual: x.len(),
            });
        }
    }
    for u in controls {
        if u.len() != model.control_dim() {
            return Err(Error::DimensionMismatch {
                context: "control".into(),
                expected: model.control_dim(),
                actual: u.len(),
            });
        }
    }
    Ok(())
}

fn compute_gaps(model: &dyn SystemModel, states: &[Vector], controls: &[Vector]) -> Vec<Vector> {
    controls
        .iter()
        .enumerate()
        .map(|(t, u)| model.step(t, &states[t], u) - &states[t + 1])
        .collect()
}

/// Local model at one knot.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedStep {
    pub fx: Mat,
    pub fu: Mat,
    pub hx: Mat,
    /// `gap_{t+1} = f_t(x_t, u_t) - x_{t+1}`.
    pub gap: Vector,
    pub cost: CostExpansion,
}

impl LinearizedStep {
    pub fn state_dim(&self) -> usize {
        self.fx.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.fu.ncols()
    }
}

/// Linearization of a whole trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub steps: Vec<LinearizedStep>,
    pub terminal: TerminalExpansion,
}

impl Linearization {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn state_dim(&self) -> usize {
        self.terminal.lx.len()
    }
}

/// Linearizes dynamics and measurements and expands the cost to second
/// order along `traj`, recomputing every gap from the current knots.
pub fn linearize(
    model: &dyn SystemModel,
    cost: &dyn CostModel,
    traj: &Trajectory,
) -> Result<Linearization> {
    check_knots(model, &traj.states, &traj.controls)?;
    let mut steps = Vec::with_capacity(traj.horizon());
    for (t, u) in traj.controls.iter().enumerate() {
        let x = &traj.states[t];
        let next = model.step(t, x, u);
        let gap = next - &traj.states[t + 1];
        let (fx, fu) = model.dynamics_jacobians(t, x, u);
        let hx = model.observation_jacobian(t, x);
        if !all_finite_mat(&fx) || !all_finite_mat(&fu) || !all_finite_mat(&hx) {
            return Err(Error::NonFinite {
                step: t,
                what: "Jacobian",
            });
        }
        if !all_finite_vec(&gap) {
            return Err(Error::NonFinite { step: t, what: "gap" });
        }
        let c = cost.running(t, x, u);
        if !c.l.is_finite() || !all_finite_vec(&c.lx) || !all_finite_mat(&c.lxx) {
            return Err(Error::NonFinite {
                step: t,
                what: "cost expansion",
            });
        }
        steps.push(LinearizedStep {
            fx,
            fu,
            hx,
            gap,
            cost: c,
        });
    }
    let terminal = cost.terminal(&traj.states[traj.horizon()]);
    if !terminal.l.is_finite() || !all_finite_vec(&terminal.lx) {
        return Err(Error::NonFinite {
            step: traj.horizon(),
            what: "terminal cost",
        });
    }
    Ok(Linearization { steps, terminal })
}

/// Time-varying linear model `x' = A_t x + B_t u + c_t`, `y = C_t x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: Vec<Mat>,
    pub b: Vec<Mat>,
    pub c: Vec<Vector>,
    pub obs: Vec<Mat>,
}

impl LinearModel {
    pub fn time_invariant(a: Mat, b: Mat, obs: Mat, horizon: usize) -> Self {
        let n = a.nrows();
        Self {
            a: vec![a; horizon],
            b: vec![b; horizon],
            c: vec![Vector::zeros(n); horizon],
            obs: vec![obs; horizon],
        }
    }

    fn idx(&self, t: usize) -> usize {
        t.min(self.a.len() - 1)
    }
}

impl SystemModel for LinearModel {
    fn state_dim(&self) -> usize {
        self.a[0].nrows()
    }

    fn control_dim(&self) -> usize {
        self.b[0].ncols()
    }

    fn obs_dim(&self) -> usize {
        self.obs[0].nrows()
    }

    fn step(&self, t: usize, x: &Vector, u: &Vector) -> Vector {
        let i = self.idx(t);
        &self.a[i] * x + &self.b[i] * u + &self.c[i]
    }

    fn observe(&self, t: usize, x: &Vector) -> Vector {
        &self.obs[self.idx(t)] * x
    }

    fn dynamics_jacobians(&self, t: usize, _x: &Vector, _u: &Vector) -> (Mat, Mat) {
        let i = self.idx(t);
        (self.a[i].clone(), self.b[i].clone())
    }

    fn observation_jacobian(&self, t: usize, _x: &Vector) -> Mat {
        self.obs[self.idx(t)].clone()
    }
}

/// Time-varying quadratic cost
/// `l_t = 1/2 x'Qx + 1/2 u'Ru + u'Sx + q'x + r'u + c`, terminal `1/2 x'Q_T x + q_T'x + c_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost {
    pub q: Vec<Mat>,
    pub r: Vec<Mat>,
    pub s: Vec<Mat>,
    pub qv: Vec<Vector>,
    pub rv: Vec<Vector>,
    pub c: Vec<f64>,
    pub q_terminal: Mat,
    pub qv_terminal: Vector,
    pub c_terminal: f64,
}

impl QuadraticCost {
    /// `1/2 x'Qx + 1/2 u'Ru` at every step, `1/2 x'Q_T x` at the end.
    pub fn regulator(q: Mat, r: Mat, q_terminal: Mat, horizon: usize) -> Self {
        let n = q.nrows();
        let m = r.nrows();
        Self {
            q: vec![q; horizon],
            r: vec![r; horizon],
            s: vec![Mat::zeros(m, n); horizon],
            qv: vec![Vector::zeros(n); horizon],
            rv: vec![Vector::zeros(m); horizon],
            c: vec![0.0; horizon],
            q_terminal,
            qv_terminal: Vector::zeros(n),
            c_terminal: 0.0,
        }
    }
}

impl CostModel for QuadraticCost {
    fn running(&self, t: usize, x: &Vector, u: &Vector) -> CostExpansion {
        let (q, r, s) = (&self.q[t], &self.r[t], &self.s[t]);
        let qx = q * x;
        let ru = r * u;
        let sx = s * x;
        let l = 0.5 * x.dot(&qx) + 0.5 * u.dot(&ru) + u.dot(&sx) + self.qv[t].dot(x)
            + self.rv[t].dot(u)
            + self.c[t];
        CostExpansion {
            l,
            lx: qx + s.transpose() * u + &self.qv[t],
            lu: ru + sx + &self.rv[t],
            lxx: q.clone(),
            luu: r.clone(),
            lux: s.clone(),
        }
    }

    fn terminal(&self, x: &Vector) -> TerminalExpansion {
        let qx = &self.q_terminal * x;
        TerminalExpansion {
            l: 0.5 * x.dot(&qx) + self.qv_terminal.dot(x) + self.c_terminal,
            lx: qx + &self.qv_terminal,
            lxx: self.q_terminal.clone(),
        }
    }
}

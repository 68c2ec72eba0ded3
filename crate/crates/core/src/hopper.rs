//! One-dimensional pneumatic hopper.
//!
//! State `[q_h, q_f, v_h, v_f]`: hip height above ground, foot position
//! relative to the hip, and their velocities. The control is the foot
//! acceleration relative to the hip. The hip has mass `m` and is pushed by
//! the ground reaction acting on a massless foot.
//!
//! Planning uses a C1 relaxed spring contact integrated at `dt`; simulation
//! uses a stiff visco-elastic contact integrated with `substeps` semi-implicit
//! Euler steps per control interval.

use serde::{Deserialize, Serialize};

use crate::linalg::{Mat, Vector};
use crate::model::{CostExpansion, CostModel, SystemModel, TerminalExpansion};

pub const STATE_DIM: usize = 4;
pub const QH: usize = 0;
pub const QF: usize = 1;
pub const VH: usize = 2;
pub const VF: usize = 3;

/// How ground penetration is computed from the state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ContactFrame {
    /// Foot height is `q_h + q_f`; penetration `e = -(q_h + q_f)`.
    #[default]
    AbsoluteFoot,
    /// `e = q_f - q_h`, i.e. `q_f` measured downwards from the hip.
    Printed,
}

/// Sign of the rate term of the stiff contact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DampingSign {
    /// `k e + b de/dt`: the rate term opposes penetration and dissipates energy.
    #[default]
    Dissipative,
    /// `k e - b de/dt`, which feeds energy into the contact.
    Printed,
}

impl DampingSign {
    pub fn factor(self) -> f64 {
        match self {
            Self::Dissipative => 1.0,
            Self::Printed => -1.0,
        }
    }
}

impl ContactFrame {
    /// Penetration depth, positive when the foot is below ground.
    pub fn penetration(self, x: &Vector) -> f64 {
        match self {
            Self::AbsoluteFoot => -(x[QH] + x[QF]),
            Self::Printed => x[QF] - x[QH],
        }
    }

    pub fn penetration_rate(self, x: &Vector) -> f64 {
        match self {
            Self::AbsoluteFoot => -(x[VH] + x[VF]),
            Self::Printed => x[VF] - x[VH],
        }
    }

    /// `(de/dq_h, de/dq_f)`.
    pub fn gradient(self) -> (f64, f64) {
        match self {
            Self::AbsoluteFoot => (-1.0, -1.0),
            Self::Printed => (-1.0, 1.0),
        }
    }

    /// Foot height above ground.
    pub fn foot_height(self, x: &Vector) -> f64 {
        -self.penetration(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContactParams {
    pub planning_stiffness: f64,
    pub smoothing: f64,
    pub sim_stiffness: f64,
    pub sim_damping: f64,
    pub frame: ContactFrame,
    pub damping_sign: DampingSign,
}

impl Default for ContactParams {
    fn default() -> Self {
        Self {
            planning_stiffness: 500.0,
            smoothing: 0.01,
            sim_stiffness: 1e5,
            sim_damping: 300.0,
            frame: ContactFrame::AbsoluteFoot,
            damping_sign: DampingSign::Dissipative,
        }
    }
}

/// Relaxed contact `lambda(e)`: zero in flight, quadratic over `[0, alpha)`,
/// then linear with slope `k`.
pub fn relaxed_contact_force(e: f64, stiffness: f64, smoothing: f64) -> f64 {
    if e < 0.0 {
        0.0
    } else if e < smoothing {
        stiffness / (2.0 * smoothing) * e * e
    } else {
        stiffness * e - 0.5 * stiffness * smoothing
    }
}

pub fn relaxed_contact_slope(e: f64, stiffness: f64, smoothing: f64) -> f64 {
    if e < 0.0 {
        0.0
    } else if e < smoothing {
        stiffness * e / smoothing
    } else {
        stiffness
    }
}

/// Visco-elastic contact `max(0, k e + b de/dt)` while penetrating; pass a
/// negative `damping` for the energy-injecting sign.
pub fn stiff_contact_force(e: f64, e_rate: f64, stiffness: f64, damping: f64) -> f64 {
    if e > 0.0 {
        (stiffness * e + damping * e_rate).max(0.0)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HopperParams {
    pub dt: f64,
    pub mass: f64,
    pub gravity: f64,
    pub substeps: usize,
    pub divergence_limit: f64,
    pub contact: ContactParams,
}

impl Default for HopperParams {
    fn default() -> Self {
        Self {
            dt: 0.01,
            mass: 1.0,
            gravity: 9.81,
            substeps: 10,
            divergence_limit: 100.0,
            contact: ContactParams::default(),
        }
    }
}

/// Semi-implicit Euler step with hip acceleration `-g + force / m`.
fn integrate(p: &HopperParams, x: &Vector, u: f64, force: f64, dt: f64) -> Vector {
    let vh = x[VH] + dt * (-p.gravity + force / p.mass);
    let vf = x[VF] + dt * u;
    Vector::from_vec(vec![x[QH] + dt * vh, x[QF] + dt * vf, vh, vf])
}

/// Planning model: relaxed contact, one step per `dt`, full-state measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct HopperModel {
    pub params: HopperParams,
}

impl HopperModel {
    pub fn new(params: HopperParams) -> Self {
        Self { params }
    }

    pub fn contact_force(&self, x: &Vector) -> f64 {
        let c = &self.params.contact;
        relaxed_contact_force(c.frame.penetration(x), c.planning_stiffness, c.smoothing)
    }
}

impl SystemModel for HopperModel {
    fn state_dim(&self) -> usize {
        STATE_DIM
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn obs_dim(&self) -> usize {
        STATE_DIM
    }

    fn step(&self, _t: usize, x: &Vector, u: &Vector) -> Vector {
        integrate(&self.params, x, u[0], self.contact_force(x), self.params.dt)
    }

    fn observe(&self, _t: usize, x: &Vector) -> Vector {
        x.clone()
    }

    fn dynamics_jacobians(&self, _t: usize, x: &Vector, _u: &Vector) -> (Mat, Mat) {
        let p = &self.params;
        let c = &p.contact;
        let dt = p.dt;
        let slope = relaxed_contact_slope(c.frame.penetration(x), c.planning_stiffness, c.smoothing);
        let (de_dqh, de_dqf) = c.frame.gradient();
        // d v_h' / d q = dt * slope * de/dq / m
        let dvh_dqh = dt * slope * de_dqh / p.mass;
        let dvh_dqf = dt * slope * de_dqf / p.mass;
        #[rustfmt::skip]
        let fx = Mat::from_row_slice(4, 4, &[
            1.0 + dt * dvh_dqh, dt * dvh_dqf, dt, 0.0,
            0.0,                1.0,          0.0, dt,
            dvh_dqh,            dvh_dqf,      1.0, 0.0,
            0.0,                0.0,          0.0, 1.0,
        ]);
        let fu = Mat::from_column_slice(4, 1, &[0.0, dt * dt, 0.0, dt]);
        (fx, fu)
    }

    fn observation_jacobian(&self, _t: usize, _x: &Vector) -> Mat {
        Mat::identity(STATE_DIM, STATE_DIM)
    }
}

/// Outcome of one simulated control interval.
#[derive(Debug, Clone, PartialEq)]
pub struct SimStep {
    pub state: Vector,
    /// Contact force averaged over the substeps.
    pub force: f64,
    pub diverged: bool,
}

/// Stiff-contact simulator used for closed-loop rollouts.
#[derive(Debug, Clone, PartialEq)]
pub struct HopperSimulator {
    pub params: HopperParams,
}

impl HopperSimulator {
    pub fn new(params: HopperParams) -> Self {
        Self { params }
    }

    pub fn contact_force(&self, x: &Vector) -> f64 {
        let c = &self.params.contact;
        stiff_contact_force(
            c.frame.penetration(x),
            c.frame.penetration_rate(x),
            c.sim_stiffness,
            c.damping_sign.factor() * c.sim_damping,
        )
    }

    /// Integrates one control interval with zero-order-hold `u`, then adds
    /// the process noise draw `w`.
    pub fn simulate_step(&self, x: &Vector, u: f64, w: &Vector) -> SimStep {
        let p = &self.params;
        let h = p.dt / p.substeps as f64;
        let mut state = x.clone();
        let mut impulse = 0.0;
        for _ in 0..p.substeps {
            let force = self.contact_force(&state);
            impulse += force;
            state = integrate(p, &state, u, force, h);
        }
        state += w;
        let diverged = !state.iter().all(|v| v.is_finite()) || state[QH].abs() > p.divergence_limit;
        SimStep {
            state,
            force: impulse / p.substeps as f64,
            diverged,
        }
    }
}

/// Weights and targets of the stance / jump / terminal cost schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseCostParams {
    pub stance_weights: [f64; 4],
    pub jump_weights: [f64; 4],
    pub terminal_weights: [f64; 4],
    pub control_weight: f64,
    pub stance_target: [f64; 4],
    pub jump_target: [f64; 4],
}

impl Default for PhaseCostParams {
    fn default() -> Self {
        Self {
            stance_weights: [10.0, 1.0, 1e-4, 0.0],
            jump_weights: [10.0, 1e-2, 1e-1, 0.0],
            terminal_weights: [10.0, 10.0, 1.0, 1.0],
            control_weight: 1e-3,
            stance_target: [0.5, 0.0, 0.0, 0.0],
            jump_target: [2.0, 0.0, 0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Stance,
    Jump,
    Terminal,
}

/// `l_t = 1/2 (x - x_des)' W (x - x_des) + 1/2 r u^2` with the phase chosen by `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseCost {
    pub params: PhaseCostParams,
    pub horizon: usize,
}

impl PhaseCost {
    pub fn new(params: PhaseCostParams, horizon: usize) -> Self {
        Self { params, horizon }
    }

    pub fn phase(&self, t: usize) -> Phase {
        if t >= self.horizon {
            Phase::Terminal
        } else if t == self.horizon / 2 {
            Phase::Jump
        } else {
            Phase::Stance
        }
    }

    fn weights_and_target(&self, phase: Phase) -> (&[f64; 4], &[f64; 4]) {
        let p = &self.params;
        match phase {
            Phase::Stance => (&p.stance_weights, &p.stance_target),
            Phase::Jump => (&p.jump_weights, &p.jump_target),
            Phase::Terminal => (&p.terminal_weights, &p.stance_target),
        }
    }

    fn state_terms(&self, phase: Phase, x: &Vector) -> (f64, Vector, Mat) {
        let (w, target) = self.weights_and_target(phase);
        let w = Vector::from_row_slice(w);
        let err = x - Vector::from_row_slice(target);
        let grad = w.component_mul(&err);
        (0.5 * err.dot(&grad), grad, Mat::from_diagonal(&w))
    }
}

impl CostModel for PhaseCost {
    fn running(&self, t: usize, x: &Vector, u: &Vector) -> CostExpansion {
        let (l, lx, lxx) = self.state_terms(self.phase(t), x);
        let r = self.params.control_weight;
        CostExpansion {
            l: l + 0.5 * r * u.norm_squared(),
            lx,
            lu: u * r,
            lxx,
            luu: Mat::identity(u.len(), u.len()) * r,
            lux: Mat::zeros(u.len(), x.len()),
        }
    }

    fn terminal(&self, x: &Vector) -> TerminalExpansion {
        let (l, lx, lxx) = self.state_terms(Phase::Terminal, x);
        TerminalExpansion { l, lx, lxx }
    }
}

/// Static resting state of the planning model with the hip at `hip_height`.
pub fn planning_rest_state(params: &HopperParams, hip_height: f64) -> Vector {
    let c = &params.contact;
    let weight = params.mass * params.gravity;
    // Linear branch: k e - k alpha / 2 = m g.
    let mut e = weight / c.planning_stiffness + 0.5 * c.smoothing;
    if e < c.smoothing {
        e = (2.0 * c.smoothing * weight / c.planning_stiffness).sqrt();
    }
    let qf = match c.frame {
        ContactFrame::AbsoluteFoot => -hip_height - e,
        ContactFrame::Printed => hip_height + e,
    };
    Vector::from_vec(vec![hip_height, qf, 0.0, 0.0])
}

/// `x` with the hip moved so the stiff contact carries the weight at rest,
/// keeping the foot extension.
pub fn simulator_rest_state(params: &HopperParams, x: &Vector) -> Vector {
    let e = params.mass * params.gravity / params.contact.sim_stiffness;
    let qh = match params.contact.frame {
        ContactFrame::AbsoluteFoot => -x[QF] - e,
        ContactFrame::Printed => x[QF] - e,
    };
    Vector::from_vec(vec![qh, x[QF], 0.0, 0.0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::central_difference;

    #[test]
    fn relaxed_contact_values() {
        assert_eq!(relaxed_contact_force(0.0, 500.0, 0.01), 0.0);
        assert_eq!(relaxed_contact_force(-0.3, 500.0, 0.01), 0.0);
        let at_knot = relaxed_contact_force(0.01, 500.0, 0.01);
        assert!((at_knot - 2.5).abs() < 1e-12);
        let quad_side = 500.0 / 0.02 * 0.01f64.powi(2);
        assert!((quad_side - 2.5).abs() < 1e-12);
        assert!((relaxed_contact_force(0.02, 500.0, 0.01) - 7.5).abs() < 1e-12);
    }

    #[test]
    fn relaxed_contact_is_c1() {
        for knot in [0.0, 0.01] {
            let h = 1e-12;
            let left = relaxed_contact_slope(knot - h, 500.0, 0.01);
            let right = relaxed_contact_slope(knot + h, 500.0, 0.01);
            assert!((left - right).abs() < 1e-6, "slope jump at {knot}");
            let f_left = relaxed_contact_force(knot - h, 500.0, 0.01);
            let f_right = relaxed_contact_force(knot + h, 500.0, 0.01);
            assert!((f_left - f_right).abs() < 1e-6);
        }
    }

    #[test]
    fn stiff_contact_static_and_adhesion_free() {
        assert_eq!(stiff_contact_force(0.001, 0.0, 1e5, 300.0), 100.0);
        assert_eq!(stiff_contact_force(0.001, -10.0, 1e5, 300.0), 0.0);
        assert_eq!(stiff_contact_force(0.001, 10.0, 1e5, -300.0), 0.0);
        assert_eq!(stiff_contact_force(0.001, 0.1, 1e5, 300.0), 130.0);
        assert_eq!(stiff_contact_force(-0.001, -10.0, 1e5, 300.0), 0.0);
    }

    #[test]
    fn ballistic_flight() {
        let p = HopperParams::default();
        let sim = HopperSimulator::new(p.clone());
        let x = Vector::from_vec(vec![1.0, -0.2, 0.5, 0.0]);
        let out = sim.simulate_step(&x, 0.0, &Vector::zeros(4));
        assert_eq!(out.force, 0.0);
        assert!((out.state[VH] - (0.5 - p.gravity * p.dt)).abs() < 1e-12);
        let model = HopperModel::new(p.clone());
        let planned = model.step(0, &x, &Vector::zeros(1));
        assert!((planned[VH] - (0.5 - p.gravity * p.dt)).abs() < 1e-12);
    }

    #[test]
    fn phase_schedule_and_values() {
        let cost = PhaseCost::new(PhaseCostParams::default(), 100);
        assert_eq!(cost.phase(50), Phase::Jump);
        assert_eq!(cost.phase(49), Phase::Stance);
        assert_eq!(cost.phase(0), Phase::Stance);
        assert_eq!(cost.phase(100), Phase::Terminal);
        let u0 = Vector::zeros(1);
        let rest = Vector::from_vec(vec![0.5, 0.0, 0.0, 0.0]);
        assert_eq!(cost.running_value(3, &rest, &u0), 0.0);
        let high = Vector::from_vec(vec![1.5, 0.0, 0.0, 0.0]);
        assert!((cost.running_value(3, &high, &u0) - 5.0).abs() < 1e-12);
        let jump = Vector::from_vec(vec![2.0, 0.0, 0.0, 0.0]);
        assert_eq!(cost.running_value(50, &jump, &u0), 0.0);
        assert_eq!(cost.terminal_value(&rest), 0.0);
    }

    #[test]
    fn cost_expansion_matches_finite_differences() {
        let cost = PhaseCost::new(PhaseCostParams::default(), 10);
        let x = Vector::from_vec(vec![0.7, -0.4, 1.2, -0.3]);
        let u = Vector::from_element(1, 3.0);
        for t in [0, 5, 9] {
            let e = cost.running(t, &x, &u);
            let g = central_difference(&x, |xp| Vector::from_element(1, cost.running_value(t, xp, &u)));
            assert!((g.transpose() - &e.lx).amax() < 1e-7);
            let gu = central_difference(&u, |up| Vector::from_element(1, cost.running_value(t, &x, up)));
            assert!((gu[(0, 0)] - e.lu[0]).abs() < 1e-7);
        }
    }

    #[test]
    fn rest_state_is_static_for_planning_model() {
        let p = HopperParams::default();
        let model = HopperModel::new(p.clone());
        for frame in [ContactFrame::AbsoluteFoot, ContactFrame::Printed] {
            let mut params = p.clone();
            params.contact.frame = frame;
            let model_f = HopperModel::new(params.clone());
            let x = planning_rest_state(&params, 0.5);
            let next = model_f.step(0, &x, &Vector::zeros(1));
            assert!((&next - &x).amax() < 1e-12, "{frame:?}");
        }
        let _ = model;
    }
}

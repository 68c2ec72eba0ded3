//! Independent references used to validate the recursions:
//!
//! * the Gaussian integral of an exponentiated quadratic form, analytically
//!   and by adaptive quadrature;
//! * a Monte-Carlo estimate of `-sigma^{-1} ln E[exp(-sigma L)]`;
//! * a dense batch elimination of the total stress for linear-quadratic
//!   problems, which never uses the backward recursion formulas;
//! * the textbook finite-horizon LQR Riccati recursion.

use std::ops::AddAssign;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{determinant, symmetrized, Mat, Vector};
use crate::model::{CostModel, Linearization, NoiseModel, SystemModel};

/// `Q(x, y) = 1/2 [1; x; y]' [[qbar, qx', qy'], [qx, Qxx, Qxy], [qy, Qyx, Qyy]] [1; x; y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticForm {
    pub qbar: f64,
    pub qx: Vector,
    pub qy: Vector,
    pub qxx: Mat,
    pub qxy: Mat,
    pub qyy: Mat,
}

impl QuadraticForm {
    pub fn eval(&self, x: &Vector, y: &Vector) -> f64 {
        0.5 * self.qbar
            + self.qx.dot(x)
            + self.qy.dot(y)
            + 0.5 * x.dot(&(&self.qxx * x))
            + x.dot(&(&self.qxy * y))
            + 0.5 * y.dot(&(&self.qyy * y))
    }

    pub fn gradient_x(&self, x: &Vector, y: &Vector) -> Vector {
        &self.qxx * x + &self.qxy * y + &self.qx
    }

    /// `x_hat = -Qxx^{-1} (Qxy y + qx)`.
    pub fn argmin_x(&self, y: &Vector) -> Result<Vector> {
        let chol = symmetrized(self.qxx.clone())
            .cholesky()
            .ok_or(Error::InvalidCovariance { name: "Qxx" })?;
        Ok(-chol.solve(&(&self.qxy * y + &self.qx)))
    }

    /// `|2 pi Qxx^{-1}|^{1/2} exp(-Q(x_hat, y))`.
    pub fn analytic_integral(&self, y: &Vector) -> Result<f64> {
        let x_hat = self.argmin_x(y)?;
        let n = self.qxx.nrows() as f64;
        let det = determinant(&self.qxx);
        Ok((2.0 * std::f64::consts::PI).powf(0.5 * n) / det.sqrt() * (-self.eval(&x_hat, y)).exp())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianIntegralCheck {
    pub analytic: f64,
    pub quadrature: f64,
}

impl GaussianIntegralCheck {
    pub fn relative_error(&self) -> f64 {
        (self.analytic - self.quadrature).abs() / self.analytic.abs()
    }
}

/// Compares the closed form of `int exp(-Q(x, y)) dx` with adaptive
/// quadrature; `x` must be one- or two-dimensional.
pub fn gaussian_integral_check(q: &QuadraticForm, y: &Vector) -> Result<GaussianIntegralCheck> {
    let dim = q.qxx.nrows();
    if !(1..=2).contains(&dim) {
        return Err(Error::Config(format!("quadrature supports dim 1 or 2, got {dim}")));
    }
    let analytic = q.analytic_integral(y)?;
    // Box holding all but ~exp(-70) of the mass.
    let lambda_min = symmetrized(q.qxx.clone()).symmetric_eigenvalues().min();
    let center = q.argmin_x(y)?;
    let radius = center.amax() + 12.0 / lambda_min.sqrt();
    let f = |x: &Vector| (-q.eval(x, y)).exp();
    let quadrature = if dim == 1 {
        adaptive_gauss_kronrod(&|s| f(&Vector::from_element(1, s)), -radius, radius, QUAD_ABS_TOL, QUAD_REL_TOL)
    } else {
        adaptive_gauss_kronrod(
            &|s| {
                adaptive_gauss_kronrod(
                    &|r| f(&Vector::from_vec(vec![s, r])),
                    -radius,
                    radius,
                    QUAD_ABS_TOL * 1e-2,
                    QUAD_REL_TOL * 1e-2,
                )
            },
            -radius,
            radius,
            QUAD_ABS_TOL,
            QUAD_REL_TOL,
        )
    };
    Ok(GaussianIntegralCheck { analytic, quadrature })
}

const QUAD_ABS_TOL: f64 = 1e-9;
const QUAD_REL_TOL: f64 = 1e-11;
const MAX_BISECTIONS: usize = 40;

const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const KRONROD_WEIGHTS: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
// Gauss weights for the odd-indexed Kronrod nodes (and the center).
const GAUSS_WEIGHTS: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let fc = f(mid);
    let mut kronrod = KRONROD_WEIGHTS[7] * fc;
    let mut gauss = GAUSS_WEIGHTS[3] * fc;
    for i in 0..7 {
        let dx = half * GK_NODES[i];
        let pair = f(mid - dx) + f(mid + dx);
        kronrod += KRONROD_WEIGHTS[i] * pair;
        if i % 2 == 1 {
            gauss += GAUSS_WEIGHTS[i / 2] * pair;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

/// Recursive-bisection Gauss-Kronrod (7/15) quadrature on `[a, b]`.
pub fn adaptive_gauss_kronrod(f: &dyn Fn(f64) -> f64, a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> f64 {
    fn recurse(f: &dyn Fn(f64) -> f64, a: f64, b: f64, whole: (f64, f64), abs_tol: f64, rel_tol: f64, depth: usize) -> f64 {
        let (value, err) = whole;
        if err <= abs_tol.max(rel_tol * value.abs()) || depth >= MAX_BISECTIONS {
            return value;
        }
        let mid = 0.5 * (a + b);
        let left = gk15(f, a, mid);
        let right = gk15(f, mid, b);
        recurse(f, a, mid, left, 0.5 * abs_tol, rel_tol, depth + 1)
            + recurse(f, mid, b, right, 0.5 * abs_tol, rel_tol, depth + 1)
    }
    // Force a few splits so narrow peaks in a wide box are resolved.
    let pieces = 16;
    let h = (b - a) / pieces as f64;
    (0..pieces)
        .map(|i| {
            let lo = a + h * i as f64;
            let hi = lo + h;
            recurse(f, lo, hi, gk15(f, lo, hi), abs_tol / pieces as f64, rel_tol, 0)
        })
        .sum()
}

/// Monte-Carlo estimate with its delta-method standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub samples: usize,
}

const MC_CHUNK: usize = 4096;

/// Samples the accumulated cost of the open-loop control sequence `controls`
/// under process noise and a random initial state, and returns
/// `-sigma^{-1} ln(mean exp(-sigma L))` (the sample mean of `L` at `sigma = 0`).
pub fn mc_risk_cost(
    model: &dyn SystemModel,
    cost: &dyn CostModel,
    noise: &NoiseModel,
    controls: &[Vector],
    sigma: f64,
    n_samples: usize,
    seed: u64,
) -> McEstimate {
    let n = model.state_dim();
    let chunks = n_samples.div_ceil(MC_CHUNK);
    let costs: Vec<f64> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk as u64);
            let count = MC_CHUNK.min(n_samples - chunk * MC_CHUNK);
            let mut out = Vec::with_capacity(count);
            let mut draw = move |r: &Mat| -> Vector {
                let z = Vector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
                r * z
            };
            for _ in 0..count {
                let mut x = &noise.initial_mean + draw(noise.initial_cov.sqrt());
                let mut total = 0.0;
                for (t, u) in controls.iter().enumerate() {
                    total += cost.running_value(t, &x, u);
                    x = model.step(t, &x, u) + draw(noise.process(t).sqrt());
                }
                total += cost.terminal_value(&x);
                out.push(total);
            }
            out
        })
        .collect();
    summarize_risk_samples(&costs, sigma)
}

/// Log-sum-exp evaluation of `-sigma^{-1} ln(mean exp(-sigma L_i))`.
pub fn summarize_risk_samples(costs: &[f64], sigma: f64) -> McEstimate {
    let count = costs.len() as f64;
    if sigma == 0.0 {
        let mean = costs.iter().sum::<f64>() / count;
        let var = costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (count - 1.0);
        return McEstimate {
            estimate: mean,
            std_error: (var / count).sqrt(),
            samples: costs.len(),
        };
    }
    let shift = costs.iter().map(|c| -sigma * c).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = costs.iter().map(|c| (-sigma * c - shift).exp()).collect();
    let mean = weights.iter().sum::<f64>() / count;
    let var = weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (count - 1.0);
    McEstimate {
        estimate: -(mean.ln() + shift) / sigma,
        std_error: (var / count).sqrt() / (mean * sigma.abs()),
        samples: costs.len(),
    }
}

/// Dense elimination of the total stress of a linear-quadratic problem.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStressSolution {
    pub k: Vec<Vector>,
    pub big_k: Vec<Mat>,
    pub big_v: Vec<Mat>,
    pub v: Vec<Vector>,
    pub vbar: Vec<f64>,
    /// `det(sigma Omega d^2S/dx_{t+1}^2)` for `t = 0..T`, which equals
    /// `det(I + sigma Omega V_{t+1})`.
    pub successor_dets: Vec<f64>,
    /// Every extremization over a state was a proper minimum of `sigma S` and
    /// every control minimization was convex.
    pub well_posed: bool,
}

/// Quadratic `1/2 w'H w + g'w + c` over stacked decision variables.
struct StackedQuadratic {
    h: Mat,
    g: Vector,
    c: f64,
}

impl StackedQuadratic {
    fn dim(&self) -> usize {
        self.g.len()
    }

    /// Schur-complement elimination of the trailing `elim` variables.
    fn eliminate_tail(&mut self, elim: usize) -> Result<()> {
        let keep = self.dim() - elim;
        let hee = self.h.view((keep, keep), (elim, elim)).clone_owned();
        let hke = self.h.view((0, keep), (keep, elim)).clone_owned();
        let ge = self.g.rows(keep, elim).clone_owned();
        let inv = hee
            .try_inverse()
            .ok_or_else(|| Error::Config("singular stress block".into()))?;
        self.h = symmetrized(self.h.view((0, 0), (keep, keep)) - &hke * &inv * hke.transpose());
        self.g = self.g.rows(0, keep) - &hke * (&inv * &ge);
        self.c -= 0.5 * ge.dot(&(&inv * &ge));
        Ok(())
    }

    fn tail_block(&self, size: usize) -> Mat {
        let off = self.dim() - size;
        self.h.view((off, off), (size, size)).clone_owned()
    }
}

/// Stress of steps `t0..T` over `[dx_t0, du_t0, dx_t0+1, ..., dx_T]`:
/// costs plus `sigma^{-1}/2 r'Omega^{-1} r` with `r = dx_{t+1} - fx dx_t - fu du_t - gap`.
fn assemble_stress(lin: &Linearization, noise: &NoiseModel, sigma: f64, t0: usize) -> Result<StackedQuadratic> {
    let n = lin.state_dim();
    let m = lin.steps.first().map_or(0, |s| s.control_dim());
    let steps = &lin.steps[t0..];
    let dim = steps.len() * (n + m) + n;
    let mut q = StackedQuadratic {
        h: Mat::zeros(dim, dim),
        g: Vector::zeros(dim),
        c: 0.0,
    };
    for (i, step) in steps.iter().enumerate() {
        let xo = i * (n + m);
        let uo = xo + n;
        let e = &step.cost;
        q.h.view_mut((xo, xo), (n, n)).add_assign(&e.lxx);
        q.h.view_mut((uo, uo), (m, m)).add_assign(&e.luu);
        q.h.view_mut((uo, xo), (m, n)).add_assign(&e.lux);
        q.h.view_mut((xo, uo), (n, m)).add_assign(&e.lux.transpose());
        q.g.rows_mut(xo, n).add_assign(&e.lx);
        q.g.rows_mut(uo, m).add_assign(&e.lu);
        q.c += e.l;

        let omega_inv = noise
            .process(t0 + i)
            .matrix()
            .clone()
            .try_inverse()
            .ok_or(Error::InvalidCovariance { name: "process" })?
            / sigma;
        let mut jac = Mat::zeros(n, dim);
        jac.view_mut((0, xo), (n, n)).copy_from(&(-&step.fx));
        jac.view_mut((0, uo), (n, m)).copy_from(&(-&step.fu));
        jac.view_mut((0, xo + n + m), (n, n)).copy_from(&Mat::identity(n, n));
        q.h += jac.transpose() * &omega_inv * &jac;
        q.g -= jac.transpose() * (&omega_inv * &step.gap);
        q.c += 0.5 * step.gap.dot(&(&omega_inv * &step.gap));
    }
    let xo = dim - n;
    q.h.view_mut((xo, xo), (n, n)).add_assign(&lin.terminal.lxx);
    q.g.rows_mut(xo, n).add_assign(&lin.terminal.lx);
    q.c += lin.terminal.l;
    Ok(q)
}

/// Builds the total stress of every tail problem `t..T` as one dense
/// quadratic and extremizes it by Schur complements, without using the
/// backward recursion.
///
/// `sigma` must be non-zero and every process covariance invertible.
pub fn batch_stress_oracle(lin: &Linearization, noise: &NoiseModel, sigma: f64) -> Result<BatchStressSolution> {
    assert!(sigma != 0.0, "batch stress needs a non-zero sensitivity");
    let horizon = lin.horizon();
    let n = lin.state_dim();
    let m = lin.steps.first().map_or(0, |s| s.control_dim());

    let mut sol = BatchStressSolution {
        k: vec![Vector::zeros(m); horizon],
        big_k: vec![Mat::zeros(m, n); horizon],
        big_v: vec![Mat::zeros(n, n); horizon + 1],
        v: vec![Vector::zeros(n); horizon + 1],
        vbar: vec![0.0; horizon + 1],
        successor_dets: vec![0.0; horizon],
        well_posed: true,
    };
    sol.big_v[horizon] = lin.terminal.lxx.clone();
    sol.v[horizon] = lin.terminal.lx.clone();
    sol.vbar[horizon] = lin.terminal.l;

    for t in 0..horizon {
        let mut q = assemble_stress(lin, noise, sigma, t)?;
        while q.dim() > 2 * n + m {
            let elim = if (q.dim() - n).is_multiple_of(n + m) { n } else { m };
            q.eliminate_tail(elim)?;
        }
        let scaled = q.tail_block(n) * sigma;
        sol.successor_dets[t] = determinant(&(noise.process(t).matrix() * &scaled));
        if scaled.cholesky().is_none() {
            sol.well_posed = false;
        }
        q.eliminate_tail(n)?;

        let huu = q.tail_block(m);
        if huu.clone().cholesky().is_none() {
            sol.well_posed = false;
        }
        let inv = huu.try_inverse().ok_or(Error::NonConvexQ { step: t, max_mu: 0.0 })?;
        sol.big_k[t] = &inv * q.h.view((n, 0), (m, n));
        sol.k[t] = &inv * q.g.rows(n, m);
        q.eliminate_tail(m)?;

        sol.big_v[t] = q.h.clone();
        sol.v[t] = q.g.clone();
        sol.vbar[t] = q.c;
    }
    Ok(sol)
}

/// Finite-horizon discrete LQR gains `K_t` for `u = -K_t x`, by the textbook
/// Riccati difference equation.
pub fn lqr_gains(a: &Mat, b: &Mat, q: &Mat, r: &Mat, q_terminal: &Mat, horizon: usize) -> Vec<Mat> {
    let mut p = q_terminal.clone();
    let mut gains = vec![Mat::zeros(b.ncols(), a.nrows()); horizon];
    for t in (0..horizon).rev() {
        let btp = b.transpose() * &p;
        let s = r + &btp * b;
        let gain = s.try_inverse().expect("R + B'PB invertible") * &btp * a;
        p = symmetrized(q + a.transpose() * &p * a - a.transpose() * &p * b * &gain);
        gains[t] = gain;
    }
    gains
}

#[cfg(test)]
mod tests {
    use super::*;

    fn form_1d(qbar: f64, qx: f64, qxx: f64) -> QuadraticForm {
        QuadraticForm {
            qbar,
            qx: Vector::from_element(1, qx),
            qy: Vector::zeros(0),
            qxx: Mat::from_element(1, 1, qxx),
            qxy: Mat::zeros(1, 0),
            qyy: Mat::zeros(0, 0),
        }
    }

    #[test]
    fn standard_gaussian_normalization() {
        let check = gaussian_integral_check(&form_1d(0.0, 0.0, 1.0), &Vector::zeros(0)).unwrap();
        assert!((check.analytic - (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-14);
        assert!((check.quadrature - check.analytic).abs() < 1e-8);
    }

    #[test]
    fn argmin_is_stationary() {
        let q = QuadraticForm {
            qbar: 0.3,
            qx: Vector::from_vec(vec![0.2, -1.0]),
            qy: Vector::from_vec(vec![0.5]),
            qxx: Mat::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            qxy: Mat::from_row_slice(2, 1, &[0.4, -0.7]),
            qyy: Mat::from_element(1, 1, 3.0),
        };
        let y = Vector::from_element(1, 0.8);
        let x_hat = q.argmin_x(&y).unwrap();
        assert!(q.gradient_x(&x_hat, &y).amax() < 1e-10);
    }

    #[test]
    fn non_pd_form_is_rejected() {
        assert!(gaussian_integral_check(&form_1d(0.0, 0.0, -1.0), &Vector::zeros(0)).is_err());
    }

    #[test]
    fn log_sum_exp_survives_large_exponents() {
        let costs = vec![1400.0, 1401.0, 1399.0, 1400.5];
        for sigma in [0.5, -0.5] {
            let est = summarize_risk_samples(&costs, sigma);
            assert!(est.estimate.is_finite());
            assert!(est.estimate > 1398.0 && est.estimate < 1402.0);
        }
    }

    #[test]
    fn constant_samples_give_exact_value() {
        let costs = vec![2.5; 10];
        assert_eq!(summarize_risk_samples(&costs, 3.0).estimate, 2.5);
        assert_eq!(summarize_risk_samples(&costs, 0.0).estimate, 2.5);
    }

    #[test]
    fn gauss_kronrod_integrates_polynomials_exactly() {
        let val = adaptive_gauss_kronrod(&|x| x.powi(6) - 2.0 * x + 1.0, -1.0, 2.0, 1e-12, 1e-14);
        let exact = (2f64.powi(7) + 1.0) / 7.0 - (4.0 - 1.0) + 3.0;
        assert!((val - exact).abs() < 1e-10);
    }
}

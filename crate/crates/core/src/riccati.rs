//! Riccati differential and difference equations, feedback gains, and exact
//! expected costs of linear feedback policies.
//!
//! The continuous solver integrates
//!
//! ```text
//! dP/dt + A^T P + P A - P B R^{-1} B^T P + Q = 0,   P_T = 0
//! ```
//!
//! backwards with a classical fourth-order Runge-Kutta step on a uniform grid.
//! The discrete solver iterates the one-step operator
//!
//! ```text
//! Gamma(P) = tau Q + F^T P F - tau F^T P B (R + tau B^T P B)^{-1} B^T P F,   F = I + tau A
//! ```
//!
//! from `P_N = 0`. Expected costs of an arbitrary linear policy `u = K_t x`
//! under unit additive noise come from the Lyapunov equation
//!
//! ```text
//! dS/dt + L^T S + S L + Q + K^T R K = 0,   S_T = 0,   L = A + B K
//! ```
//!
//! as `x0^T S_0 x0 + int_0^T tr(S_t) dt`.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::error::{LqError, Result};
use crate::linalg::{all_finite, quad_form, row_major, spd_solve, symmetrize, trapezoid, uniform_grid};
use crate::model::{CostSpec, GainKind, GainPath, LqProblem, ModelTheta};

/// Sub-steps per constant piece when integrating costs of piecewise gains.
pub const PIECEWISE_SUBSTEPS: usize = 20;

/// Solution of a Riccati equation on a uniform grid, `P` at every node.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiPath {
    pub grid: Vec<f64>,
    pub values: Vec<DMatrix<f64>>,
}

impl RiccatiPath {
    pub fn initial(&self) -> &DMatrix<f64> {
        &self.values[0]
    }

    /// CSV with columns `t, p_11, p_12, ...` (row-major).
    pub fn to_csv(&self) -> String {
        let n = self.values[0].nrows();
        let mut s = String::from("t");
        for i in 0..n {
            for j in 0..n {
                let _ = write!(s, ",p_{}{}", i + 1, j + 1);
            }
        }
        s.push('\n');
        for (t, p) in self.grid.iter().zip(&self.values) {
            let _ = write!(s, "{t}");
            for x in row_major(p) {
                let _ = write!(s, ",{x}");
            }
            s.push('\n');
        }
        s
    }
}

fn check_dims(theta: &ModelTheta, cost: &CostSpec) -> Result<()> {
    if cost.q.shape() != (theta.n(), theta.n()) || cost.r.shape() != (theta.d(), theta.d()) {
        return Err(LqError::Dimension(format!(
            "cost weights {:?}/{:?} do not match theta (n={}, d={})",
            cost.q.shape(),
            cost.r.shape(),
            theta.n(),
            theta.d()
        )));
    }
    Ok(())
}

fn rk4_step<F>(y: &DMatrix<f64>, h: f64, f: F) -> DMatrix<f64>
where
    F: Fn(f64, &DMatrix<f64>) -> DMatrix<f64>,
{
    let k1 = f(0.0, y);
    let k2 = f(0.5, &(y + &k1 * (0.5 * h)));
    let k3 = f(0.5, &(y + &k2 * (0.5 * h)));
    let k4 = f(1.0, &(y + &k3 * h));
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Backward RK4 solve of the Riccati ODE on `steps` uniform intervals.
pub fn solve_riccati_continuous(
    theta: &ModelTheta,
    cost: &CostSpec,
    horizon: f64,
    steps: usize,
) -> Result<RiccatiPath> {
    if steps < 2 {
        return Err(LqError::Invalid("Riccati grid needs at least 2 steps".into()));
    }
    if !(horizon > 0.0) {
        return Err(LqError::Invalid("horizon must be positive".into()));
    }
    check_dims(theta, cost)?;
    let n = theta.n();
    // S = B R^{-1} B^T
    let s = &theta.b * spd_solve(&cost.r, &theta.b.transpose(), "R")?;
    let at = theta.a.transpose();
    let rhs = |_: f64, p: &DMatrix<f64>| &at * p + p * &theta.a - p * &s * p + &cost.q;

    let grid = uniform_grid(horizon, steps);
    let h = horizon / steps as f64;
    let mut values = vec![DMatrix::zeros(n, n); steps + 1];
    for i in (0..steps).rev() {
        // Reversed time: d/ds P = rhs(P) with s = T - t.
        let next = symmetrize(&rk4_step(&values[i + 1], h, rhs));
        if !all_finite(&next) {
            return Err(LqError::NonFinite(format!("Riccati ODE at t = {}", grid[i])));
        }
        values[i] = next;
    }
    Ok(RiccatiPath { grid, values })
}

/// `K_t = -R^{-1} B^T P_t` at every node of `path`.
pub fn gain_from_riccati(theta: &ModelTheta, cost: &CostSpec, path: &RiccatiPath) -> Result<GainPath> {
    check_dims(theta, cost)?;
    let chol = symmetrize(&cost.r)
        .cholesky()
        .ok_or_else(|| LqError::Solve("R is not positive definite".into()))?;
    let bt = theta.b.transpose();
    let values = path
        .values
        .iter()
        .map(|p| -chol.solve(&(&bt * p)))
        .collect();
    GainPath::new(GainKind::ContinuousGrid, path.grid.clone(), values)
}

/// Convenience: optimal continuous gain for `theta` on `steps` intervals.
pub fn continuous_gain(theta: &ModelTheta, cost: &CostSpec, horizon: f64, steps: usize) -> Result<GainPath> {
    let path = solve_riccati_continuous(theta, cost, horizon, steps)?;
    gain_from_riccati(theta, cost, &path)
}

/// One backward Riccati difference step, together with the gain it induces.
///
/// `sign` multiplies the correction term; only the canary in the sanity
/// suite ever passes something other than `1.0`.
pub(crate) fn gamma_and_gain(
    p: &DMatrix<f64>,
    theta: &ModelTheta,
    cost: &CostSpec,
    tau: f64,
    sign: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = theta.n();
    let f = DMatrix::identity(n, n) + &theta.a * tau;
    let pf = p * &f;
    let bt = theta.b.transpose();
    // (R + tau B^T P B) K~ = B^T P F
    let inner = &cost.r + &bt * p * &theta.b * tau;
    let btpf = &bt * &pf;
    let sol = spd_solve(&inner, &btpf, "R + tau B^T P B")?;
    let gamma = &cost.q * tau + f.transpose() * &pf - btpf.transpose() * &sol * (tau * sign);
    let gamma = symmetrize(&gamma);
    if !all_finite(&gamma) {
        return Err(LqError::NonFinite("Riccati difference step".into()));
    }
    Ok((gamma, -sol))
}

/// `Gamma^theta_tau(P)`.
pub fn riccati_step_gamma(
    p: &DMatrix<f64>,
    theta: &ModelTheta,
    cost: &CostSpec,
    tau: f64,
) -> Result<DMatrix<f64>> {
    if !(tau > 0.0) {
        return Err(LqError::Invalid("tau must be positive".into()));
    }
    check_dims(theta, cost)?;
    Ok(gamma_and_gain(p, theta, cost, tau, 1.0)?.0)
}

/// Riccati difference recursion on `intervals` uniform pieces plus the
/// piecewise-constant gain it defines.
pub fn solve_riccati_discrete(
    theta: &ModelTheta,
    cost: &CostSpec,
    horizon: f64,
    intervals: usize,
) -> Result<(RiccatiPath, GainPath)> {
    if intervals < 1 {
        return Err(LqError::Invalid("need at least one interval".into()));
    }
    if !(horizon > 0.0) {
        return Err(LqError::Invalid("horizon must be positive".into()));
    }
    check_dims(theta, cost)?;
    let (n, d) = (theta.n(), theta.d());
    let tau = horizon / intervals as f64;
    let grid = uniform_grid(horizon, intervals);
    let mut ps = vec![DMatrix::zeros(n, n); intervals + 1];
    let mut ks = vec![DMatrix::zeros(d, n); intervals];
    for i in (0..intervals).rev() {
        let (p, k) = gamma_and_gain(&ps[i + 1], theta, cost, tau, 1.0)?;
        ps[i] = p;
        ks[i] = k;
    }
    let gain = GainPath::new(GainKind::PiecewiseConstant, grid.clone(), ks)?;
    Ok((RiccatiPath { grid, values: ps }, gain))
}

/// Expected cost of the policy `u = K_t x` on the system `theta_star` started at `x0`.
///
/// Continuous gains are integrated on `steps` uniform intervals. Piecewise
/// gains are integrated piece by piece with `max(20, ceil(steps / N))`
/// sub-steps so that every jump sits on a node.
pub fn lyapunov_cost(
    theta_star: &ModelTheta,
    cost: &CostSpec,
    gain: &GainPath,
    x0: &nalgebra::DVector<f64>,
    horizon: f64,
    steps: usize,
) -> Result<f64> {
    check_dims(theta_star, cost)?;
    let (n, d) = (theta_star.n(), theta_star.d());
    if gain.shape() != (d, n) {
        return Err(LqError::Dimension(format!(
            "gain shape {:?} does not match (d, n) = ({d}, {n})",
            gain.shape()
        )));
    }
    if (gain.horizon() - horizon).abs() > 1e-9 * horizon {
        return Err(LqError::Grid(format!(
            "gain covers [0, {}] but horizon is {horizon}",
            gain.horizon()
        )));
    }
    if steps < 1 {
        return Err(LqError::Invalid("need at least one step".into()));
    }
    let rhs = |k: &DMatrix<f64>, s: &DMatrix<f64>| {
        let l = &theta_star.a + &theta_star.b * k;
        l.transpose() * s + s * &l + &cost.q + k.transpose() * &cost.r * k
    };

    let mut nodes: Vec<f64> = Vec::new();
    let mut traces: Vec<f64> = Vec::new();
    let mut s = DMatrix::zeros(n, n);
    nodes.push(horizon);
    traces.push(0.0);
    match gain.kind() {
        GainKind::ContinuousGrid => {
            let grid = uniform_grid(horizon, steps);
            let h = horizon / steps as f64;
            for i in (0..steps).rev() {
                let t1 = grid[i + 1];
                let (k_hi, k_mid, k_lo) = (
                    gain.eval(t1),
                    gain.eval(t1 - 0.5 * h),
                    gain.eval(grid[i]),
                );
                let f = |frac: f64, y: &DMatrix<f64>| {
                    let k = if frac == 0.0 {
                        &k_hi
                    } else if frac == 0.5 {
                        &k_mid
                    } else {
                        &k_lo
                    };
                    rhs(k, y)
                };
                s = symmetrize(&rk4_step(&s, h, f));
                if !all_finite(&s) {
                    return Err(LqError::NonFinite(format!("Lyapunov ODE at t = {}", grid[i])));
                }
                nodes.push(grid[i]);
                traces.push(s.trace());
            }
        }
        GainKind::PiecewiseConstant => {
            let pieces = gain.intervals();
            let sub = PIECEWISE_SUBSTEPS.max(steps.div_ceil(pieces));
            let grid = gain.grid();
            for i in (0..pieces).rev() {
                let k = &gain.values()[i];
                let (t0, t1) = (grid[i], grid[i + 1]);
                let h = (t1 - t0) / sub as f64;
                for j in (0..sub).rev() {
                    s = symmetrize(&rk4_step(&s, h, |_, y| rhs(k, y)));
                    if !all_finite(&s) {
                        return Err(LqError::NonFinite(format!("Lyapunov ODE near t = {t0}")));
                    }
                    let t = if j == 0 { t0 } else { t0 + j as f64 * h };
                    nodes.push(t);
                    traces.push(s.trace());
                }
            }
        }
    }
    nodes.reverse();
    traces.reverse();
    Ok(quad_form(&s, x0) + trapezoid(&nodes, &traces))
}

/// Optimal expected cost `x0^T P_0 x0 + int tr(P_t) dt` for the true parameter.
pub fn optimal_cost(problem: &LqProblem, steps: usize) -> Result<f64> {
    let path = solve_riccati_continuous(&problem.theta_star, &problem.cost, problem.horizon, steps)?;
    let traces: Vec<f64> = path.values.iter().map(|p| p.trace()).collect();
    Ok(quad_form(path.initial(), &problem.x0) + trapezoid(&path.grid, &traces))
}

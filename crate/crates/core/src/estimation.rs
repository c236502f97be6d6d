//! Sufficient statistics and the ridge least-squares update.
//!
//! For trajectories `Z = (X; U)` observed under one policy, the estimator is
//!
//! ```text
//! theta_hat = (V + I/m)^{-1} Y
//! V = (1/m) sum_j int Z Z^T dt,   Y = (1/m) sum_j int Z dX^T
//! ```
//!
//! In the continuous regime both integrals use the fine simulation grid with
//! left endpoints (Itô convention). In the discrete regime only the coarse
//! nodes `t_i = i T / N` are read and `dt` becomes `tau = T / N`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{LqError, Result};
use crate::linalg::{all_finite, row_major, spd_solve, symmetrize, trapezoid, uniform_grid};
use crate::model::{GainKind, GainPath, LqProblem, ModelTheta};

/// Observation regime of the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Every node of the fine grid.
    Continuous,
    /// Coarse nodes `i T / N` for the given `N`.
    Discrete(usize),
}

/// Episode-averaged `(V, Y)` together with the episode count `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub v: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub m: usize,
}

impl SufficientStats {
    pub fn n(&self) -> usize {
        self.y.ncols()
    }

    /// CSV with one row per entry: `matrix,row,col,value`, plus `m`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("matrix,row,col,value\n");
        for (name, mat) in [("V", &self.v), ("Y", &self.y)] {
            for i in 0..mat.nrows() {
                for j in 0..mat.ncols() {
                    let _ = writeln!(s, "{name},{i},{j},{}", mat[(i, j)]);
                }
            }
        }
        let _ = writeln!(s, "m,0,0,{}", self.m);
        s
    }
}

/// Un-normalised per-episode sums, row-major.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct EpisodeSums {
    pub v: Vec<f64>,
    pub y: Vec<f64>,
}

/// Fine-grid indices of the sampled nodes and the weight of each interval.
fn sample_plan(traj: &crate::sim::EpisodeTrajectory, regime: Regime) -> Result<(Vec<usize>, Vec<f64>)> {
    let steps = traj.steps();
    let times = traj.times();
    match regime {
        Regime::Continuous => {
            let idx: Vec<usize> = (0..=steps).collect();
            let w = times.windows(2).map(|w| w[1] - w[0]).collect();
            Ok((idx, w))
        }
        Regime::Discrete(intervals) => {
            if intervals == 0 || !steps.is_multiple_of(intervals) {
                return Err(LqError::Grid(format!(
                    "{intervals} coarse intervals do not embed in {steps} fine steps"
                )));
            }
            let stride = steps / intervals;
            let horizon = times[steps];
            let tau = horizon / intervals as f64;
            let idx: Vec<usize> = (0..=intervals).map(|i| i * stride).collect();
            for (i, &k) in idx.iter().enumerate() {
                let target = horizon * i as f64 / intervals as f64;
                if (times[k] - target).abs() > 1e-9 * horizon {
                    return Err(LqError::Grid(format!(
                        "coarse node {target} not on the fine grid"
                    )));
                }
            }
            Ok((idx, vec![tau; intervals]))
        }
    }
}

fn stacked_z(traj: &crate::sim::EpisodeTrajectory, k: usize, z: &mut [f64]) {
    let n = traj.n();
    z[..n].copy_from_slice(traj.state(k));
    z[n..].copy_from_slice(traj.control(k));
}

pub(crate) fn episode_sums(traj: &crate::sim::EpisodeTrajectory, regime: Regime) -> Result<EpisodeSums> {
    let (n, d) = (traj.n(), traj.d());
    let p = n + d;
    let (idx, weights) = sample_plan(traj, regime)?;
    let mut v = vec![0.0; p * p];
    let mut y = vec![0.0; p * n];
    let mut z = vec![0.0; p];
    for (w, pair) in weights.iter().zip(idx.windows(2)) {
        let (k0, k1) = (pair[0], pair[1]);
        stacked_z(traj, k0, &mut z);
        let (x0, x1) = (traj.state(k0), traj.state(k1));
        for a in 0..p {
            let za = z[a];
            for b in 0..p {
                v[a * p + b] += za * z[b] * w;
            }
            for b in 0..n {
                y[a * n + b] += za * (x1[b] - x0[b]);
            }
        }
    }
    Ok(EpisodeSums { v, y })
}

/// Averages per-episode sums in the given (episode) order.
pub(crate) fn average_sums(n: usize, d: usize, sums: &[EpisodeSums]) -> Result<SufficientStats> {
    let m = sums.len();
    if m == 0 {
        return Err(LqError::Invalid("no episodes".into()));
    }
    let p = n + d;
    let mut v = vec![0.0; p * p];
    let mut y = vec![0.0; p * n];
    for s in sums {
        v.iter_mut().zip(&s.v).for_each(|(a, b)| *a += b);
        y.iter_mut().zip(&s.y).for_each(|(a, b)| *a += b);
    }
    let inv_m = 1.0 / m as f64;
    let v = symmetrize(&(DMatrix::from_row_slice(p, p, &v) * inv_m));
    let y = DMatrix::from_row_slice(p, n, &y) * inv_m;
    if !all_finite(&v) || !all_finite(&y) {
        return Err(LqError::NonFinite("sufficient statistics".into()));
    }
    Ok(SufficientStats { v, y, m })
}

fn check_same_grid(trajs: &[crate::sim::EpisodeTrajectory]) -> Result<(usize, usize)> {
    let first = trajs
        .first()
        .ok_or_else(|| LqError::Invalid("no trajectories".into()))?;
    if trajs
        .iter()
        .any(|t| t.times() != first.times() || t.n() != first.n() || t.d() != first.d())
    {
        return Err(LqError::Grid("trajectories use different grids".into()));
    }
    Ok((first.n(), first.d()))
}

pub fn accumulate_stats(trajs: &[crate::sim::EpisodeTrajectory], regime: Regime) -> Result<SufficientStats> {
    let (n, d) = check_same_grid(trajs)?;
    let sums = trajs
        .iter()
        .map(|t| episode_sums(t, regime))
        .collect::<Result<Vec<_>>>()?;
    average_sums(n, d, &sums)
}

pub fn accumulate_stats_continuous(trajs: &[crate::sim::EpisodeTrajectory]) -> Result<SufficientStats> {
    accumulate_stats(trajs, Regime::Continuous)
}

pub fn accumulate_stats_discrete(
    trajs: &[crate::sim::EpisodeTrajectory],
    intervals: usize,
) -> Result<SufficientStats> {
    accumulate_stats(trajs, Regime::Discrete(intervals))
}

/// Ridge solution `(V + I/m)^{-1} Y`, unstacked.
pub fn ls_estimate(stats: &SufficientStats) -> Result<ModelTheta> {
    if stats.m == 0 {
        return Err(LqError::Invalid("m must be at least 1".into()));
    }
    let p = stats.v.nrows();
    if stats.v.ncols() != p || stats.y.nrows() != p {
        return Err(LqError::Dimension("V and Y shapes disagree".into()));
    }
    if !all_finite(&stats.v) || !all_finite(&stats.y) {
        return Err(LqError::NonFinite("sufficient statistics".into()));
    }
    let reg = &stats.v + DMatrix::identity(p, p) / stats.m as f64;
    let stacked = spd_solve(&reg, &stats.y, "V + I/m")?;
    ModelTheta::unstack(&stacked)
}

/// Per-episode contribution `sum_k Z_k (w_k theta^T Z_k - dX_k)^T`, row-major.
pub(crate) fn episode_gradient_sum(
    theta: &ModelTheta,
    traj: &crate::sim::EpisodeTrajectory,
    regime: Regime,
) -> Result<Vec<f64>> {
    let (n, d) = (traj.n(), traj.d());
    let p = n + d;
    let stacked = theta.stack();
    let (idx, weights) = sample_plan(traj, regime)?;
    let mut g = vec![0.0; p * n];
    let mut z = vec![0.0; p];
    let mut resid = vec![0.0; n];
    for (w, pair) in weights.iter().zip(idx.windows(2)) {
        let (k0, k1) = (pair[0], pair[1]);
        stacked_z(traj, k0, &mut z);
        let (x0, x1) = (traj.state(k0), traj.state(k1));
        for (b, r) in resid.iter_mut().enumerate() {
            let pred: f64 = (0..p).map(|a| stacked[(a, b)] * z[a]).sum();
            *r = w * pred - (x1[b] - x0[b]);
        }
        for a in 0..p {
            for b in 0..n {
                g[a * n + b] += z[a] * resid[b];
            }
        }
    }
    Ok(g)
}

pub(crate) fn finish_gradient(theta: &ModelTheta, sums: &[Vec<f64>]) -> DMatrix<f64> {
    let (n, d) = (theta.n(), theta.d());
    let m = sums.len() as f64;
    let mut acc = vec![0.0; (n + d) * n];
    for s in sums {
        acc.iter_mut().zip(s).for_each(|(a, b)| *a += b);
    }
    (DMatrix::from_row_slice(n + d, n, &acc) + theta.stack()) * (2.0 / m)
}

/// Gradient at `theta` of the ridge objective, normalised by `1/m`:
///
/// ```text
/// (1/m) [ sum_j sum_k |dX_k - w_k theta^T Z_k|^2 / w_k + tr(theta^T theta) ]
/// ```
///
/// computed from residuals, independently of the closed form. It vanishes
/// at `ls_estimate` of the same data.
pub fn ridge_objective_gradient(
    theta: &ModelTheta,
    trajs: &[crate::sim::EpisodeTrajectory],
    regime: Regime,
) -> Result<DMatrix<f64>> {
    let (n, d) = check_same_grid(trajs)?;
    if (n, d) != (theta.n(), theta.d()) {
        return Err(LqError::Dimension("theta does not match trajectories".into()));
    }
    let sums = trajs
        .iter()
        .map(|t| episode_gradient_sum(theta, t, regime))
        .collect::<Result<Vec<_>>>()?;
    Ok(finish_gradient(theta, &sums))
}

/// Relative size of a ridge gradient: `max |g_ij| / (1 + |Y|_F)`.
pub fn gradient_certificate(gradient: &DMatrix<f64>, stats: &SufficientStats) -> f64 {
    gradient.amax() / (1.0 + stats.y.norm())
}

fn rk4<F>(y: &DMatrix<f64>, h: f64, f: F) -> DMatrix<f64>
where
    F: Fn(f64, &DMatrix<f64>) -> DMatrix<f64>,
{
    let k1 = f(0.0, y);
    let k2 = f(0.5, &(y + &k1 * (0.5 * h)));
    let k3 = f(0.5, &(y + &k2 * (0.5 * h)));
    let k4 = f(1.0, &(y + &k3 * h));
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// `[I; K]`, the map `x -> (x; K x)`.
fn lift(k: &DMatrix<f64>) -> DMatrix<f64> {
    let (d, n) = k.shape();
    let mut out = DMatrix::zeros(n + d, n);
    out.view_mut((0, 0), (n, n)).fill_with_identity();
    out.view_mut((n, 0), (d, n)).copy_from(k);
    out
}

/// Expected statistics `(E V, E Y)` for a single episode under `gain`, from
/// the second-moment ODE `dS/dt = L S + S L^T + I`, `S_0 = x0 x0^T`.
///
/// Continuous regime: `V = int Lift S Lift^T dt`, `Y = int Lift S L^T dt`
/// (trapezoid on `steps` intervals). Discrete regime: `V = sum_i tau Lift_i
/// S_i Lift_i^T` and `Y = sum_i Lift_i S_i (Phi_i - I)^T` with `Phi_i` the
/// frozen-gain transition over one coarse interval.
pub fn population_stats(
    problem: &LqProblem,
    gain: &GainPath,
    regime: Regime,
    steps: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, d) = (problem.n, problem.d);
    if gain.shape() != (d, n) {
        return Err(LqError::Dimension("gain shape does not match problem".into()));
    }
    if steps < 1 {
        return Err(LqError::Invalid("need at least one step".into()));
    }
    let a = &problem.theta_star.a;
    let b = &problem.theta_star.b;
    let eye = DMatrix::<f64>::identity(n, n);
    let x0 = &problem.x0;
    let mut sigma = x0 * x0.transpose();
    let moment_rhs = |l: &DMatrix<f64>, s: &DMatrix<f64>| l * s + s * l.transpose() + &eye;
    let p = n + d;
    match regime {
        Regime::Continuous => {
            let horizon = problem.horizon;
            let grid = uniform_grid(horizon, steps);
            let h = horizon / steps as f64;
            let closed = |t: f64| a + b * gain.eval(t);
            let mut v_vals = Vec::with_capacity(steps + 1);
            let mut y_vals = Vec::with_capacity(steps + 1);
            let mut push = |t: f64, s: &DMatrix<f64>| {
                let k = gain.eval(t);
                let lifted = lift(&k);
                let l = a + b * &k;
                v_vals.push(&lifted * s * lifted.transpose());
                y_vals.push(&lifted * s * l.transpose());
            };
            push(0.0, &sigma);
            for i in 0..steps {
                let t0 = grid[i];
                let ls = [closed(t0), closed(t0 + 0.5 * h), closed(grid[i + 1])];
                sigma = symmetrize(&rk4(&sigma, h, |frac, s| {
                    let l = if frac == 0.0 {
                        &ls[0]
                    } else if frac == 0.5 {
                        &ls[1]
                    } else {
                        &ls[2]
                    };
                    moment_rhs(l, s)
                }));
                if !all_finite(&sigma) {
                    return Err(LqError::NonFinite("second-moment ODE".into()));
                }
                push(grid[i + 1], &sigma);
            }
            let integrate = |vals: &[DMatrix<f64>], cols: usize| {
                let mut out = DMatrix::zeros(p, cols);
                for r in 0..p {
                    for c in 0..cols {
                        let series: Vec<f64> = vals.iter().map(|m| m[(r, c)]).collect();
                        out[(r, c)] = trapezoid(&grid, &series);
                    }
                }
                out
            };
            Ok((symmetrize(&integrate(&v_vals, p)), integrate(&y_vals, n)))
        }
        Regime::Discrete(intervals) => {
            if gain.kind() != GainKind::PiecewiseConstant || gain.intervals() != intervals {
                return Err(LqError::Grid(format!(
                    "discrete population statistics need a piecewise gain with {intervals} pieces"
                )));
            }
            let sub = crate::riccati::PIECEWISE_SUBSTEPS.max(steps.div_ceil(intervals));
            let mut v = DMatrix::zeros(p, p);
            let mut y = DMatrix::zeros(p, n);
            for i in 0..intervals {
                let (t0, t1) = (gain.grid()[i], gain.grid()[i + 1]);
                let tau = t1 - t0;
                let k = &gain.values()[i];
                let lifted = lift(k);
                let l = a + b * k;
                let mut phi = eye.clone();
                let h = tau / sub as f64;
                let start = sigma.clone();
                for _ in 0..sub {
                    phi = rk4(&phi, h, |_, f| &l * f);
                    sigma = symmetrize(&rk4(&sigma, h, |_, s| moment_rhs(&l, s)));
                }
                if !all_finite(&sigma) || !all_finite(&phi) {
                    return Err(LqError::NonFinite("second-moment recursion".into()));
                }
                v += &lifted * &start * lifted.transpose() * tau;
                y += &lifted * &start * (&phi - &eye).transpose();
            }
            Ok((symmetrize(&v), y))
        }
    }
}

/// Population-limit estimate `(V + I/m)^{-1} Y` built from `population_stats`.
pub fn population_estimate(v: &DMatrix<f64>, y: &DMatrix<f64>, m: usize) -> Result<ModelTheta> {
    ls_estimate(&SufficientStats {
        v: v.clone(),
        y: y.clone(),
        m,
    })
}

/// Flattened `V`, `Y` as a single vector (row-major), handy for reports.
pub fn flatten_stats(stats: &SufficientStats) -> DVector<f64> {
    let mut out = row_major(&stats.v);
    out.extend(row_major(&stats.y));
    DVector::from_vec(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::min_eigenvalue_sym;
    use crate::riccati::continuous_gain;
    use crate::sim::EpisodeTrajectory;
    use approx::assert_abs_diff_eq;

    fn constant_state(steps: usize) -> EpisodeTrajectory {
        EpisodeTrajectory::from_parts(
            1,
            1,
            uniform_grid(1.0, steps),
            vec![1.0; steps + 1],
            vec![0.0; steps + 1],
            vec![0.0; steps],
        )
        .unwrap()
    }

    #[test]
    fn constant_state_harness() {
        let t = constant_state(8);
        let s = accumulate_stats_continuous(std::slice::from_ref(&t)).unwrap();
        assert_abs_diff_eq!(s.v, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]), epsilon = 1e-15);
        assert_eq!(s.y, DMatrix::zeros(2, 1));
        let sd = accumulate_stats_discrete(std::slice::from_ref(&t), 4).unwrap();
        assert_abs_diff_eq!(sd.v, s.v, epsilon = 1e-15);
    }

    #[test]
    fn discrete_with_full_count_matches_continuous() {
        let p = LqProblem::scalar_canonical();
        let k = GainPath::constant(DMatrix::from_element(1, 1, -0.5), 1.0).unwrap();
        let cfg = crate::sim::SimConfig::new(0.01, 3).unwrap();
        let trajs = crate::sim::batch_simulate(&p, &k, &cfg, 0, 4).unwrap();
        let c = accumulate_stats_continuous(&trajs).unwrap();
        let dsc = accumulate_stats_discrete(&trajs, 100).unwrap();
        assert_abs_diff_eq!(c.v, dsc.v, epsilon = 1e-12);
        assert_abs_diff_eq!(c.y, dsc.y, epsilon = 1e-12);
    }

    #[test]
    fn misaligned_coarse_grid() {
        let t = constant_state(10);
        assert!(matches!(accumulate_stats_discrete(&[t], 4), Err(LqError::Grid(_))));
    }

    #[test]
    fn ridge_algebra() {
        let theta = LqProblem::planar().theta_star;
        let stacked = theta.stack();
        let one = SufficientStats { v: DMatrix::identity(4, 4), y: stacked.clone(), m: 1 };
        let est = ls_estimate(&one).unwrap();
        assert_abs_diff_eq!(est.stack(), &stacked / 2.0, epsilon = 1e-15);

        let many = SufficientStats { v: DMatrix::identity(4, 4), y: stacked.clone(), m: 1_000_000 };
        let est = ls_estimate(&many).unwrap();
        let factor = 1e6 / (1e6 + 1.0);
        assert_abs_diff_eq!(est.stack(), &stacked * factor, epsilon = 1e-12);
        assert!((factor - (1.0 - 1e-6)).abs() < 1e-9);
    }

    #[test]
    fn ridge_regularises_singular_v() {
        let s = accumulate_stats_continuous(&[constant_state(8)]).unwrap();
        let mut s = s;
        s.y = DMatrix::from_column_slice(2, 1, &[0.3, -2.0]);
        let est = ls_estimate(&s).unwrap();
        assert!(est.a[(0, 0)].is_finite() && est.b[(0, 0)].is_finite());
    }

    #[test]
    fn gradient_vanishes_at_estimate() {
        let p = LqProblem::planar();
        let k = continuous_gain(&p.theta_star, &p.cost, 1.0, 100).unwrap();
        let cfg = crate::sim::SimConfig::new(0.01, 5).unwrap();
        let trajs = crate::sim::batch_simulate(&p, &k, &cfg, 0, 20).unwrap();
        for regime in [Regime::Continuous, Regime::Discrete(20)] {
            let stats = accumulate_stats(&trajs, regime).unwrap();
            let est = ls_estimate(&stats).unwrap();
            let g = ridge_objective_gradient(&est, &trajs, regime).unwrap();
            assert!(gradient_certificate(&g, &stats) <= 1e-8);

            let mut bumped = est.clone();
            bumped.a[(0, 1)] += 0.1;
            let g = ridge_objective_gradient(&bumped, &trajs, regime).unwrap();
            // A[0][1] sits at stacked row 1, column 0.
            assert!(g[(1, 0)] > 0.0);
            bumped.a[(0, 1)] -= 0.2;
            let g = ridge_objective_gradient(&bumped, &trajs, regime).unwrap();
            assert!(g[(1, 0)] < 0.0);
        }
    }

    #[test]
    fn gradient_zero_data_at_origin() {
        let zero = EpisodeTrajectory::from_parts(
            1,
            1,
            uniform_grid(1.0, 4),
            vec![0.0; 5],
            vec![0.0; 5],
            vec![0.0; 4],
        )
        .unwrap();
        let origin = ModelTheta::new(DMatrix::zeros(1, 1), DMatrix::zeros(1, 1)).unwrap();
        let g = ridge_objective_gradient(&origin, &[zero], Regime::Continuous).unwrap();
        assert_eq!(g, DMatrix::zeros(2, 1));
    }

    #[test]
    fn population_driftless_zero_gain() {
        let p = LqProblem::scalar_canonical();
        let k = GainPath::zero(1, 1, 1.0).unwrap();
        let (v, y) = population_stats(&p, &k, Regime::Continuous, 1000).unwrap();
        assert_abs_diff_eq!(v, DMatrix::from_row_slice(2, 2, &[1.5, 0.0, 0.0, 0.0]), epsilon = 1e-12);
        assert_abs_diff_eq!(y, DMatrix::zeros(2, 1), epsilon = 1e-12);
    }

    #[test]
    fn population_identifiability() {
        let p = LqProblem::scalar_canonical();
        let k = continuous_gain(&p.theta_star, &p.cost, 1.0, 1000).unwrap();
        let (v, y) = population_stats(&p, &k, Regime::Continuous, 1000).unwrap();
        assert!(min_eigenvalue_sym(&v) > 1e-4);
        let est = crate::linalg::spd_solve(&v, &y, "V").unwrap();
        assert_abs_diff_eq!(est, p.theta_star.stack(), epsilon = 1e-9);

        let dep = LqProblem::dependent_columns();
        let k = continuous_gain(&dep.theta_star, &dep.cost, 1.0, 1000).unwrap();
        let (v, _) = population_stats(&dep, &k, Regime::Continuous, 1000).unwrap();
        assert!(min_eigenvalue_sym(&v) <= 1e-8);
    }

    #[test]
    fn population_discrete_requires_matching_gain() {
        let p = LqProblem::scalar_canonical();
        let k = GainPath::zero(1, 1, 1.0).unwrap();
        assert!(population_stats(&p, &k, Regime::Discrete(4), 100).is_err());
        let (_, kd) = crate::riccati::solve_riccati_discrete(&p.theta_star, &p.cost, 1.0, 4).unwrap();
        let (v, y) = population_stats(&p, &kd, Regime::Discrete(4), 100).unwrap();
        assert!(all_finite(&v) && all_finite(&y));
    }

    #[test]
    fn stats_csv_has_all_entries() {
        let s = accumulate_stats_continuous(&[constant_state(4)]).unwrap();
        assert_eq!(s.to_csv().lines().count(), 1 + 4 + 2 + 1);
        assert_eq!(flatten_stats(&s).len(), 6);
    }
}

//! Euler–Maruyama simulation of `dX = (A* X + B* K_t X) dt + dW` under a
//! feedback gain, with reproducible per-episode randomness.
//!
//! Every episode draws its Brownian increments from its own ChaCha substream
//! keyed by `(master_seed, phase, episode)`: the stream id is the phase and the
//! episode selects a disjoint block of the keystream. An episode's trajectory
//! therefore depends on nothing but its key, which lets batches run on any
//! number of workers and still produce bit-identical output.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{LqError, Result};
use crate::model::{CostSpec, GainPath, LqProblem};

/// Keystream words reserved per episode (2^40 words, ~ 2^39 normals).
const EPISODE_BLOCK_SHIFT: u32 = 40;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub h_sim: f64,
    pub master_seed: u64,
}

impl SimConfig {
    pub fn new(h_sim: f64, master_seed: u64) -> Result<Self> {
        if !(h_sim > 0.0) || !h_sim.is_finite() {
            return Err(LqError::Invalid(format!("h_sim must be positive, got {h_sim}")));
        }
        Ok(Self { h_sim, master_seed })
    }

    /// Number of fine steps covering `[0, horizon]`; `horizon / h_sim` must be
    /// an integer up to 1e-9 relative.
    pub fn steps(&self, horizon: f64) -> Result<usize> {
        let ratio = horizon / self.h_sim;
        let steps = ratio.round();
        if steps < 1.0 || (ratio - steps).abs() > 1e-9 * ratio.max(1.0) {
            return Err(LqError::Grid(format!(
                "h_sim = {} does not divide T = {horizon}",
                self.h_sim
            )));
        }
        Ok(steps as usize)
    }
}

/// Substream for one episode.
pub fn episode_rng(master_seed: u64, phase: u64, episode: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(phase);
    rng.set_word_pos(u128::from(episode) << EPISODE_BLOCK_SHIFT);
    rng
}

/// One simulated episode on the fine grid. Vectors are stored flat, node by node.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrajectory {
    n: usize,
    d: usize,
    times: Vec<f64>,
    states: Vec<f64>,
    controls: Vec<f64>,
    increments: Vec<f64>,
}

impl EpisodeTrajectory {
    /// Assembles a trajectory from raw parts (`steps + 1` nodes). Used by test
    /// harnesses that force states or increments.
    pub fn from_parts(
        n: usize,
        d: usize,
        times: Vec<f64>,
        states: Vec<f64>,
        controls: Vec<f64>,
        increments: Vec<f64>,
    ) -> Result<Self> {
        let nodes = times.len();
        if nodes < 2
            || states.len() != nodes * n
            || controls.len() != nodes * d
            || increments.len() != (nodes - 1) * n
        {
            return Err(LqError::Dimension("inconsistent trajectory lengths".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(LqError::Grid("trajectory times must increase".into()));
        }
        if !states.iter().chain(&controls).chain(&increments).all(|v| v.is_finite()) {
            return Err(LqError::NonFinite("trajectory".into()));
        }
        Ok(Self { n, d, times, states, controls, increments })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.n..(k + 1) * self.n]
    }

    pub fn control(&self, k: usize) -> &[f64] {
        &self.controls[k * self.d..(k + 1) * self.d]
    }

    /// Brownian increment over `[s_k, s_{k+1}]`.
    pub fn increment(&self, k: usize) -> &[f64] {
        &self.increments[k * self.n..(k + 1) * self.n]
    }

    pub fn final_state(&self) -> &[f64] {
        self.state(self.steps())
    }

    /// CSV with columns `t, x_1.., u_1..`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t");
        for i in 0..self.n {
            let _ = write!(s, ",x_{}", i + 1);
        }
        for i in 0..self.d {
            let _ = write!(s, ",u_{}", i + 1);
        }
        s.push('\n');
        for k in 0..self.times.len() {
            let _ = write!(s, "{}", self.times[k]);
            for v in self.state(k).iter().chain(self.control(k)) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// Per-step closed-loop data for the simulation kernel: `K(s_k)` and
/// `L_k = A* + B* K(s_k)`, both column-major.
struct StepTable {
    gains: Vec<f64>,
    closed_loop: Vec<f64>,
}

fn step_table(problem: &LqProblem, gain: &GainPath, times: &[f64]) -> StepTable {
    let (n, d) = (problem.n, problem.d);
    let a = problem.theta_star.a.as_slice();
    let b = problem.theta_star.b.as_slice();
    let mut gains = vec![0.0; times.len() * d * n];
    let mut closed_loop = vec![0.0; times.len() * n * n];
    for (k, &t) in times.iter().enumerate() {
        let kk = &mut gains[k * d * n..(k + 1) * d * n];
        gain.eval_into(t, kk);
        let l = &mut closed_loop[k * n * n..(k + 1) * n * n];
        // column-major: L[i + n j] = A[i + n j] + sum_c B[i + n c] K[c + d j]
        for j in 0..n {
            for i in 0..n {
                let mut v = a[i + n * j];
                for c in 0..d {
                    v += b[i + n * c] * kk[c + d * j];
                }
                l[i + n * j] = v;
            }
        }
    }
    StepTable { gains, closed_loop }
}

fn check_gain(problem: &LqProblem, gain: &GainPath) -> Result<()> {
    if gain.shape() != (problem.d, problem.n) {
        return Err(LqError::Dimension(format!(
            "gain shape {:?} does not match (d, n) = ({}, {})",
            gain.shape(),
            problem.d,
            problem.n
        )));
    }
    if (gain.horizon() - problem.horizon).abs() > 1e-9 * problem.horizon {
        return Err(LqError::Grid("gain does not cover [0, T]".into()));
    }
    Ok(())
}

fn simulate_with_table(
    problem: &LqProblem,
    table: &StepTable,
    times: &[f64],
    h: f64,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeTrajectory> {
    let (n, d) = (problem.n, problem.d);
    let steps = times.len() - 1;
    let sqrt_h = h.sqrt();
    let mut states = vec![0.0; (steps + 1) * n];
    let mut controls = vec![0.0; (steps + 1) * d];
    let mut increments = vec![0.0; steps * n];
    states[..n].copy_from_slice(problem.x0.as_slice());
    for k in 0..=steps {
        let (done, rest) = states.split_at_mut((k + 1) * n);
        let x = &done[k * n..];
        let kk = &table.gains[k * d * n..(k + 1) * d * n];
        let u = &mut controls[k * d..(k + 1) * d];
        for (c, uc) in u.iter_mut().enumerate() {
            *uc = (0..n).map(|j| kk[c + d * j] * x[j]).sum();
        }
        if k == steps {
            break;
        }
        let l = &table.closed_loop[k * n * n..(k + 1) * n * n];
        let dw = &mut increments[k * n..(k + 1) * n];
        let next = &mut rest[..n];
        for i in 0..n {
            let w: f64 = rng.sample::<f64, _>(StandardNormal) * sqrt_h;
            dw[i] = w;
            let drift: f64 = (0..n).map(|j| l[i + n * j] * x[j]).sum();
            next[i] = x[i] + drift * h + w;
        }
        if !next.iter().all(|v| v.is_finite()) {
            return Err(LqError::NonFinite(format!(
                "state at t = {} (unstable gain for h_sim = {h})",
                times[k + 1]
            )));
        }
    }
    Ok(EpisodeTrajectory {
        n,
        d,
        times: times.to_vec(),
        states,
        controls,
        increments,
    })
}

fn fine_grid(problem: &LqProblem, cfg: &SimConfig) -> Result<(Vec<f64>, f64)> {
    let steps = cfg.steps(problem.horizon)?;
    let h = problem.horizon / steps as f64;
    Ok((crate::linalg::uniform_grid(problem.horizon, steps), h))
}

pub fn simulate_episode(
    problem: &LqProblem,
    gain: &GainPath,
    cfg: &SimConfig,
    phase: u64,
    episode: u64,
) -> Result<EpisodeTrajectory> {
    check_gain(problem, gain)?;
    let (times, h) = fine_grid(problem, cfg)?;
    let table = step_table(problem, gain, &times);
    let mut rng = episode_rng(cfg.master_seed, phase, episode);
    simulate_with_table(problem, &table, &times, h, &mut rng)
}

/// Left-Riemann sum of `x^T Q x + u^T R u` over `[0, T)`.
pub fn realized_cost(traj: &EpisodeTrajectory, cost: &CostSpec) -> f64 {
    let (n, d) = (traj.n, traj.d);
    let q = cost.q.as_slice();
    let r = cost.r.as_slice();
    let mut total = 0.0;
    for k in 0..traj.steps() {
        let h = traj.times[k + 1] - traj.times[k];
        let x = traj.state(k);
        let u = traj.control(k);
        let mut v = 0.0;
        for j in 0..n {
            for i in 0..n {
                v += x[i] * q[i + n * j] * x[j];
            }
        }
        for j in 0..d {
            for i in 0..d {
                v += u[i] * r[i + d * j] * u[j];
            }
        }
        total += v * h;
    }
    total
}

/// Simulates and folds `episodes` episodes without retaining trajectories.
///
/// `fold` runs once per episode (possibly concurrently); the results come back
/// in episode order.
pub fn map_episodes<T, F>(
    problem: &LqProblem,
    gain: &GainPath,
    cfg: &SimConfig,
    phase: u64,
    episodes: usize,
    fold: F,
) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64, EpisodeTrajectory) -> T + Sync,
{
    check_gain(problem, gain)?;
    let (times, h) = fine_grid(problem, cfg)?;
    let table = step_table(problem, gain, &times);
    (0..episodes as u64)
        .into_par_iter()
        .map(|j| {
            let mut rng = episode_rng(cfg.master_seed, phase, j);
            simulate_with_table(problem, &table, &times, h, &mut rng).map(|traj| fold(j, traj))
        })
        .collect()
}

pub fn batch_simulate(
    problem: &LqProblem,
    gain: &GainPath,
    cfg: &SimConfig,
    phase: u64,
    episodes: usize,
) -> Result<Vec<EpisodeTrajectory>> {
    if episodes < 1 {
        return Err(LqError::Invalid("need at least one episode".into()));
    }
    map_episodes(problem, gain, cfg, phase, episodes, |_, traj| traj)
}

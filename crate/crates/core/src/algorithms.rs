//! The two phase-based learning algorithms and regret accounting.
//!
//! Both algorithms alternate between acting greedily on the current estimate
//! and re-estimating the drift:
//!
//! 1. synthesise the optimal policy for `theta_l` (continuous Riccati gain for
//!    the continuous-time algorithm, piecewise-constant Riccati-difference
//!    gain with `N_l` pieces for the discrete-time one);
//! 2. run it for `m_l = 2^l m_0` independent episodes;
//! 3. set `theta_{l+1}` to the ridge estimate built from those episodes.
//!
//! Regret is tracked in expected form, each episode contributing the exact
//! gap `J(policy) - J*` from the Lyapunov oracle, and in realized form from
//! the simulated running costs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LqError, Result};
use crate::estimation::{
    average_sums, episode_gradient_sum, episode_sums, finish_gradient, gradient_certificate,
    ls_estimate, Regime,
};
use crate::model::{full_column_rank, theta_distance, GainPath, LqProblem, ModelTheta};
use crate::riccati::{continuous_gain, lyapunov_cost, optimal_cost, solve_riccati_discrete};
use crate::sim::{episode_rng, map_episodes, realized_cost, SimConfig};
use crate::stats::loglog_slope;

/// Minimum fine sub-steps per coarse interval in the discrete-time algorithm.
pub const MIN_SUBSTEPS_PER_INTERVAL: usize = 50;

/// Default floor on the number of intervention points.
pub const DEFAULT_N_FLOOR: usize = 10;

/// Number of intervention points per phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NSchedule {
    /// `N_l = N0` for every phase.
    Fixed(usize),
    /// `N_l = ceil(sqrt(2)^l N0)`.
    Geometric(usize),
}

impl NSchedule {
    pub fn base(&self) -> usize {
        match *self {
            NSchedule::Fixed(n0) | NSchedule::Geometric(n0) => n0,
        }
    }

    pub fn intervals(&self, phase: usize) -> usize {
        match *self {
            NSchedule::Fixed(n0) => n0,
            NSchedule::Geometric(n0) => {
                // sqrt(2)^l N0 = 2^(l/2) N0, exact for even l.
                let even = (n0 as u128) << (phase / 2);
                if phase.is_multiple_of(2) {
                    even as usize
                } else {
                    (std::f64::consts::SQRT_2 * even as f64 - 1e-9).ceil() as usize
                }
            }
        }
    }

    /// Parses `fixed:N` or `geo:N`.
    pub fn parse(s: &str) -> Result<Self> {
        let (kind, n) = s
            .split_once(':')
            .ok_or_else(|| LqError::Config(format!("bad N schedule `{s}` (want fixed:N or geo:N)")))?;
        let n0: usize = n
            .parse()
            .map_err(|e| LqError::Config(format!("bad N schedule `{s}`: {e}")))?;
        match kind {
            "fixed" => Ok(NSchedule::Fixed(n0)),
            "geo" | "geometric" => Ok(NSchedule::Geometric(n0)),
            _ => Err(LqError::Config(format!("unknown N schedule kind `{kind}`"))),
        }
    }

    pub fn label(&self) -> String {
        match self {
            NSchedule::Fixed(n) => format!("fixed:{n}"),
            NSchedule::Geometric(n) => format!("geo:{n}"),
        }
    }
}

/// Episode doubling schedule `m_l = 2^l m_0`, `m_0 = ceil(C ln(1/delta))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub c: f64,
    pub delta: f64,
    pub phases: usize,
    pub n_schedule: Option<NSchedule>,
    pub n_floor: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            c: 10.0,
            delta: 0.1,
            phases: 10,
            n_schedule: None,
            n_floor: DEFAULT_N_FLOOR,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let delta_max = 3.0 / (std::f64::consts::PI * std::f64::consts::PI);
        if !(self.c > 0.0) || !self.c.is_finite() {
            return Err(LqError::Config("C must be positive".into()));
        }
        if !(self.delta > 0.0 && self.delta < delta_max) {
            return Err(LqError::Config(format!("delta must lie in (0, {delta_max:.4})")));
        }
        if self.phases < 1 {
            return Err(LqError::Config("need at least one phase".into()));
        }
        if let Some(s) = self.n_schedule {
            if s.base() < 2 {
                return Err(LqError::Config("N0 must be at least 2".into()));
            }
        }
        Ok(())
    }

    pub fn m0(&self) -> usize {
        ((self.c * (1.0 / self.delta).ln()).ceil() as usize).max(1)
    }

    pub fn episodes(&self, phase: usize) -> usize {
        self.m0() << phase
    }

    pub fn total_episodes(&self) -> usize {
        (0..self.phases).map(|l| self.episodes(l)).sum()
    }

    /// `N_l`, floored at `n_floor`. `None` without an N schedule.
    pub fn intervals(&self, phase: usize) -> Option<usize> {
        self.n_schedule
            .map(|s| s.intervals(phase).max(self.n_floor))
    }
}

/// Knobs that are not part of the learning schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    /// Intervals of the Riccati and Lyapunov grids.
    pub riccati_steps: usize,
    /// Re-simulate each phase and record the ridge-gradient certificate.
    pub certify: bool,
    /// Keep `theta_0` in every phase (harness mode).
    pub freeze_theta: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            riccati_steps: 1000,
            certify: false,
            freeze_theta: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algorithm {
    ContinuousLs,
    DiscreteLs(NSchedule),
}

impl Algorithm {
    pub fn label(&self) -> String {
        match self {
            Algorithm::ContinuousLs => "alg1".to_string(),
            Algorithm::DiscreteLs(s) => format!("alg2-{}", s.label().replace(':', "")),
        }
    }
}

/// One phase of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: usize,
    /// Estimate the policy of this phase was built from.
    pub theta: ModelTheta,
    pub episodes: usize,
    pub intervals: Option<usize>,
    pub sim_step: f64,
    /// Exact expected per-episode cost of the phase policy.
    pub expected_cost: f64,
    pub realized_costs: Vec<f64>,
    /// `max |grad| / (1 + |Y|)` at the estimate produced by this phase.
    pub gradient_certificate: Option<f64>,
    #[serde(skip)]
    pub gain: Option<GainPath>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegretPoint {
    pub episodes: usize,
    pub expected: f64,
    pub realized: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub algorithm: Algorithm,
    pub master_seed: u64,
    pub optimal_cost: f64,
    pub theta_star: ModelTheta,
    pub phases: Vec<PhaseRecord>,
    /// Estimate after the last completed phase.
    pub final_theta: Option<ModelTheta>,
    /// Cumulative regret at each phase boundary.
    pub regret: Vec<RegretPoint>,
    pub warnings: Vec<String>,
    pub failure: Option<String>,
}

impl RunRecord {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }

    pub fn total_episodes(&self) -> usize {
        self.phases.iter().map(|p| p.episodes).sum()
    }

    /// `(M, R_expected(M), R_realized(M))` rows at every phase boundary.
    pub fn to_regret_csv(&self) -> String {
        let mut s = String::from("M,R_expected,R_realized\n");
        for p in &self.regret {
            s.push_str(&format!("{},{},{}\n", p.episodes, p.expected, p.realized));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Largest `|theta_l - theta*|` over all phases, including the final estimate.
    pub fn max_theta_error(&self) -> f64 {
        self.phases
            .iter()
            .map(|p| &p.theta)
            .chain(self.final_theta.as_ref())
            .filter_map(|t| theta_distance(t, &self.theta_star).ok())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegretMode {
    Expected,
    Realized,
}

/// Cumulative regret after the first `m` episodes.
pub fn regret_at(record: &RunRecord, m: usize, mode: RegretMode) -> Result<f64> {
    let available = record.total_episodes();
    if m > available {
        return Err(LqError::EpisodeRange { requested: m, available });
    }
    let mut left = m;
    let mut total = 0.0;
    for p in &record.phases {
        if left == 0 {
            break;
        }
        let take = left.min(p.episodes);
        total += match mode {
            RegretMode::Expected => take as f64 * (p.expected_cost - record.optimal_cost),
            RegretMode::Realized => p.realized_costs[..take]
                .iter()
                .map(|c| c - record.optimal_cost)
                .sum(),
        };
        left -= take;
    }
    Ok(total)
}

/// Regret at every phase boundary plus any extra requested `M`, sorted by `M`.
pub fn regret_curve(record: &RunRecord, mode: RegretMode, extra: &[usize]) -> Result<Vec<(usize, f64)>> {
    let mut ms: Vec<usize> = record
        .phases
        .iter()
        .scan(0, |acc, p| {
            *acc += p.episodes;
            Some(*acc)
        })
        .chain(extra.iter().copied())
        .collect();
    ms.sort_unstable();
    ms.dedup();
    ms.into_iter()
        .map(|m| regret_at(record, m, mode).map(|r| (m, r)))
        .collect()
}

/// Log-log slope of expected regret against `M` over the last `last` phase boundaries.
pub fn late_exponent(record: &RunRecord, last: usize) -> f64 {
    let pts = &record.regret[record.regret.len().saturating_sub(last)..];
    let m: Vec<f64> = pts.iter().map(|p| p.episodes as f64).collect();
    let r: Vec<f64> = pts.iter().map(|p| p.expected).collect();
    loglog_slope(&m, &r)
}

/// `max / min` of `R(M) / (ln M ln ln M)` over the last `last` phase boundaries.
pub fn log_ratio_spread(record: &RunRecord, last: usize) -> f64 {
    let pts = &record.regret[record.regret.len().saturating_sub(last)..];
    let ratios: Vec<f64> = pts
        .iter()
        .map(|p| {
            let m = p.episodes as f64;
            p.expected / (m.ln() * m.ln().ln())
        })
        .collect();
    let hi = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    hi / lo
}

/// Largest fitted gradient certificate over the run.
pub fn worst_certificate(record: &RunRecord) -> Option<f64> {
    record
        .phases
        .iter()
        .filter_map(|p| p.gradient_certificate)
        .reduce(f64::max)
}

/// Stream id reserved for drawing the initial estimate.
const INIT_STREAM: u64 = u64::MAX;

/// `theta*` with every entry perturbed by uniform noise on `[-0.5, 0.5]`,
/// redrawn (up to 10 times) until `B_0` has full column rank.
pub fn perturbed_theta0(problem: &LqProblem, seed: u64) -> Result<ModelTheta> {
    let mut rng = episode_rng(seed, INIT_STREAM, 0);
    for _ in 0..10 {
        let mut theta = problem.theta_star.clone();
        theta.a.iter_mut().for_each(|v| *v += rng.random_range(-0.5..=0.5));
        theta.b.iter_mut().for_each(|v| *v += rng.random_range(-0.5..=0.5));
        if full_column_rank(&theta.b).0 {
            return Ok(theta);
        }
    }
    Err(LqError::Invalid(
        "could not draw an initial estimate with full-column-rank B".into(),
    ))
}

fn is_blow_up(e: &LqError) -> bool {
    matches!(e, LqError::NonFinite(_) | LqError::Solve(_))
}

struct PhasePolicy {
    gain: GainPath,
    regime: Regime,
    sim: SimConfig,
    intervals: Option<usize>,
}

fn phase_policy(
    problem: &LqProblem,
    theta: &ModelTheta,
    algorithm: Algorithm,
    sched: &ScheduleConfig,
    sim: &SimConfig,
    opts: &RunOptions,
    phase: usize,
) -> Result<PhasePolicy> {
    match algorithm {
        Algorithm::ContinuousLs => Ok(PhasePolicy {
            gain: continuous_gain(theta, &problem.cost, problem.horizon, opts.riccati_steps)?,
            regime: Regime::Continuous,
            sim: *sim,
            intervals: None,
        }),
        Algorithm::DiscreteLs(_) => {
            let n = sched
                .intervals(phase)
                .ok_or_else(|| LqError::Config("discrete algorithm needs an N schedule".into()))?;
            let (_, gain) = solve_riccati_discrete(theta, &problem.cost, problem.horizon, n)?;
            // Refine so that every coarse node is a fine node and h <= tau / 50.
            let tau = problem.horizon / n as f64;
            let sub = MIN_SUBSTEPS_PER_INTERVAL.max((tau / sim.h_sim - 1e-9).ceil() as usize);
            Ok(PhasePolicy {
                gain,
                regime: Regime::Discrete(n),
                sim: SimConfig::new(problem.horizon / (n * sub) as f64, sim.master_seed)?,
                intervals: Some(n),
            })
        }
    }
}

/// Shared phase loop of both algorithms.
pub fn run_algorithm(
    problem: &LqProblem,
    theta0: &ModelTheta,
    algorithm: Algorithm,
    sched: &ScheduleConfig,
    sim: &SimConfig,
    opts: &RunOptions,
) -> Result<RunRecord> {
    sched.validate()?;
    if let Algorithm::DiscreteLs(s) = algorithm {
        if sched.n_schedule != Some(s) {
            return Err(LqError::Config("schedule N rule disagrees with the algorithm".into()));
        }
    }
    if theta0.a.shape() != problem.theta_star.a.shape() || theta0.b.shape() != problem.theta_star.b.shape() {
        return Err(LqError::Dimension("theta0 does not match the problem".into()));
    }
    if algorithm == Algorithm::ContinuousLs {
        sim.steps(problem.horizon)?;
    }
    let mut warnings = Vec::new();
    if !full_column_rank(&theta0.b).0 {
        warnings.push("initial B estimate is not full column rank".to_string());
    }
    let j_star = optimal_cost(problem, opts.riccati_steps)?;
    let mut record = RunRecord {
        algorithm,
        master_seed: sim.master_seed,
        optimal_cost: j_star,
        theta_star: problem.theta_star.clone(),
        phases: Vec::with_capacity(sched.phases),
        final_theta: None,
        regret: Vec::with_capacity(sched.phases),
        warnings,
        failure: None,
    };
    let mut theta = theta0.clone();
    let (mut cum_expected, mut cum_realized, mut cum_m) = (0.0, 0.0, 0usize);
    for phase in 0..sched.phases {
        let outcome = run_phase(problem, &theta, algorithm, sched, sim, opts, phase, j_star);
        let (phase_record, next) = match outcome {
            Ok(v) => v,
            Err(e) if is_blow_up(&e) => {
                record.failure = Some(format!("phase {phase}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        cum_m += phase_record.episodes;
        cum_expected += phase_record.episodes as f64 * (phase_record.expected_cost - j_star);
        cum_realized += phase_record.realized_costs.iter().map(|c| c - j_star).sum::<f64>();
        record.regret.push(RegretPoint {
            episodes: cum_m,
            expected: cum_expected,
            realized: cum_realized,
        });
        record.phases.push(phase_record);
        if !opts.freeze_theta {
            theta = next.clone();
        }
        record.final_theta = Some(next);
    }
    Ok(record)
}

#[allow(clippy::too_many_arguments)]
fn run_phase(
    problem: &LqProblem,
    theta: &ModelTheta,
    algorithm: Algorithm,
    sched: &ScheduleConfig,
    sim: &SimConfig,
    opts: &RunOptions,
    phase: usize,
    j_star: f64,
) -> Result<(PhaseRecord, ModelTheta)> {
    let policy = phase_policy(problem, theta, algorithm, sched, sim, opts, phase)?;
    let expected_cost = lyapunov_cost(
        &problem.theta_star,
        &problem.cost,
        &policy.gain,
        &problem.x0,
        problem.horizon,
        opts.riccati_steps,
    )?;
    debug_assert!(expected_cost - j_star >= -1e-8 * (1.0 + j_star));
    let m = sched.episodes(phase);
    let key = phase as u64;
    let per_episode = map_episodes(problem, &policy.gain, &policy.sim, key, m, |_, traj| {
        episode_sums(&traj, policy.regime).map(|s| (s, realized_cost(&traj, &problem.cost)))
    })?
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let (sums, realized_costs): (Vec<_>, Vec<_>) = per_episode.into_iter().unzip();
    let stats = average_sums(problem.n, problem.d, &sums)?;
    let next = ls_estimate(&stats)?;

    let gradient_certificate = if opts.certify {
        // Same keys, same trajectories: the gradient is evaluated from residuals.
        let grads = map_episodes(problem, &policy.gain, &policy.sim, key, m, |_, traj| {
            episode_gradient_sum(&next, &traj, policy.regime)
        })?
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Some(gradient_certificate(&finish_gradient(&next, &grads), &stats))
    } else {
        None
    };
    Ok((
        PhaseRecord {
            phase,
            theta: theta.clone(),
            episodes: m,
            intervals: policy.intervals,
            sim_step: policy.sim.h_sim,
            expected_cost,
            realized_costs,
            gradient_certificate,
            gain: Some(policy.gain),
        },
        next,
    ))
}

pub fn run_algorithm1(
    problem: &LqProblem,
    theta0: &ModelTheta,
    sched: &ScheduleConfig,
    sim: &SimConfig,
    opts: &RunOptions,
) -> Result<RunRecord> {
    run_algorithm(problem, theta0, Algorithm::ContinuousLs, sched, sim, opts)
}

pub fn run_algorithm2(
    problem: &LqProblem,
    theta0: &ModelTheta,
    sched: &ScheduleConfig,
    sim: &SimConfig,
    opts: &RunOptions,
) -> Result<RunRecord> {
    let rule = sched
        .n_schedule
        .ok_or_else(|| LqError::Config("discrete algorithm needs an N schedule".into()))?;
    run_algorithm(problem, theta0, Algorithm::DiscreteLs(rule), sched, sim, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record_with(gaps: &[(usize, f64)]) -> RunRecord {
        let theta = LqProblem::scalar_canonical().theta_star;
        let phases = gaps
            .iter()
            .enumerate()
            .map(|(i, &(m, g))| PhaseRecord {
                phase: i,
                theta: theta.clone(),
                episodes: m,
                intervals: None,
                sim_step: 1e-3,
                expected_cost: 1.0 + g,
                realized_costs: vec![1.0 + g; m],
                gradient_certificate: None,
                gain: None,
            })
            .collect();
        RunRecord {
            algorithm: Algorithm::ContinuousLs,
            master_seed: 0,
            optimal_cost: 1.0,
            theta_star: theta,
            phases,
            final_theta: None,
            regret: vec![],
            warnings: vec![],
            failure: None,
        }
    }

    #[test]
    fn schedule_arithmetic() {
        let s = ScheduleConfig::default();
        assert_eq!(s.m0(), 24);
        assert_eq!(s.episodes(1), 48);
        assert_eq!(s.episodes(2), 96);
        assert_eq!(s.total_episodes(), 24 * 1023);
    }

    #[test]
    fn geometric_intervals() {
        let g = NSchedule::Geometric(10);
        let got: Vec<usize> = (0..6).map(|l| g.intervals(l)).collect();
        assert_eq!(got, vec![10, 15, 20, 29, 40, 57]);
        assert_eq!(NSchedule::Fixed(10).intervals(7), 10);
    }

    #[test]
    fn schedule_parse_and_validate() {
        assert_eq!(NSchedule::parse("geo:12").unwrap(), NSchedule::Geometric(12));
        assert_eq!(NSchedule::parse("fixed:10").unwrap(), NSchedule::Fixed(10));
        assert!(NSchedule::parse("fixed").is_err());
        assert!(NSchedule::parse("poly:3").is_err());
        let bad = ScheduleConfig { delta: 0.5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ScheduleConfig { n_schedule: Some(NSchedule::Fixed(1)), ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn regret_zero_for_optimal_record() {
        let r = record_with(&[(3, 0.0), (6, 0.0)]);
        for m in 0..=9 {
            assert_eq!(regret_at(&r, m, RegretMode::Expected).unwrap(), 0.0);
        }
    }

    #[test]
    fn regret_linear_within_phase() {
        let r = record_with(&[(10, 0.25)]);
        assert_eq!(regret_at(&r, 7, RegretMode::Expected).unwrap(), 7.0 * 0.25);
    }

    #[test]
    fn regret_piecewise_sum() {
        let r = record_with(&[(2, 0.5), (4, 0.125)]);
        assert_eq!(regret_at(&r, 5, RegretMode::Expected).unwrap(), 2.0 * 0.5 + 3.0 * 0.125);
        assert_eq!(regret_at(&r, 5, RegretMode::Realized).unwrap(), 2.0 * 0.5 + 3.0 * 0.125);
        assert!(matches!(
            regret_at(&r, 7, RegretMode::Expected),
            Err(LqError::EpisodeRange { requested: 7, available: 6 })
        ));
        let curve = regret_curve(&r, RegretMode::Expected, &[1, 2]).unwrap();
        let ms: Vec<usize> = curve.iter().map(|p| p.0).collect();
        assert_eq!(ms, vec![1, 2, 6]);
    }

    #[test]
    fn theta0_is_perturbed_and_reproducible() {
        let p = LqProblem::planar();
        let a = perturbed_theta0(&p, 4).unwrap();
        let b = perturbed_theta0(&p, 4).unwrap();
        assert_eq!(a, b);
        let dist = theta_distance(&a, &p.theta_star).unwrap();
        assert!(dist > 0.0 && dist <= 0.5 * (8.0f64).sqrt());
        assert!(full_column_rank(&a.b).0);
    }
}

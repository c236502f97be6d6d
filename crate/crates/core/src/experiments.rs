//! Experiment drivers behind the command-line tool.
//!
//! Each experiment has a pure study function that returns its numbers and a
//! command wrapper that writes CSV/JSON files into the output directory and
//! decides pass/fail. Study functions are deterministic given their inputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::algorithms::{
    late_exponent, perturbed_theta0, run_algorithm, worst_certificate, Algorithm, NSchedule,
    RunOptions, RunRecord, ScheduleConfig,
};
use crate::error::{LqError, Result};
use crate::estimation::{
    average_sums, episode_gradient_sum, episode_sums, finish_gradient, gradient_certificate,
    ls_estimate, population_estimate, population_stats, EpisodeSums, Regime,
};
use crate::linalg::{max_eigenvalue_sym, min_eigenvalue_sym, spectral_norm};
use crate::model::{full_column_rank, theta_distance, CostSpec, GainPath, LqProblem, ModelTheta};
use crate::riccati::{
    continuous_gain, gain_from_riccati, gamma_and_gain, lyapunov_cost, optimal_cost,
    solve_riccati_continuous, solve_riccati_discrete,
};
use crate::sim::{episode_rng, map_episodes, realized_cost, SimConfig};
use crate::stats::{loglog_slope, mean, median, std_error, variance};

/// Reference grid for the convergence study.
pub const REFERENCE_STEPS: usize = 10_000;
/// Stream ids reserved for deterministic draws that are not episodes.
const DIRECTION_STREAM: u64 = u64::MAX - 1;
const SANITY_STREAM: u64 = u64::MAX - 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    RiccatiConvergence,
    GapScaling,
    EstimationScaling,
    Identifiability,
    Regret,
    Sanity,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::RiccatiConvergence,
        Experiment::GapScaling,
        Experiment::EstimationScaling,
        Experiment::Identifiability,
        Experiment::Regret,
        Experiment::Sanity,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Experiment::RiccatiConvergence => "riccati-convergence",
            Experiment::GapScaling => "gap-scaling",
            Experiment::EstimationScaling => "estimation-scaling",
            Experiment::Identifiability => "identifiability",
            Experiment::Regret => "regret",
            Experiment::Sanity => "sanity",
        }
    }
}

impl FromStr for Experiment {
    type Err = LqError;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| LqError::Config(format!("unknown experiment `{s}`")))
    }
}

/// Which learners the regret experiment runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlgoSelection {
    Continuous,
    Discrete,
    All,
}

impl FromStr for AlgoSelection {
    type Err = LqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alg1" => Ok(AlgoSelection::Continuous),
            "alg2" => Ok(AlgoSelection::Discrete),
            "all" => Ok(AlgoSelection::All),
            _ => Err(LqError::Config(format!("unknown algorithm selection `{s}`"))),
        }
    }
}

/// Fully resolved experiment request.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub experiment: Experiment,
    pub problem: LqProblem,
    pub problem_name: String,
    pub seed: u64,
    pub out: PathBuf,
    pub schedule: ScheduleConfig,
    /// N schedules for the discrete learner; empty means `fixed:10` and `geo:10`.
    pub nsched: Vec<NSchedule>,
    pub h_sim: f64,
    pub seeds: usize,
    pub algorithms: AlgoSelection,
    pub riccati_steps: usize,
    pub inject_fault: bool,
}

impl ExperimentSpec {
    pub fn new(experiment: Experiment, problem: LqProblem, problem_name: &str, out: &Path) -> Self {
        Self {
            experiment,
            problem,
            problem_name: problem_name.to_string(),
            seed: 0,
            out: out.to_path_buf(),
            schedule: ScheduleConfig::default(),
            nsched: Vec::new(),
            h_sim: 0.01,
            seeds: 20,
            algorithms: AlgoSelection::All,
            riccati_steps: 1000,
            inject_fault: false,
        }
    }

    /// Type checks that must pass before any computation.
    pub fn validate(&self) -> Result<()> {
        self.schedule
            .validate()
            .map_err(|e| LqError::Config(e.to_string()))?;
        for s in &self.nsched {
            if s.base() < 2 {
                return Err(LqError::Config("N0 must be at least 2".into()));
            }
        }
        if !(self.h_sim > 0.0) || !self.h_sim.is_finite() {
            return Err(LqError::Config("h_sim must be positive".into()));
        }
        SimConfig::new(self.h_sim, self.seed)
            .and_then(|c| c.steps(self.problem.horizon))
            .map_err(|e| LqError::Config(e.to_string()))?;
        if self.seeds < 1 {
            return Err(LqError::Config("need at least one seed".into()));
        }
        if self.riccati_steps < 2 {
            return Err(LqError::Config("Riccati grid needs at least 2 steps".into()));
        }
        Ok(())
    }
}

/// Resolves a built-in instance name or a config file path.
pub fn resolve_problem(source: &str) -> Result<(LqProblem, String)> {
    if let Some(p) = LqProblem::builtin(source) {
        return Ok((p, source.to_string()));
    }
    let path = Path::new(source);
    if !path.is_file() {
        return Err(LqError::Config(format!(
            "`{source}` is neither a built-in instance nor a readable file"
        )));
    }
    let p = LqProblem::from_config_file(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "config".into());
    Ok((p, name))
}

/// Result of a command: overall verdict plus human-readable report lines.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub passed: bool,
    pub report: Vec<String>,
    pub files: Vec<PathBuf>,
}

impl Outcome {
    fn check(&mut self, name: &str, ok: bool, detail: String) {
        self.report
            .push(format!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" }));
        self.passed &= ok;
    }

    fn write(&mut self, dir: &Path, name: &str, body: &str) -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, body)?;
        self.files.push(path);
        Ok(())
    }
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<Outcome> {
    spec.validate()?;
    fs::create_dir_all(&spec.out)?;
    match spec.experiment {
        Experiment::RiccatiConvergence => cmd_riccati_convergence(spec),
        Experiment::GapScaling => cmd_gap_scaling(spec),
        Experiment::EstimationScaling => cmd_estimation_scaling(spec),
        Experiment::Identifiability => cmd_identifiability(spec),
        Experiment::Regret => cmd_regret(spec),
        Experiment::Sanity => cmd_sanity(spec),
    }
}

fn fresh_outcome() -> Outcome {
    Outcome {
        passed: true,
        ..Outcome::default()
    }
}

// ---------------------------------------------------------------------------
// Riccati convergence

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub intervals: usize,
    pub sup_error_p: f64,
    pub sup_error_k: f64,
    /// `sup_t (|P_t - P_i| + |K_t - K_i|)`.
    pub error: f64,
    /// `log2(e(N) / e(2N))` against the next row, if there is one.
    pub observed_order: Option<f64>,
}

impl ConvergenceRow {
    pub fn ratio(&self) -> Option<f64> {
        self.observed_order.map(f64::exp2)
    }
}

/// Sup-distance between the Riccati difference solution with `N` pieces and a
/// continuous reference on `reference` steps, over each whole interval.
pub fn riccati_convergence(
    problem: &LqProblem,
    intervals: &[usize],
    reference: usize,
) -> Result<Vec<ConvergenceRow>> {
    let theta = &problem.theta_star;
    let cost = &problem.cost;
    let path = solve_riccati_continuous(theta, cost, problem.horizon, reference)?;
    let gain = gain_from_riccati(theta, cost, &path)?;
    let mut rows: Vec<ConvergenceRow> = intervals
        .iter()
        .map(|&n| {
            if n == 0 || !reference.is_multiple_of(n) {
                return Err(LqError::Grid(format!(
                    "N = {n} does not divide the reference grid {reference}"
                )));
            }
            let (disc, dgain) = solve_riccati_discrete(theta, cost, problem.horizon, n)?;
            let stride = reference / n;
            let (mut sp, mut sk, mut se) = (0.0f64, 0.0f64, 0.0f64);
            for i in 0..n {
                for k in i * stride..(i + 1) * stride {
                    let ep = spectral_norm(&(&path.values[k] - &disc.values[i]));
                    let ek = spectral_norm(&(&gain.values()[k] - &dgain.values()[i]));
                    sp = sp.max(ep);
                    sk = sk.max(ek);
                    se = se.max(ep + ek);
                }
            }
            Ok(ConvergenceRow {
                intervals: n,
                sup_error_p: sp,
                sup_error_k: sk,
                error: se,
                observed_order: None,
            })
        })
        .collect::<Result<_>>()?;
    for i in 0..rows.len().saturating_sub(1) {
        if rows[i + 1].intervals == 2 * rows[i].intervals {
            rows[i].observed_order = Some((rows[i].error / rows[i + 1].error).log2());
        }
    }
    Ok(rows)
}

pub fn convergence_csv(rows: &[ConvergenceRow]) -> String {
    let mut s = String::from("N,sup_error_P,sup_error_K,observed_order\n");
    for r in rows {
        let order = r.observed_order.map(|o| o.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{order}", r.intervals, r.sup_error_p, r.sup_error_k);
    }
    s
}

pub fn cmd_riccati_convergence(spec: &ExperimentSpec) -> Result<Outcome> {
    let rows = riccati_convergence(&spec.problem, &[25, 50, 100, 200, 400], REFERENCE_STEPS)?;
    let mut out = fresh_outcome();
    out.write(&spec.out, "riccati_convergence.csv", &convergence_csv(&rows))?;
    for r in rows.iter().filter(|r| r.observed_order.is_some()) {
        let ratio = r.ratio().unwrap_or(f64::NAN);
        out.check(
            &format!("e({0})/e({1})", r.intervals, 2 * r.intervals),
            (1.6..=2.4).contains(&ratio),
            format!("{ratio:.4} (want [1.6, 2.4])"),
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Performance gaps

/// Unit-Frobenius direction in parameter space, drawn from `seed`.
pub fn random_direction(problem: &LqProblem, seed: u64) -> Result<ModelTheta> {
    let mut rng = episode_rng(seed, DIRECTION_STREAM, 0);
    let (n, d) = (problem.n, problem.d);
    let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let b = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let scale = (a.norm_squared() + b.norm_squared()).sqrt();
    ModelTheta::new(a / scale, b / scale)
}

/// `(epsilon, J(K^{theta* + eps D}) - J*)` for each `epsilon`.
pub fn gap_epsilon(
    problem: &LqProblem,
    direction: &ModelTheta,
    epsilons: &[f64],
    steps: usize,
) -> Result<Vec<(f64, f64)>> {
    let j_star = optimal_cost(problem, steps)?;
    epsilons
        .iter()
        .map(|&eps| {
            let theta = ModelTheta::new(
                &problem.theta_star.a + &direction.a * eps,
                &problem.theta_star.b + &direction.b * eps,
            )?;
            let gain = continuous_gain(&theta, &problem.cost, problem.horizon, steps)?;
            let j = lyapunov_cost(&problem.theta_star, &problem.cost, &gain, &problem.x0, problem.horizon, steps)?;
            Ok((eps, j - j_star))
        })
        .collect()
}

/// `(N, J(K^{theta*, T/N}) - J*)` for each `N`.
pub fn gap_stepsize(problem: &LqProblem, intervals: &[usize], steps: usize) -> Result<Vec<(f64, f64)>> {
    let j_star = optimal_cost(problem, steps)?;
    intervals
        .iter()
        .map(|&n| {
            let (_, gain) = solve_riccati_discrete(&problem.theta_star, &problem.cost, problem.horizon, n)?;
            let j = lyapunov_cost(&problem.theta_star, &problem.cost, &gain, &problem.x0, problem.horizon, steps)?;
            Ok((n as f64, j - j_star))
        })
        .collect()
}

/// Log-log slope over the rows with positive abscissa.
pub fn fitted_slope(rows: &[(f64, f64)]) -> f64 {
    let (x, y): (Vec<f64>, Vec<f64>) = rows.iter().filter(|r| r.0 > 0.0).copied().unzip();
    loglog_slope(&x, &y)
}

fn sweep_csv(header: &str, rows: &[(f64, f64)], slope: f64) -> String {
    let mut s = format!("{header}\n");
    for (x, y) in rows {
        let _ = writeln!(s, "{x},{y},{slope}");
    }
    s
}

pub const GAP_EPSILONS: [f64; 5] = [0.0, 0.2, 0.1, 0.05, 0.025];
pub const GAP_INTERVALS: [usize; 4] = [25, 50, 100, 200];

pub fn cmd_gap_scaling(spec: &ExperimentSpec) -> Result<Outcome> {
    let dir = random_direction(&spec.problem, spec.seed)?;
    let eps_rows = gap_epsilon(&spec.problem, &dir, &GAP_EPSILONS, spec.riccati_steps)?;
    let eps_slope = fitted_slope(&eps_rows);
    let n_rows = gap_stepsize(&spec.problem, &GAP_INTERVALS, spec.riccati_steps)?;
    let n_slope = fitted_slope(&n_rows);
    let mut out = fresh_outcome();
    out.write(&spec.out, "gap_epsilon.csv", &sweep_csv("epsilon_or_N,gap,fitted_slope", &eps_rows, eps_slope))?;
    out.write(&spec.out, "gap_stepsize.csv", &sweep_csv("epsilon_or_N,gap,fitted_slope", &n_rows, n_slope))?;
    let g0 = eps_rows.iter().find(|r| r.0 == 0.0).map(|r| r.1).unwrap_or(0.0);
    out.check("gap at epsilon = 0", g0.abs() <= 1e-8, format!("{g0:.3e} (want <= 1e-8)"));
    out.check(
        "epsilon slope",
        (1.7..=2.3).contains(&eps_slope),
        format!("{eps_slope:.4} (want [1.7, 2.3])"),
    );
    out.check(
        "stepsize slope",
        (-2.3..=-1.7).contains(&n_slope),
        format!("{n_slope:.4} (want [-2.3, -1.7])"),
    );
    Ok(out)
}

// ---------------------------------------------------------------------------
// Estimation scaling

#[derive(Debug, Clone)]
pub struct MSweep {
    pub ms: Vec<usize>,
    /// `errors[i][s]`: distance of the estimate for `ms[i]` episodes and seed `s`.
    pub errors: Vec<Vec<f64>>,
    /// Ridge-gradient certificate of every estimate.
    pub certificates: Vec<f64>,
}

impl MSweep {
    pub fn rms(&self) -> Vec<f64> {
        self.errors.iter().map(|e| crate::stats::rms(e)).collect()
    }

    pub fn slope(&self) -> f64 {
        let m: Vec<f64> = self.ms.iter().map(|&m| m as f64).collect();
        loglog_slope(&m, &self.rms())
    }
}

/// RMS estimation error of the continuous ridge estimator under a fixed
/// policy `gain`. Each seed simulates `max(ms)` episodes once; smaller `m`
/// use prefixes of the same episodes. Every estimate is certified by a
/// second pass evaluating the ridge gradient from residuals.
pub fn estimation_m_sweep(
    problem: &LqProblem,
    gain: &GainPath,
    ms: &[usize],
    seeds: &[u64],
    h_sim: f64,
) -> Result<MSweep> {
    let m_max = *ms.iter().max().ok_or_else(|| LqError::Invalid("empty m sweep".into()))?;
    let mut errors = vec![Vec::with_capacity(seeds.len()); ms.len()];
    let mut certificates = Vec::new();
    for &seed in seeds {
        let cfg = SimConfig::new(h_sim, seed)?;
        let sums: Vec<EpisodeSums> = map_episodes(problem, gain, &cfg, 0, m_max, |_, traj| {
            episode_sums(&traj, Regime::Continuous)
        })?
        .into_iter()
        .collect::<Result<_>>()?;
        let fits = ms
            .iter()
            .map(|&m| {
                let stats = average_sums(problem.n, problem.d, &sums[..m])?;
                let theta = ls_estimate(&stats)?;
                Ok((stats, theta))
            })
            .collect::<Result<Vec<_>>>()?;
        let grads: Vec<Vec<Vec<f64>>> = map_episodes(problem, gain, &cfg, 0, m_max, |_, traj| {
            fits.iter()
                .map(|(_, theta)| episode_gradient_sum(theta, &traj, Regime::Continuous))
                .collect::<Result<Vec<_>>>()
        })?
        .into_iter()
        .collect::<Result<_>>()?;
        for (i, ((stats, theta), &m)) in fits.iter().zip(ms).enumerate() {
            errors[i].push(theta_distance(theta, &problem.theta_star)?);
            let per_episode: Vec<Vec<f64>> = grads[..m].iter().map(|g| g[i].clone()).collect();
            certificates.push(gradient_certificate(&finish_gradient(theta, &per_episode), stats));
        }
    }
    Ok(MSweep {
        ms: ms.to_vec(),
        errors,
        certificates,
    })
}

/// `(N, |theta_hat - theta*|)` with `theta_hat` the population-limit discrete
/// estimate (ridge weight `1/m_proxy`) under the piecewise optimal gain.
pub fn discrete_bias(
    problem: &LqProblem,
    intervals: &[usize],
    m_proxy: usize,
    steps: usize,
) -> Result<Vec<(f64, f64)>> {
    intervals
        .iter()
        .map(|&n| {
            let (_, gain) = solve_riccati_discrete(&problem.theta_star, &problem.cost, problem.horizon, n)?;
            let (v, y) = population_stats(problem, &gain, Regime::Discrete(n), steps)?;
            let est = population_estimate(&v, &y, m_proxy)?;
            Ok((n as f64, theta_distance(&est, &problem.theta_star)?))
        })
        .collect()
}

pub const M_SWEEP: [usize; 3] = [250, 1000, 4000];
pub const BIAS_INTERVALS: [usize; 4] = [10, 20, 40, 80];
pub const POPULATION_M: usize = 100_000;

pub fn cmd_estimation_scaling(spec: &ExperimentSpec) -> Result<Outcome> {
    let p = &spec.problem;
    let gain = continuous_gain(&p.theta_star, &p.cost, p.horizon, spec.riccati_steps)?;
    let seeds: Vec<u64> = (0..50).map(|s| spec.seed + s).collect();
    let sweep = estimation_m_sweep(p, &gain, &M_SWEEP, &seeds, spec.h_sim)?;
    let rms = sweep.rms();
    let slope = sweep.slope();
    let bias = discrete_bias(p, &BIAS_INTERVALS, POPULATION_M, spec.riccati_steps)?;
    let bias_slope = fitted_slope(&bias);

    let mut out = fresh_outcome();
    let mut s = String::from("m,rms_error,fitted_slope\n");
    for (m, r) in sweep.ms.iter().zip(&rms) {
        let _ = writeln!(s, "{m},{r},{slope}");
    }
    out.write(&spec.out, "estimation_m.csv", &s)?;
    let mut s = String::from("N,bias\n");
    for (n, b) in &bias {
        let _ = writeln!(s, "{n},{b}");
    }
    out.write(&spec.out, "estimation_bias.csv", &s)?;

    out.check("m slope", (-0.6..=-0.4).contains(&slope), format!("{slope:.4} (want [-0.6, -0.4])"));
    let monotone = rms.windows(2).all(|w| w[1] < w[0]);
    out.check("rms decreases with m", monotone, format!("{rms:?}"));
    out.check(
        "bias slope",
        (-1.3..=-0.7).contains(&bias_slope),
        format!("{bias_slope:.4} (want [-1.3, -0.7])"),
    );
    let worst = sweep.certificates.iter().copied().fold(0.0, f64::max);
    out.check("ridge certificate", worst <= 1e-8, format!("{worst:.3e} (want <= 1e-8)"));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Identifiability

#[derive(Debug, Clone, PartialEq)]
pub struct IdentifiabilityRow {
    pub instance: String,
    pub min_eigenvalue: f64,
    pub full_rank: bool,
}

/// Smallest eigenvalue of the population `V` under the optimal continuous policy.
pub fn population_min_eigenvalue(problem: &LqProblem, steps: usize) -> Result<f64> {
    let gain = continuous_gain(&problem.theta_star, &problem.cost, problem.horizon, steps)?;
    let (v, _) = population_stats(problem, &gain, Regime::Continuous, steps)?;
    Ok(min_eigenvalue_sym(&v))
}

pub fn identifiability(instances: &[(String, LqProblem)], steps: usize) -> Result<Vec<IdentifiabilityRow>> {
    instances
        .iter()
        .map(|(name, p)| {
            Ok(IdentifiabilityRow {
                instance: name.clone(),
                min_eigenvalue: population_min_eigenvalue(p, steps)?,
                full_rank: full_column_rank(&p.theta_star.b).0,
            })
        })
        .collect()
}

pub fn cmd_identifiability(spec: &ExperimentSpec) -> Result<Outcome> {
    let mut instances: Vec<(String, LqProblem)> = LqProblem::BUILTIN_NAMES
        .iter()
        .filter_map(|&n| LqProblem::builtin(n).map(|p| (n.to_string(), p)))
        .collect();
    if LqProblem::builtin(&spec.problem_name).is_none() {
        instances.push((spec.problem_name.clone(), spec.problem.clone()));
    }
    let rows = identifiability(&instances, spec.riccati_steps)?;
    let mut out = fresh_outcome();
    let mut s = String::from("instance,min_eigenvalue_V\n");
    for r in &rows {
        let _ = writeln!(s, "{},{}", r.instance, r.min_eigenvalue);
    }
    out.write(&spec.out, "identifiability.csv", &s)?;
    for r in &rows {
        let (ok, want) = if r.full_rank {
            (r.min_eigenvalue > 1e-4, "> 1e-4")
        } else {
            (r.min_eigenvalue < 1e-8, "< 1e-8")
        };
        out.check(&r.instance, ok, format!("{:.3e} (want {want})", r.min_eigenvalue));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Regret

/// Phase boundaries used by the late-phase diagnostics.
pub const LATE_EXPONENT_POINTS: usize = 5;
pub const RATIO_POINTS: usize = 4;

/// One learner run for each seed, in seed order. Seeds run concurrently.
pub fn regret_runs(
    problem: &LqProblem,
    algorithm: Algorithm,
    sched: &ScheduleConfig,
    h_sim: f64,
    seeds: &[u64],
    opts: &RunOptions,
) -> Vec<Result<RunRecord>> {
    let mut sched = *sched;
    if let Algorithm::DiscreteLs(rule) = algorithm {
        sched.n_schedule = Some(rule);
    }
    seeds
        .par_iter()
        .map(|&seed| {
            let theta0 = perturbed_theta0(problem, seed)?;
            let sim = SimConfig::new(h_sim, seed)?;
            run_algorithm(problem, &theta0, algorithm, &sched, &sim, opts)
        })
        .collect()
}

/// Per-seed late-phase diagnostics and their medians for one learner.
#[derive(Debug, Clone)]
pub struct RegretSummary {
    pub algorithm: Algorithm,
    /// `(seed, late exponent, ratio spread)` for completed runs.
    pub rows: Vec<(u64, f64, f64)>,
    pub failed: usize,
    pub median_exponent: f64,
    /// Spread of the seed-median of `R(M) / (ln M ln ln M)` over the last boundaries.
    pub median_ratio_spread: f64,
    /// Largest `max_l |theta_l - theta*| / |theta_0 - theta*|` over completed runs.
    pub worst_excursion: f64,
    pub worst_certificate: Option<f64>,
}

pub fn summarize_regret(algorithm: Algorithm, seeds: &[u64], runs: &[Result<RunRecord>]) -> RegretSummary {
    let mut rows = Vec::new();
    let mut failed = 0;
    let mut completed: Vec<&RunRecord> = Vec::new();
    for (&seed, run) in seeds.iter().zip(runs) {
        match run {
            Ok(r) if !r.failed() => {
                rows.push((
                    seed,
                    late_exponent(r, LATE_EXPONENT_POINTS),
                    crate::algorithms::log_ratio_spread(r, RATIO_POINTS),
                ));
                completed.push(r);
            }
            _ => failed += 1,
        }
    }
    let exps: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let median_ratio_spread = median_ratio_curve_spread(&completed, RATIO_POINTS);
    let worst_excursion = completed
        .iter()
        .map(|r| {
            let d0 = theta_distance(&r.phases[0].theta, &r.theta_star).unwrap_or(f64::NAN);
            r.max_theta_error() / d0
        })
        .fold(0.0, f64::max);
    let worst_certificate = completed.iter().filter_map(|r| worst_certificate(r)).reduce(f64::max);
    RegretSummary {
        algorithm,
        rows,
        failed,
        median_exponent: median(&exps),
        median_ratio_spread,
        worst_excursion,
        worst_certificate,
    }
}

fn median_ratio_curve_spread(runs: &[&RunRecord], last: usize) -> f64 {
    let Some(first) = runs.first() else {
        return f64::NAN;
    };
    let len = first.regret.len();
    if runs.iter().any(|r| r.regret.len() != len) || len < last {
        return f64::NAN;
    }
    let medians: Vec<f64> = (len - last..len)
        .map(|i| {
            let ratios: Vec<f64> = runs
                .iter()
                .map(|r| {
                    let m = r.regret[i].episodes as f64;
                    r.regret[i].expected / (m.ln() * m.ln().ln())
                })
                .collect();
            median(&ratios)
        })
        .collect();
    let hi = medians.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = medians.iter().copied().fold(f64::INFINITY, f64::min);
    hi / lo
}

pub fn summary_csv(summary: &RegretSummary) -> String {
    let mut s = String::from("seed,late_exponent,ratio_spread\n");
    for (seed, e, r) in &summary.rows {
        let _ = writeln!(s, "{seed},{e},{r}");
    }
    s
}

/// Learners requested by `spec`.
pub fn selected_algorithms(spec: &ExperimentSpec) -> Vec<Algorithm> {
    let mut algs = Vec::new();
    if spec.algorithms != AlgoSelection::Discrete {
        algs.push(Algorithm::ContinuousLs);
    }
    if spec.algorithms != AlgoSelection::Continuous {
        if spec.nsched.is_empty() {
            algs.push(Algorithm::DiscreteLs(NSchedule::Fixed(10)));
            algs.push(Algorithm::DiscreteLs(NSchedule::Geometric(10)));
        } else {
            algs.extend(spec.nsched.iter().map(|&s| Algorithm::DiscreteLs(s)));
        }
    }
    algs
}

/// Brackets applied to the median late exponent of each learner.
pub fn exponent_bracket(algorithm: Algorithm) -> (f64, f64) {
    match algorithm {
        Algorithm::ContinuousLs => (f64::NEG_INFINITY, 0.35),
        Algorithm::DiscreteLs(NSchedule::Fixed(_)) => (0.8, 1.1),
        Algorithm::DiscreteLs(NSchedule::Geometric(_)) => (f64::NEG_INFINITY, 0.45),
    }
}

pub fn cmd_regret(spec: &ExperimentSpec) -> Result<Outcome> {
    let seeds: Vec<u64> = (0..spec.seeds as u64).map(|s| spec.seed + s).collect();
    let opts = RunOptions {
        riccati_steps: spec.riccati_steps,
        certify: true,
        freeze_theta: false,
    };
    let mut out = fresh_outcome();
    for algorithm in selected_algorithms(spec) {
        let label = algorithm.label();
        let runs = regret_runs(&spec.problem, algorithm, &spec.schedule, spec.h_sim, &seeds, &opts);
        for (seed, run) in seeds.iter().zip(&runs) {
            match run {
                Ok(r) => {
                    out.write(&spec.out, &format!("regret_{label}_seed{seed}.json"), &r.to_json()?)?;
                    out.write(&spec.out, &format!("regret_{label}_seed{seed}.csv"), &r.to_regret_csv())?;
                    if let Some(f) = &r.failure {
                        out.report.push(format!("seed {seed} failed: {f}"));
                    }
                }
                Err(e) if matches!(e, LqError::Config(_) | LqError::Io(_)) => {
                    return Err(LqError::Config(e.to_string()))
                }
                Err(e) => out.report.push(format!("seed {seed} failed: {e}")),
            }
        }
        let summary = summarize_regret(algorithm, &seeds, &runs);
        out.write(&spec.out, &format!("summary_{label}.csv"), &summary_csv(&summary))?;
        let fail_frac = summary.failed as f64 / seeds.len() as f64;
        out.check(
            &format!("{label} failed seeds"),
            fail_frac <= 0.2,
            format!("{}/{} (want <= 20%)", summary.failed, seeds.len()),
        );
        if spec.schedule.phases < LATE_EXPONENT_POINTS + 1 {
            out.report
                .push(format!("{label}: too few phases for late-phase diagnostics"));
            continue;
        }
        let (lo, hi) = exponent_bracket(algorithm);
        let e = summary.median_exponent;
        out.check(
            &format!("{label} median late exponent"),
            e >= lo && e <= hi,
            format!("{e:.4} (want [{lo}, {hi}])"),
        );
        if algorithm == Algorithm::ContinuousLs {
            let r = summary.median_ratio_spread;
            out.check(&format!("{label} log-ratio spread"), r <= 3.0, format!("{r:.4} (want <= 3)"));
        }
        out.check(
            &format!("{label} estimates bounded"),
            summary.worst_excursion <= 10.0,
            format!("{:.4} x initial error (want <= 10)", summary.worst_excursion),
        );
        let c = summary.worst_certificate.unwrap_or(f64::NAN);
        out.check(&format!("{label} ridge certificate"), c <= 1e-8, format!("{c:.3e} (want <= 1e-8)"));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Sanity suite

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

/// One random draw for the Riccati difference operator bounds.
pub struct GammaDraw {
    pub theta: ModelTheta,
    pub cost: CostSpec,
    pub tau: f64,
    pub p: DMatrix<f64>,
    pub p_alt: DMatrix<f64>,
}

fn random_spd<R: Rng>(rng: &mut R, n: usize, floor: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    &m * m.transpose() + DMatrix::identity(n, n) * floor
}

/// Random draw: `n, d` in `1..=3`, Gaussian `A, B`, SPD `Q, R, P, P'`, `tau` in `(0, 1]`.
pub fn gamma_draw<R: Rng>(rng: &mut R) -> GammaDraw {
    let n = rng.random_range(1..=3);
    let d = rng.random_range(1..=3);
    let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let b = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = random_spd(rng, n, 0.1);
    let r = random_spd(rng, d, 0.1);
    let scale = rng.random_range(0.1..5.0);
    let p = random_spd(rng, n, 0.0) * scale;
    let p_alt = random_spd(rng, n, 0.0) * scale;
    GammaDraw {
        theta: ModelTheta { a, b },
        cost: CostSpec { q, r },
        tau: rng.random_range(0.01..=1.0),
        p,
        p_alt,
    }
}

/// `(lhs, rhs)` of the a-priori bound `|G(P)| <= tau |Q| + (1 + tau |A|)^2 |P|`.
pub fn gamma_apriori_sides(draw: &GammaDraw, sign: f64) -> Result<(f64, f64)> {
    let g = gamma_and_gain(&draw.p, &draw.theta, &draw.cost, draw.tau, sign)?.0;
    let grow = 1.0 + draw.tau * spectral_norm(&draw.theta.a);
    let rhs = draw.tau * spectral_norm(&draw.cost.q) + grow * grow * spectral_norm(&draw.p);
    Ok((spectral_norm(&g), rhs))
}

/// `(lhs, rhs)` of the stability bound
/// `|G(P) - G(P')| <= (1 + tau |R^-1| |B|^2 max|P|)^2 (1 + tau |A|)^2 |P - P'|`.
pub fn gamma_stability_sides(draw: &GammaDraw, sign: f64) -> Result<(f64, f64)> {
    let g1 = gamma_and_gain(&draw.p, &draw.theta, &draw.cost, draw.tau, sign)?.0;
    let g2 = gamma_and_gain(&draw.p_alt, &draw.theta, &draw.cost, draw.tau, sign)?.0;
    let r_inv = 1.0 / min_eigenvalue_sym(&draw.cost.r);
    let bn = spectral_norm(&draw.theta.b);
    let pmax = spectral_norm(&draw.p).max(spectral_norm(&draw.p_alt));
    let c1 = 1.0 + draw.tau * r_inv * bn * bn * pmax;
    let c2 = 1.0 + draw.tau * spectral_norm(&draw.theta.a);
    let rhs = c1 * c1 * c2 * c2 * spectral_norm(&(&draw.p - &draw.p_alt));
    Ok((spectral_norm(&(g1 - g2)), rhs))
}

/// Relative slack for rounding when a bound is attained with equality.
const BOUND_SLACK: f64 = 1e-12;

/// Cheap invariant suite. `inject_fault` flips the sign of the correction
/// term inside the Riccati difference operator.
pub fn sanity_checks(inject_fault: bool) -> Result<Vec<Check>> {
    let sign = if inject_fault { -1.0 } else { 1.0 };
    let mut checks = Vec::new();
    let mut rng = episode_rng(0, SANITY_STREAM, 0);

    let draws: Vec<GammaDraw> = (0..200).map(|_| gamma_draw(&mut rng)).collect();
    let mut worst = f64::NEG_INFINITY;
    let mut worst_stab = f64::NEG_INFINITY;
    let mut psd = f64::INFINITY;
    for draw in &draws {
        let (l, r) = gamma_apriori_sides(draw, sign)?;
        worst = worst.max((l - r) / r.max(f64::MIN_POSITIVE));
        let (l, r) = gamma_stability_sides(draw, sign)?;
        worst_stab = worst_stab.max((l - r) / r.max(f64::MIN_POSITIVE));
        let g = gamma_and_gain(&draw.p, &draw.theta, &draw.cost, draw.tau, sign)?.0;
        psd = psd.min(min_eigenvalue_sym(&g) / (1.0 + max_eigenvalue_sym(&g).abs()));
    }
    checks.push(check(
        "gamma-apriori-bound",
        worst <= BOUND_SLACK,
        format!("max relative excess {worst:.3e} over 200 draws"),
    ));
    checks.push(check(
        "gamma-stability-bound",
        worst_stab <= BOUND_SLACK,
        format!("max relative excess {worst_stab:.3e} over 200 draws"),
    ));
    checks.push(check("gamma-psd", psd >= -1e-10, format!("min scaled eigenvalue {psd:.3e}")));

    let scalar = LqProblem::scalar_canonical();
    let p0 = solve_riccati_continuous(&scalar.theta_star, &scalar.cost, 1.0, 1000)?.values[0][(0, 0)];
    let want = 1f64.tanh();
    checks.push(check(
        "riccati-tanh",
        (p0 - want).abs() <= 1e-6,
        format!("P(0) = {p0:.9}, tanh(1) = {want:.9}"),
    ));

    let mut worst_oracle = 0.0f64;
    for _ in 0..20 {
        let p = random_instance(&mut rng)?;
        let j = optimal_cost(&p, 1000)?;
        let k = continuous_gain(&p.theta_star, &p.cost, p.horizon, 1000)?;
        let l = lyapunov_cost(&p.theta_star, &p.cost, &k, &p.x0, p.horizon, 1000)?;
        worst_oracle = worst_oracle.max((j - l).abs() / (1.0 + j));
    }
    checks.push(check(
        "cost-oracle-agreement",
        worst_oracle <= 1e-8,
        format!("max relative gap {worst_oracle:.3e} over 20 instances"),
    ));

    let zero = GainPath::zero(1, 1, 1.0)?;
    let c = lyapunov_cost(&scalar.theta_star, &scalar.cost, &zero, &scalar.x0, 1.0, 1000)?;
    checks.push(check("lyapunov-driftless", (c - 1.5).abs() <= 1e-6, format!("{c:.9} (want 1.5)")));

    checks.extend(monte_carlo_checks(&scalar, 10_000)?);

    let planar = LqProblem::planar();
    let k = continuous_gain(&planar.theta_star, &planar.cost, planar.horizon, 1000)?;
    let (v, y) = population_stats(&planar, &k, Regime::Continuous, 1000)?;
    let solved = crate::linalg::spd_solve(&v, &y, "V")?;
    let rel = (&solved - planar.theta_star.stack()).norm() / planar.theta_star.stack().norm();
    checks.push(check("population-identity", rel <= 1e-6, format!("relative error {rel:.3e}")));
    Ok(checks)
}

/// Random valid instance with `n, d <= 3`, `T` in `[0.5, 2]`.
pub fn random_instance<R: Rng>(rng: &mut R) -> Result<LqProblem> {
    let n = rng.random_range(1..=3);
    let d = rng.random_range(1..=3);
    let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let b = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let x0 = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let cost = CostSpec::new(random_spd(rng, n, 0.1), random_spd(rng, d, 0.1))?;
    LqProblem::new(rng.random_range(0.5..=2.0), x0, ModelTheta::new(a, b)?, cost)
}

/// Driftless-scalar Monte Carlo checks at `m` episodes: terminal mean and
/// variance, realized cost, the Ito integral of `W dW`, the martingale
/// identity for `Y - V theta*`, and weak convergence in `h_sim`.
pub fn monte_carlo_checks(scalar: &LqProblem, m: usize) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let zero = GainPath::zero(1, 1, scalar.horizon)?;
    let cfg = SimConfig::new(0.01, 7)?;
    let rows: Vec<(f64, f64, f64)> = map_episodes(scalar, &zero, &cfg, 0, m, |_, traj| {
        let mut w = 0.0;
        let mut ito = 0.0;
        for k in 0..traj.steps() {
            let dw = traj.increment(k)[0];
            ito += w * dw;
            w += dw;
        }
        (traj.final_state()[0], realized_cost(&traj, &scalar.cost), ito)
    })?;
    let xt: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let costs: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let ito: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let t = scalar.horizon;
    let x0 = scalar.x0[0];
    let mx = mean(&xt);
    let tol = 3.0 * (t / m as f64).sqrt();
    checks.push(check("mc-terminal-mean", (mx - x0).abs() <= tol, format!("{mx:.5} (want {x0} +- {tol:.4})")));
    let vx = variance(&xt);
    checks.push(check("mc-terminal-variance", (vx - t).abs() <= 0.1 * t, format!("{vx:.5} (want {t} +- 10%)")));
    let mc = mean(&costs);
    checks.push(check("mc-realized-cost", (mc - 1.5).abs() <= 0.03, format!("{mc:.5} (want 1.5 +- 2%)")));
    let (mi, vi) = (mean(&ito), variance(&ito));
    let want = t * t / 2.0;
    let ok = (vi - want).abs() <= 0.1 * want && mi.abs() <= 3.0 * (vi / m as f64).sqrt();
    checks.push(check("mc-ito-integral", ok, format!("mean {mi:.5}, variance {vi:.5} (want 0, {want})")));

    let k_star = continuous_gain(&scalar.theta_star, &scalar.cost, t, 1000)?;
    let stacked = scalar.theta_star.stack();
    let resid: Vec<Vec<f64>> = map_episodes(scalar, &k_star, &cfg, 1, m, |_, traj| {
        let s = episode_sums(&traj, Regime::Continuous)?;
        let p = scalar.n + scalar.d;
        let v = DMatrix::from_row_slice(p, p, &s.v);
        let y = DMatrix::from_row_slice(p, scalar.n, &s.y);
        Ok((y - v * &stacked).as_slice().to_vec())
    })?
    .into_iter()
    .collect::<Result<_>>()?;
    let mut worst = 0.0f64;
    for e in 0..resid[0].len() {
        let col: Vec<f64> = resid.iter().map(|r| r[e]).collect();
        worst = worst.max(mean(&col).abs() / (4.0 * std_error(&col)));
    }
    checks.push(check(
        "mc-martingale",
        worst <= 1.0,
        format!("max |mean| / (4 se) = {worst:.4}"),
    ));

    let mut means = Vec::new();
    for h in [0.01, 0.005] {
        let cfg = SimConfig::new(h, 11)?;
        let c: Vec<f64> = map_episodes(scalar, &k_star, &cfg, 2, m, |_, traj| realized_cost(&traj, &scalar.cost))?;
        means.push((mean(&c), std_error(&c)));
    }
    let diff = (means[0].0 - means[1].0).abs();
    let tol = 3.0 * (means[0].1.powi(2) + means[1].1.powi(2)).sqrt();
    checks.push(check("mc-weak-convergence", diff <= tol, format!("|diff| {diff:.5} (tolerance {tol:.5})")));
    Ok(checks)
}

pub fn sanity_table(checks: &[Check]) -> String {
    let mut s = String::from("check,result,detail\n");
    for c in checks {
        let _ = writeln!(s, "{},{},\"{}\"", c.name, if c.passed { "PASS" } else { "FAIL" }, c.detail);
    }
    s
}

pub fn cmd_sanity(spec: &ExperimentSpec) -> Result<Outcome> {
    let checks = sanity_checks(spec.inject_fault)?;
    let mut out = fresh_outcome();
    out.write(&spec.out, "sanity.csv", &sanity_table(&checks))?;
    for c in &checks {
        out.check(c.name, c.passed, c.detail.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn experiment_names_round_trip() {
        for e in Experiment::ALL {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
        }
        assert!(matches!("nope".parse::<Experiment>(), Err(LqError::Config(_))));
    }

    #[test]
    fn resolve_builtin_and_missing() {
        let (p, name) = resolve_problem("planar").unwrap();
        assert_eq!((p.n, name.as_str()), (2, "planar"));
        assert!(matches!(resolve_problem("/no/such/file.cfg"), Err(LqError::Config(_))));
    }

    #[test]
    fn convergence_rejects_non_dividing_n() {
        let p = LqProblem::scalar_canonical();
        assert!(matches!(riccati_convergence(&p, &[30], 1000), Err(LqError::Grid(_))));
    }

    #[test]
    fn convergence_at_matched_grid_is_small() {
        let p = LqProblem::scalar_canonical();
        let rows = riccati_convergence(&p, &[REFERENCE_STEPS], REFERENCE_STEPS).unwrap();
        assert!(rows[0].sup_error_p < 1e-3 && rows[0].sup_error_k < 1e-3, "{:?}", rows[0]);
    }

    #[test]
    fn gap_is_zero_at_theta_star() {
        let p = LqProblem::planar();
        let dir = random_direction(&p, 3).unwrap();
        let rows = gap_epsilon(&p, &dir, &[0.0], 1000).unwrap();
        assert!(rows[0].1.abs() <= 1e-8);
    }

    #[test]
    fn direction_has_unit_norm() {
        let p = LqProblem::planar();
        let d = random_direction(&p, 9).unwrap();
        assert!(((d.a.norm_squared() + d.b.norm_squared()).sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fault_breaks_apriori_bound() {
        let mut rng = episode_rng(0, SANITY_STREAM, 0);
        let draws: Vec<GammaDraw> = (0..200).map(|_| gamma_draw(&mut rng)).collect();
        let violated = draws
            .iter()
            .any(|d| gamma_apriori_sides(d, -1.0).map(|(l, r)| l > r * (1.0 + BOUND_SLACK)).unwrap());
        assert!(violated);
    }

    #[test]
    fn selection_defaults_to_three_learners() {
        let spec = ExperimentSpec::new(Experiment::Regret, LqProblem::planar(), "planar", Path::new("."));
        assert_eq!(selected_algorithms(&spec).len(), 3);
    }
}

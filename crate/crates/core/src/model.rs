//! Problem instances, drift parameters and feedback gains.
//!
//! A linear system `dX = (A X + B U) dt + dW` is parameterised by the pair
//! `(A, B)`. Estimators work with the stacked `(n+d) x n` matrix
//! `theta = [A^T; B^T]`, so that `theta^T z = A x + B u` for `z = (x; u)`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{LqError, Result};
use crate::linalg::{
    self, all_finite, from_row_major, is_symmetric, max_eigenvalue_sym, min_eigenvalue_sym,
    row_major,
};

/// Drift parameters `(A, B)` of a controlled linear system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ThetaRepr", try_from = "ThetaRepr")]
pub struct ModelTheta {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl ModelTheta {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(LqError::Dimension(format!(
                "A must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != a.nrows() || b.ncols() == 0 {
            return Err(LqError::Dimension(format!(
                "B must be {}xd with d >= 1, got {}x{}",
                a.nrows(),
                b.nrows(),
                b.ncols()
            )));
        }
        if !all_finite(&a) || !all_finite(&b) {
            return Err(LqError::NonFinite("theta".into()));
        }
        Ok(Self { a, b })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn d(&self) -> usize {
        self.b.ncols()
    }

    /// `(n+d) x n` matrix `[A^T; B^T]`.
    pub fn stack(&self) -> DMatrix<f64> {
        let (n, d) = (self.n(), self.d());
        let mut out = DMatrix::zeros(n + d, n);
        out.view_mut((0, 0), (n, n)).copy_from(&self.a.transpose());
        out.view_mut((n, 0), (d, n)).copy_from(&self.b.transpose());
        out
    }

    pub fn unstack(stacked: &DMatrix<f64>) -> Result<Self> {
        let n = stacked.ncols();
        if n == 0 || stacked.nrows() <= n {
            return Err(LqError::Dimension(format!(
                "stacked parameter must be (n+d)xn with d >= 1, got {}x{}",
                stacked.nrows(),
                n
            )));
        }
        let d = stacked.nrows() - n;
        let a = stacked.view((0, 0), (n, n)).transpose();
        let b = stacked.view((n, 0), (d, n)).transpose();
        Self::new(a, b)
    }

    /// Drift `A x + B u` evaluated at `z = (x; u)`.
    pub fn drift(&self, z: &DVector<f64>) -> DVector<f64> {
        self.stack().transpose() * z
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.a.shape() == other.a.shape() && self.b.shape() == other.b.shape()
    }
}

/// JSON form of `ModelTheta`: row-major nested arrays.
#[derive(Serialize, Deserialize)]
struct ThetaRepr {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn from_rows(rows: &[Vec<f64>], cols_hint: usize) -> Result<DMatrix<f64>> {
    let cols = rows.first().map_or(cols_hint, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(LqError::Dimension("ragged matrix rows".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    from_row_major(rows.len(), cols, &flat)
}

impl From<ModelTheta> for ThetaRepr {
    fn from(t: ModelTheta) -> Self {
        Self { a: rows(&t.a), b: rows(&t.b) }
    }
}

impl TryFrom<ThetaRepr> for ModelTheta {
    type Error = LqError;

    fn try_from(r: ThetaRepr) -> Result<Self> {
        ModelTheta::new(from_rows(&r.a, 0)?, from_rows(&r.b, 0)?)
    }
}

pub fn stack_theta(theta: &ModelTheta) -> DMatrix<f64> {
    theta.stack()
}

/// Frobenius norm of the stacked difference.
pub fn theta_distance(a: &ModelTheta, b: &ModelTheta) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(LqError::Dimension(format!(
            "cannot compare theta of shapes ({:?}, {:?}) and ({:?}, {:?})",
            a.a.shape(),
            a.b.shape(),
            b.a.shape(),
            b.b.shape()
        )));
    }
    let da = (&a.a - &b.a).norm_squared();
    let db = (&a.b - &b.b).norm_squared();
    Ok((da + db).sqrt())
}

/// Running-cost weights `x^T Q x + u^T R u`. Both strictly positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

const SPD_REL_TOL: f64 = 1e-12;

fn check_spd(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if !m.is_square() || m.is_empty() {
        return Err(LqError::Dimension(format!("{name} must be square")));
    }
    if !all_finite(m) {
        return Err(LqError::NonFinite(name.into()));
    }
    if !is_symmetric(m, SPD_REL_TOL) {
        return Err(LqError::Invalid(format!("{name} is not symmetric")));
    }
    let lo = min_eigenvalue_sym(m);
    let hi = max_eigenvalue_sym(m).abs();
    if !(lo > SPD_REL_TOL * hi) || lo <= 0.0 {
        return Err(LqError::Invalid(format!(
            "{name} is not positive definite (smallest eigenvalue {lo:e})"
        )));
    }
    Ok(())
}

impl CostSpec {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        check_spd(&q, "Q")?;
        check_spd(&r, "R")?;
        Ok(Self {
            q: linalg::symmetrize(&q),
            r: linalg::symmetrize(&r),
        })
    }

    pub fn identity(n: usize, d: usize) -> Self {
        Self {
            q: DMatrix::identity(n, n),
            r: DMatrix::identity(d, d),
        }
    }
}

/// A full learning-problem instance: true parameter, costs, horizon and start.
#[derive(Debug, Clone, PartialEq)]
pub struct LqProblem {
    pub n: usize,
    pub d: usize,
    pub horizon: f64,
    pub x0: DVector<f64>,
    pub theta_star: ModelTheta,
    pub cost: CostSpec,
}

impl LqProblem {
    /// Builds an instance and rejects it if `validate_problem` lists any violation.
    pub fn new(
        horizon: f64,
        x0: DVector<f64>,
        theta_star: ModelTheta,
        cost: CostSpec,
    ) -> Result<Self> {
        let p = Self {
            n: theta_star.n(),
            d: theta_star.d(),
            horizon,
            x0,
            theta_star,
            cost,
        };
        let report = validate_problem(&p);
        if !report.is_valid() {
            return Err(LqError::Invalid(report.violations.join("; ")));
        }
        Ok(p)
    }

    /// n = d = 1, A = 0, B = 1, Q = R = 1, T = 1, x0 = 1.
    pub fn scalar_canonical() -> Self {
        Self {
            n: 1,
            d: 1,
            horizon: 1.0,
            x0: DVector::from_element(1, 1.0),
            theta_star: ModelTheta {
                a: DMatrix::zeros(1, 1),
                b: DMatrix::from_element(1, 1, 1.0),
            },
            cost: CostSpec::identity(1, 1),
        }
    }

    /// n = d = 2, A = [[0, 1], [-1, 0]], B = I, Q = R = I, T = 1, x0 = (1, 0).
    pub fn planar() -> Self {
        Self {
            n: 2,
            d: 2,
            horizon: 1.0,
            x0: DVector::from_vec(vec![1.0, 0.0]),
            theta_star: ModelTheta {
                a: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]),
                b: DMatrix::identity(2, 2),
            },
            cost: CostSpec::identity(2, 2),
        }
    }

    /// n = 1, d = 2 with B = [1, 1]: the two controls are indistinguishable.
    pub fn dependent_columns() -> Self {
        Self {
            n: 1,
            d: 2,
            horizon: 1.0,
            x0: DVector::from_element(1, 1.0),
            theta_star: ModelTheta {
                a: DMatrix::zeros(1, 1),
                b: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            },
            cost: CostSpec::identity(1, 2),
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "scalar-canonical" => Some(Self::scalar_canonical()),
            "planar" => Some(Self::planar()),
            "dependent-columns" => Some(Self::dependent_columns()),
            _ => None,
        }
    }

    pub const BUILTIN_NAMES: [&'static str; 3] = ["scalar-canonical", "planar", "dependent-columns"];

    /// Parses the flat `key = value` config format (see README).
    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut kv = std::collections::BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LqError::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let key = k.trim().to_string();
            if kv.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(LqError::Config(format!("duplicate key `{key}`")));
            }
        }
        let get = |key: &str| {
            kv.get(key)
                .ok_or_else(|| LqError::Config(format!("missing key `{key}`")))
        };
        let parse_usize = |key: &str| -> Result<usize> {
            get(key)?
                .parse::<usize>()
                .map_err(|e| LqError::Config(format!("`{key}`: {e}")))
        };
        let parse_list = |key: &str| -> Result<Vec<f64>> {
            get(key)?
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| LqError::Config(format!("`{key}`: {e}")))
                })
                .collect()
        };
        for key in kv.keys() {
            if !["n", "d", "T", "x0", "A_star", "B_star", "Q", "R"].contains(&key.as_str()) {
                return Err(LqError::Config(format!("unknown key `{key}`")));
            }
        }
        let n = parse_usize("n")?;
        let d = parse_usize("d")?;
        if n == 0 || d == 0 {
            return Err(LqError::Config("n and d must be at least 1".into()));
        }
        let horizon = get("T")?
            .parse::<f64>()
            .map_err(|e| LqError::Config(format!("`T`: {e}")))?;
        let cfg = |e: LqError| LqError::Config(e.to_string());
        let x0 = parse_list("x0")?;
        if x0.len() != n {
            return Err(LqError::Config(format!("`x0` needs {n} entries, got {}", x0.len())));
        }
        let a = from_row_major(n, n, &parse_list("A_star")?).map_err(cfg)?;
        let b = from_row_major(n, d, &parse_list("B_star")?).map_err(cfg)?;
        let q = from_row_major(n, n, &parse_list("Q")?).map_err(cfg)?;
        let r = from_row_major(d, d, &parse_list("R")?).map_err(cfg)?;
        let theta = ModelTheta::new(a, b).map_err(cfg)?;
        let cost = CostSpec::new(q, r).map_err(cfg)?;
        Self::new(horizon, DVector::from_vec(x0), theta, cost).map_err(cfg)
    }

    pub fn from_config_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LqError::Config(format!("{}: {e}", path.display())))?;
        Self::from_config_str(&text)
    }

    pub fn to_config_string(&self) -> String {
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut s = String::new();
        let _ = writeln!(s, "n = {}", self.n);
        let _ = writeln!(s, "d = {}", self.d);
        let _ = writeln!(s, "T = {}", self.horizon);
        let _ = writeln!(s, "x0 = {}", join(self.x0.as_slice()));
        let _ = writeln!(s, "A_star = {}", join(&row_major(&self.theta_star.a)));
        let _ = writeln!(s, "B_star = {}", join(&row_major(&self.theta_star.b)));
        let _ = writeln!(s, "Q = {}", join(&row_major(&self.cost.q)));
        let _ = writeln!(s, "R = {}", join(&row_major(&self.cost.r)));
        s
    }
}

/// Outcome of `validate_problem`. Rank deficiency of `B*` is reported, not a violation.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
    pub b_singular_values: Vec<f64>,
    pub b_full_column_rank: bool,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

const RANK_REL_TOL: f64 = 1e-10;

/// Full column rank test used for both `B*` and initial estimates.
pub fn full_column_rank(b: &DMatrix<f64>) -> (bool, Vec<f64>) {
    if b.nrows() < b.ncols() {
        let sv: Vec<f64> = b.singular_values().iter().copied().collect();
        return (false, sv);
    }
    let sv = b.singular_values();
    let hi = sv.max();
    let lo = sv.min();
    (hi > 0.0 && lo >= RANK_REL_TOL * hi, sv.iter().copied().collect())
}

pub fn validate_problem(p: &LqProblem) -> ValidationReport {
    let mut violations = Vec::new();
    if !(p.horizon > 0.0) || !p.horizon.is_finite() {
        violations.push("T > 0".to_string());
    }
    if p.n < 1 {
        violations.push("n >= 1".to_string());
    }
    if p.d < 1 {
        violations.push("d >= 1".to_string());
    }
    if p.x0.len() != p.n {
        violations.push(format!("x0 has length {} but n = {}", p.x0.len(), p.n));
    }
    if !p.x0.iter().all(|v| v.is_finite()) {
        violations.push("x0 finite".to_string());
    }
    let th = &p.theta_star;
    if th.a.shape() != (p.n, p.n) || th.b.shape() != (p.n, p.d) {
        violations.push(format!(
            "theta_star shapes {:?}, {:?} inconsistent with (n, d) = ({}, {})",
            th.a.shape(),
            th.b.shape(),
            p.n,
            p.d
        ));
    }
    if !all_finite(&th.a) || !all_finite(&th.b) {
        violations.push("theta_star finite".to_string());
    }
    if p.cost.q.shape() != (p.n, p.n) || p.cost.r.shape() != (p.d, p.d) {
        violations.push("cost weights inconsistent with (n, d)".to_string());
    }
    if let Err(e) = check_spd(&p.cost.q, "Q") {
        violations.push(e.to_string());
    }
    if let Err(e) = check_spd(&p.cost.r, "R") {
        violations.push(e.to_string());
    }
    let (full, sv) = full_column_rank(&th.b);
    ValidationReport {
        violations,
        b_singular_values: sv,
        b_full_column_rank: full,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GainKind {
    /// Values at nodes, linear interpolation in between.
    ContinuousGrid,
    /// One value per interval `[t_i, t_{i+1})`, right-continuous.
    PiecewiseConstant,
}

/// Time-indexed feedback gain `u = K_t x`, each `K_t` of shape `d x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct GainPath {
    kind: GainKind,
    grid: Vec<f64>,
    values: Vec<DMatrix<f64>>,
}

impl GainPath {
    pub fn new(kind: GainKind, grid: Vec<f64>, values: Vec<DMatrix<f64>>) -> Result<Self> {
        if grid.len() < 2 {
            return Err(LqError::Grid("gain grid needs at least two nodes".into()));
        }
        if grid[0] != 0.0 {
            return Err(LqError::Grid("gain grid must start at 0".into()));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(LqError::Grid("gain grid must be strictly increasing".into()));
        }
        let expected = match kind {
            GainKind::ContinuousGrid => grid.len(),
            GainKind::PiecewiseConstant => grid.len() - 1,
        };
        if values.len() != expected {
            return Err(LqError::Dimension(format!(
                "{kind:?} gain on {} nodes needs {expected} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        let shape = values[0].shape();
        if values.iter().any(|v| v.shape() != shape) {
            return Err(LqError::Dimension("gain values differ in shape".into()));
        }
        if !values.iter().all(all_finite) {
            return Err(LqError::NonFinite("gain values".into()));
        }
        Ok(Self { kind, grid, values })
    }

    /// `K_t = k` for all `t` in `[0, horizon]`.
    pub fn constant(k: DMatrix<f64>, horizon: f64) -> Result<Self> {
        Self::new(GainKind::PiecewiseConstant, vec![0.0, horizon], vec![k])
    }

    pub fn zero(n: usize, d: usize, horizon: f64) -> Result<Self> {
        Self::constant(DMatrix::zeros(d, n), horizon)
    }

    pub fn kind(&self) -> GainKind {
        self.kind
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &[DMatrix<f64>] {
        &self.values
    }

    pub fn horizon(&self) -> f64 {
        *self.grid.last().expect("grid is non-empty")
    }

    /// `(d, n)` of every gain value.
    pub fn shape(&self) -> (usize, usize) {
        self.values[0].shape()
    }

    /// Number of constant pieces (piecewise) or grid intervals (continuous).
    pub fn intervals(&self) -> usize {
        self.grid.len() - 1
    }

    fn snap_tol(&self) -> f64 {
        1e-10 * self.horizon()
    }

    /// Index of the interval `[t_i, t_{i+1})` holding `t`, right-continuous and
    /// clamped to the outermost intervals.
    pub fn interval_index(&self, t: f64) -> usize {
        let tol = self.snap_tol();
        let idx = self.grid.partition_point(|&g| g <= t + tol);
        idx.saturating_sub(1).min(self.intervals() - 1)
    }

    pub fn eval(&self, t: f64) -> DMatrix<f64> {
        let (d, n) = self.shape();
        let mut out = DMatrix::zeros(d, n);
        self.eval_into(t, out.as_mut_slice());
        out
    }

    /// Writes `K_t` into `out` in nalgebra's column-major layout.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        match self.kind {
            GainKind::PiecewiseConstant => {
                out.copy_from_slice(self.values[self.interval_index(t)].as_slice());
            }
            GainKind::ContinuousGrid => {
                let i = self.grid.partition_point(|&g| g <= t);
                let i = i.saturating_sub(1).min(self.intervals() - 1);
                let (t0, t1) = (self.grid[i], self.grid[i + 1]);
                let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
                let (lo, hi) = (self.values[i].as_slice(), self.values[i + 1].as_slice());
                if w == 0.0 {
                    out.copy_from_slice(lo);
                } else if w == 1.0 {
                    out.copy_from_slice(hi);
                } else {
                    for ((o, a), b) in out.iter_mut().zip(lo).zip(hi) {
                        *o = (1.0 - w) * a + w * b;
                    }
                }
            }
        }
    }

    /// CSV with columns `t, k_11, k_12, ...` (row-major). Piecewise paths emit
    /// one row per interval start.
    pub fn to_csv(&self) -> String {
        let (d, n) = self.shape();
        let mut s = String::from("t");
        for i in 0..d {
            for j in 0..n {
                let _ = write!(s, ",k_{}{}", i + 1, j + 1);
            }
        }
        s.push('\n');
        for (t, v) in self.grid.iter().zip(&self.values) {
            let _ = write!(s, "{t}");
            for x in row_major(v) {
                let _ = write!(s, ",{x}");
            }
            s.push('\n');
        }
        s
    }
}

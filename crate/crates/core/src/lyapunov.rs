//! Lyapunov operators and grid-checked stability certificates.
//!
//! For a candidate `V(x, t)` and the equation `dX = f dt + g dB`:
//!
//! ```text
//! LV  = V_t + f V_x + g² G(V_xx)
//! L̲V  = V_t + f V_x + g² G̲(V_xx)
//! HV  = g² V_x²
//! ```
//!
//! Since `G̲(α) ≤ ½αv ≤ G(α)` for every admissible density `v`, `L̲V` and `LV`
//! sandwich the generator under every volatility scenario. The certificate
//! checker evaluates the pointwise hypotheses of each stability theorem on a
//! finite [`CheckGrid`] with relative slack [`SLACK`], and the limit-type
//! hypotheses on `φ` by quadrature over the grid horizon. Limit checks are
//! labelled horizon-limited in the report.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::csvfmt::{self, Table};
use crate::expr::{EvalError, Expr, ParseError, Var};
use crate::gcalc::AmbiguityBounds;
use crate::integrator::SdeSpec;

/// Relative tolerance for the pointwise hypotheses.
pub const SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LyapunovError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("{theorem} needs `{field}`")]
    MissingField { theorem: Theorem, field: &'static str },
    #[error("invalid `{field}` for {theorem}: {reason}")]
    InvalidParameter {
        theorem: Theorem,
        field: &'static str,
        reason: String,
    },
    #[error("V must be positive away from x=0, but V({x}, {t}) = {value}")]
    NonPositiveV { x: f64, t: f64, value: f64 },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("invalid check grid: {0}")]
    Grid(String),
    #[error("quadrature of `{function}` failed: {reason}")]
    Quadrature { function: String, reason: String },
}

/// `V` with its exact partial derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovFn {
    pub v: Expr,
    pub v_t: Expr,
    pub v_x: Expr,
    pub v_xx: Expr,
    /// Arguments of `abs`/`sign` nodes; derivatives are formal on their zeros.
    pub kinks: Vec<Expr>,
}

impl LyapunovFn {
    pub fn new(v: Expr) -> Self {
        let dt = v.differentiate(Var::T);
        let dx = v.differentiate(Var::X);
        let dxx = dx.expr.differentiate(Var::X);
        let mut kinks = dx.kinks;
        for k in dt.kinks.into_iter().chain(dxx.kinks) {
            if !kinks.contains(&k) {
                kinks.push(k);
            }
        }
        Self {
            v,
            v_t: dt.expr,
            v_x: dx.expr,
            v_xx: dxx.expr,
            kinks,
        }
    }

    pub fn parse(source: &str) -> Result<Self, LyapunovError> {
        Ok(Self::new(Expr::parse(source)?))
    }
}

/// Finite stand-in for "all x ≠ 0, t ≥ t0".
#[derive(Debug, Clone, PartialEq)]
pub struct CheckGrid {
    pub xs: Vec<f64>,
    pub ts: Vec<f64>,
    pub x_min: f64,
}

impl CheckGrid {
    /// `n_per_sign` log-spaced magnitudes in `[x_min, x_max]` on each side of
    /// zero, and `nt` evenly spaced times in `[t0, t_max]`.
    pub fn new(
        x_min: f64,
        x_max: f64,
        n_per_sign: usize,
        t0: f64,
        t_max: f64,
        nt: usize,
    ) -> Result<Self, LyapunovError> {
        if !(x_min > 0.0 && x_max >= x_min && x_max.is_finite()) {
            return Err(LyapunovError::Grid(format!(
                "need 0 < x_min <= x_max, got [{x_min}, {x_max}]"
            )));
        }
        if !(t_max > t0 && t0.is_finite() && t_max.is_finite()) {
            return Err(LyapunovError::Grid(format!(
                "need t0 < t_max, got [{t0}, {t_max}]"
            )));
        }
        if n_per_sign == 0 || nt < 2 {
            return Err(LyapunovError::Grid(
                "need at least one x point per sign and two t points".into(),
            ));
        }
        let magnitudes: Vec<f64> = if n_per_sign == 1 {
            vec![x_min]
        } else {
            let (a, b) = (x_min.ln(), x_max.ln());
            (0..n_per_sign)
                .map(|i| (a + (b - a) * i as f64 / (n_per_sign - 1) as f64).exp())
                .collect()
        };
        let mut xs: Vec<f64> = magnitudes.iter().rev().map(|m| -m).collect();
        xs.extend(&magnitudes);
        let ts = (0..nt)
            .map(|j| t0 + (t_max - t0) * j as f64 / (nt - 1) as f64)
            .collect();
        Ok(Self { xs, ts, x_min })
    }

    /// `x_min = 1e−3`, `|x| ≤ 10`, 200 points per sign, `t ∈ [t0, t0+20]`
    /// with 200 points.
    pub fn standard(t0: f64) -> Self {
        Self::new(1e-3, 10.0, 200, t0, t0 + 20.0, 200).expect("standard grid is valid")
    }

    pub fn t0(&self) -> f64 {
        self.ts[0]
    }

    pub fn t_max(&self) -> f64 {
        self.ts[self.ts.len() - 1]
    }

    pub fn x_max(&self) -> f64 {
        self.xs.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    fn with_origin(&self) -> Vec<f64> {
        let mut xs = self.xs.clone();
        let k = xs.partition_point(|&x| x < 0.0);
        xs.insert(k, 0.0);
        xs
    }
}

/// Everything the operators need at one point.
#[derive(Debug, Clone, Copy)]
struct Terms {
    v: f64,
    v_t: f64,
    v_x: f64,
    v_xx: f64,
    f: f64,
    g: f64,
}

impl Terms {
    fn at(lf: &LyapunovFn, spec: &SdeSpec, x: f64, t: f64) -> Result<Self, EvalError> {
        Ok(Self {
            v: lf.v.eval(x, t)?,
            v_t: lf.v_t.eval(x, t)?,
            v_x: lf.v_x.eval(x, t)?,
            v_xx: lf.v_xx.eval(x, t)?,
            f: spec.f.eval(x, t)?,
            g: spec.g.eval(x, t)?,
        })
    }

    fn l(&self, b: &AmbiguityBounds) -> f64 {
        self.v_t + self.f * self.v_x + self.g * self.g * b.g_upper(self.v_xx)
    }

    fn l_lower(&self, b: &AmbiguityBounds) -> f64 {
        self.v_t + self.f * self.v_x + self.g * self.g * b.g_lower(self.v_xx)
    }

    fn h(&self) -> f64 {
        self.g * self.g * self.v_x * self.v_x
    }

    /// Scale of the terms of `LV`, for tie decisions.
    fn l_scale(&self, b: &AmbiguityBounds) -> f64 {
        self.v_t.abs() + (self.f * self.v_x).abs() + (self.g * self.g * b.g_upper(self.v_xx)).abs()
    }
}

/// `LV(x,t) = V_t + f V_x + g² G(V_xx)`
pub fn op_l(
    lf: &LyapunovFn,
    spec: &SdeSpec,
    b: &AmbiguityBounds,
    x: f64,
    t: f64,
) -> Result<f64, EvalError> {
    Ok(Terms::at(lf, spec, x, t)?.l(b))
}

/// `L̲V(x,t) = V_t + f V_x + g² G̲(V_xx)`
pub fn op_l_lower(
    lf: &LyapunovFn,
    spec: &SdeSpec,
    b: &AmbiguityBounds,
    x: f64,
    t: f64,
) -> Result<f64, EvalError> {
    Ok(Terms::at(lf, spec, x, t)?.l_lower(b))
}

/// `HV(x,t) = g² V_x²`
pub fn op_h(lf: &LyapunovFn, spec: &SdeSpec, x: f64, t: f64) -> Result<f64, EvalError> {
    let v_x = lf.v_x.eval(x, t)?;
    let g = spec.g.eval(x, t)?;
    Ok(g * g * v_x * v_x)
}

/// Outcome of the local growth check `f² + g² ≤ C_n |x|²` on `0 < |x| ≤ n`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthReport {
    pub n: f64,
    /// Largest observed ratio `(f² + g²)/x²`.
    pub c_n: f64,
    pub worst_x: f64,
    pub worst_t: f64,
    /// False when the ratio is non-finite or keeps growing towards `x = 0`.
    pub bounded: bool,
    pub note: String,
}

/// Decades probed below `x_min` when testing for blow-up of the ratio.
const GROWTH_PROBE_DECADES: i32 = 6;
/// Growth of the shell maximum over the probe decades that counts as divergence.
const GROWTH_DIVERGENCE_FACTOR: f64 = 10.0;

/// Estimates `C_n` over the grid restricted to `|x| ≤ n`, then probes
/// shells `|x| = x_min·10^{−k}` to detect a ratio that diverges at 0.
pub fn check_local_growth(
    spec: &SdeSpec,
    n: f64,
    grid: &CheckGrid,
) -> Result<GrowthReport, LyapunovError> {
    if !(n > 0.0) {
        return Err(LyapunovError::Precondition(format!("n must be positive, got {n}")));
    }
    let ratio = |x: f64, t: f64| -> Result<f64, EvalError> {
        let f = spec.f.eval(x, t)?;
        let g = spec.g.eval(x, t)?;
        Ok((f * f + g * g) / (x * x))
    };
    let xs: Vec<f64> = grid.xs.iter().copied().filter(|x| x.abs() <= n).collect();
    if xs.is_empty() {
        return Err(LyapunovError::Grid(format!("no grid points with |x| <= {n}")));
    }
    let mut report = GrowthReport {
        n,
        c_n: 0.0,
        worst_x: xs[0],
        worst_t: grid.ts[0],
        bounded: true,
        note: String::new(),
    };
    let visit = |x: f64, t: f64, r: f64, report: &mut GrowthReport| {
        if !r.is_finite() {
            if report.bounded || report.c_n.is_finite() {
                report.note = format!("non-finite ratio at x={x}, t={t}");
            }
            report.bounded = false;
            report.c_n = f64::INFINITY;
            report.worst_x = x;
            report.worst_t = t;
        } else if r > report.c_n {
            report.c_n = r;
            report.worst_x = x;
            report.worst_t = t;
        }
    };
    for &t in &grid.ts {
        for &x in &xs {
            let r = ratio(x, t)?;
            visit(x, t, r, &mut report);
        }
    }
    if !report.bounded {
        return Ok(report);
    }
    let x_min = xs.iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
    let mut shell_max = Vec::new();
    for k in 0..=GROWTH_PROBE_DECADES {
        let m = x_min * 10f64.powi(-k);
        let mut best = 0.0f64;
        for &t in &grid.ts {
            for x in [-m, m] {
                let r = ratio(x, t)?;
                if !r.is_finite() {
                    visit(x, t, r, &mut report);
                    return Ok(report);
                }
                best = best.max(r);
                if r > report.c_n {
                    report.worst_x = x;
                    report.worst_t = t;
                }
            }
        }
        shell_max.push(best);
    }
    let first = shell_max[0].max(f64::MIN_POSITIVE);
    let last = shell_max[shell_max.len() - 1];
    if last > GROWTH_DIVERGENCE_FACTOR * first && last > 0.0 {
        report.bounded = false;
        report.c_n = f64::INFINITY;
        report.note = format!(
            "ratio grows from {first:e} to {last:e} as |x| shrinks from {x_min:e} to {:e}",
            x_min * 10f64.powi(-GROWTH_PROBE_DECADES)
        );
    } else {
        report.c_n = report.c_n.max(shell_max.iter().fold(0.0f64, |m, r| m.max(*r)));
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Theorem {
    T33,
    T34,
    T35,
    T36,
    T37,
    T38,
}

impl Theorem {
    pub const ALL: [Theorem; 6] = [
        Theorem::T33,
        Theorem::T34,
        Theorem::T35,
        Theorem::T36,
        Theorem::T37,
        Theorem::T38,
    ];

    /// Whether the hypotheses quantify over all `x`, including 0.
    fn includes_origin(self) -> bool {
        matches!(self, Theorem::T35 | Theorem::T36 | Theorem::T37)
    }
}

impl fmt::Display for Theorem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Theorem::T33 => "T33",
            Theorem::T34 => "T34",
            Theorem::T35 => "T35",
            Theorem::T36 => "T36",
            Theorem::T37 => "T37",
            Theorem::T38 => "T38",
        })
    }
}

impl FromStr for Theorem {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Theorem::ALL
            .into_iter()
            .find(|t| t.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown theorem `{s}` (expected T33..T38)"))
    }
}

/// Constants and auxiliary functions of a certificate. Only the fields the
/// chosen theorem uses need to be set.
#[derive(Debug, Clone, PartialEq)]
pub struct CertificateSpec {
    pub theorem: Theorem,
    pub p: Option<f64>,
    /// For T33 an absent `lambda` means "use the largest admissible one".
    pub lambda: Option<f64>,
    pub rho: Option<f64>,
    pub kappa: Option<f64>,
    pub eta: Option<f64>,
    pub q: Option<f64>,
    /// Exponent `β ∈ [0,1)` of T36/T37.
    pub beta_exp: Option<f64>,
    pub phi: Option<Expr>,
    pub phi1: Option<Expr>,
    pub phi2: Option<Expr>,
    /// `ν(t) = Σ c_k t^k`, lowest degree first.
    pub nu_coeffs: Option<Vec<f64>>,
}

impl CertificateSpec {
    pub fn new(theorem: Theorem) -> Self {
        Self {
            theorem,
            p: None,
            lambda: None,
            rho: None,
            kappa: None,
            eta: None,
            q: None,
            beta_exp: None,
            phi: None,
            phi1: None,
            phi2: None,
            nu_coeffs: None,
        }
    }

    fn need(&self, value: Option<f64>, field: &'static str) -> Result<f64, LyapunovError> {
        let v = value.ok_or(LyapunovError::MissingField {
            theorem: self.theorem,
            field,
        })?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.invalid(field, "must be finite"))
        }
    }

    fn need_expr<'a>(
        &self,
        value: &'a Option<Expr>,
        field: &'static str,
    ) -> Result<&'a Expr, LyapunovError> {
        value.as_ref().ok_or(LyapunovError::MissingField {
            theorem: self.theorem,
            field,
        })
    }

    fn positive(&self, value: Option<f64>, field: &'static str) -> Result<f64, LyapunovError> {
        let v = self.need(value, field)?;
        if v > 0.0 {
            Ok(v)
        } else {
            Err(self.invalid(field, &format!("must be positive, got {v}")))
        }
    }

    fn invalid(&self, field: &'static str, reason: &str) -> LyapunovError {
        LyapunovError::InvalidParameter {
            theorem: self.theorem,
            field,
            reason: reason.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundKind {
    /// `limsup (1/t) log|X| ≤ bound` (stability).
    Upper,
    /// `liminf (1/t) log|X| ≥ bound` (instability).
    Lower,
}

/// Verdict for one hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisVerdict {
    pub name: String,
    pub passed: bool,
    /// Grid point with the smallest relative margin, for pointwise checks.
    pub worst_x: Option<f64>,
    pub worst_t: Option<f64>,
    /// `rhs − lhs` at the worst point (negative means violated).
    pub margin: f64,
    pub relative_margin: f64,
    pub horizon_limited: bool,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertificateReport {
    pub theorem: Theorem,
    pub hypotheses: Vec<HypothesisVerdict>,
    pub lambda: f64,
    pub bound: f64,
    pub bound_kind: BoundKind,
    pub granted: bool,
    pub caveats: Vec<String>,
}

impl CertificateReport {
    /// One row per hypothesis.
    pub fn to_csv(&self) -> String {
        let mut table = Table::new(&[
            "hypothesis",
            "passed",
            "x",
            "t",
            "margin",
            "relative_margin",
            "horizon_limited",
            "note",
        ]);
        for h in &self.hypotheses {
            table.row([
                h.name.clone(),
                h.passed.to_string(),
                csvfmt::opt_float(h.worst_x),
                csvfmt::opt_float(h.worst_t),
                csvfmt::float(h.margin),
                csvfmt::float(h.relative_margin),
                h.horizon_limited.to_string(),
                h.note.clone(),
            ]);
        }
        table.finish()
    }

    /// Single-record summary.
    pub fn verdict_csv(&self) -> String {
        let mut table = Table::new(&[
            "theorem",
            "granted",
            "lambda",
            "bound_kind",
            "bound",
            "horizon_limited",
        ]);
        let kind = match self.bound_kind {
            BoundKind::Upper => "limsup_le",
            BoundKind::Lower => "liminf_ge",
        };
        table.row([
            self.theorem.to_string(),
            self.granted.to_string(),
            csvfmt::float(self.lambda),
            kind.to_string(),
            csvfmt::float(self.bound),
            self.hypotheses.iter().any(|h| h.horizon_limited).to_string(),
        ]);
        table.finish()
    }
}

/// Running minimum of the relative margin of `lhs ≤ rhs` over grid points.
#[derive(Debug, Clone, Copy)]
struct Worst {
    x: f64,
    t: f64,
    margin: f64,
    relative: f64,
    passed: bool,
}

impl Worst {
    fn empty() -> Self {
        Self {
            x: f64::NAN,
            t: f64::NAN,
            margin: f64::INFINITY,
            relative: f64::INFINITY,
            passed: true,
        }
    }

    fn observe(&mut self, x: f64, t: f64, lhs: f64, rhs: f64) {
        let margin = rhs - lhs;
        let scale = lhs.abs().max(rhs.abs());
        let relative = if scale > 0.0 { margin / scale } else { 0.0 };
        let ok = margin >= -SLACK * scale;
        if relative < self.relative || (relative == self.relative && margin < self.margin) {
            *self = Self {
                x,
                t,
                margin,
                relative,
                passed: self.passed && ok,
            };
        } else {
            self.passed &= ok;
        }
    }

    fn merge(mut self, other: Self) -> Self {
        let passed = self.passed && other.passed;
        if other.relative < self.relative
            || (other.relative == self.relative && other.margin < self.margin)
        {
            self = other;
        }
        self.passed = passed;
        self
    }

    fn verdict(self, name: &str) -> HypothesisVerdict {
        HypothesisVerdict {
            name: name.to_string(),
            passed: self.passed,
            worst_x: self.x.is_finite().then_some(self.x),
            worst_t: self.t.is_finite().then_some(self.t),
            margin: self.margin,
            relative_margin: self.relative,
            horizon_limited: false,
            note: String::new(),
        }
    }
}

/// Scalar verdict for `lhs ≤ rhs` with the same slack policy.
fn scalar_verdict(name: &str, lhs: f64, rhs: f64, horizon_limited: bool, note: String) -> HypothesisVerdict {
    let mut w = Worst::empty();
    w.observe(f64::NAN, f64::NAN, lhs, rhs);
    let mut v = w.verdict(name);
    v.horizon_limited = horizon_limited;
    v.note = note;
    v
}

/// Pointwise inequality `lhs ≤ rhs` produced by a closure over grid terms.
type PointCheck<'a> = Box<dyn Fn(f64, f64, &Terms) -> (f64, f64) + Sync + 'a>;

/// Evaluates every pointwise check over the grid (parallel over `t`).
fn run_pointwise(
    lf: &LyapunovFn,
    spec: &SdeSpec,
    xs: &[f64],
    ts: &[f64],
    checks: &[(&str, PointCheck<'_>)],
) -> Result<Vec<Worst>, LyapunovError> {
    let rows: Vec<Result<Vec<Worst>, LyapunovError>> = ts
        .par_iter()
        .map(|&t| {
            let mut worst = vec![Worst::empty(); checks.len()];
            for &x in xs {
                let terms = Terms::at(lf, spec, x, t)?;
                if x != 0.0 && !(terms.v > 0.0) {
                    return Err(LyapunovError::NonPositiveV {
                        x,
                        t,
                        value: terms.v,
                    });
                }
                for (w, (_, check)) in worst.iter_mut().zip(checks) {
                    let (lhs, rhs) = check(x, t, &terms);
                    w.observe(x, t, lhs, rhs);
                }
            }
            Ok(worst)
        })
        .collect();
    let mut total = vec![Worst::empty(); checks.len()];
    for row in rows {
        for (acc, w) in total.iter_mut().zip(row?) {
            *acc = acc.merge(w);
        }
    }
    Ok(total)
}

/// Cumulative trapezoid integral of `phi(t)` over the grid times.
fn cumulative_integral(phi: &Expr, ts: &[f64]) -> Result<Vec<f64>, LyapunovError> {
    let values = ts
        .iter()
        .map(|&t| phi.eval(0.0, t))
        .collect::<Result<Vec<_>, _>>()?;
    let mut acc = vec![0.0];
    for j in 1..ts.len() {
        let prev = acc[j - 1];
        acc.push(prev + 0.5 * (values[j] + values[j - 1]) * (ts[j] - ts[j - 1]));
    }
    Ok(acc)
}

/// Indices of the second half `[(t0 + t_max)/2, t_max]` with `t > 0`, where
/// start-up transients have mostly died out.
fn last_half(ts: &[f64]) -> Vec<usize> {
    let t_max = ts[ts.len() - 1];
    let from = 0.5 * (ts[0] + t_max);
    (0..ts.len())
        .filter(|&j| ts[j] >= from && ts[j] > 0.0)
        .collect()
}

/// Least-squares fit of `y ≈ Σ c_k basis_k(t)`, returning the coefficients.
fn least_squares(rows: &[(Vec<f64>, f64)]) -> Option<Vec<f64>> {
    let k = rows.first()?.0.len();
    let mut a = vec![vec![0.0; k + 1]; k];
    for (basis, y) in rows {
        for i in 0..k {
            for j in 0..k {
                a[i][j] += basis[i] * basis[j];
            }
            a[i][k] += basis[i] * y;
        }
    }
    // Gaussian elimination with partial pivoting on the normal equations
    for col in 0..k {
        let pivot = (col..k).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        for row in 0..k {
            if row != col {
                let factor = a[row][col] / a[col][col];
                for c in col..=k {
                    a[row][c] -= factor * a[col][c];
                }
            }
        }
    }
    Some((0..k).map(|i| a[i][k] / a[i][i]).collect())
}

/// Horizon estimate of `liminf (1/t)∫_{t0}^t φ`: fits `a + b/t` on the
/// second half of the horizon and returns `a`.
fn average_limit(phi: &Expr, name: &str, ts: &[f64]) -> Result<f64, LyapunovError> {
    let integral = cumulative_integral(phi, ts)?;
    let rows: Vec<(Vec<f64>, f64)> = last_half(ts)
        .into_iter()
        .map(|j| (vec![1.0, 1.0 / ts[j]], integral[j] / ts[j]))
        .collect();
    if rows.len() < 3 {
        return Err(LyapunovError::Quadrature {
            function: name.into(),
            reason: "fewer than three grid times in the second half of the horizon".into(),
        });
    }
    least_squares(&rows)
        .map(|c| c[0])
        .filter(|a| a.is_finite())
        .ok_or_else(|| LyapunovError::Quadrature {
            function: name.into(),
            reason: "degenerate extrapolation".into(),
        })
}

/// Horizon estimate of `limsup (1/t) log ∫_{t0}^t φ`: fits
/// `log ∫φ ≈ a·t + b + c·log t` on the second half of the horizon and returns
/// `a`; `−∞` when the integral vanishes there.
fn log_growth_limit(phi: &Expr, name: &str, ts: &[f64]) -> Result<f64, LyapunovError> {
    let integral = cumulative_integral(phi, ts)?;
    let rows: Vec<(Vec<f64>, f64)> = last_half(ts)
        .into_iter()
        .filter(|&j| integral[j] > 0.0)
        .map(|j| {
            let t = ts[j];
            (vec![t, 1.0, t.ln()], integral[j].ln())
        })
        .collect();
    if rows.is_empty() {
        return Ok(f64::NEG_INFINITY);
    }
    if rows.len() < 4 {
        return Err(LyapunovError::Quadrature {
            function: name.into(),
            reason: "too few positive-integral grid times in the second half of the horizon".into(),
        });
    }
    least_squares(&rows)
        .map(|c| c[0])
        .filter(|a| a.is_finite())
        .ok_or_else(|| LyapunovError::Quadrature {
            function: name.into(),
            reason: "degenerate extrapolation".into(),
        })
}

/// `φ(t) ≥ 0` on the grid times.
fn nonnegative(phi: &Expr, name: &str, ts: &[f64]) -> Result<HypothesisVerdict, LyapunovError> {
    let mut w = Worst::empty();
    for &t in ts {
        w.observe(f64::NAN, t, 0.0, phi.eval(0.0, t)?);
    }
    let mut v = w.verdict(&format!("{name}(t) >= 0"));
    v.worst_x = None;
    Ok(v)
}

fn polynomial(coeffs: &[f64], t: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c)
}

fn polynomial_derivative(coeffs: &[f64], t: f64) -> f64 {
    coeffs
        .iter()
        .enumerate()
        .skip(1)
        .rev()
        .fold(0.0, |acc, (k, c)| acc * t + k as f64 * c)
}

/// Largest `λ` with `LV ≤ −λV` on the grid: `inf(−LV/V)`, or `None` when it
/// is not positive beyond the tie slack.
pub fn best_lambda_t33(
    lf: &LyapunovFn,
    spec: &SdeSpec,
    b: &AmbiguityBounds,
    grid: &CheckGrid,
    p: f64,
) -> Result<Option<f64>, LyapunovError> {
    let (lambda, scale) = lambda_scan(lf, spec, b, grid, Some(p))?;
    Ok((lambda > SLACK * scale).then_some(lambda))
}

/// Returns `inf(−LV/V)` and the largest relative size of the terms of `LV`.
fn lambda_scan(
    lf: &LyapunovFn,
    spec: &SdeSpec,
    b: &AmbiguityBounds,
    grid: &CheckGrid,
    p: Option<f64>,
) -> Result<(f64, f64), LyapunovError> {
    let rows: Vec<Result<(f64, f64), LyapunovError>> = grid
        .ts
        .par_iter()
        .map(|&t| {
            let (mut lambda, mut scale) = (f64::INFINITY, 0.0f64);
            for &x in &grid.xs {
                let terms = Terms::at(lf, spec, x, t)?;
                if !(terms.v > 0.0) {
                    return Err(LyapunovError::NonPositiveV {
                        x,
                        t,
                        value: terms.v,
                    });
                }
                if let Some(p) = p {
                    let lower = x.abs().powf(p);
                    if lower > terms.v * (1.0 + SLACK) {
                        return Err(LyapunovError::Precondition(format!(
                            "|x|^p <= V fails at x={x}, t={t}"
                        )));
                    }
                }
                lambda = lambda.min(-terms.l(b) / terms.v);
                scale = scale.max(terms.l_scale(b) / terms.v);
            }
            Ok((lambda, scale))
        })
        .collect();
    let mut out = (f64::INFINITY, 0.0f64);
    for row in rows {
        let (l, s) = row?;
        out = (out.0.min(l), out.1.max(s));
    }
    Ok(out)
}

fn growth_verdict(spec: &SdeSpec, grid: &CheckGrid) -> Result<HypothesisVerdict, LyapunovError> {
    let report = check_local_growth(spec, grid.x_max(), grid)?;
    Ok(HypothesisVerdict {
        name: "(H3.1) f^2+g^2 <= C_n x^2".into(),
        passed: report.bounded,
        worst_x: Some(report.worst_x),
        worst_t: Some(report.worst_t),
        margin: if report.bounded { report.c_n } else { f64::NEG_INFINITY },
        relative_margin: if report.bounded { 0.0 } else { f64::NEG_INFINITY },
        horizon_limited: false,
        note: if report.bounded {
            format!("C_n = {:e} for n = {}", report.c_n, report.n)
        } else {
            report.note
        },
    })
}

/// Checks the hypotheses of the chosen theorem on the grid and computes the
/// implied exponent bound. `granted` is true iff every hypothesis passes.
pub fn check_certificate(
    lf: &LyapunovFn,
    spec: &SdeSpec,
    b: &AmbiguityBounds,
    cert: &CertificateSpec,
    grid: &CheckGrid,
) -> Result<CertificateReport, LyapunovError> {
    let theorem = cert.theorem;
    let xs = if theorem.includes_origin() {
        grid.with_origin()
    } else {
        grid.xs.clone()
    };
    let ts = &grid.ts;
    let p = cert.positive(cert.p, "p")?;
    let mut hypotheses = Vec::new();
    let mut caveats = Vec::new();
    if !lf.kinks.is_empty() {
        let args: Vec<String> = lf.kinks.iter().map(|k| k.to_string()).collect();
        caveats.push(format!(
            "V uses abs/sign; derivatives are formal where {} = 0",
            args.join(", ")
        ));
    }
    let (lambda, bound, bound_kind) = match theorem {
        Theorem::T33 => {
            let lambda = match cert.lambda {
                Some(_) => cert.positive(cert.lambda, "lambda")?,
                None => {
                    let (best, scale) = lambda_scan(lf, spec, b, grid, None)?;
                    if best > SLACK * scale {
                        caveats.push(format!("lambda chosen as inf(-LV/V) = {best}"));
                        best
                    } else {
                        caveats.push(format!(
                            "no admissible lambda: inf(-LV/V) = {best} is not positive"
                        ));
                        // check LV <= 0 so the report shows where decay fails
                        0.0
                    }
                }
            };
            hypotheses.push(growth_verdict(spec, grid)?);
            let checks: Vec<(&str, PointCheck)> = vec![
                ("(i) |x|^p <= V", Box::new(move |x, _, s: &Terms| (x.abs().powf(p), s.v))),
                (
                    "(ii) LV <= -lambda V",
                    Box::new(move |_, _, s: &Terms| (s.l(b), -lambda * s.v)),
                ),
            ];
            push_pointwise(&mut hypotheses, lf, spec, &xs, ts, &checks)?;
            if lambda <= 0.0 {
                if let Some(h) = hypotheses.last_mut() {
                    h.passed = false;
                    h.note = "no positive lambda satisfies LV <= -lambda V".into();
                }
            }
            (lambda, -lambda / p, BoundKind::Upper)
        }
        Theorem::T34 => {
            let lambda = cert.need(cert.lambda, "lambda")?;
            let rho = nonneg_param(cert, cert.rho, "rho")?;
            let kappa = cert.positive(cert.kappa, "kappa")?;
            let phi = cert.need_expr(&cert.phi, "phi")?;
            hypotheses.push(scalar_verdict(
                "lambda < sigma_lower^2 rho / 2",
                lambda,
                b.var_lower() * rho / 2.0,
                false,
                String::new(),
            ));
            if hypotheses[0].passed && lambda >= b.var_lower() * rho / 2.0 {
                hypotheses[0].passed = false;
            }
            hypotheses.push(growth_verdict(spec, grid)?);
            hypotheses.push(nonnegative(phi, "phi", ts)?);
            let checks: Vec<(&str, PointCheck)> = vec![
                ("(i) |x|^p <= V", Box::new(move |x, _, s: &Terms| (x.abs().powf(p), s.v))),
                (
                    "(ii) LV <= lambda phi V",
                    Box::new(move |x, t, s: &Terms| {
                        (s.l(b), lambda * phi.eval(x, t).unwrap_or(f64::NAN) * s.v)
                    }),
                ),
                (
                    "(iii) HV >= rho phi V^2",
                    Box::new(move |x, t, s: &Terms| {
                        (rho * phi.eval(x, t).unwrap_or(f64::NAN) * s.v * s.v, s.h())
                    }),
                ),
            ];
            validate_phi(phi, ts)?;
            push_pointwise(&mut hypotheses, lf, spec, &xs, ts, &checks)?;
            let avg = average_limit(phi, "phi", ts)?;
            hypotheses.push(scalar_verdict(
                "(iv) liminf (1/t) int phi >= kappa",
                kappa,
                avg,
                true,
                format!("extrapolated average {avg}"),
            ));
            let bound = -(kappa / p) * (b.var_lower() * rho / 2.0 - lambda);
            (lambda, bound, BoundKind::Upper)
        }
        Theorem::T35 => {
            let lambda = cert.positive(cert.lambda, "lambda")?;
            let nu = cert.nu_coeffs.clone().ok_or(LyapunovError::MissingField {
                theorem,
                field: "nu",
            })?;
            if nu.len() < 2 {
                return Err(cert.invalid("nu", "polynomial must have degree >= 1"));
            }
            if let Some(c) = nu.iter().find(|c| !(**c > 0.0 && c.is_finite())) {
                return Err(cert.invalid("nu", &format!("coefficients must be positive, got {c}")));
            }
            let nu_a = nu.clone();
            let nu_b = nu.clone();
            let checks: Vec<(&str, PointCheck)> = vec![
                ("(i) |x|^p <= V", Box::new(move |x, _, s: &Terms| (x.abs().powf(p), s.v))),
                (
                    "(ii) LV <= -lambda V + nu e^(-lambda t)",
                    Box::new(move |_, t, s: &Terms| {
                        (s.l(b), -lambda * s.v + polynomial(&nu_a, t) * (-lambda * t).exp())
                    }),
                ),
                (
                    "(iii) HV <= nu e^(-lambda t) V",
                    Box::new(move |_, t, s: &Terms| {
                        (s.h(), polynomial(&nu_b, t) * (-lambda * t).exp() * s.v)
                    }),
                ),
            ];
            push_pointwise(&mut hypotheses, lf, spec, &xs, ts, &checks)?;
            let mut w = Worst::empty();
            for &t in ts {
                w.observe(f64::NAN, t, t, polynomial(&nu, t));
            }
            // nu(t) - t is convex for positive coefficients, so nu'(t_max) >= 1
            // carries the grid check to all later times.
            let slope = polynomial_derivative(&nu, grid.t_max());
            w.observe(f64::NAN, grid.t_max(), 1.0, slope);
            let mut v = w.verdict("(iv) nu(t) >= t");
            v.worst_x = None;
            v.note = format!("nu'(t_max) = {slope}");
            hypotheses.push(v);
            (lambda, -lambda / p, BoundKind::Upper)
        }
        Theorem::T36 => {
            let lambda = cert.positive(cert.lambda, "lambda")?;
            let eta = cert.positive(cert.eta, "eta")?;
            let q = cert.positive(cert.q, "q")?;
            let beta = beta_param(cert)?;
            let phi = cert.need_expr(&cert.phi, "phi")?;
            validate_phi(phi, ts)?;
            hypotheses.push(nonnegative(phi, "phi", ts)?);
            let checks: Vec<(&str, PointCheck)> = vec![
                (
                    "(i) e^(lambda t)|x|^p <= V",
                    Box::new(move |x, t, s: &Terms| ((lambda * t).exp() * x.abs().powf(p), s.v)),
                ),
                (
                    "(ii) LV + eta(1+t)^(-q) HV <= phi(1+V^beta)",
                    Box::new(move |x, t, s: &Terms| {
                        let lhs = s.l(b) + eta * (1.0 + t).powf(-q) * s.h();
                        let rhs = phi.eval(x, t).unwrap_or(f64::NAN) * (1.0 + s.v.powf(beta));
                        (lhs, rhs)
                    }),
                ),
            ];
            push_pointwise(&mut hypotheses, lf, spec, &xs, ts, &checks)?;
            let growth = log_growth_limit(phi, "phi", ts)?;
            hypotheses.push(scalar_verdict(
                "(iii) limsup (1/t) log int phi <= 0",
                growth,
                0.0,
                true,
                format!("extrapolated log-growth rate {growth}"),
            ));
            (lambda, -lambda / p, BoundKind::Upper)
        }
        Theorem::T37 => {
            let lambda = cert.positive(cert.lambda, "lambda")?;
            let eta = cert.positive(cert.eta, "eta")?;
            let q = cert.positive(cert.q, "q")?;
            let beta = beta_param(cert)?;
            let phi1 = cert.need_expr(&cert.phi1, "phi1")?;
            let phi2 = cert.need_expr(&cert.phi2, "phi2")?;
            validate_phi(phi1, ts)?;
            validate_phi(phi2, ts)?;
            hypotheses.push(nonnegative(phi1, "phi1", ts)?);
            hypotheses.push(nonnegative(phi2, "phi2", ts)?);
            let var_upper = b.var_upper();
            let checks: Vec<(&str, PointCheck)> = vec![
                (
                    "(i) e^(lambda t)|x|^p <= V",
                    Box::new(move |x, t, s: &Terms| ((lambda * t).exp() * x.abs().powf(p), s.v)),
                ),
                (
                    "(ii) LV + sigma_upper^2 eta e^(-qt) HV <= phi1 + phi2 V^beta",
                    Box::new(move |x, t, s: &Terms| {
                        let lhs = s.l(b) + var_upper * eta * (-q * t).exp() * s.h();
                        let rhs = phi1.eval(x, t).unwrap_or(f64::NAN)
                            + phi2.eval(x, t).unwrap_or(f64::NAN) * s.v.powf(beta);
                        (lhs, rhs)
                    }),
                ),
            ];
            push_pointwise(&mut hypotheses, lf, spec, &xs, ts, &checks)?;
            let g1 = log_growth_limit(phi1, "phi1", ts)?;
            hypotheses.push(scalar_verdict(
                "(iii) limsup (1/t) log int phi1 <= q",
                g1,
                q,
                true,
                format!("extrapolated log-growth rate {g1}"),
            ));
            let g2 = log_growth_limit(phi2, "phi2", ts)?;
            hypotheses.push(scalar_verdict(
                "(iii) limsup (1/t) log int phi2 <= q(1-beta)",
                g2,
                q * (1.0 - beta),
                true,
                format!("extrapolated log-growth rate {g2}"),
            ));
            (lambda, -(lambda - q) / p, BoundKind::Upper)
        }
        Theorem::T38 => {
            let lambda = cert.need(cert.lambda, "lambda")?;
            let rho = nonneg_param(cert, cert.rho, "rho")?;
            let kappa = cert.positive(cert.kappa, "kappa")?;
            let phi = cert.need_expr(&cert.phi, "phi")?;
            let threshold = b.var_upper() * rho / 2.0;
            let mut standing = scalar_verdict(
                "lambda > sigma_upper^2 rho / 2",
                threshold,
                lambda,
                false,
                String::new(),
            );
            standing.passed = lambda > threshold;
            hypotheses.push(standing);
            hypotheses.push(growth_verdict(spec, grid)?);
            validate_phi(phi, ts)?;
            hypotheses.push(nonnegative(phi, "phi", ts)?);
            let checks: Vec<(&str, PointCheck)> = vec![
                ("(i) |x|^p >= V", Box::new(move |x, _, s: &Terms| (s.v, x.abs().powf(p)))),
                (
                    "(ii) lower-LV >= lambda phi V",
                    Box::new(move |x, t, s: &Terms| {
                        (lambda * phi.eval(x, t).unwrap_or(f64::NAN) * s.v, s.l_lower(b))
                    }),
                ),
                (
                    "(iii) HV <= rho phi V^2",
                    Box::new(move |x, t, s: &Terms| {
                        (s.h(), rho * phi.eval(x, t).unwrap_or(f64::NAN) * s.v * s.v)
                    }),
                ),
            ];
            push_pointwise(&mut hypotheses, lf, spec, &xs, ts, &checks)?;
            let avg = average_limit(phi, "phi", ts)?;
            hypotheses.push(scalar_verdict(
                "(iv) liminf (1/t) int phi >= kappa",
                kappa,
                avg,
                true,
                format!("extrapolated average {avg}"),
            ));
            (lambda, (kappa / p) * (lambda - threshold), BoundKind::Lower)
        }
    };
    if hypotheses.iter().any(|h| h.horizon_limited) {
        caveats.push(format!(
            "limit hypotheses checked on the finite horizon [{}, {}]",
            grid.t0(),
            grid.t_max()
        ));
    }
    let granted = hypotheses.iter().all(|h| h.passed);
    Ok(CertificateReport {
        theorem,
        hypotheses,
        lambda,
        bound,
        bound_kind,
        granted,
        caveats,
    })
}

fn push_pointwise(
    out: &mut Vec<HypothesisVerdict>,
    lf: &LyapunovFn,
    spec: &SdeSpec,
    xs: &[f64],
    ts: &[f64],
    checks: &[(&str, PointCheck<'_>)],
) -> Result<(), LyapunovError> {
    let worst = run_pointwise(lf, spec, xs, ts, checks)?;
    for (w, (name, _)) in worst.into_iter().zip(checks) {
        out.push(w.verdict(name));
    }
    Ok(())
}

/// φ must evaluate on the grid times; pointwise closures assume it does.
fn validate_phi(phi: &Expr, ts: &[f64]) -> Result<(), LyapunovError> {
    if phi.depends_on(Var::X) {
        return Err(LyapunovError::Precondition(format!(
            "auxiliary function `{phi}` must depend on t only"
        )));
    }
    for &t in ts {
        phi.eval(0.0, t)?;
    }
    Ok(())
}

fn nonneg_param(
    cert: &CertificateSpec,
    value: Option<f64>,
    field: &'static str,
) -> Result<f64, LyapunovError> {
    let v = cert.need(value, field)?;
    if v >= 0.0 {
        Ok(v)
    } else {
        Err(cert.invalid(field, &format!("must be nonnegative, got {v}")))
    }
}

fn beta_param(cert: &CertificateSpec) -> Result<f64, LyapunovError> {
    let beta = cert.need(cert.beta_exp, "beta_exp")?;
    if (0.0..1.0).contains(&beta) {
        Ok(beta)
    } else {
        Err(cert.invalid("beta_exp", &format!("must lie in [0, 1), got {beta}")))
    }
}

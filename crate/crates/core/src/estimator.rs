//! Monte Carlo estimates of Lyapunov exponents and sublinear expectations
//! over a family of volatility scenarios.
//!
//! Each scenario selects one measure from the ambiguity set. Paths are keyed
//! by `(seed, path index)` only, so every scenario sees the same Wiener
//! increments (common random numbers) and results do not depend on thread
//! scheduling. Means use shifted compensated summation in path order.

use rayon::prelude::*;
use thiserror::Error;

use crate::csvfmt::{self, Table};
use crate::expr::{EvalError, Expr};
use crate::gcalc::AmbiguityBounds;
use crate::integrator::{IntegratorError, Method, SdeSpec, Stepper};
use crate::rng::PathKey;
use crate::scenario::{enumerate_family, FamilyOptions, ScenarioError, TimeGrid, VolatilityScenario};

/// Fraction of the horizon, counted from the end, used as the tail window.
pub const TAIL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimatorError {
    #[error(transparent)]
    Integrator(#[from] IntegratorError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("x0 must be nonzero for a logarithmic exponent")]
    ZeroInitialValue,
    #[error("n_paths must be positive")]
    NoPaths,
    #[error("the scenario list is empty")]
    NoScenarios,
    #[error("every path exploded or left the domain of log|x|; estimate withheld")]
    AllFlagged,
    #[error("precondition failed: {0}")]
    Precondition(String),
}

/// Numerical settings shared by every estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    pub horizon: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub method: Method,
}

impl EstimatorConfig {
    pub fn new(horizon: f64, dt: f64, n_paths: usize, seed: u64) -> Self {
        Self {
            horizon,
            dt,
            n_paths,
            seed,
            method: Method::Euler,
        }
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    fn grid(&self, t0: f64) -> Result<TimeGrid, EstimatorError> {
        if self.n_paths == 0 {
            return Err(EstimatorError::NoPaths);
        }
        Ok(TimeGrid::uniform(t0, self.horizon, self.dt)?)
    }

    fn key(&self, path: usize) -> PathKey {
        PathKey::new(self.seed, path as u64)
    }
}

/// Mean, spread and extremes of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub stderr: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    /// Mean as `x₀ + Σ(xᵢ − x₀)/n` with Neumaier summation, so a constant
    /// sample returns its value exactly. `None` for an empty sample.
    pub fn of(xs: &[f64]) -> Option<Self> {
        let first = *xs.first()?;
        let n = xs.len();
        let shift = compensated_sum(xs.iter().map(|x| x - first));
        let mean = first + shift / n as f64;
        let var = if n > 1 {
            compensated_sum(xs.iter().map(|x| (x - mean) * (x - mean))) / (n - 1) as f64
        } else {
            0.0
        };
        let (min, max) = xs
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        Some(Self {
            n,
            mean,
            stderr: (var / n as f64).sqrt(),
            min,
            max,
        })
    }
}

/// Neumaier's improved Kahan summation.
pub fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Tail statistics of one path. `upper` is the window maximum of
/// `(1/(t−t0)) log|X(t)/x0|` (limsup proxy), `lower` the window minimum
/// (liminf proxy), `slope` the least-squares slope of `log|X|` against `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct PathExponent {
    upper: f64,
    lower: f64,
    slope: f64,
}

/// Running least-squares slope over centred times.
#[derive(Debug, Default, Clone, Copy)]
struct SlopeFit {
    n: f64,
    st: f64,
    sy: f64,
    stt: f64,
    sty: f64,
}

impl SlopeFit {
    fn push(&mut self, t: f64, y: f64) {
        self.n += 1.0;
        self.st += t;
        self.sy += y;
        self.stt += t * t;
        self.sty += t * y;
    }

    fn slope(&self) -> f64 {
        let den = self.n * self.stt - self.st * self.st;
        if den > 0.0 {
            (self.n * self.sty - self.st * self.sy) / den
        } else {
            f64::NAN
        }
    }
}

fn path_exponent(
    stepper: &Stepper<'_>,
    spec: &SdeSpec,
    scenario: &VolatilityScenario,
    bounds: &AmbiguityBounds,
    grid: &TimeGrid,
    key: PathKey,
) -> Result<Option<PathExponent>, EstimatorError> {
    let t0 = grid.start();
    let span = grid.end() - t0;
    let window_start = grid.end() - TAIL_FRACTION * span;
    let centre = grid.end() - 0.5 * TAIL_FRACTION * span;
    let log_x0 = spec.x0.abs().ln();
    let (mut upper, mut lower) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut fit = SlopeFit::default();
    let mut finite = true;
    let explosion = stepper.run(scenario, bounds, grid, key, |s| {
        if s.t >= window_start && s.t > t0 {
            let log_x = s.x.abs().ln();
            if !log_x.is_finite() {
                finite = false;
                return;
            }
            let r = (log_x - log_x0) / (s.t - t0);
            upper = upper.max(r);
            lower = lower.min(r);
            fit.push(s.t - centre, log_x);
        }
    })?;
    if explosion.is_some() || !finite || !upper.is_finite() {
        return Ok(None);
    }
    Ok(Some(PathExponent {
        upper,
        lower,
        slope: fit.slope(),
    }))
}

/// Exponent statistics under one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioExponent {
    pub scenario: VolatilityScenario,
    /// Summary of the per-path limsup proxies.
    pub upper: Summary,
    /// Summary of the per-path liminf proxies.
    pub lower: Summary,
    /// Mean regression slope of `log|X|` over the tail window.
    pub slope: f64,
    pub flagged: usize,
}

/// Exponent estimate over a scenario family. The family supremum is a lower
/// bound on the supremum over the whole ambiguity set.
#[derive(Debug, Clone, PartialEq)]
pub struct ExponentEstimate {
    pub scenarios: Vec<ScenarioExponent>,
    /// Scenarios whose paths were all flagged.
    pub withheld: Vec<VolatilityScenario>,
    /// Max over scenarios of the per-path maximum of the limsup proxy.
    pub family_sup: f64,
    /// Max over scenarios of the mean limsup proxy; the number to compare
    /// with a stability certificate.
    pub family_sup_mean: f64,
    /// Min over scenarios of the mean liminf proxy; the number to compare
    /// with an instability certificate.
    pub family_inf_mean: f64,
    /// Index into `scenarios` attaining `family_sup_mean`.
    pub worst: usize,
    pub n_paths: usize,
    pub horizon: f64,
    pub dt: f64,
    pub flagged: usize,
}

impl ExponentEstimate {
    /// `scenario, mean, max, stderr, n, horizon` plus the liminf proxy,
    /// tail slope and flagged count.
    pub fn to_csv(&self) -> String {
        let mut table = Table::new(&[
            "scenario",
            "mean_exponent",
            "max_exponent",
            "stderr",
            "n",
            "horizon",
            "mean_lower_exponent",
            "tail_slope",
            "flagged",
        ]);
        for s in &self.scenarios {
            table.row([
                s.scenario.to_string(),
                csvfmt::float(s.upper.mean),
                csvfmt::float(s.upper.max),
                csvfmt::float(s.upper.stderr),
                s.upper.n.to_string(),
                csvfmt::float(self.horizon),
                csvfmt::float(s.lower.mean),
                csvfmt::float(s.slope),
                s.flagged.to_string(),
            ]);
        }
        table.finish()
    }
}

/// Per-path tail exponents under every scenario.
///
/// The limsup proxy of a path is the maximum of `(1/(t−t0)) log|X(t)/x0|`
/// over the last fifth of the horizon. Paths that explode or hit zero are
/// flagged and excluded; a scenario with no surviving path is withheld.
pub fn estimate_exponent(
    spec: &SdeSpec,
    scenarios: &[VolatilityScenario],
    bounds: &AmbiguityBounds,
    config: &EstimatorConfig,
) -> Result<ExponentEstimate, EstimatorError> {
    if spec.x0 == 0.0 || !spec.x0.is_finite() {
        return Err(EstimatorError::ZeroInitialValue);
    }
    if scenarios.is_empty() {
        return Err(EstimatorError::NoScenarios);
    }
    let grid = config.grid(spec.t0)?;
    let stepper = Stepper::new(spec, config.method);
    let mut out = Vec::with_capacity(scenarios.len());
    let mut withheld = Vec::new();
    let mut flagged_total = 0;
    for scenario in scenarios {
        let paths = (0..config.n_paths)
            .into_par_iter()
            .map(|p| path_exponent(&stepper, spec, scenario, bounds, &grid, config.key(p)))
            .collect::<Result<Vec<_>, _>>()?;
        let ok: Vec<PathExponent> = paths.iter().flatten().copied().collect();
        let flagged = paths.len() - ok.len();
        flagged_total += flagged;
        let upper: Vec<f64> = ok.iter().map(|e| e.upper).collect();
        let lower: Vec<f64> = ok.iter().map(|e| e.lower).collect();
        let slopes: Vec<f64> = ok.iter().map(|e| e.slope).collect();
        match (Summary::of(&upper), Summary::of(&lower), Summary::of(&slopes)) {
            (Some(upper), Some(lower), Some(slope)) => out.push(ScenarioExponent {
                scenario: scenario.clone(),
                upper,
                lower,
                slope: slope.mean,
                flagged,
            }),
            _ => withheld.push(scenario.clone()),
        }
    }
    if out.is_empty() {
        return Err(EstimatorError::AllFlagged);
    }
    let family_sup = out.iter().map(|s| s.upper.max).fold(f64::NEG_INFINITY, f64::max);
    let (worst, family_sup_mean) = out
        .iter()
        .map(|s| s.upper.mean)
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| if v > bv { (i, v) } else { (bi, bv) });
    let family_inf_mean = out.iter().map(|s| s.lower.mean).fold(f64::INFINITY, f64::min);
    Ok(ExponentEstimate {
        scenarios: out,
        withheld,
        family_sup,
        family_sup_mean,
        family_inf_mean,
        worst,
        n_paths: config.n_paths,
        horizon: config.horizon,
        dt: config.dt,
        flagged: flagged_total,
    })
}

/// What a path functional sees at the end of a path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSummary {
    pub x_terminal: f64,
    pub x_max: f64,
    pub b_terminal: f64,
    pub qv_terminal: f64,
}

/// Built-in path functionals and their closure under sums and scaling.
#[derive(Debug, Clone, PartialEq)]
pub enum Functional {
    Constant(f64),
    /// `|X(T)|^p`
    TerminalAbsPow(f64),
    /// `max_t X(t)`
    RunningMax,
    /// `B_T`
    TerminalB,
    /// `⟨B⟩_T`
    TerminalQv,
    Sum(Box<Functional>, Box<Functional>),
    Scaled(f64, Box<Functional>),
}

impl Functional {
    pub fn eval(&self, path: &PathSummary) -> f64 {
        match self {
            Functional::Constant(c) => *c,
            Functional::TerminalAbsPow(p) => path.x_terminal.abs().powf(*p),
            Functional::RunningMax => path.x_max,
            Functional::TerminalB => path.b_terminal,
            Functional::TerminalQv => path.qv_terminal,
            Functional::Sum(a, b) => a.eval(path) + b.eval(path),
            Functional::Scaled(k, f) => k * f.eval(path),
        }
    }

    pub fn sum(a: Functional, b: Functional) -> Functional {
        Functional::Sum(Box::new(a), Box::new(b))
    }

    pub fn scaled(k: f64, f: Functional) -> Functional {
        Functional::Scaled(k, Box::new(f))
    }

    /// Parses `constant:<c>`, `terminal_abs_pow:<p>`, `running_max`,
    /// `terminal_b` or `terminal_qv`.
    pub fn parse(text: &str) -> Result<Self, String> {
        let text = text.trim();
        let (name, arg) = match text.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (text, None),
        };
        let number = |a: Option<&str>| -> Result<f64, String> {
            let a = a.ok_or_else(|| format!("`{name}` needs a numeric argument"))?;
            a.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("invalid number `{a}` in `{text}`"))
        };
        let bare = |f: Functional| match arg {
            None => Ok(f),
            Some(_) => Err(format!("`{name}` takes no argument")),
        };
        match name {
            "constant" => Ok(Functional::Constant(number(arg)?)),
            "terminal_abs_pow" => Ok(Functional::TerminalAbsPow(number(arg)?)),
            "running_max" => bare(Functional::RunningMax),
            "terminal_b" => bare(Functional::TerminalB),
            "terminal_qv" => bare(Functional::TerminalQv),
            _ => Err(format!("unknown functional `{text}`")),
        }
    }
}

/// Per-scenario means and their maximum, the estimate of `Ê[F]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SublinearEstimate {
    pub value: f64,
    /// Standard error of the maximising scenario's mean.
    pub stderr: f64,
    pub argmax: usize,
    pub per_scenario: Vec<(VolatilityScenario, Summary)>,
    pub flagged: usize,
}

fn path_summaries(
    spec: &SdeSpec,
    scenario: &VolatilityScenario,
    bounds: &AmbiguityBounds,
    grid: &TimeGrid,
    config: &EstimatorConfig,
) -> Result<Vec<Option<PathSummary>>, EstimatorError> {
    let stepper = Stepper::new(spec, config.method);
    (0..config.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut s = PathSummary {
                x_terminal: spec.x0,
                x_max: spec.x0,
                b_terminal: 0.0,
                qv_terminal: 0.0,
            };
            let mut b = Vec::with_capacity(grid.steps());
            let explosion = stepper.run(scenario, bounds, grid, config.key(p), |v| {
                s.x_terminal = v.x;
                s.x_max = s.x_max.max(v.x);
                b.push(v.db);
                s.qv_terminal = v.qv;
            })?;
            s.b_terminal = compensated_sum(b);
            Ok(explosion.is_none().then_some(s))
        })
        .collect()
}

/// `Ê[F] ≈ max` over scenarios of the Monte Carlo mean of `F`.
pub fn estimate_sublinear_expectation(
    functional: &Functional,
    spec: &SdeSpec,
    scenarios: &[VolatilityScenario],
    bounds: &AmbiguityBounds,
    config: &EstimatorConfig,
) -> Result<SublinearEstimate, EstimatorError> {
    let summaries = simulate_summaries(spec, scenarios, bounds, config)?;
    evaluate_functional(functional, scenarios, &summaries)
}

/// Path summaries for every scenario, reusable across functionals.
pub fn simulate_summaries(
    spec: &SdeSpec,
    scenarios: &[VolatilityScenario],
    bounds: &AmbiguityBounds,
    config: &EstimatorConfig,
) -> Result<Vec<Vec<Option<PathSummary>>>, EstimatorError> {
    if scenarios.is_empty() {
        return Err(EstimatorError::NoScenarios);
    }
    let grid = config.grid(spec.t0)?;
    scenarios
        .iter()
        .map(|s| path_summaries(spec, s, bounds, &grid, config))
        .collect()
}

/// Applies `functional` to precomputed summaries (see [`simulate_summaries`]).
pub fn evaluate_functional(
    functional: &Functional,
    scenarios: &[VolatilityScenario],
    summaries: &[Vec<Option<PathSummary>>],
) -> Result<SublinearEstimate, EstimatorError> {
    let mut per_scenario = Vec::with_capacity(scenarios.len());
    let mut flagged = 0;
    for (scenario, paths) in scenarios.iter().zip(summaries) {
        let values: Vec<f64> = paths.iter().flatten().map(|p| functional.eval(p)).collect();
        flagged += paths.len() - values.len();
        if let Some(summary) = Summary::of(&values) {
            per_scenario.push((scenario.clone(), summary));
        }
    }
    let (argmax, best) = per_scenario
        .iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, &Summary)>, (i, (_, s))| match acc {
            Some((_, b)) if b.mean >= s.mean => acc,
            _ => Some((i, s)),
        })
        .ok_or(EstimatorError::AllFlagged)?;
    Ok(SublinearEstimate {
        value: best.mean,
        stderr: best.stderr,
        argmax,
        per_scenario,
        flagged,
    })
}

/// Settings of [`adversarial_search`].
#[derive(Debug, Clone, PartialEq)]
pub struct SearchOptions {
    /// Maximum number of scenario evaluations.
    pub budget: usize,
    /// Richness of the baseline family.
    pub richness: usize,
    /// Largest number of switch times in the bang-bang parameterisation (≤ 4).
    pub max_switches: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            budget: 60,
            richness: 3,
            max_switches: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub best: VolatilityScenario,
    /// Mean exponent under `best`.
    pub exponent: f64,
    pub stderr: f64,
    /// Best mean exponent over the baseline family.
    pub baseline: f64,
    pub evaluations: usize,
    /// True when the budget ran out before the baseline family was covered.
    pub partial: bool,
}

/// Maximises the mean exponent over constants and time bang-bangs with up to
/// `max_switches` switches: first the baseline family, then coordinate moves
/// on levels and switch times with shrinking steps. The result is never
/// below the evaluated part of the baseline.
pub fn adversarial_search(
    spec: &SdeSpec,
    bounds: &AmbiguityBounds,
    options: &SearchOptions,
    config: &EstimatorConfig,
) -> Result<SearchResult, EstimatorError> {
    if options.budget == 0 {
        return Err(EstimatorError::Precondition("budget must be positive".into()));
    }
    if options.max_switches > 4 {
        return Err(EstimatorError::Precondition(format!(
            "at most 4 switches are supported, got {}",
            options.max_switches
        )));
    }
    let t0 = spec.t0;
    let horizon = config.horizon;
    let family = enumerate_family(
        bounds,
        options.richness,
        &FamilyOptions {
            t0,
            horizon,
            lyapunov: None,
        },
    )?;
    let mut evaluations = 0;
    let mut evaluate = |s: &VolatilityScenario| -> Result<Option<(f64, f64)>, EstimatorError> {
        evaluations += 1;
        match estimate_exponent(spec, std::slice::from_ref(s), bounds, config) {
            Ok(e) => Ok(Some((e.family_sup_mean, e.scenarios[0].upper.stderr))),
            Err(EstimatorError::AllFlagged) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let mut best: Option<(VolatilityScenario, f64, f64)> = None;
    let consider = |s: VolatilityScenario, r: Option<(f64, f64)>, best: &mut Option<_>| {
        if let Some((value, se)) = r {
            if best.as_ref().is_none_or(|(_, b, _): &(_, f64, _)| value > *b) {
                *best = Some((s, value, se));
            }
        }
    };
    let partial = options.budget < family.len();
    for s in family.iter().take(options.budget) {
        let r = evaluate(s)?;
        consider(s.clone(), r, &mut best);
    }
    let baseline = best
        .as_ref()
        .map(|b| b.1)
        .ok_or(EstimatorError::AllFlagged)?;

    let (lo, hi) = (bounds.var_lower(), bounds.var_upper());
    let mut remaining = options.budget.saturating_sub(family.len().min(options.budget));
    for switches in 1..=options.max_switches {
        if remaining == 0 {
            break;
        }
        let start_level = match &best {
            Some((VolatilityScenario::Constant { v }, _, _)) => *v,
            _ => 0.5 * (lo + hi),
        };
        // levels then interior switch times, all in unit coordinates
        let mut levels = vec![start_level; switches + 1];
        let mut times: Vec<f64> = (1..=switches)
            .map(|j| j as f64 / (switches + 1) as f64)
            .collect();
        let build = |levels: &[f64], times: &[f64]| {
            let mut segments: Vec<(f64, f64)> = levels[..switches]
                .iter()
                .zip(times)
                .map(|(&l, &u)| (l, t0 + u * horizon))
                .collect();
            segments.push((levels[switches], t0 + horizon));
            VolatilityScenario::BangBangInTime { segments }
        };
        let mut current = best.as_ref().map(|b| b.1).unwrap_or(f64::NEG_INFINITY);
        let mut level_step = 0.5 * (hi - lo);
        let mut time_step = 0.5 / (switches + 1) as f64;
        while remaining > 0 && (level_step > 1e-3 * (hi - lo) || time_step > 1e-3) {
            let mut improved = false;
            for coord in 0..(2 * switches + 1) {
                for dir in [1.0, -1.0] {
                    if remaining == 0 {
                        break;
                    }
                    let (mut l, mut t) = (levels.clone(), times.clone());
                    if coord <= switches {
                        l[coord] = (l[coord] + dir * level_step).clamp(lo, hi);
                        if l[coord] == levels[coord] {
                            continue;
                        }
                    } else {
                        let j = coord - switches - 1;
                        let low = if j == 0 { 0.0 } else { t[j - 1] };
                        let high = if j + 1 == switches { 1.0 } else { t[j + 1] };
                        t[j] = (t[j] + dir * time_step).clamp(low, high);
                        if t[j] == times[j] || t[j] <= 0.0 || t[j] >= 1.0 {
                            continue;
                        }
                    }
                    let candidate = build(&l, &t);
                    remaining -= 1;
                    let r = evaluate(&candidate)?;
                    if let Some((value, _)) = r {
                        if value > current {
                            current = value;
                            levels = l;
                            times = t;
                            improved = true;
                        }
                    }
                    consider(candidate, r, &mut best);
                }
            }
            if !improved {
                level_step *= 0.5;
                time_step *= 0.5;
            }
        }
    }
    let (best, exponent, stderr) = best.expect("baseline evaluated at least one scenario");
    Ok(SearchResult {
        best,
        exponent,
        stderr,
        baseline,
        evaluations,
        partial,
    })
}

/// `g(k)` in the martingale bound; `Σ g(k)^{−θ} < ∞` for every `θ > 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GrowthFn {
    /// `g(k) = k`
    Linear,
    /// `g(k) = k²`
    Quadratic,
    /// `g(k) = e^k`
    Exponential,
}

impl GrowthFn {
    fn log(self, k: usize) -> f64 {
        let k = k as f64;
        match self {
            GrowthFn::Linear => k.ln(),
            GrowthFn::Quadratic => 2.0 * k.ln(),
            GrowthFn::Exponential => k,
        }
    }
}

/// `γ_k = c·k^e`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaSeq {
    pub c: f64,
    pub exponent: f64,
}

impl GammaSeq {
    fn at(self, k: usize) -> f64 {
        self.c * (k as f64).powf(self.exponent)
    }
}

/// Exponential martingale bound
/// `N(t) ≤ ½γ_k⟨N⟩(t) + (θ/γ_k) log g(k)` on `t0 ≤ t ≤ τ_k`, with
/// `N(t) = ∫η(X,s) dB(s)` and `τ_k = t0 + k·tau_step`.
#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleCheckSpec {
    pub eta: Expr,
    pub gamma: GammaSeq,
    pub tau_step: f64,
    pub growth: GrowthFn,
    pub theta: f64,
    /// Largest `k`; the horizon is `k_max·tau_step`.
    pub k_max: usize,
    /// Paths count as satisfied when their `k₀ ≤ k_threshold`.
    pub k_threshold: usize,
    pub dt: f64,
}

impl MartingaleCheckSpec {
    /// `g(k) = k`, `θ = 2`, `γ_k = 1`, `τ_k = k`; `k ≤ 100`, threshold 50.
    pub fn new(eta: Expr) -> Self {
        Self {
            eta,
            gamma: GammaSeq {
                c: 1.0,
                exponent: 0.0,
            },
            tau_step: 1.0,
            growth: GrowthFn::Linear,
            theta: 2.0,
            k_max: 100,
            k_threshold: 50,
            dt: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleReport {
    /// Per path: smallest `k₀` such that the bound holds for every
    /// `k ∈ [k₀, k_max]`, or `None` when it fails at `k_max`.
    pub k0: Vec<Option<usize>>,
    /// Fraction of paths with `k₀ ≤ k_threshold`.
    pub fraction_satisfied: f64,
    /// Fraction of paths with any finite `k₀`.
    pub fraction_finite: f64,
    /// Number of `(path, k)` pairs where the bound fails.
    pub violations: usize,
    pub flagged: usize,
}

/// Simulates `N` and `⟨N⟩` along paths of the equation and records, per
/// path, from which `k` on the martingale bound holds.
pub fn martingale_bound_check(
    mspec: &MartingaleCheckSpec,
    spec: &SdeSpec,
    scenario: &VolatilityScenario,
    bounds: &AmbiguityBounds,
    n_paths: usize,
    seed: u64,
) -> Result<MartingaleReport, EstimatorError> {
    if n_paths == 0 {
        return Err(EstimatorError::NoPaths);
    }
    if !(mspec.theta > 1.0) {
        return Err(EstimatorError::Precondition(format!(
            "theta must exceed 1, got {}",
            mspec.theta
        )));
    }
    if mspec.k_max == 0 || !(mspec.tau_step > 0.0) {
        return Err(EstimatorError::Precondition(
            "need k_max >= 1 and tau_step > 0".into(),
        ));
    }
    let gammas: Vec<f64> = (1..=mspec.k_max).map(|k| mspec.gamma.at(k)).collect();
    if let Some(g) = gammas.iter().find(|g| !(**g > 0.0 && g.is_finite())) {
        return Err(EstimatorError::Precondition(format!(
            "gamma_k must be positive and finite, got {g}"
        )));
    }
    let t0 = spec.t0;
    let steps_per_k = (mspec.tau_step / mspec.dt).round() as usize;
    if steps_per_k == 0 || ((steps_per_k as f64) * mspec.dt - mspec.tau_step).abs() > 1e-9 * mspec.tau_step {
        return Err(EstimatorError::Precondition(format!(
            "tau_step {} must be a multiple of dt {}",
            mspec.tau_step, mspec.dt
        )));
    }
    let points: Vec<f64> = (0..=steps_per_k * mspec.k_max)
        .map(|i| t0 + i as f64 * mspec.tau_step / steps_per_k as f64)
        .collect();
    let grid = TimeGrid::new(points)?;
    let constant_gamma = gammas.iter().all(|g| *g == gammas[0]);
    let stepper = Stepper::new(spec, Method::Euler);
    let results = (0..n_paths)
        .into_par_iter()
        .map(|p| -> Result<Option<(Option<usize>, usize)>, EstimatorError> {
            let mut n = 0.0;
            let mut qn = 0.0;
            let mut x = spec.x0;
            let mut t = t0;
            let mut path = Vec::with_capacity(grid.steps());
            let mut failure = None;
            let explosion = stepper.run(scenario, bounds, &grid, PathKey::new(seed, p as u64), |s| {
                if failure.is_some() {
                    return;
                }
                // η is evaluated at the left end point of each step
                match mspec.eta.eval(x, t) {
                    Ok(eta) => {
                        n += eta * s.db;
                        qn += eta * eta * s.v * (s.t - t);
                    }
                    Err(e) => failure = Some(e),
                }
                path.push((n, qn));
                x = s.x;
                t = s.t;
            })?;
            if let Some(e) = failure {
                return Err(e.into());
            }
            if explosion.is_some() {
                return Ok(None);
            }
            let holds = |k: usize, sup: f64| -> bool {
                let gamma = gammas[k - 1];
                sup <= mspec.theta / gamma * mspec.growth.log(k)
            };
            let mut ok = vec![false; mspec.k_max + 1];
            if constant_gamma {
                let gamma = gammas[0];
                let mut sup = 0.0f64;
                for k in 1..=mspec.k_max {
                    for &(n, qn) in &path[(k - 1) * steps_per_k..k * steps_per_k] {
                        sup = sup.max(n - 0.5 * gamma * qn);
                    }
                    ok[k] = holds(k, sup);
                }
            } else {
                for k in 1..=mspec.k_max {
                    let gamma = gammas[k - 1];
                    let sup = path[..k * steps_per_k]
                        .iter()
                        .fold(0.0f64, |m, &(n, qn)| m.max(n - 0.5 * gamma * qn));
                    ok[k] = holds(k, sup);
                }
            }
            let violations = ok[1..].iter().filter(|o| !**o).count();
            let k0 = (1..=mspec.k_max)
                .rev()
                .take_while(|&k| ok[k])
                .last();
            Ok(Some((k0, violations)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let flagged = results.iter().filter(|r| r.is_none()).count();
    let done: Vec<(Option<usize>, usize)> = results.into_iter().flatten().collect();
    if done.is_empty() {
        return Err(EstimatorError::AllFlagged);
    }
    let total = done.len() as f64;
    let satisfied = done
        .iter()
        .filter(|(k0, _)| k0.is_some_and(|k| k <= mspec.k_threshold))
        .count();
    let finite = done.iter().filter(|(k0, _)| k0.is_some()).count();
    Ok(MartingaleReport {
        fraction_satisfied: satisfied as f64 / total,
        fraction_finite: finite as f64 / total,
        violations: done.iter().map(|(_, v)| v).sum(),
        k0: done.into_iter().map(|(k0, _)| k0).collect(),
        flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn band() -> AmbiguityBounds {
        AmbiguityBounds::new(0.5, 1.0).unwrap()
    }

    fn constant(v: f64) -> VolatilityScenario {
        VolatilityScenario::Constant { v }
    }

    #[test]
    fn summary_of_constant_is_exact() {
        let s = Summary::of(&[0.1; 7]).unwrap();
        assert_eq!(s.mean, 0.1);
        assert_eq!(s.stderr, 0.0);
        assert!(Summary::of(&[]).is_none());
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.stderr - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!((s.min, s.max), (1.0, 4.0));
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let xs = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(xs), 2.0);
    }

    #[test]
    fn deterministic_exponent_is_exact_drift() {
        let spec = SdeSpec::linear(1.0, 0.0, 1.0, 0.0);
        let cfg = EstimatorConfig::new(10.0, 1e-3, 3, 1);
        let e = estimate_exponent(&spec, &[constant(0.25)], &band(), &cfg).unwrap();
        // Euler: (1/t) log (1 − dt)^{t/dt} = log(1 − dt)/dt
        let euler = (1.0f64 - 1e-3).ln() / 1e-3;
        assert!((e.family_sup - euler).abs() < 1e-9);
        assert!((e.family_sup + 1.0).abs() < 1e-3);
        assert_eq!(e.family_sup, e.family_sup_mean);
        assert!((e.scenarios[0].slope - euler).abs() < 1e-9);
    }

    #[test]
    fn linear_exponent_matches_closed_form() {
        let spec = SdeSpec::linear(1.0, 1.0, 1.0, 0.0);
        let cfg = EstimatorConfig::new(50.0, 1e-2, 200, 7);
        let e = estimate_exponent(&spec, &[constant(0.25), constant(1.0)], &band(), &cfg).unwrap();
        assert_eq!(e.worst, 0);
        assert!((e.family_sup_mean + 1.125).abs() < 0.05, "{}", e.family_sup_mean);
        assert!((e.scenarios[1].upper.mean + 1.5).abs() < 0.05);
        assert!(e.family_sup >= e.family_sup_mean);
        assert!(e.to_csv().lines().count() == 3);
    }

    #[test]
    fn estimator_preconditions() {
        let cfg = EstimatorConfig::new(1.0, 1e-2, 0, 1);
        let spec = SdeSpec::linear(1.0, 1.0, 1.0, 0.0);
        assert_eq!(
            estimate_exponent(&spec, &[constant(0.5)], &band(), &cfg),
            Err(EstimatorError::NoPaths)
        );
        let cfg = EstimatorConfig::new(1.0, 1e-2, 2, 1);
        assert_eq!(
            estimate_exponent(&SdeSpec::linear(1.0, 1.0, 0.0, 0.0), &[constant(0.5)], &band(), &cfg),
            Err(EstimatorError::ZeroInitialValue)
        );
        assert_eq!(
            estimate_exponent(&spec, &[], &band(), &cfg),
            Err(EstimatorError::NoScenarios)
        );
        let blowup = SdeSpec::parse("x^2", "0", 1.0, 0.0).unwrap();
        let cfg = EstimatorConfig::new(5.0, 1e-2, 2, 1);
        assert_eq!(
            estimate_exponent(&blowup, &[constant(0.5)], &band(), &cfg),
            Err(EstimatorError::AllFlagged)
        );
    }

    #[test]
    fn sublinear_qv_and_b() {
        let spec = SdeSpec::linear(1.0, 1.0, 1.0, 0.0);
        let b = band();
        let cfg = EstimatorConfig::new(2.0, 1e-2, 100, 3);
        let family = [constant(0.25), constant(0.5), constant(1.0)];
        let qv = estimate_sublinear_expectation(&Functional::TerminalQv, &spec, &family, &b, &cfg)
            .unwrap();
        assert_eq!(qv.value, b.var_upper() * 2.0);
        assert_eq!(qv.argmax, 2);
        let bt = estimate_sublinear_expectation(&Functional::TerminalB, &spec, &family, &b, &cfg)
            .unwrap();
        assert!(bt.value.abs() < 4.0 * (2.0f64 / 100.0).sqrt());
        let c = estimate_sublinear_expectation(&Functional::Constant(0.3), &spec, &family, &b, &cfg)
            .unwrap();
        assert_eq!(c.value, 0.3);
    }

    #[test]
    fn functional_parse() {
        assert_eq!(Functional::parse("terminal_qv"), Ok(Functional::TerminalQv));
        assert_eq!(
            Functional::parse("terminal_abs_pow:2"),
            Ok(Functional::TerminalAbsPow(2.0))
        );
        assert_eq!(Functional::parse("constant: -1.5"), Ok(Functional::Constant(-1.5)));
        assert!(Functional::parse("terminal_b:3").is_err());
        assert!(Functional::parse("constant").is_err());
        assert!(Functional::parse("median").is_err());
    }

    #[test]
    fn search_preconditions_and_partial() {
        let spec = SdeSpec::linear(1.0, 1.0, 1.0, 0.0);
        let cfg = EstimatorConfig::new(1.0, 1e-2, 4, 1);
        let mut opts = SearchOptions {
            budget: 0,
            ..SearchOptions::default()
        };
        assert!(matches!(
            adversarial_search(&spec, &band(), &opts, &cfg),
            Err(EstimatorError::Precondition(_))
        ));
        opts.budget = 3;
        let r = adversarial_search(&spec, &band(), &opts, &cfg).unwrap();
        assert!(r.partial);
        assert_eq!(r.evaluations, 3);
        opts.max_switches = 5;
        opts.budget = 10;
        assert!(adversarial_search(&spec, &band(), &opts, &cfg).is_err());
    }

    #[test]
    fn martingale_zero_integrand() {
        let spec = SdeSpec::linear(1.0, 1.0, 1.0, 0.0);
        let mut m = MartingaleCheckSpec::new(Expr::parse("0").unwrap());
        m.k_max = 10;
        m.dt = 0.1;
        let r = martingale_bound_check(&m, &spec, &constant(0.5), &band(), 20, 1).unwrap();
        assert_eq!(r.fraction_satisfied, 1.0);
        assert_eq!(r.violations, 0);
        assert!(r.k0.iter().all(|k| *k == Some(1)));
        m.gamma.c = 0.0;
        assert!(matches!(
            martingale_bound_check(&m, &spec, &constant(0.5), &band(), 20, 1),
            Err(EstimatorError::Precondition(_))
        ));
        m.gamma.c = 1.0;
        m.theta = 1.0;
        assert!(martingale_bound_check(&m, &spec, &constant(0.5), &band(), 20, 1).is_err());
    }
}

//! Volatility scenarios and sampled G-Brownian paths.
//!
//! A scenario is an adapted policy choosing the quadratic-variation density
//! `v ∈ [σ̲², σ̄²]` step by step; each one picks a single probability measure
//! out of the ambiguity family. A path is driven by `dB = √v dW` and carries
//! its quadratic variation `⟨B⟩ = Σ v Δτ`.
//!
//! Finite families built here are a lower approximation of the full family:
//! sups taken over them are lower bounds on the true sublinear expectation.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::expr::{EvalError, Expr, Var};
use crate::gcalc::AmbiguityBounds;
use crate::rng::{PathKey, Stream, StreamTag};

pub const DEFAULT_DT: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("time grid needs at least two points")]
    EmptyGrid,
    #[error("time grid must be finite and strictly increasing (index {index})")]
    NonIncreasingGrid { index: usize },
    #[error("invalid uniform grid: {0}")]
    InvalidUniformGrid(String),
    #[error("scenario `{0}` feeds back on the state and can only be sampled by the integrator")]
    FeedbackNeedsState(String),
    #[error("invalid scenario `{text}`: {reason}")]
    Syntax { text: String, reason: String },
    #[error("feedback_vxx needs a registered Lyapunov function")]
    MissingLyapunov,
    #[error("family richness must be at least 1")]
    Richness,
    #[error("coarsening factor {factor} does not divide {steps} steps")]
    Coarsen { factor: usize, steps: usize },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Strictly increasing time points `τ₀ < τ₁ < … < τ_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid(Vec<f64>);

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self, ScenarioError> {
        if points.len() < 2 {
            return Err(ScenarioError::EmptyGrid);
        }
        for (i, w) in points.windows(2).enumerate() {
            if !(w[0].is_finite() && w[1].is_finite() && w[0] < w[1]) {
                return Err(ScenarioError::NonIncreasingGrid { index: i + 1 });
            }
        }
        Ok(Self(points))
    }

    /// `t0, t0+dt, …, t0+horizon`; the last point is exactly `t0 + horizon`.
    pub fn uniform(t0: f64, horizon: f64, dt: f64) -> Result<Self, ScenarioError> {
        if !(dt > 0.0 && horizon > 0.0 && t0.is_finite() && horizon.is_finite()) {
            return Err(ScenarioError::InvalidUniformGrid(format!(
                "t0={t0}, horizon={horizon}, dt={dt}"
            )));
        }
        let steps = (horizon / dt).round().max(1.0) as usize;
        let end = t0 + horizon;
        let mut points: Vec<f64> = (0..steps).map(|i| t0 + i as f64 * dt).collect();
        points.push(end);
        Self::new(points)
    }

    pub fn points(&self) -> &[f64] {
        &self.0
    }

    pub fn steps(&self) -> usize {
        self.0.len() - 1
    }

    pub fn start(&self) -> f64 {
        self.0[0]
    }

    pub fn end(&self) -> f64 {
        self.0[self.0.len() - 1]
    }

    #[inline]
    pub fn dt(&self, step: usize) -> f64 {
        self.0[step + 1] - self.0[step]
    }
}

/// How random dwell levels are drawn from the variance band.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LevelDistribution {
    Uniform,
    Extremes,
}

/// One adapted volatility policy. Levels are variance rates; anything outside
/// the band is clamped when emitted.
#[derive(Debug, Clone, PartialEq)]
pub enum VolatilityScenario {
    Constant {
        v: f64,
    },
    /// `below` when `x < threshold`, else `above`.
    BangBangInX {
        threshold: f64,
        below: f64,
        above: f64,
    },
    /// `segments[k] = (level, until)`: `level` applies while `t < until`; the
    /// last level is held after the final switch time.
    BangBangInTime {
        segments: Vec<(f64, f64)>,
    },
    /// `σ̄²` where `V_xx(x, t) > 0`, else `σ̲²`.
    FeedbackSignVxx {
        lyapunov: Expr,
    },
    PiecewiseRandom {
        dwell: f64,
        levels: LevelDistribution,
    },
}

impl VolatilityScenario {
    /// Parses the textual form, resolving `feedback_vxx` against `lyapunov`.
    pub fn parse(text: &str, lyapunov: Option<&Expr>) -> Result<Self, ScenarioError> {
        let syntax = |reason: &str| ScenarioError::Syntax {
            text: text.to_string(),
            reason: reason.to_string(),
        };
        let number = |s: &str| -> Result<f64, ScenarioError> {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| syntax(&format!("`{}` is not a finite number", s.trim())))
        };
        let trimmed = text.trim();
        let (kind, args) = match trimmed.split_once(':') {
            Some((k, a)) => (k.trim(), Some(a.trim())),
            None => (trimmed, None),
        };
        match (kind, args) {
            ("constant", Some(a)) => Ok(Self::Constant { v: number(a)? }),
            ("bangbang_t", Some(a)) => {
                let mut segments = Vec::new();
                for part in a.split(',') {
                    let (level, until) = part
                        .split_once('@')
                        .ok_or_else(|| syntax("expected level@time pairs"))?;
                    segments.push((number(level)?, number(until)?));
                }
                if segments.windows(2).any(|w| w[0].1 >= w[1].1) {
                    return Err(syntax("switch times must increase"));
                }
                Ok(Self::BangBangInTime { segments })
            }
            ("bangbang_x", Some(a)) => {
                let (mut threshold, mut below, mut above) = (None, None, None);
                for part in a.split(',') {
                    let (key, value) = part
                        .split_once('=')
                        .ok_or_else(|| syntax("expected key=value"))?;
                    let slot = match key.trim() {
                        "threshold" => &mut threshold,
                        "below" => &mut below,
                        "above" => &mut above,
                        other => return Err(syntax(&format!("unknown key `{other}`"))),
                    };
                    *slot = Some(number(value)?);
                }
                Ok(Self::BangBangInX {
                    threshold: threshold.unwrap_or(0.0),
                    below: below.ok_or_else(|| syntax("missing `below`"))?,
                    above: above.ok_or_else(|| syntax("missing `above`"))?,
                })
            }
            ("feedback_vxx", None) => Ok(Self::FeedbackSignVxx {
                lyapunov: lyapunov.cloned().ok_or(ScenarioError::MissingLyapunov)?,
            }),
            ("piecewise_random", Some(a)) => {
                let (mut dwell, mut levels) = (None, LevelDistribution::Uniform);
                for part in a.split(',') {
                    let (key, value) = part
                        .split_once('=')
                        .ok_or_else(|| syntax("expected key=value"))?;
                    match key.trim() {
                        "dwell" => dwell = Some(number(value)?),
                        "levels" => {
                            levels = match value.trim() {
                                "uniform" => LevelDistribution::Uniform,
                                "extremes" => LevelDistribution::Extremes,
                                _ => return Err(syntax("levels must be uniform or extremes")),
                            }
                        }
                        other => return Err(syntax(&format!("unknown key `{other}`"))),
                    }
                }
                let dwell = dwell.ok_or_else(|| syntax("missing `dwell`"))?;
                if dwell <= 0.0 {
                    return Err(syntax("dwell must be positive"));
                }
                Ok(Self::PiecewiseRandom { dwell, levels })
            }
            _ => Err(syntax("unknown scenario kind or missing arguments")),
        }
    }

    pub fn needs_state(&self) -> bool {
        matches!(
            self,
            Self::BangBangInX { .. } | Self::FeedbackSignVxx { .. }
        )
    }

    /// Prepares the policy for one path. `t0` anchors random dwell segments.
    pub fn policy(&self, bounds: &AmbiguityBounds, key: PathKey, t0: f64) -> Policy {
        let kind = match self {
            Self::Constant { v } => PolicyKind::Constant(bounds.clamp_var(*v)),
            Self::BangBangInX {
                threshold,
                below,
                above,
            } => PolicyKind::InX {
                threshold: *threshold,
                below: bounds.clamp_var(*below),
                above: bounds.clamp_var(*above),
            },
            Self::BangBangInTime { segments } => PolicyKind::InTime(
                segments
                    .iter()
                    .map(|&(level, until)| (bounds.clamp_var(level), until))
                    .collect(),
            ),
            Self::FeedbackSignVxx { lyapunov } => {
                let vx = lyapunov.differentiate(Var::X).expr;
                PolicyKind::Feedback(vx.differentiate(Var::X).expr)
            }
            Self::PiecewiseRandom { dwell, levels } => PolicyKind::Random {
                dwell: *dwell,
                levels: *levels,
                t0,
                stream: key.stream(StreamTag::Scenario),
            },
        };
        Policy {
            kind,
            lower: bounds.var_lower(),
            upper: bounds.var_upper(),
        }
    }
}

impl fmt::Display for VolatilityScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant { v } => write!(f, "constant:{v}"),
            Self::BangBangInX {
                threshold,
                below,
                above,
            } => write!(f, "bangbang_x:threshold={threshold},below={below},above={above}"),
            Self::BangBangInTime { segments } => {
                f.write_str("bangbang_t:")?;
                for (k, (level, until)) in segments.iter().enumerate() {
                    if k > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{level}@{until}")?;
                }
                Ok(())
            }
            Self::FeedbackSignVxx { .. } => f.write_str("feedback_vxx"),
            Self::PiecewiseRandom { dwell, levels } => {
                let levels = match levels {
                    LevelDistribution::Uniform => "uniform",
                    LevelDistribution::Extremes => "extremes",
                };
                write!(f, "piecewise_random:dwell={dwell},levels={levels}")
            }
        }
    }
}

impl FromStr for VolatilityScenario {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s, None)
    }
}

#[derive(Debug, Clone)]
enum PolicyKind {
    Constant(f64),
    InX {
        threshold: f64,
        below: f64,
        above: f64,
    },
    InTime(Vec<(f64, f64)>),
    Feedback(Expr),
    Random {
        dwell: f64,
        levels: LevelDistribution,
        t0: f64,
        stream: Stream,
    },
}

/// A scenario prepared for one path.
#[derive(Debug, Clone)]
pub struct Policy {
    kind: PolicyKind,
    lower: f64,
    upper: f64,
}

impl Policy {
    /// Level for the step starting at `t`, given the pre-step state when the
    /// caller has one. Always inside `[σ̲², σ̄²]`.
    #[inline]
    pub fn level(&self, t: f64, x: Option<f64>) -> Result<f64, ScenarioError> {
        let v = match &self.kind {
            PolicyKind::Constant(v) => *v,
            PolicyKind::InTime(segments) => {
                let k = segments.partition_point(|&(_, until)| until <= t);
                segments[k.min(segments.len() - 1)].0
            }
            PolicyKind::InX {
                threshold,
                below,
                above,
            } => {
                let x = x.ok_or_else(|| ScenarioError::FeedbackNeedsState("bangbang_x".into()))?;
                if x < *threshold {
                    *below
                } else {
                    *above
                }
            }
            PolicyKind::Feedback(vxx) => {
                let x =
                    x.ok_or_else(|| ScenarioError::FeedbackNeedsState("feedback_vxx".into()))?;
                if vxx.eval(x, t)? > 0.0 {
                    self.upper
                } else {
                    self.lower
                }
            }
            PolicyKind::Random {
                dwell,
                levels,
                t0,
                stream,
            } => {
                let segment = ((t - t0) / dwell).floor().max(0.0) as u64;
                let u = stream.uniform(segment);
                match levels {
                    LevelDistribution::Uniform => self.lower + u * (self.upper - self.lower),
                    LevelDistribution::Extremes => {
                        if u < 0.5 {
                            self.lower
                        } else {
                            self.upper
                        }
                    }
                }
            }
        };
        Ok(v.clamp(self.lower, self.upper))
    }
}

/// Running `⟨B⟩`, accumulated per run of equal levels so that a run of
/// constant `v` contributes exactly `v·(τ_end − τ_start)`.
#[derive(Debug, Clone)]
pub(crate) struct QvAccumulator {
    base: f64,
    run_start: f64,
    level: f64,
    current: f64,
}

impl QvAccumulator {
    pub(crate) fn new(t0: f64) -> Self {
        Self {
            base: 0.0,
            run_start: t0,
            level: f64::NAN,
            current: 0.0,
        }
    }

    #[inline]
    pub(crate) fn push(&mut self, v: f64, t_from: f64, t_to: f64) -> f64 {
        if v != self.level {
            self.base = self.current;
            self.run_start = t_from;
            self.level = v;
        }
        self.current = self.base + v * (t_to - self.run_start);
        self.current
    }
}

/// One realised trajectory of the driver and, once integrated, of `X`.
///
/// Per-step vectors (`dw`, `v`, `db`) have one entry per step; cumulative
/// vectors (`qv`, `x`) have one entry per grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub grid: TimeGrid,
    pub dw: Vec<f64>,
    pub v: Vec<f64>,
    pub db: Vec<f64>,
    pub qv: Vec<f64>,
    pub x: Vec<f64>,
}

impl PathBundle {
    pub(crate) fn with_capacity(grid: TimeGrid) -> Self {
        let n = grid.steps();
        let mut qv = Vec::with_capacity(n + 1);
        qv.push(0.0);
        Self {
            grid,
            dw: Vec::with_capacity(n),
            v: Vec::with_capacity(n),
            db: Vec::with_capacity(n),
            qv,
            x: Vec::new(),
        }
    }

    pub fn steps(&self) -> usize {
        self.dw.len()
    }

    /// `W` at every grid point, starting from 0.
    pub fn w_path(&self) -> Vec<f64> {
        cumulative(&self.dw)
    }

    /// `B` at every grid point, starting from 0.
    pub fn b_path(&self) -> Vec<f64> {
        cumulative(&self.db)
    }

    /// Per-step quadratic-variation increments `v_i·Δτ_i`.
    pub fn qv_increments(&self) -> impl Iterator<Item = f64> + '_ {
        self.v
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.grid.dt(i))
    }

    /// Sums `factor` consecutive steps into one. `v` becomes the average
    /// density over the coarse step; `x` is dropped.
    pub fn coarsen(&self, factor: usize) -> Result<PathBundle, ScenarioError> {
        let steps = self.steps();
        if factor == 0 || steps % factor != 0 {
            return Err(ScenarioError::Coarsen { factor, steps });
        }
        let points: Vec<f64> = self.grid.points().iter().step_by(factor).copied().collect();
        let grid = TimeGrid::new(points)?;
        let qv: Vec<f64> = self.qv.iter().step_by(factor).copied().collect();
        let mut out = PathBundle::with_capacity(grid.clone());
        out.qv = qv;
        for (k, chunk) in self.dw.chunks(factor).enumerate() {
            out.dw.push(chunk.iter().sum());
            out.db
                .push(self.db[k * factor..(k + 1) * factor].iter().sum());
            let mass: f64 = (k * factor..(k + 1) * factor)
                .map(|i| self.v[i] * self.grid.dt(i))
                .sum();
            out.v.push(mass / grid.dt(k));
        }
        Ok(out)
    }
}

fn cumulative(increments: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(increments.len() + 1);
    let mut acc = 0.0;
    out.push(acc);
    for d in increments {
        acc += d;
        out.push(acc);
    }
    out
}

/// Samples the driver of one path under a state-independent scenario.
pub fn sample_path(
    scenario: &VolatilityScenario,
    bounds: &AmbiguityBounds,
    grid: &TimeGrid,
    key: PathKey,
) -> Result<PathBundle, ScenarioError> {
    if scenario.needs_state() {
        return Err(ScenarioError::FeedbackNeedsState(scenario.to_string()));
    }
    let policy = scenario.policy(bounds, key, grid.start());
    let wiener = key.stream(StreamTag::Wiener);
    let mut bundle = PathBundle::with_capacity(grid.clone());
    let mut qv = QvAccumulator::new(grid.start());
    let t = grid.points();
    for i in 0..grid.steps() {
        let dt = t[i + 1] - t[i];
        let v = policy.level(t[i], None)?;
        let dw = dt.sqrt() * wiener.normal(i as u64);
        bundle.dw.push(dw);
        bundle.v.push(v);
        bundle.db.push(v.sqrt() * dw);
        bundle.qv.push(qv.push(v, t[i], t[i + 1]));
    }
    Ok(bundle)
}

/// Horizon and optional Lyapunov function used by [`enumerate_family`].
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyOptions {
    pub t0: f64,
    pub horizon: f64,
    pub lyapunov: Option<Expr>,
}

/// Deterministic finite scenario family.
///
/// Recipe, in order:
/// 1. `constant:σ̲²`, `constant:σ̄²`;
/// 2. `richness` evenly spaced interior constants `σ̲² + k(σ̄²−σ̲²)/(richness+1)`;
/// 3. for `k = 2..=richness`, a time bang-bang with `k` switches at
///    `t0 + j·horizon/(k+1)`, alternating `σ̲², σ̄², …` starting from `σ̲²`;
/// 4. `feedback_vxx` when a Lyapunov function is registered.
pub fn enumerate_family(
    bounds: &AmbiguityBounds,
    richness: usize,
    options: &FamilyOptions,
) -> Result<Vec<VolatilityScenario>, ScenarioError> {
    if richness == 0 {
        return Err(ScenarioError::Richness);
    }
    let (lo, hi) = (bounds.var_lower(), bounds.var_upper());
    let mut family = vec![
        VolatilityScenario::Constant { v: lo },
        VolatilityScenario::Constant { v: hi },
    ];
    for k in 1..=richness {
        family.push(VolatilityScenario::Constant {
            v: lo + k as f64 * (hi - lo) / (richness + 1) as f64,
        });
    }
    for switches in 2..=richness {
        let segments = (0..=switches)
            .map(|j| {
                let level = if j % 2 == 0 { lo } else { hi };
                let until = if j == switches {
                    options.t0 + options.horizon
                } else {
                    options.t0 + (j + 1) as f64 * options.horizon / (switches + 1) as f64
                };
                (level, until)
            })
            .collect();
        family.push(VolatilityScenario::BangBangInTime { segments });
    }
    if let Some(v) = &options.lyapunov {
        family.push(VolatilityScenario::FeedbackSignVxx {
            lyapunov: v.clone(),
        });
    }
    Ok(family)
}

//! Euler and Milstein schemes for `dX = f(X,t)dt + g(X,t)dB`, with a
//! closed-form oracle for the linear equation `dX = −αX dt + βX dB`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::expr::{EvalError, Expr, ParseError, Var};
use crate::gcalc::AmbiguityBounds;
use crate::rng::{PathKey, StreamTag};
use crate::scenario::{PathBundle, Policy, QvAccumulator, ScenarioError, TimeGrid, VolatilityScenario};

/// Runs are truncated once `|X|` exceeds this.
pub const DEFAULT_EXPLOSION_THRESHOLD: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntegratorError {
    #[error("invalid coefficient expression: {0}")]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("grid starts at {grid_start} but the equation starts at t0={t0}")]
    GridStart { grid_start: f64, t0: f64 },
    #[error("Lipschitz estimate {k} violated by {coefficient} between x={x1} and x={x2} at t={t}: slope {slope}")]
    Lipschitz {
        coefficient: &'static str,
        k: f64,
        slope: f64,
        x1: f64,
        x2: f64,
        t: f64,
    },
    #[error("x0 and t0 must be finite")]
    InitialValue,
}

/// The equation `dX = f dt + g dB`, `X(t0) = x0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SdeSpec {
    pub f: Expr,
    pub g: Expr,
    pub x0: f64,
    pub t0: f64,
    /// Optional global Lipschitz constant `K` for both coefficients.
    pub lipschitz: Option<f64>,
    pub explosion_threshold: f64,
}

impl SdeSpec {
    pub fn new(f: Expr, g: Expr, x0: f64, t0: f64) -> Self {
        Self {
            f,
            g,
            x0,
            t0,
            lipschitz: None,
            explosion_threshold: DEFAULT_EXPLOSION_THRESHOLD,
        }
    }

    pub fn parse(f: &str, g: &str, x0: f64, t0: f64) -> Result<Self, IntegratorError> {
        Ok(Self::new(Expr::parse(f)?, Expr::parse(g)?, x0, t0))
    }

    /// `dX = −αX dt + βX dB`
    pub fn linear(alpha: f64, beta: f64, x0: f64, t0: f64) -> Self {
        let f = Expr::Binary(
            crate::expr::BinaryOp::Mul,
            Box::new(Expr::Const(-alpha)),
            Box::new(Expr::x()),
        );
        let g = Expr::Binary(
            crate::expr::BinaryOp::Mul,
            Box::new(Expr::Const(beta)),
            Box::new(Expr::x()),
        );
        Self::new(f, g, x0, t0)
    }

    pub fn with_lipschitz(mut self, k: f64) -> Self {
        self.lipschitz = Some(k);
        self
    }

    pub fn with_explosion_threshold(mut self, threshold: f64) -> Self {
        self.explosion_threshold = threshold;
        self
    }

    /// Checks that `f` and `g` are finite on the box `xs × ts` and, when a
    /// Lipschitz estimate is set, that slopes between neighbouring sorted `x`
    /// points stay within `K·(1 + 1e−9)`.
    pub fn validate_on(&self, xs: &[f64], ts: &[f64]) -> Result<(), IntegratorError> {
        if !(self.x0.is_finite() && self.t0.is_finite()) {
            return Err(IntegratorError::InitialValue);
        }
        let mut sorted = xs.to_vec();
        sorted.sort_by(f64::total_cmp);
        for &t in ts {
            for (name, phi) in [("f", &self.f), ("g", &self.g)] {
                let values = sorted
                    .iter()
                    .map(|&x| phi.eval(x, t))
                    .collect::<Result<Vec<_>, _>>()?;
                let Some(k) = self.lipschitz else { continue };
                for i in 1..sorted.len() {
                    let dx = sorted[i] - sorted[i - 1];
                    if dx == 0.0 {
                        continue;
                    }
                    let slope = (values[i] - values[i - 1]).abs() / dx;
                    if slope > k * (1.0 + 1e-9) {
                        return Err(IntegratorError::Lipschitz {
                            coefficient: name,
                            k,
                            slope,
                            x1: sorted[i - 1],
                            x2: sorted[i],
                            t,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    Euler,
    Milstein,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Euler => "euler",
            Method::Milstein => "milstein",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "euler" => Ok(Method::Euler),
            "milstein" => Ok(Method::Milstein),
            other => Err(format!("unknown method `{other}` (expected euler or milstein)")),
        }
    }
}

/// A completed (possibly truncated) simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationRun {
    pub spec: SdeSpec,
    pub bundle: PathBundle,
    pub method: Method,
    /// Grid index of the first non-finite or over-threshold state. The
    /// bundle is truncated to the last good point.
    pub explosion: Option<usize>,
}

/// State handed to step visitors after each accepted step.
#[derive(Debug, Clone, Copy)]
pub struct StepView {
    /// Grid index of the new point.
    pub index: usize,
    pub t: f64,
    pub x: f64,
    pub dw: f64,
    pub v: f64,
    pub db: f64,
    pub qv: f64,
}

/// Precomputed scheme for one equation; `g_x` is symbolic.
#[derive(Debug, Clone)]
pub struct Stepper<'a> {
    spec: &'a SdeSpec,
    g_x: Option<Expr>,
    method: Method,
}

impl<'a> Stepper<'a> {
    pub fn new(spec: &'a SdeSpec, method: Method) -> Self {
        let g_x = match method {
            Method::Euler => None,
            Method::Milstein => Some(spec.g.differentiate(Var::X).expr),
        };
        Self { spec, g_x, method }
    }

    pub fn method(&self) -> Method {
        self.method
    }

    /// One step from `(x, t)` with driver increments `db` and `dqv = vΔτ`.
    #[inline]
    pub fn step(&self, x: f64, t: f64, dt: f64, db: f64, dqv: f64) -> Result<f64, EvalError> {
        let f = self.spec.f.eval(x, t)?;
        let g = self.spec.g.eval(x, t)?;
        let mut next = x + f * dt + g * db;
        if let Some(g_x) = &self.g_x {
            next += 0.5 * g * g_x.eval(x, t)? * (db * db - dqv);
        }
        Ok(next)
    }

    fn exploded(&self, x: f64) -> bool {
        !x.is_finite() || x.abs() > self.spec.explosion_threshold
    }

    /// Simulates one path, sampling `v` from the scenario with the pre-step
    /// state. Calls `visit` after every accepted step and returns the
    /// explosion index, if any.
    pub fn run<F>(
        &self,
        scenario: &VolatilityScenario,
        bounds: &AmbiguityBounds,
        grid: &TimeGrid,
        key: PathKey,
        mut visit: F,
    ) -> Result<Option<usize>, IntegratorError>
    where
        F: FnMut(&StepView),
    {
        if grid.start() != self.spec.t0 {
            return Err(IntegratorError::GridStart {
                grid_start: grid.start(),
                t0: self.spec.t0,
            });
        }
        let policy: Policy = scenario.policy(bounds, key, grid.start());
        let wiener = key.stream(StreamTag::Wiener);
        let mut qv = QvAccumulator::new(grid.start());
        let t = grid.points();
        let mut x = self.spec.x0;
        if self.exploded(x) {
            return Ok(Some(0));
        }
        for i in 0..grid.steps() {
            let dt = t[i + 1] - t[i];
            let v = policy.level(t[i], Some(x))?;
            let dw = dt.sqrt() * wiener.normal(i as u64);
            let db = v.sqrt() * dw;
            x = self.step(x, t[i], dt, db, v * dt)?;
            if self.exploded(x) {
                return Ok(Some(i + 1));
            }
            visit(&StepView {
                index: i + 1,
                t: t[i + 1],
                x,
                dw,
                v,
                db,
                qv: qv.push(v, t[i], t[i + 1]),
            });
        }
        Ok(None)
    }
}

/// Simulates one path of the equation under a scenario. Feedback scenarios
/// see the pre-step state `X_i` when choosing `v_i`.
pub fn integrate(
    spec: &SdeSpec,
    scenario: &VolatilityScenario,
    bounds: &AmbiguityBounds,
    grid: &TimeGrid,
    key: PathKey,
    method: Method,
) -> Result<SimulationRun, IntegratorError> {
    let stepper = Stepper::new(spec, method);
    let mut bundle = PathBundle::with_capacity(grid.clone());
    bundle.x.reserve(grid.steps() + 1);
    bundle.x.push(spec.x0);
    let explosion = stepper.run(scenario, bounds, grid, key, |s| {
        bundle.dw.push(s.dw);
        bundle.v.push(s.v);
        bundle.db.push(s.db);
        bundle.qv.push(s.qv);
        bundle.x.push(s.x);
    })?;
    if explosion == Some(0) {
        bundle.x.clear();
    }
    Ok(SimulationRun {
        spec: spec.clone(),
        bundle,
        method,
        explosion,
    })
}

/// Integrates along an already sampled driver (e.g. a coarsened bundle).
pub fn integrate_along(
    spec: &SdeSpec,
    bundle: &PathBundle,
    method: Method,
) -> Result<SimulationRun, IntegratorError> {
    let grid = &bundle.grid;
    if grid.start() != spec.t0 {
        return Err(IntegratorError::GridStart {
            grid_start: grid.start(),
            t0: spec.t0,
        });
    }
    let stepper = Stepper::new(spec, method);
    let mut out = bundle.clone();
    out.x = Vec::with_capacity(bundle.steps() + 1);
    out.x.push(spec.x0);
    let t = grid.points();
    let mut x = spec.x0;
    let mut explosion = None;
    for i in 0..bundle.steps() {
        let dt = t[i + 1] - t[i];
        x = stepper.step(x, t[i], dt, bundle.db[i], bundle.v[i] * dt)?;
        if stepper.exploded(x) {
            explosion = Some(i + 1);
            out.dw.truncate(i);
            out.v.truncate(i);
            out.db.truncate(i);
            out.qv.truncate(i + 1);
            break;
        }
        out.x.push(x);
    }
    Ok(SimulationRun {
        spec: spec.clone(),
        bundle: out,
        method,
        explosion,
    })
}

/// Exact solution of `dX = −αX dt + βX dB` on the bundle's driver:
/// `X(τ_j) = x0·exp(−α(τ_j − τ_0) − ½β²⟨B⟩_j + β B_j)`.
pub fn linear_closed_form(alpha: f64, beta: f64, x0: f64, bundle: &PathBundle) -> Vec<f64> {
    let t = bundle.grid.points();
    bundle
        .b_path()
        .iter()
        .zip(&bundle.qv)
        .zip(t)
        .map(|((b, qv), tj)| x0 * (-alpha * (tj - t[0]) - 0.5 * beta * beta * qv + beta * b).exp())
        .collect()
}

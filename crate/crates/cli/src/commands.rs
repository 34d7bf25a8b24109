use std::fs;
use std::path::Path;

use gsde::csvfmt::{self, Table};
use gsde::estimator::EstimatorError;
use gsde::integrator::IntegratorError;
use gsde::lyapunov::BoundKind;
use gsde::{
    adversarial_search, check_certificate, estimate_exponent, integrate, CertificateReport,
    EstimatorConfig, PathKey, TimeGrid,
};

use crate::config::{certificate_error, sweep_plan, Config, Experiment, Overrides};
use crate::CliError;

/// Paths simulated when `numerics.n_paths` is absent.
const DEFAULT_EXPONENT_PATHS: usize = 500;
const DEFAULT_SIMULATE_PATHS: usize = 1;

fn estimator_error(e: EstimatorError) -> CliError {
    match e {
        EstimatorError::NoPaths
        | EstimatorError::NoScenarios
        | EstimatorError::ZeroInitialValue
        | EstimatorError::Precondition(_) => CliError::Config(e.to_string()),
        _ => CliError::Runtime(e.to_string()),
    }
}

fn integrator_error(e: IntegratorError) -> CliError {
    match e {
        IntegratorError::Parse(_) | IntegratorError::GridStart { .. } | IntegratorError::InitialValue => {
            CliError::Config(e.to_string())
        }
        _ => CliError::Runtime(e.to_string()),
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, contents)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

/// Lipschitz estimates are checked on the certificate grid before any run.
fn validate_spec(exp: &Experiment) -> Result<(), CliError> {
    if exp.spec.lipschitz.is_some() {
        exp.spec
            .validate_on(&exp.grid.xs, &exp.grid.ts)
            .map_err(|e| match e {
                IntegratorError::Lipschitz { .. } => CliError::Config(e.to_string()),
                other => integrator_error(other),
            })?;
    }
    Ok(())
}

fn estimator_config(exp: &Experiment) -> EstimatorConfig {
    let n = exp.numerics.n_paths.unwrap_or(DEFAULT_EXPONENT_PATHS);
    EstimatorConfig::new(exp.numerics.horizon, exp.numerics.dt, n, exp.numerics.seed)
        .with_method(exp.numerics.method)
}

fn run_certificate(exp: &Experiment) -> Result<CertificateReport, CliError> {
    let lf = exp
        .lyapunov
        .as_ref()
        .ok_or_else(|| CliError::Config("missing required key `lyapunov.V`".into()))?;
    let cert = exp
        .certificate
        .as_ref()
        .ok_or_else(|| CliError::Config("missing required key `certificate.theorem`".into()))?;
    check_certificate(lf, &exp.spec, &exp.bounds, cert, &exp.grid).map_err(certificate_error)
}

fn verdict_line(r: &CertificateReport) -> String {
    let relation = match r.bound_kind {
        BoundKind::Upper => "limsup (1/t) log|X| <=",
        BoundKind::Lower => "liminf (1/t) log|X| >=",
    };
    if r.granted {
        let limited = if r.hypotheses.iter().any(|h| h.horizon_limited) {
            " (limit hypotheses checked on a finite horizon)"
        } else {
            ""
        };
        format!("{} granted: {relation} {} with lambda = {}{limited}", r.theorem, r.bound, r.lambda)
    } else {
        let failed: Vec<&str> = r
            .hypotheses
            .iter()
            .filter(|h| !h.passed)
            .map(|h| h.name.as_str())
            .collect();
        format!("{} withheld: failed {}", r.theorem, failed.join("; "))
    }
}

pub fn certify(config: &Config, overrides: &Overrides) -> Result<i32, CliError> {
    let exp = Experiment::build(config, overrides)?;
    validate_spec(&exp)?;
    let report = run_certificate(&exp)?;
    if exp.wants("certificate") {
        write(&exp.out_dir, "certificate.csv", &report.to_csv())?;
    }
    if exp.wants("verdict") {
        write(&exp.out_dir, "verdict.csv", &report.verdict_csv())?;
    }
    println!("{}", verdict_line(&report));
    for caveat in &report.caveats {
        println!("note: {caveat}");
    }
    Ok(if report.granted { 0 } else { 1 })
}

pub fn exponent(config: &Config, overrides: &Overrides) -> Result<i32, CliError> {
    let exp = Experiment::build(config, overrides)?;
    validate_spec(&exp)?;
    let cfg = estimator_config(&exp);
    let estimate =
        estimate_exponent(&exp.spec, &exp.scenarios, &exp.bounds, &cfg).map_err(estimator_error)?;
    let search = exp
        .search
        .as_ref()
        .map(|opts| adversarial_search(&exp.spec, &exp.bounds, opts, &cfg).map_err(estimator_error))
        .transpose()?;
    if exp.wants("exponent") {
        write(&exp.out_dir, "exponent.csv", &estimate.to_csv())?;
    }
    if exp.wants("summary") {
        let mut table = Table::new(&[
            "family_sup",
            "family_sup_mean",
            "family_inf_mean",
            "worst_scenario",
            "n_scenarios",
            "withheld_scenarios",
            "n_paths",
            "horizon",
            "dt",
            "flagged",
        ]);
        table.row([
            csvfmt::float(estimate.family_sup),
            csvfmt::float(estimate.family_sup_mean),
            csvfmt::float(estimate.family_inf_mean),
            estimate.scenarios[estimate.worst].scenario.to_string(),
            estimate.scenarios.len().to_string(),
            estimate.withheld.len().to_string(),
            estimate.n_paths.to_string(),
            csvfmt::float(estimate.horizon),
            csvfmt::float(estimate.dt),
            estimate.flagged.to_string(),
        ]);
        write(&exp.out_dir, "exponent_summary.csv", &table.finish())?;
    }
    if let (Some(s), true) = (&search, exp.wants("search")) {
        let mut table = Table::new(&[
            "best_scenario",
            "exponent",
            "stderr",
            "baseline",
            "evaluations",
            "partial",
        ]);
        table.row([
            s.best.to_string(),
            csvfmt::float(s.exponent),
            csvfmt::float(s.stderr),
            csvfmt::float(s.baseline),
            s.evaluations.to_string(),
            s.partial.to_string(),
        ]);
        write(&exp.out_dir, "search.csv", &table.finish())?;
    }
    println!(
        "family sup exponent (max over scenarios of path means) {} under {}; max over paths {}; a lower bound on the sup over all measures",
        estimate.family_sup_mean, estimate.scenarios[estimate.worst].scenario, estimate.family_sup
    );
    if estimate.flagged > 0 {
        eprintln!("warning: {} paths flagged (explosion or zero state)", estimate.flagged);
    }
    if let Some(s) = &search {
        println!(
            "adversarial search: {} under {} after {} evaluations{}",
            s.exponent,
            s.best,
            s.evaluations,
            if s.partial { " (partial: budget below family size)" } else { "" }
        );
    }
    Ok(0)
}

pub fn simulate(config: &Config, overrides: &Overrides) -> Result<i32, CliError> {
    let exp = Experiment::build(config, overrides)?;
    if !exp.explicit_scenarios || exp.scenarios.len() != 1 {
        return Err(CliError::Config(format!(
            "simulate takes exactly one scenario in `scenarios.list`, got {}",
            if exp.explicit_scenarios { exp.scenarios.len() } else { 0 }
        )));
    }
    validate_spec(&exp)?;
    let scenario = &exp.scenarios[0];
    let grid = TimeGrid::uniform(exp.spec.t0, exp.numerics.horizon, exp.numerics.dt)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let n = exp.numerics.n_paths.unwrap_or(DEFAULT_SIMULATE_PATHS);
    let width = n.saturating_sub(1).to_string().len().max(4);
    for p in 0..n {
        let run = integrate(
            &exp.spec,
            scenario,
            &exp.bounds,
            &grid,
            PathKey::new(exp.numerics.seed, p as u64),
            exp.numerics.method,
        )
        .map_err(integrator_error)?;
        if let Some(index) = run.explosion {
            eprintln!("warning: path {p} left the state bound at grid index {index}; truncated");
        }
        if exp.wants("paths") {
            let b = &run.bundle;
            let (w, bp) = (b.w_path(), b.b_path());
            let mut table = Table::new(&["t", "W", "v", "B", "qv", "X"]);
            for (j, x) in b.x.iter().enumerate() {
                table.row([
                    csvfmt::float(b.grid.points()[j]),
                    csvfmt::float(w[j]),
                    csvfmt::opt_float(b.v.get(j).copied()),
                    csvfmt::float(bp[j]),
                    csvfmt::float(b.qv[j]),
                    csvfmt::float(*x),
                ]);
            }
            write(&exp.out_dir, &format!("path_{p:0width$}.csv"), &table.finish())?;
        }
    }
    println!("simulated {n} path(s) under {scenario} on [{}, {}]", grid.start(), grid.end());
    Ok(0)
}

pub fn sweep(config: &Config, overrides: &Overrides) -> Result<i32, CliError> {
    let plan = sweep_plan(config)?;
    // every sweep point is parsed before anything runs
    let experiments = plan
        .values
        .iter()
        .map(|&v| {
            let mut c = config.clone();
            c.set_number(&plan.param, v)?;
            Experiment::build(&c, overrides)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let first = &experiments[0];
    let certify = first.lyapunov.is_some() && first.certificate.is_some();
    if !certify && !plan.estimate {
        return Err(CliError::Config(
            "sweep needs a certificate (`lyapunov.V`, `certificate.theorem`) or `sweep.estimate = true`".into(),
        ));
    }
    let mut table = Table::new(&["parameter", "value", "granted", "bound", "exponent"]);
    for (value, exp) in plan.values.iter().zip(&experiments) {
        validate_spec(exp)?;
        let (granted, bound) = if certify {
            let r = run_certificate(exp)?;
            (r.granted.to_string(), csvfmt::float(r.bound))
        } else {
            (String::new(), String::new())
        };
        let exponent = if plan.estimate {
            let e = estimate_exponent(&exp.spec, &exp.scenarios, &exp.bounds, &estimator_config(exp))
                .map_err(estimator_error)?;
            csvfmt::float(e.family_sup_mean)
        } else {
            String::new()
        };
        println!("{} = {value}: granted={granted} bound={bound} exponent={exponent}", plan.param);
        table.row([plan.param.clone(), csvfmt::float(*value), granted, bound, exponent]);
    }
    if first.wants("sweep") {
        write(&first.out_dir, "sweep.csv", &table.finish())?;
    }
    Ok(0)
}

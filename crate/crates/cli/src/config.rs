//! TOML experiment files addressed by dotted keys (`sde.f`, `numerics.dt`).
//!
//! Unknown keys and values of the wrong kind are rejected before anything is
//! computed. Text values (expressions, scenario lists) must be quoted.

use std::collections::BTreeMap;
use std::path::PathBuf;

use gsde::estimator::SearchOptions;
use gsde::lyapunov::LyapunovError;
use gsde::scenario::{FamilyOptions, DEFAULT_DT};
use gsde::{
    enumerate_family, AmbiguityBounds, CertificateSpec, CheckGrid, Expr, LyapunovFn, Method,
    SdeSpec, Theorem, VolatilityScenario,
};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Number,
    Integer,
    Text,
    Bool,
}

/// Every accepted key; `params.<name>` is accepted for any identifier.
const KEYS: &[(&str, Kind)] = &[
    ("bounds.sigma_lower", Kind::Number),
    ("bounds.sigma_upper", Kind::Number),
    ("sde.f", Kind::Text),
    ("sde.g", Kind::Text),
    ("sde.x0", Kind::Number),
    ("sde.t0", Kind::Number),
    ("sde.lipschitz", Kind::Number),
    ("sde.explosion_threshold", Kind::Number),
    ("lyapunov.V", Kind::Text),
    ("certificate.theorem", Kind::Text),
    ("certificate.p", Kind::Number),
    ("certificate.lambda", Kind::Number),
    ("certificate.rho", Kind::Number),
    ("certificate.kappa", Kind::Number),
    ("certificate.eta", Kind::Number),
    ("certificate.q", Kind::Number),
    ("certificate.beta_exp", Kind::Number),
    ("certificate.phi", Kind::Text),
    ("certificate.phi1", Kind::Text),
    ("certificate.phi2", Kind::Text),
    ("certificate.nu", Kind::Text),
    ("scenarios.list", Kind::Text),
    ("scenarios.richness", Kind::Integer),
    ("numerics.dt", Kind::Number),
    ("numerics.horizon", Kind::Number),
    ("numerics.n_paths", Kind::Integer),
    ("numerics.seed", Kind::Integer),
    ("numerics.method", Kind::Text),
    ("grid.x_min", Kind::Number),
    ("grid.x_max", Kind::Number),
    ("grid.n_x", Kind::Integer),
    ("grid.t_max", Kind::Number),
    ("grid.n_t", Kind::Integer),
    ("output.dir", Kind::Text),
    ("output.csv", Kind::Text),
    ("sweep.param", Kind::Text),
    ("sweep.start", Kind::Number),
    ("sweep.stop", Kind::Number),
    ("sweep.step", Kind::Number),
    ("sweep.estimate", Kind::Bool),
    ("search.enabled", Kind::Bool),
    ("search.budget", Kind::Integer),
    ("search.max_switches", Kind::Integer),
    ("search.richness", Kind::Integer),
];

/// CSV artifacts a config may request in `output.csv`.
pub const OUTPUTS: &[&str] = &[
    "certificate",
    "verdict",
    "exponent",
    "summary",
    "search",
    "paths",
    "sweep",
];

fn kind_of(key: &str) -> Option<Kind> {
    if let Some(name) = key.strip_prefix("params.") {
        let mut chars = name.chars();
        let ok = chars
            .next()
            .is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
            && chars.all(|c| c.is_ascii_alphanumeric() || c == '_');
        return (ok && name != "x" && name != "t").then_some(Kind::Number);
    }
    KEYS.iter().find(|(k, _)| *k == key).map(|(_, kind)| *kind)
}

/// Raw validated key/value pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        let mut values = BTreeMap::new();
        flatten("", &table, &mut values)?;
        Ok(Self { values })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Replaces a numeric value (used by sweeps).
    pub fn set_number(&mut self, key: &str, value: f64) -> Result<(), CliError> {
        match kind_of(key) {
            Some(Kind::Number) => {
                self.values.insert(key.to_string(), format!("{value:?}"));
                Ok(())
            }
            Some(_) => Err(CliError::Config(format!("`{key}` is not a numeric field"))),
            None => Err(CliError::Config(format!("unknown sweep parameter `{key}`"))),
        }
    }

    fn number(&self, key: &str) -> Option<f64> {
        self.get(key).map(|v| v.parse().expect("validated on parse"))
    }

    fn integer(&self, key: &str) -> Option<u64> {
        self.get(key).map(|v| v.parse().expect("validated on parse"))
    }

    fn flag(&self, key: &str) -> bool {
        self.get(key).is_some_and(|v| v == "true")
    }

    fn require(&self, key: &str) -> Result<&str, CliError> {
        self.get(key)
            .ok_or_else(|| CliError::Config(format!("missing required key `{key}`")))
    }

    fn params(&self) -> BTreeMap<String, f64> {
        self.values
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix("params.")
                    .map(|name| (name.to_string(), v.parse().expect("validated on parse")))
            })
            .collect()
    }
}

/// Walks dotted keys down to leaves and checks each against its declared kind.
fn flatten(
    prefix: &str,
    table: &toml::Table,
    out: &mut BTreeMap<String, String>,
) -> Result<(), CliError> {
    for (k, value) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        if let toml::Value::Table(inner) = value {
            flatten(&key, inner, out)?;
            continue;
        }
        let kind = kind_of(&key).ok_or_else(|| CliError::Config(format!("unknown key `{key}`")))?;
        let text = leaf(kind, value).map_err(|m| CliError::Config(format!("`{key}`: {m}")))?;
        out.insert(key, text);
    }
    Ok(())
}

fn leaf(kind: Kind, value: &toml::Value) -> Result<String, String> {
    use toml::Value;
    match (kind, value) {
        (Kind::Number, Value::Float(v)) if v.is_finite() => Ok(format!("{v:?}")),
        (Kind::Number, Value::Integer(v)) => Ok(format!("{:?}", *v as f64)),
        (Kind::Number, _) => Err(format!("expected a finite number, got `{value}`")),
        (Kind::Integer, Value::Integer(v)) if *v >= 0 => Ok(v.to_string()),
        (Kind::Integer, _) => Err(format!("expected a nonnegative integer, got `{value}`")),
        (Kind::Bool, Value::Boolean(v)) => Ok(v.to_string()),
        (Kind::Bool, _) => Err(format!("expected true or false, got `{value}`")),
        (Kind::Text, Value::String(v)) => Ok(v.clone()),
        (Kind::Text, _) => Err(format!("expected a quoted string, got `{value}`")),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Numerics {
    pub dt: f64,
    pub horizon: f64,
    /// `None` when the file leaves the command default in place.
    pub n_paths: Option<usize>,
    pub seed: u64,
    pub method: Method,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    pub param: String,
    pub values: Vec<f64>,
    pub estimate: bool,
}

/// A fully parsed experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub bounds: AmbiguityBounds,
    pub spec: SdeSpec,
    pub lyapunov: Option<LyapunovFn>,
    pub certificate: Option<CertificateSpec>,
    pub grid: CheckGrid,
    pub scenarios: Vec<VolatilityScenario>,
    /// Whether `scenarios` came from `scenarios.list` rather than the family.
    pub explicit_scenarios: bool,
    pub numerics: Numerics,
    pub search: Option<SearchOptions>,
    pub out_dir: PathBuf,
    pub outputs: Vec<String>,
}

impl Experiment {
    pub fn wants(&self, output: &str) -> bool {
        self.outputs.iter().any(|o| o == output)
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

fn expr(config: &Config, key: &str, params: &BTreeMap<String, f64>) -> Result<Option<Expr>, CliError> {
    config
        .get(key)
        .map(|src| {
            Expr::parse_with(src, params).map_err(|e| CliError::Config(format!("`{key}`: {e}")))
        })
        .transpose()
}

fn positive_count(config: &Config, key: &str, default: u64) -> Result<usize, CliError> {
    let n = config.integer(key).unwrap_or(default);
    if n == 0 {
        return Err(CliError::Config(format!("`{key}` must be at least 1")));
    }
    Ok(n as usize)
}

pub fn certificate_error(e: LyapunovError) -> CliError {
    match e {
        LyapunovError::MissingField { .. }
        | LyapunovError::InvalidParameter { .. }
        | LyapunovError::Grid(_)
        | LyapunovError::Precondition(_)
        | LyapunovError::Parse(_) => CliError::Config(e.to_string()),
        LyapunovError::Eval(_) | LyapunovError::NonPositiveV { .. } | LyapunovError::Quadrature { .. } => {
            CliError::Runtime(e.to_string())
        }
    }
}

impl Experiment {
    pub fn build(config: &Config, overrides: &Overrides) -> Result<Self, CliError> {
        let params = config.params();
        let bounds = AmbiguityBounds::new(
            config.number("bounds.sigma_lower").ok_or_else(|| {
                CliError::Config("missing required key `bounds.sigma_lower`".into())
            })?,
            config.number("bounds.sigma_upper").ok_or_else(|| {
                CliError::Config("missing required key `bounds.sigma_upper`".into())
            })?,
        )
        .map_err(|e| CliError::Config(e.to_string()))?;

        config.require("sde.f")?;
        config.require("sde.g")?;
        let f = expr(config, "sde.f", &params)?.expect("required");
        let g = expr(config, "sde.g", &params)?.expect("required");
        let t0 = config.number("sde.t0").unwrap_or(0.0);
        let mut spec = SdeSpec::new(f, g, config.number("sde.x0").unwrap_or(1.0), t0);
        if let Some(k) = config.number("sde.lipschitz") {
            if !(k > 0.0) {
                return Err(CliError::Config("`sde.lipschitz` must be positive".into()));
            }
            spec = spec.with_lipschitz(k);
        }
        if let Some(threshold) = config.number("sde.explosion_threshold") {
            if !(threshold > 0.0) {
                return Err(CliError::Config(
                    "`sde.explosion_threshold` must be positive".into(),
                ));
            }
            spec = spec.with_explosion_threshold(threshold);
        }

        let lyapunov = expr(config, "lyapunov.V", &params)?.map(LyapunovFn::new);
        let certificate = match config.get("certificate.theorem") {
            None => {
                if let Some(key) = config
                    .values
                    .keys()
                    .find(|k| k.starts_with("certificate."))
                {
                    return Err(CliError::Config(format!(
                        "`{key}` given without `certificate.theorem`"
                    )));
                }
                None
            }
            Some(name) => {
                let theorem: Theorem = name.parse().map_err(CliError::Config)?;
                let mut cert = CertificateSpec::new(theorem);
                cert.p = config.number("certificate.p");
                cert.lambda = config.number("certificate.lambda");
                cert.rho = config.number("certificate.rho");
                cert.kappa = config.number("certificate.kappa");
                cert.eta = config.number("certificate.eta");
                cert.q = config.number("certificate.q");
                cert.beta_exp = config.number("certificate.beta_exp");
                cert.phi = expr(config, "certificate.phi", &params)?;
                cert.phi1 = expr(config, "certificate.phi1", &params)?;
                cert.phi2 = expr(config, "certificate.phi2", &params)?;
                cert.nu_coeffs = config
                    .get("certificate.nu")
                    .map(|list| {
                        list.split(',')
                            .map(|c| {
                                c.trim().parse::<f64>().map_err(|_| {
                                    CliError::Config(format!(
                                        "`certificate.nu`: invalid coefficient `{}`",
                                        c.trim()
                                    ))
                                })
                            })
                            .collect::<Result<Vec<_>, _>>()
                    })
                    .transpose()?;
                Some(cert)
            }
        };

        let grid = CheckGrid::new(
            config.number("grid.x_min").unwrap_or(1e-3),
            config.number("grid.x_max").unwrap_or(10.0),
            positive_count(config, "grid.n_x", 200)?,
            t0,
            config.number("grid.t_max").unwrap_or(t0 + 20.0),
            positive_count(config, "grid.n_t", 200)?,
        )
        .map_err(certificate_error)?;

        let method = match config.get("numerics.method") {
            None => Method::Euler,
            Some(m) => m
                .parse::<Method>()
                .map_err(|e| CliError::Config(format!("`numerics.method`: {e}")))?,
        };
        let numerics = Numerics {
            dt: config.number("numerics.dt").unwrap_or(DEFAULT_DT),
            horizon: config.number("numerics.horizon").unwrap_or(200.0),
            n_paths: config
                .get("numerics.n_paths")
                .map(|_| positive_count(config, "numerics.n_paths", 1))
                .transpose()?,
            seed: overrides
                .seed
                .or(config.integer("numerics.seed"))
                .unwrap_or(0),
            method,
        };
        if !(numerics.dt > 0.0 && numerics.horizon > 0.0 && numerics.dt <= numerics.horizon) {
            return Err(CliError::Config(
                "need 0 < numerics.dt <= numerics.horizon".into(),
            ));
        }

        let v_expr = lyapunov.as_ref().map(|l| &l.v);
        let (scenarios, explicit_scenarios) = match config.get("scenarios.list") {
            Some(list) => {
                if config.get("scenarios.richness").is_some() {
                    return Err(CliError::Config(
                        "give either `scenarios.list` or `scenarios.richness`, not both".into(),
                    ));
                }
                let parsed = list
                    .split(';')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        VolatilityScenario::parse(s, v_expr)
                            .map_err(|e| CliError::Config(format!("`scenarios.list`: {e}")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                if parsed.is_empty() {
                    return Err(CliError::Config("`scenarios.list` is empty".into()));
                }
                (parsed, true)
            }
            None => {
                let richness = positive_count(config, "scenarios.richness", 3)?;
                let family = enumerate_family(
                    &bounds,
                    richness,
                    &FamilyOptions {
                        t0,
                        horizon: numerics.horizon,
                        lyapunov: v_expr.cloned(),
                    },
                )
                .map_err(|e| CliError::Config(e.to_string()))?;
                (family, false)
            }
        };

        let search = if config.flag("search.enabled") {
            let defaults = SearchOptions::default();
            Some(SearchOptions {
                budget: config
                    .integer("search.budget")
                    .map(|b| b as usize)
                    .unwrap_or(defaults.budget),
                richness: positive_count(config, "search.richness", defaults.richness as u64)?,
                max_switches: config
                    .integer("search.max_switches")
                    .map(|b| b as usize)
                    .unwrap_or(defaults.max_switches),
            })
        } else {
            None
        };

        let outputs = match config.get("output.csv") {
            None => OUTPUTS.iter().map(|s| s.to_string()).collect(),
            Some(list) => {
                let chosen: Vec<String> = list
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
                if let Some(bad) = chosen.iter().find(|c| !OUTPUTS.contains(&c.as_str())) {
                    return Err(CliError::Config(format!(
                        "`output.csv`: unknown output `{bad}` (expected one of {})",
                        OUTPUTS.join(", ")
                    )));
                }
                chosen
            }
        };
        let out_dir = overrides
            .out
            .clone()
            .or_else(|| config.get("output.dir").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("gsde-out"));

        Ok(Self {
            bounds,
            spec,
            lyapunov,
            certificate,
            grid,
            scenarios,
            explicit_scenarios,
            numerics,
            search,
            out_dir,
            outputs,
        })
    }
}

/// Sweep values `start, start + step, …` up to `stop`, rounded to 1e−12.
pub fn sweep_plan(config: &Config) -> Result<SweepPlan, CliError> {
    let param = config.require("sweep.param")?.to_string();
    match kind_of(&param) {
        Some(Kind::Number) => {}
        Some(_) => {
            return Err(CliError::Config(format!(
                "`sweep.param`: `{param}` is not a numeric field"
            )))
        }
        None => {
            return Err(CliError::Config(format!(
                "`sweep.param`: unknown key `{param}`"
            )))
        }
    }
    if param.starts_with("sweep.") {
        return Err(CliError::Config("cannot sweep a sweep setting".into()));
    }
    let need = |key: &str| {
        config
            .number(key)
            .ok_or_else(|| CliError::Config(format!("missing required key `{key}`")))
    };
    let (start, stop, step) = (need("sweep.start")?, need("sweep.stop")?, need("sweep.step")?);
    if !(step > 0.0) || start > stop {
        return Err(CliError::Config(format!(
            "empty sweep range: start={start}, stop={stop}, step={step}"
        )));
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
    if count > 100_000 {
        return Err(CliError::Config(format!("sweep has {count} points; limit is 100000")));
    }
    let values = (0..count)
        .map(|k| ((start + k as f64 * step) * 1e12).round() / 1e12)
        .collect();
    Ok(SweepPlan {
        param,
        values,
        estimate: config.flag("sweep.estimate"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
# linear test equation
bounds.sigma_lower = 0.5
bounds.sigma_upper = 1.0
params.alpha = 1.0   # drift rate
params.beta = 1
sde.f = "-alpha*x"
sde.g = "beta * x"
sde.x0 = 1
lyapunov.V = "x^2"
certificate.theorem = "T33"
certificate.p = 2
"#;

    #[test]
    fn parses_base() {
        let c = Config::parse(BASE).unwrap();
        assert_eq!(c.get("sde.f"), Some("-alpha*x"));
        assert_eq!(c.get("params.alpha"), Some("1.0"));
        assert_eq!(c.get("params.beta"), Some("1.0"));
        let e = Experiment::build(&c, &Overrides::default()).unwrap();
        assert_eq!(e.spec.f.eval(2.0, 0.0).unwrap(), -2.0);
        assert_eq!(e.certificate.as_ref().unwrap().theorem, Theorem::T33);
        assert_eq!(e.scenarios.len(), 8);
        assert!(!e.explicit_scenarios);
        assert_eq!(e.numerics.n_paths, None);
    }

    #[test]
    fn rejects_bad_lines() {
        for bad in [
            "nonsense.key = 1",
            "bounds.sigma_lower",
            "bounds.sigma_lower = abc",
            "numerics.n_paths = -3",
            "sweep.estimate = \"yes\"",
            "sde.f = 3",
            "sde.f = \"x",
            "params.x = 1",
            "bounds.sigma_lower = 1\nbounds.sigma_lower = 2",
        ] {
            assert!(matches!(Config::parse(bad), Err(CliError::Config(_))), "{bad}");
        }
    }

    #[test]
    fn comments_inside_quotes_survive() {
        let c = Config::parse("sde.f = \"x # not a comment\" # comment").unwrap();
        assert_eq!(c.get("sde.f"), Some("x # not a comment"));
    }

    #[test]
    fn overrides_and_outputs() {
        let text = format!("{BASE}numerics.seed = 4\noutput.csv = \"verdict\"\n");
        let c = Config::parse(&text).unwrap();
        let e = Experiment::build(
            &c,
            &Overrides {
                seed: Some(9),
                out: Some("elsewhere".into()),
            },
        )
        .unwrap();
        assert_eq!(e.numerics.seed, 9);
        assert_eq!(e.out_dir, PathBuf::from("elsewhere"));
        assert!(e.wants("verdict") && !e.wants("certificate"));
        let bad = Config::parse(&format!("{BASE}output.csv = \"plots\"\n")).unwrap();
        assert!(Experiment::build(&bad, &Overrides::default()).is_err());
    }

    #[test]
    fn sweep_values() {
        let text = format!(
            "{BASE}sweep.param = \"params.alpha\"\nsweep.start = 0.3\nsweep.stop = 0.8\nsweep.step = 0.1\n"
        );
        let plan = sweep_plan(&Config::parse(&text).unwrap()).unwrap();
        assert_eq!(plan.values, vec![0.3, 0.4, 0.5, 0.6, 0.7, 0.8]);
        let text = format!("{BASE}sweep.param = \"sde.f\"\nsweep.start = 0\nsweep.stop = 1\nsweep.step = 1\n");
        assert!(sweep_plan(&Config::parse(&text).unwrap()).is_err());
        let text = format!(
            "{BASE}sweep.param = \"params.alpha\"\nsweep.start = 1\nsweep.stop = 0\nsweep.step = 0.1\n"
        );
        assert!(sweep_plan(&Config::parse(&text).unwrap()).is_err());
    }
}

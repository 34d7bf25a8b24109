use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(cmd: &str, dir: &Path, config: &str, extra: &[&str]) -> Output {
    let path = dir.join("experiment.conf");
    fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_gsde"))
        .arg(cmd)
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(dir.join("out"))
        .args(extra)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Reads one column of a single-row CSV by header name.
fn field(csv: &str, name: &str) -> String {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == name).unwrap();
    row[i].to_string()
}

const LINEAR: &str = "\
bounds.sigma_lower = 0.5
bounds.sigma_upper = 1.0
sde.f = \"-alpha*x\"
sde.g = \"x\"
params.alpha = 1.0
";

fn certificate_config(alpha: f64) -> String {
    format!(
        "{}lyapunov.V = \"x^2\"\ncertificate.theorem = \"T33\"\ncertificate.p = 2\n",
        LINEAR.replace("params.alpha = 1.0", &format!("params.alpha = {alpha}"))
    )
}

#[test]
fn certify_grants_linear_example() {
    let dir = scratch("certify_grant");
    let o = run("certify", &dir, &certificate_config(1.0), &[]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let verdict = fs::read_to_string(dir.join("out/verdict.csv")).unwrap();
    assert_eq!(field(&verdict, "granted"), "true");
    let bound: f64 = field(&verdict, "bound").parse().unwrap();
    assert!((bound + 0.5).abs() < 1e-9, "bound {bound}");
    assert!(dir.join("out/certificate.csv").exists());
}

#[test]
fn certify_withholds_weak_drift() {
    let dir = scratch("certify_withhold");
    let o = run("certify", &dir, &certificate_config(0.1), &[]);
    assert_eq!(code(&o), 1, "{}", stdout(&o));
    assert!(stdout(&o).contains("withheld"));
}

#[test]
fn certify_without_lyapunov_function_is_config_error() {
    let dir = scratch("certify_missing");
    let config = format!("{LINEAR}certificate.theorem = \"T33\"\ncertificate.p = 2\n");
    assert_eq!(code(&run("certify", &dir, &config, &[])), 2);
}

#[test]
fn unknown_key_and_unreadable_file_are_config_errors() {
    let dir = scratch("bad_key");
    assert_eq!(code(&run("certify", &dir, &format!("{LINEAR}sde.h = 1\n"), &[])), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_gsde"))
        .args(["certify", "--config"])
        .arg(dir.join("absent.conf"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn exponent_without_noise_is_exact() {
    let dir = scratch("exponent_exact");
    let config = "\
bounds.sigma_lower = 0.5
bounds.sigma_upper = 1.0
sde.f = \"-x\"
sde.g = \"0*x\"
numerics.horizon = 1
numerics.dt = 1e-6
numerics.n_paths = 1
";
    // the Euler exponent is log(1 - dt)/dt, within 1e-6 of -1 only for dt near 1e-6
    let o = run("exponent", &dir, config, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(dir.join("out/exponent_summary.csv")).unwrap();
    let sup: f64 = field(&summary, "family_sup").parse().unwrap();
    assert!((sup + 1.0).abs() < 1e-6, "family sup {sup}");
}

#[test]
fn exponent_rejects_zero_paths() {
    let dir = scratch("exponent_zero");
    let config = format!("{LINEAR}numerics.n_paths = 0\n");
    assert_eq!(code(&run("exponent", &dir, &config, &[])), 2);
}

#[test]
fn exponent_matches_closed_form_under_lower_volatility() {
    let dir = scratch("exponent_linear");
    let config = format!(
        "{LINEAR}scenarios.list = \"constant:0.25\"\nnumerics.horizon = 100\nnumerics.dt = 0.01\nnumerics.n_paths = 200\nnumerics.seed = 7\n"
    );
    let o = run("exponent", &dir, &config, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(dir.join("out/exponent_summary.csv")).unwrap();
    let mean: f64 = field(&summary, "family_sup_mean").parse().unwrap();
    // -alpha - v/2 with alpha = 1, v = 0.25
    assert!((mean + 1.125).abs() < 0.05, "mean exponent {mean}");
    assert!(dir.join("out/exponent.csv").exists());
}

const SIMULATE: &str = "\
bounds.sigma_lower = 0.5
bounds.sigma_upper = 1.0
sde.f = \"-x\"
sde.g = \"0.5*x\"
scenarios.list = \"constant:1\"
numerics.horizon = 2
numerics.dt = 0.01
numerics.n_paths = 2
";

#[test]
fn simulate_writes_quadratic_variation_of_constant_scenario() {
    let dir = scratch("simulate_qv");
    let o = run("simulate", &dir, SIMULATE, &["--seed", "11"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.join("out/path_0000.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,W,v,B,qv,X");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 201);
    let last = rows.last().unwrap();
    assert_eq!(last[2], "");
    let qv: f64 = last[4].parse().unwrap();
    assert!((qv - 2.0).abs() < 1e-12, "qv {qv}");
    assert!(dir.join("out/path_0001.csv").exists());
}

#[test]
fn simulate_is_reproducible() {
    let a = scratch("simulate_repro_a");
    let b = scratch("simulate_repro_b");
    assert_eq!(code(&run("simulate", &a, SIMULATE, &["--seed", "5"])), 0);
    assert_eq!(code(&run("simulate", &b, SIMULATE, &["--seed", "5"])), 0);
    for name in ["path_0000.csv", "path_0001.csv"] {
        let x = fs::read(a.join("out").join(name)).unwrap();
        let y = fs::read(b.join("out").join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
    let c = scratch("simulate_repro_c");
    assert_eq!(code(&run("simulate", &c, SIMULATE, &["--seed", "6"])), 0);
    assert_ne!(
        fs::read(a.join("out/path_0000.csv")).unwrap(),
        fs::read(c.join("out/path_0000.csv")).unwrap()
    );
}

#[test]
fn simulate_requires_one_scenario() {
    let dir = scratch("simulate_two");
    let config = SIMULATE.replace("constant:1", "constant:1; constant:0.25");
    assert_eq!(code(&run("simulate", &dir, &config, &[])), 2);
}

#[test]
fn sweep_flips_between_half_and_six_tenths() {
    let dir = scratch("sweep_flip");
    let config = format!(
        "{}sweep.param = \"params.alpha\"\nsweep.start = 0.3\nsweep.stop = 0.8\nsweep.step = 0.1\n",
        certificate_config(1.0)
    );
    let o = run("sweep", &dir, &config, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.join("out/sweep.csv")).unwrap();
    let rows: Vec<(f64, String)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            (cols[1].parse().unwrap(), cols[2].to_string())
        })
        .collect();
    assert_eq!(rows.len(), 6);
    for (alpha, granted) in rows {
        assert_eq!(granted == "true", alpha > 0.5 + 1e-9, "alpha {alpha}");
    }
}

#[test]
fn sweep_rejects_empty_range_and_text_parameter() {
    let dir = scratch("sweep_bad");
    let empty = format!(
        "{}sweep.param = \"params.alpha\"\nsweep.start = 0.8\nsweep.stop = 0.3\nsweep.step = 0.1\n",
        certificate_config(1.0)
    );
    assert_eq!(code(&run("sweep", &dir, &empty, &[])), 2);
    let text = format!(
        "{}sweep.param = \"sde.f\"\nsweep.start = 0.3\nsweep.stop = 0.8\nsweep.step = 0.1\n",
        certificate_config(1.0)
    );
    assert_eq!(code(&run("sweep", &dir, &text, &[])), 2);
}

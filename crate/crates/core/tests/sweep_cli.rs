use std::process::Command;

use stars_opt::ao::Scheme;
use stars_opt::config::{AlgorithmConfig, SystemConfig};
use stars_opt::experiments::{run_sweep, SweepParam, SweepSpec, SWEEP_HEADER};

fn quick_alg() -> AlgorithmConfig {
    AlgorithmConfig {
        max_ao_iters: 2,
        ..AlgorithmConfig::default()
    }
}

fn spec(n: usize) -> SweepSpec {
    SweepSpec {
        param: SweepParam::PmaxDbm,
        values: vec![10.0, 20.0],
        schemes: vec![Scheme::Es, Scheme::FpeEs],
        num_realizations: n,
        master_seed: 3,
    }
}

#[test]
fn sweeps_are_deterministic_and_prefix_stable() {
    let cfg = SystemConfig::default();
    let alg = quick_alg();
    let three = run_sweep(&spec(3), &cfg, &alg).unwrap();
    let again = run_sweep(&spec(3), &cfg, &alg).unwrap();
    assert_eq!(three.csv(), again.csv());
    let two = run_sweep(&spec(2), &cfg, &alg).unwrap();
    for (a, b) in two.rows.iter().zip(&three.rows) {
        assert_eq!(a.samples[..], b.samples[..2]);
    }
    assert_eq!(three.rows.len(), 4);
    assert!(three.csv().starts_with(SWEEP_HEADER));
}

#[test]
fn more_power_helps_on_average() {
    let table = run_sweep(&spec(3), &SystemConfig::default(), &quick_alg()).unwrap();
    for scheme in [Scheme::Es, Scheme::FpeEs] {
        let low = table.row(10.0, scheme).unwrap().mean();
        let high = table.row(20.0, scheme).unwrap().mean();
        assert!(high > low, "{}: {low} → {high}", scheme.label());
    }
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stars-opt"))
}

#[test]
fn cli_sweep_writes_one_row_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.cfg");
    std::fs::write(&config, "# comments and blank lines are ignored\n\nseed = 9\n").unwrap();
    let out = dir.path().join("sweep.csv");
    let status = cli()
        .args(["--config", config.to_str().unwrap(), "sweep", "--param", "users", "--values", "2,4"])
        .args(["--schemes", "es,ts", "--n", "1", "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], SWEEP_HEADER);
    assert_eq!(lines.len(), 5);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 6 && l.ends_with(",1")));
}

#[test]
fn cli_gradcheck_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let grad = cli().args(["gradcheck", "--trials", "3"]).output().unwrap();
    assert!(grad.status.success());
    let trace_path = dir.path().join("trace.csv");
    let config = dir.path().join("run.cfg");
    std::fs::write(&config, "eps2 = 1e-3\n").unwrap();
    let trace = cli()
        .args(["--config", config.to_str().unwrap(), "trace", "--protocol", "ms", "--seed", "4"])
        .args(["--out", trace_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(trace.status.success(), "{}", String::from_utf8_lossy(&trace.stderr));
    let text = std::fs::read_to_string(&trace_path).unwrap();
    assert!(text.starts_with("iter,wsr\n"));
    let wsr: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(wsr.len() >= 2);
    assert!(wsr.windows(2).all(|w| w[1] >= w[0] - 1e-6));
}

#[test]
fn cli_rejects_bad_input() {
    let unknown = cli().args(["solve", "--bogus"]).output().unwrap();
    assert!(!unknown.status.success());
    let baseline_as_protocol = cli().args(["solve", "--protocol", "fpe-es"]).output().unwrap();
    assert!(!baseline_as_protocol.status.success());
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.cfg");
    std::fs::write(&config, "J = 0\n").unwrap();
    let bad = cli().args(["--config", config.to_str().unwrap(), "gradcheck"]).output().unwrap();
    assert!(!bad.status.success());
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dilute_hom::cli::{Command as Sub, RunConfig};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dilute-hom")).args(args).output().expect("binary runs")
}

fn path_str(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn data_lines(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with('#')).collect()
}

#[test]
fn tensor_csv_layout() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.csv");
    let o = bin(&["tensor", "--shape", "circle:0.25", "--eta", "0.3,0.2,0.1", "--out", &path_str(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("# config: command=tensor; shape=circle:0.25;"));
    let lines = data_lines(&text);
    assert_eq!(lines[0], "eta,a11,a12,a22,residual,mineig");
    assert_eq!(lines.len(), 4);
    let first: Vec<f64> = lines[1].split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(first[0], 0.3);
    assert!(first[1] < 1.0 && (first[1] - first[3]).abs() < 1e-12);
}

#[test]
fn green_expansion_report() {
    let o = bin(&["green", "--check-expansion"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    let field = |name: &str| -> f64 {
        let line = text.lines().find(|l| l.starts_with(name)).unwrap();
        line.split('=').nth(1).unwrap().trim().parse().unwrap()
    };
    assert!((field("remainder slope") - 4.0).abs() < 0.2);
    assert!((field("quadratic coefficient") + 0.25).abs() < 1e-3);
    assert!(field("R(0)").is_finite());
}

#[test]
fn validation_and_numerical_exit_codes() {
    let o = bin(&["cell", "--eta", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("eta must be in (0,1]"));
    assert!(o.stdout.is_empty());

    assert_eq!(bin(&["tensor", "--shape", "square:1"]).status.code(), Some(2));
    assert_eq!(bin(&["tensor", "--nodes", "many"]).status.code(), Some(2));
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(bin(&["solve", "--eta", "0.3,0.2"]).status.code(), Some(2));

    let o = bin(&["tensor", "--method", "series:4", "--eta", "0.9"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("numerical failure"));
}

#[test]
fn selftest_passes_and_detects_a_perturbed_weight() {
    let o = bin(&["selftest"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(!text.contains("FAIL"));

    let o = bin(&["selftest", "--perturb-weight", "1e-3"]);
    assert_ne!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    let gauss = text.lines().find(|l| l.starts_with("gauss K[1]")).unwrap();
    assert!(gauss.ends_with("FAIL"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# tensor sweep\ncommand = tensor\nshape = ellipse:0.2,0.12,0.4\neta = 0.3, 0.1, 0.05\nnodes = 48\n").unwrap();
    let mut outputs = Vec::new();
    for (k, jobs) in ["1", "2", "2"].iter().enumerate() {
        let csv = dir.path().join(format!("t{k}.csv"));
        let json = dir.path().join(format!("t{k}.json"));
        let svg = dir.path().join(format!("t{k}.svg"));
        let o = bin(&[
            "tensor",
            "--config",
            &path_str(&cfg),
            "--jobs",
            jobs,
            "--out",
            &path_str(&csv),
            "--json",
            &path_str(&json),
            "--svg",
            &path_str(&svg),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push((fs::read(&csv).unwrap(), fs::read(&json).unwrap(), fs::read(&svg).unwrap()));
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
    let text = String::from_utf8(outputs[0].0.clone()).unwrap();
    assert!(text.contains("nodes=48"));
    assert_eq!(data_lines(&text).len(), 4);
    let report: serde_json::Value = serde_json::from_slice(&outputs[0].1).unwrap();
    assert_eq!(report["config"]["shape"], "ellipse:0.2,0.12,0.4");
    assert!(report["polarization"].is_array());
}

#[test]
fn flags_override_config_entries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "eta = 0.3\n").unwrap();
    let o = bin(&["tensor", "--config", &path_str(&cfg), "--eta", "0.2,0.1"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(data_lines(&text).len(), 3);

    fs::write(&cfg, "command = cell\n").unwrap();
    assert_eq!(bin(&["tensor", "--config", &path_str(&cfg)]).status.code(), Some(2));
}

#[test]
fn canonical_config_round_trips_for_every_command() {
    for c in [Sub::Green, Sub::Cell, Sub::Tensor, Sub::Solve, Sub::Rates, Sub::Selftest] {
        let cfg = RunConfig::defaults(c);
        cfg.validate().unwrap();
        let text = cfg.to_canonical();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_canonical(), text);
    }
}

#[test]
fn solve_field_columns_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("field.csv");
    let json = dir.path().join("solve.json");
    let o = bin(&[
        "solve", "--epsilon", "1/3", "--eta", "0.3", "--grid", "9", "--out", &path_str(&out), "--json", &path_str(&json),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let lines = data_lines(&text);
    assert_eq!(lines[0], "x,y,u_eps,u_hom,corrector,zeta");
    assert!(lines.len() > 20);
    for l in &lines[1..] {
        let v: Vec<f64> = l.split(',').map(|s| s.parse().unwrap()).collect();
        assert!(v[0].hypot(v[1]) < 1.0);
        assert!((v[5] - (v[2] - v[3] - v[4])).abs() < 1e-14);
        assert!(v[2] > 0.0, "maximum principle with f > 0, g = 0");
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(&json).unwrap()).unwrap();
    assert!(report["dirichlet_residual"].as_f64().unwrap() < 1e-7);
    assert!(report["neumann_residual"].as_f64().unwrap() < 1e-7);
}

#[test]
fn small_rate_sweep_reports_tags() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rates.csv");
    let json = dir.path().join("rates.json");
    let o = bin(&["rates", "--epsilon", "1/3", "--eta", "0.3,0.2", "--out", &path_str(&out), "--json", &path_str(&json)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let lines = data_lines(&text);
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("epsilon,eta,sigma,kappa,rho,tag,"));
    // ρ ≈ 7.5 and 5.6 at ε = 1/3: both rows are crossover and carry the dilute bound too
    for l in &lines[1..] {
        assert!(l.contains(",crossover,"));
        let cols: Vec<&str> = l.split(',').collect();
        assert!(cols[16].parse::<f64>().unwrap() > 0.0);
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(&json).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);
    assert!(report["spreads"]["crossover"].as_f64().unwrap() >= 1.0);
}

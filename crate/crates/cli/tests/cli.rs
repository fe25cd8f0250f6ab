use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn ratefield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ratefield"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn manifest(dir: &Path, command: &str) -> serde_json::Value {
    let text = fs::read_to_string(dir.join(format!("{command}.manifest.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn digests(m: &serde_json::Value) -> Vec<String> {
    m["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| o["sha256"].as_str().unwrap().to_string())
        .collect()
}

/// Small simulation at σ = 0.2 so that a shape window fits in T = 200.
fn small_simulation(dir: &Path, seed: &str) -> Output {
    ratefield(&[
        "simulate",
        "--seed",
        seed,
        "--out-dir",
        &p(dir, "sim"),
        "--t-end",
        "200",
        "--grid-steps",
        "20000",
        "--sigma",
        "0.2",
        "--people",
        "100",
    ])
}

#[test]
fn simulate_is_deterministic_and_creates_output_dir() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let out_a = small_simulation(&a, "7");
    ok(&out_a);
    assert!(stderr(&out_a).contains("created output directory"));
    ok(&small_simulation(&b, "7"));
    let (ma, mb) = (manifest(&a.join("sim"), "simulate"), manifest(&b.join("sim"), "simulate"));
    assert_eq!(digests(&ma), digests(&mb));
    assert_eq!(ma["seeds"][0], 7);

    let c = tmp.path().join("c");
    ok(&small_simulation(&c, "8"));
    assert_ne!(digests(&ma), digests(&manifest(&c.join("sim"), "simulate")));

    for (file, header) in [
        ("truth.csv", "time,value"),
        ("spikes.csv", "time"),
        ("counts.csv", "time,count"),
        ("mentions.csv", "i,f"),
    ] {
        let text = fs::read_to_string(a.join("sim").join(file)).unwrap();
        assert_eq!(text.lines().next(), Some(header), "{file}");
    }
}

#[test]
fn fit_sample_analyze_pipeline() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    ok(&small_simulation(dir, "5"));
    let sim = dir.join("sim");
    let out = p(dir, "run");
    ok(&ratefield(&[
        "fit", "--spikes", &p(&sim, "spikes.csv"), "--t-end", "200", "--grid-steps", "2000", "--sigma", "0.2",
        "--out-dir", &out,
    ]));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("run/fit.json")).unwrap()).unwrap();
    let m = report["events"].as_f64().unwrap();
    assert!(report["compatibility_residual"].as_f64().unwrap().abs() <= 1e-6 * m);

    let path = p(&dir.join("run"), "ml_path.csv");
    // Highest fitted rate in the middle fifth keeps the shape window short.
    let (node_time, _) = fs::read_to_string(&path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let mut it = l.split(',').map(|v| v.parse::<f64>().unwrap());
            (it.next().unwrap(), it.next().unwrap())
        })
        .filter(|(t, _)| (80.0..=120.0).contains(t))
        .fold((0.0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    let node_time = node_time.to_string();
    let sample_args = [
        "sample", "--path", &path, "--sigma", "0.2", "--samples", "400", "--seed", "11", "--node-time", &node_time,
        "--out-dir", &out,
    ];
    ok(&ratefield(&sample_args));
    let first = digests(&manifest(&dir.join("run"), "sample"));
    ok(&ratefield(&sample_args));
    assert_eq!(first, digests(&manifest(&dir.join("run"), "sample")), "sampling is deterministic");

    ok(&ratefield(&[
        "analyze", "--path", &path, "--sigma", "0.2", "--node-time", &node_time, "--histogram", &p(&dir.join("run"), "histogram.csv"),
        "--out-dir", &out,
    ]));
    let table = fs::read_to_string(dir.join("run/delta_p.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("x,density,gaussian,predicted,no_path,sampled,error"));
    assert_eq!(lines.count(), 30);
    let band = fs::read_to_string(dir.join("run/band.csv")).unwrap();
    assert_eq!(band.lines().next(), Some("time,value,lower,upper"));
    assert_eq!(band.lines().count(), 2002);
}

#[test]
fn empty_spike_file_has_no_solution() {
    let tmp = TempDir::new().unwrap();
    let spikes = p(tmp.path(), "empty.csv");
    fs::write(&spikes, "time\n").unwrap();
    let out = ratefield(&["fit", "--spikes", &spikes, "--t-end", "10", "--grid-steps", "100", "--out-dir", &p(tmp.path(), "o")]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("m = 0"), "{}", stderr(&out));
}

#[test]
fn parse_errors_cite_line_numbers() {
    let tmp = TempDir::new().unwrap();
    let spikes = p(tmp.path(), "bad.csv");
    fs::write(&spikes, "time\n1.0\n2.0\nabc\n").unwrap();
    let out = ratefield(&["fit", "--spikes", &spikes, "--t-end", "10", "--out-dir", &p(tmp.path(), "o")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("bad.csv:4:"), "{}", stderr(&out));

    let header = p(tmp.path(), "header.csv");
    fs::write(&header, "t\n1.0\n").unwrap();
    let out = ratefield(&["fit", "--spikes", &header, "--t-end", "10", "--out-dir", &p(tmp.path(), "o")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("header.csv:1:"), "{}", stderr(&out));
}

#[test]
fn narrow_window_is_a_coverage_error() {
    let tmp = TempDir::new().unwrap();
    let path = p(tmp.path(), "flat.csv");
    let rows: String = (0..=400).map(|j| format!("{},0\n", j as f64 * 0.5)).collect();
    fs::write(&path, format!("time,value\n{rows}")).unwrap();
    let out = ratefield(&["analyze", "--path", &path, "--window", "2", "--out-dir", &p(tmp.path(), "o")]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("window"), "{}", stderr(&out));
    ok(&ratefield(&["analyze", "--path", &path, "--sigma", "0.2", "--out-dir", &p(tmp.path(), "o")]));
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    let out = ratefield(&["fit", "--out-dir", &p(tmp.path(), "o")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--spikes"));
    let out = ratefield(&["sample", "--path", "x.csv", "--mode", "sideways"]);
    assert_eq!(out.status.code(), Some(2));
    let out = ratefield(&["simulate", "--grid-steps", "many"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flags_override_config_and_manifest_reruns() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let config = p(dir, "config.json");
    fs::write(
        &config,
        format!(
            r#"{{"seed": 5, "t_end": 50, "grid_steps": 5000, "people": 50, "out_dir": "{}"}}"#,
            p(dir, "first")
        ),
    )
    .unwrap();
    ok(&ratefield(&["simulate", "--config", &config, "--seed", "6"]));
    let m = manifest(&dir.join("first"), "simulate");
    assert_eq!(m["parameters"]["seed"], 6);
    assert_eq!(m["parameters"]["t_end"], 50.0);

    // Re-running from the manifest into another directory reproduces the
    // outputs.
    let again = p(dir, "second");
    ok(&ratefield(&[
        "simulate",
        "--config",
        &p(&dir.join("first"), "simulate.manifest.json"),
        "--out-dir",
        &again,
    ]));
    assert_eq!(digests(&m), digests(&manifest(&dir.join("second"), "simulate")));
}

#[test]
fn sigma_scan_and_indirect() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    ok(&ratefield(&[
        "simulate", "--seed", "2", "--t-end", "40", "--grid-steps", "4000", "--people", "300", "--death-scale",
        "0.05", "--out-dir", &p(dir, "sim"),
    ]));
    let sim = dir.join("sim");
    let out = p(dir, "o");
    ok(&ratefield(&[
        "sigma-scan", "--spikes", &p(&sim, "spikes.csv"), "--t-end", "40", "--grid-steps", "400",
        "--sigma-points", "6", "--out-dir", &out,
    ]));
    let table = fs::read_to_string(dir.join("o/sigma_scan.csv")).unwrap();
    assert_eq!(table.lines().next(), Some("sigma,log_evidence,weight"));
    let weights: f64 = table
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((weights - 1.0).abs() < 1e-9);

    ok(&ratefield(&[
        "indirect", "--mentions", &p(&sim, "mentions.csv"), "--t-end", "40", "--grid-steps", "40",
        "--samples", "200", "--out-dir", &out,
    ]));
    let band = fs::read_to_string(dir.join("o/band.csv")).unwrap();
    assert_eq!(band.lines().count(), 42);
    ok(&ratefield(&[
        "sigma-scan", "--model", "indirect", "--mentions", &p(&sim, "mentions.csv"), "--t-end", "40",
        "--grid-steps", "40", "--sigma-points", "4", "--out-dir", &out,
    ]));
}

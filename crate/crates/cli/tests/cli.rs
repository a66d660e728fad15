use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gtfk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gtfk"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn models_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../models")
}

fn tmp(name: &str) -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join(name)
}

fn write_model(name: &str, rate_map: &str, x0: f64, lambda: f64) -> String {
    let doc = serde_json::json!({
        "benchmarks": [0.25, 0.5, 1.0, 2.0, 5.0, 10.0, 15.0, 20.0, 30.0],
        "delta_u": 1.0 / 512.0,
        "kappa": { "low": 0.05, "high": 0.03 },
        "theta": { "low": 0.03, "high": 0.05 },
        "sigma": { "low": 0.01, "high": 0.008 },
        "rate_map": rate_map,
        "x0": x0,
        "lambda": lambda,
    });
    let path = tmp(name);
    std::fs::write(&path, doc.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

fn error_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stderr).expect("stderr is one JSON object")
}

#[test]
fn help_and_bad_flags() {
    assert!(gtfk(&["--help"]).status.success());
    let o = gtfk(&["price", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["exit_code"], 2);
}

#[test]
fn closed_form_needs_the_linear_map() {
    let o = gtfk(&["price", "--method", "closed_form", "-T", "1"]);
    assert_eq!(o.status.code(), Some(2));
    let e = error_json(&o);
    assert_eq!(e["error"], "validation");
    assert!(o.stdout.is_empty());
}

#[test]
fn missing_config_and_bad_payoff() {
    let o = gtfk(&["price", "--config", "/definitely/not/here.json"]);
    assert_eq!(o.status.code(), Some(2));
    let o = gtfk(&["price", "-T", "1", "--payoff", "call:"]);
    assert_eq!(o.status.code(), Some(2));
    let o = gtfk(&["price", "-T", "-1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn benchmark_bond_at_six_months() {
    let out = stdout(&gtfk(&["price", "-T", "0.5"]));
    assert_eq!(
        out.lines().next(),
        Some("T,value,error_estimate,method,wall_time_ms")
    );
    let r = &rows(&out)[0];
    assert_eq!(
        (r[0].as_str(), r[1].as_str(), r[3].as_str()),
        ("0.5", "0.9696", "gtfk")
    );
}

#[test]
fn undiscounted_bond_is_one() {
    let cfg = write_model("no_discount.json", "exponential", 0.03f64.ln(), 0.0);
    let out = stdout(&gtfk(&[
        "price",
        "--config",
        &cfg,
        "-T",
        "0.5",
        "--full-precision",
    ]));
    let v: f64 = rows(&out)[0][1].parse().unwrap();
    assert!((v - 1.0).abs() < 1e-6, "{v}");
}

#[test]
fn echoed_model_round_trips() {
    let src = models_dir().join("table1_high.json");
    let (a, b) = (tmp("echo_a.json"), tmp("echo_b.json"));
    let run = |cfg: &Path, echo: &Path| {
        stdout(&gtfk(&[
            "price",
            "-T",
            "0.1",
            "--config",
            cfg.to_str().unwrap(),
            "--echo-model",
            echo.to_str().unwrap(),
        ]))
    };
    run(&src, &a);
    run(&a, &b);
    let (a, b) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    assert_eq!(a, b);
    assert_eq!(a, std::fs::read(src).unwrap());
}

#[test]
fn out_flag_writes_the_report() {
    let path = tmp("report.csv");
    let o = gtfk(&["price", "-T", "0.1", "--out", path.to_str().unwrap()]);
    assert!(stdout(&o).is_empty());
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(rows(&text)[0][1], "0.9940");
}

#[test]
fn undiscounted_density_integrates_to_one() {
    let cfg = write_model("density_no_discount.json", "exponential", 0.03f64.ln(), 0.0);
    let out = stdout(&gtfk(&[
        "density",
        "--config",
        &cfg,
        "-T",
        "0.5",
        "--points",
        "201",
        "--full-precision",
    ]));
    let pts: Vec<(f64, f64)> = rows(&out)
        .iter()
        .map(|r| (r[0].parse().unwrap(), r[1].parse().unwrap()))
        .collect();
    let integral: f64 = pts
        .windows(2)
        .map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1))
        .sum();
    assert!((integral - 1.0).abs() < 1e-4, "{integral}");
}

#[test]
fn gaussian_density_matches_the_closed_form() {
    let cfg = write_model("gaussian.json", "linear", 0.03, 1.0);
    let profile = |method: &str| -> Vec<f64> {
        let out = stdout(&gtfk(&[
            "density",
            "--config",
            &cfg,
            "-T",
            "1",
            "--points",
            "41",
            "--full-precision",
            "--method",
            method,
        ]));
        rows(&out).iter().map(|r| r[1].parse().unwrap()).collect()
    };
    let (g, c) = (profile("gtfk"), profile("closed_form"));
    let peak = c.iter().cloned().fold(0.0, f64::max);
    let worst = g
        .iter()
        .zip(&c)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-6 * peak, "{worst} vs peak {peak}");
    let p = profile("pde");
    let worst = p
        .iter()
        .zip(&c)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-3 * peak, "pde {worst} vs peak {peak}");
}

#[test]
fn compare_lists_every_method() {
    let cfg = write_model("compare.json", "linear", 0.03, 1.0);
    let out = stdout(&gtfk(&[
        "compare",
        "--config",
        &cfg,
        "-T",
        "1",
        "--paths",
        "4000",
        "--full-precision",
    ]));
    let r = rows(&out);
    let methods: Vec<&str> = r.iter().map(|r| r[3].as_str()).collect();
    assert_eq!(methods, ["gtfk", "pde", "mc", "closed_form"]);
    let v: Vec<f64> = r.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!((v[0] - v[3]).abs() < 1e-6);
    assert!((v[1] - v[3]).abs() < 1e-5);
}

#[test]
fn table_differences_are_consistent() {
    let out = stdout(&gtfk(&["table1", "-T", "0.1,0.5"]));
    assert_eq!(
        out.lines().next(),
        Some("volatility,T,GTFK,PDE,Abs.Diff,Rel.Diff")
    );
    let r = rows(&out);
    let labels: Vec<(&str, &str)> = r.iter().map(|r| (r[0].as_str(), r[1].as_str())).collect();
    assert_eq!(
        labels,
        [
            ("typical", "0.1"),
            ("typical", "0.5"),
            ("high", "0.1"),
            ("high", "0.5")
        ]
    );
    for row in &r {
        let (g, p, d): (f64, f64, f64) = (
            row[2].parse().unwrap(),
            row[3].parse().unwrap(),
            row[4].parse().unwrap(),
        );
        assert!(((g - p).abs() - d).abs() < 1e-12);
        let rel: f64 = row[5].trim_end_matches('%').parse().unwrap();
        assert!((rel - 100.0 * d / p).abs() <= 0.005 + 1e-12);
    }
    assert_eq!(&r[1][2..4], ["0.9696", "0.9696"]);
    assert_eq!(&r[3][2..4], ["0.9667", "0.9667"]);
}

use std::path::{Path, PathBuf};
use std::process::Command;

use psar::par::Execution;
use psar_cli::archive::{RunArchive, DRAW_TABLES, ERROR};
use psar_cli::commands::{cmd_diagnose, cmd_fit, cmd_forecast, cmd_simulate, DiagnoseArgs, FitArgs, ForecastArgs};
use psar_cli::io::Table;
use psar_cli::CliError;

fn shipped_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/simulation.toml")
}

/// The shipped configuration with a short chain.
fn short_config(dir: &Path) -> PathBuf {
    let text = std::fs::read_to_string(shipped_config())
        .unwrap()
        .replace("iterations = 5000", "iterations = 400")
        .replace("burn_in = 500", "burn_in = 100");
    let p = dir.join("short.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn fit_to(dir: &Path, data: &Path, name: &str) -> RunArchive {
    cmd_fit(
        &FitArgs {
            config: short_config(dir),
            data: data.to_path_buf(),
            out: dir.join(name),
            seed: Some(7),
            chains: None,
        },
        Execution::Auto,
    )
    .unwrap()
}

/// Splits a simulated series into a 20-day training file and the rest.
fn split_simulation(dir: &Path, cycles: usize) -> (PathBuf, PathBuf) {
    let all = dir.join("all.csv");
    cmd_simulate(cycles, 3, &all).unwrap();
    let t = Table::read(&all).unwrap();
    let cut = 20 * 24;
    let (mut head, mut tail) = (Table::new(t.header.clone()), Table::new(t.header.clone()));
    for (i, r) in t.rows.into_iter().enumerate() {
        if i < cut { head.push(r) } else { tail.push(r) }
    }
    let (h, f) = (dir.join("train.csv"), dir.join("future.csv"));
    head.write(&h).unwrap();
    tail.write(&f).unwrap();
    (h, f)
}

#[test]
fn fit_then_diagnose_writes_edf_table() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = split_simulation(dir.path(), 21);
    let archive = fit_to(dir.path(), &train, "run");
    let out = cmd_diagnose(
        &DiagnoseArgs {
            archive: archive.dir.clone(),
            term: Some("daily".into()),
            grid: 12,
            window: 50,
        },
        Execution::Auto,
    )
    .unwrap();
    let edf = Table::read(&archive.path("edf.csv")).unwrap();
    let names: Vec<&str> = edf.rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["intercept", "surface", "daily", "total"]);
    let b0: f64 = edf.rows[0][1].parse().unwrap();
    assert!((b0 - 1.0).abs() < 1e-9, "{b0}");
    assert_eq!(out.effects.len(), 1);
    for f in ["dic.csv", "acf.csv", "residual_covariance.csv", "effect_daily.csv"] {
        assert!(archive.path(f).is_file(), "{f}");
    }
    assert!(!archive.path("effect_surface.csv").exists());
}

#[test]
fn forecast_follows_archived_data() {
    let dir = tempfile::tempdir().unwrap();
    let (train, future) = split_simulation(dir.path(), 22);
    let archive = fit_to(dir.path(), &train, "run");
    let out = cmd_forecast(
        &ForecastArgs {
            archive: archive.dir.clone(),
            future_data: future.clone(),
            rolling: false,
        },
        Execution::Auto,
    )
    .unwrap();
    let t = Table::read(&out.table).unwrap();
    assert_eq!(t.rows.len(), 48);
    assert_eq!(out.calibration.len(), 1);
    assert_eq!(out.calibration[0].1.n, 48);

    // the archived data itself is not a valid future
    let e = cmd_forecast(
        &ForecastArgs {
            archive: archive.dir.clone(),
            future_data: train,
            rolling: false,
        },
        Execution::Auto,
    )
    .unwrap_err();
    assert!(e.to_string().contains("after the archived data"), "{e}");
}

#[test]
fn forecast_without_archive_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let e = cmd_forecast(
        &ForecastArgs {
            archive: dir.path().join("missing"),
            future_data: dir.path().join("future.csv"),
            rolling: false,
        },
        Execution::Auto,
    )
    .unwrap_err();
    assert_eq!(e.record().kind, "archive");
}

#[test]
fn same_seed_gives_identical_archives() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = split_simulation(dir.path(), 21);
    let a = fit_to(dir.path(), &train, "a");
    let b = fit_to(dir.path(), &train, "b");
    for f in DRAW_TABLES.iter().chain(&["summary.csv", "seed.json", "config.toml", "data.csv"]) {
        assert_eq!(std::fs::read(a.path(f)).unwrap(), std::fs::read(b.path(f)).unwrap(), "{f}");
    }
    let seed = a.seed_record().unwrap();
    assert_eq!((seed.seed, seed.draws), (7, 300));
}

#[test]
fn archive_reload_reproduces_draws() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = split_simulation(dir.path(), 21);
    let a = fit_to(dir.path(), &train, "a");
    let (_, _, fit) = a.load_fit().unwrap();
    let sigma2 = Table::read(&a.path("sigma2.csv")).unwrap();
    assert_eq!(sigma2.rows.len(), fit.draws.len());
    for (r, d) in sigma2.rows.iter().zip(&fit.draws.draws) {
        assert_eq!(r[2].parse::<f64>().unwrap(), d.sigma2);
    }
}

#[test]
fn invalid_config_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = split_simulation(dir.path(), 21);
    let text = std::fs::read_to_string(shipped_config())
        .unwrap()
        .replace("time_step = 1", "time_step = 0")
        .replace("chains = 1", "chains = 0")
        .replace("window = 48", "window = 0");
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, text).unwrap();
    let e = cmd_fit(
        &FitArgs {
            config: cfg,
            data: train,
            out: dir.path().join("out"),
            seed: None,
            chains: None,
        },
        Execution::Auto,
    )
    .unwrap_err();
    let CliError::Config(p) = &e else { panic!("{e}") };
    assert!(p.len() >= 3, "{p:?}");
    assert!(!dir.path().join("out").join(DRAW_TABLES[0]).exists());
}

#[test]
fn binary_reports_errors_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    std::fs::write(&data, "time,response,x,y,t\n0,1,0.5,0.5,0\n1,oops,0.5,0.5,1\n").unwrap();
    let out = dir.path().join("run");
    let status = Command::new(env!("CARGO_BIN_EXE_psar"))
        .args(["fit", "--config"])
        .arg(shipped_config())
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(!status.status.success());
    let record: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join(ERROR)).unwrap()).unwrap();
    assert_eq!(record["kind"], "data");
    assert_eq!(record["row"], 2);
    assert_eq!(record["column"], "response");
    assert!(String::from_utf8_lossy(&status.stderr).contains("\"kind\""));
}

#[test]
fn binary_simulates() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim.csv");
    let status = Command::new(env!("CARGO_BIN_EXE_psar"))
        .args(["simulate", "--cycles", "3", "--seed", "5", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let t = Table::read(&out).unwrap();
    assert_eq!(t.rows.len(), 72);
    assert_eq!(t.header[..2], ["time", "response"]);
}

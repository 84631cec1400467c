//! End-to-end tests against the compiled binary: exit codes, file outputs
//! and round trips through the library's own readers.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use echostate::dynamics::{OdeSystem, SampledSeries};
use echostate::esn::SavedModel;
use echostate::experiment::{compare_series, Manifest};
use echostate_cli::plot::read_figure_csv;
use echostate_cli::read_metrics_csv;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_echostate"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read_series(path: &Path) -> SampledSeries {
    let file = std::fs::File::open(path).expect("file exists");
    SampledSeries::read_csv(std::io::BufReader::new(file)).expect("series parses")
}

fn generate(dir: &Path, name: &str, seed: u64, count: usize) -> PathBuf {
    let path = dir.join(name);
    run_ok(bin().args([
        "generate",
        "--system",
        "lorenz",
        "--si",
        "0.05",
        "--count",
        &count.to_string(),
        "--transient",
        "10",
        "--seed",
        &seed.to_string(),
        "--out",
        path.to_str().unwrap(),
    ]));
    path
}

#[test]
fn no_arguments_is_a_usage_error() {
    let out = bin().output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage"), "stderr was: {stderr}");
}

#[test]
fn unknown_subcommand_exits_2() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_flag_exits_2_with_usage() {
    let out = bin()
        .args(["generate", "--system", "lorenz", "--no-such-flag"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.to_lowercase().contains("usage"),
        "stderr was: {stderr}"
    );
}

#[test]
fn runtime_failure_exits_1_with_message() {
    let out = bin()
        .args([
            "metrics",
            "--real",
            "/nonexistent/real.csv",
            "--auto",
            "/nonexistent/auto.csv",
            "--system",
            "lorenz",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error:"), "stderr was: {stderr}");
    assert!(stderr.contains("/nonexistent/real.csv"));
}

#[test]
fn generate_emits_parseable_deterministic_csv() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate(dir.path(), "a.csv", 5, 300);
    let series = read_series(&a);
    assert_eq!(series.len(), 300);
    assert_eq!(series.si, 0.05);
    series.validate().expect("emitted series is well-formed");
    // Same seed, same bytes; stdout and file agree.
    let b = generate(dir.path(), "b.csv", 5, 300);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let stdout = run_ok(bin().args([
        "generate",
        "--system",
        "lorenz",
        "--si",
        "0.05",
        "--count",
        "300",
        "--transient",
        "10",
        "--seed",
        "5",
    ]))
    .stdout;
    assert_eq!(std::fs::read(&a).unwrap(), stdout);
    // Explicit initial condition is honored.
    let fixed = dir.path().join("fixed.csv");
    run_ok(bin().args([
        "generate",
        "--system",
        "lorenz",
        "--si",
        "0.05",
        "--count",
        "10",
        "--transient",
        "0",
        "--initial",
        "1.0,2.0,3.0",
        "--out",
        fixed.to_str().unwrap(),
    ]));
    let series = read_series(&fixed);
    let p = &series.points[0];
    assert_eq!((p.chi, p.psi, p.omega), (1.0, 2.0, 3.0));
}

#[test]
fn metrics_round_trips_against_in_memory_results() {
    let dir = tempfile::tempdir().unwrap();
    let real_path = generate(dir.path(), "real.csv", 11, 400);
    let auto_path = generate(dir.path(), "auto.csv", 12, 400);
    let out_path = dir.path().join("metrics.csv");
    run_ok(bin().args([
        "metrics",
        "--real",
        real_path.to_str().unwrap(),
        "--auto",
        auto_path.to_str().unwrap(),
        "--system",
        "lorenz",
        "--resolution",
        "10",
        "--out",
        out_path.to_str().unwrap(),
    ]));
    let emitted = read_metrics_csv(std::fs::File::open(&out_path).unwrap()).unwrap();
    // The CLI must reproduce the in-memory computation exactly.
    let real = read_series(&real_path);
    let auto_ = read_series(&auto_path);
    let expected =
        compare_series(&real, &auto_, &OdeSystem::lorenz(), 0.5, 10, 0.05, 1e-8).unwrap();
    assert_eq!(emitted, expected);
}

#[test]
fn train_then_autorun_round_trips_through_model_files() {
    let dir = tempfile::tempdir().unwrap();
    let train_path = generate(dir.path(), "train.csv", 3, 600);
    let model_path = dir.path().join("model.json");
    run_ok(bin().args([
        "train",
        "--series",
        train_path.to_str().unwrap(),
        "--model",
        model_path.to_str().unwrap(),
        "--k-buffer",
        "100",
        "--n-nodes",
        "60",
        "--seed",
        "4",
    ]));
    // The model parses through the library reader.
    let model = SavedModel::load(&model_path).unwrap();
    assert_eq!(model.config.n_nodes, 60);
    let warmup_path = generate(dir.path(), "warmup.csv", 9, 120);
    let auto_path = dir.path().join("auto.csv");
    run_ok(bin().args([
        "autorun",
        "--model",
        model_path.to_str().unwrap(),
        "--warmup",
        warmup_path.to_str().unwrap(),
        "--steps",
        "200",
        "--out",
        auto_path.to_str().unwrap(),
    ]));
    let auto_ = read_series(&auto_path);
    assert!(auto_.len() <= 200);
    // The interval is recovered from continued timestamps, so it can sit a
    // few ULP off the exact value.
    assert!((auto_.si - 0.05).abs() < 1e-9);
    // Deterministic: a second identical run emits identical bytes.
    let auto2_path = dir.path().join("auto2.csv");
    run_ok(bin().args([
        "autorun",
        "--model",
        model_path.to_str().unwrap(),
        "--warmup",
        warmup_path.to_str().unwrap(),
        "--steps",
        "200",
        "--out",
        auto2_path.to_str().unwrap(),
    ]));
    assert_eq!(
        std::fs::read(&auto_path).unwrap(),
        std::fs::read(&auto2_path).unwrap()
    );
}

fn tiny_sweep_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        r#"
system = "lorenz"
si_grid = [0.05, 0.1]
n_trials = 4
master_seed = 7
k_series = 260
k_buffer = 40
transient = 10.0
comparison_window = 60
grid_resolution = 8
buckets = 2

[reservoir]
n_nodes = 40
"#,
    )
    .unwrap();
    path
}

#[test]
fn sweep_writes_artifacts_plots_and_replays_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_sweep_config(dir.path());
    let out_a = dir.path().join("run_a");
    let out = run_ok(bin().args([
        "sweep",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out-dir",
        out_a.to_str().unwrap(),
        "--plots",
    ]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.contains("mph_chi"),
        "summary table printed: {stdout}"
    );
    for name in ["trials.csv", "summary.csv", "manifest.json"] {
        assert!(out_a.join(name).exists(), "missing {name}");
    }
    // Plot files parse through the figure reader.
    for stem in ["mph", "l1", "kld", "ip"] {
        let csv = out_a.join(format!("{stem}.csv"));
        let svg = out_a.join(format!("{stem}.svg"));
        assert!(csv.exists() && svg.exists(), "missing plots for {stem}");
        let fig =
            read_figure_csv(std::io::BufReader::new(std::fs::File::open(&csv).unwrap())).unwrap();
        assert!(fig.log_x);
        assert_eq!(fig.series[0].xs, vec![0.05, 0.1]);
        assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
    }
    let trials_a = std::fs::read(out_a.join("trials.csv")).unwrap();
    assert_eq!(
        String::from_utf8_lossy(&trials_a).lines().count(),
        1 + 2 * 4
    );
    // Replay from the manifest into a fresh directory: byte-identical CSVs.
    let out_b = dir.path().join("run_b");
    run_ok(bin().args([
        "sweep",
        "--replay",
        out_a.join("manifest.json").to_str().unwrap(),
        "--out-dir",
        out_b.to_str().unwrap(),
    ]));
    assert_eq!(trials_a, std::fs::read(out_b.join("trials.csv")).unwrap());
    assert_eq!(
        std::fs::read(out_a.join("summary.csv")).unwrap(),
        std::fs::read(out_b.join("summary.csv")).unwrap()
    );
    // The replayed manifest round-trips through the library reader.
    let manifest = Manifest::load(&out_b.join("manifest.json")).unwrap();
    assert_eq!(manifest.config.n_trials, 4);
}

#[test]
fn sweep_refuses_replay_without_out_dir() {
    let out = bin()
        .args(["sweep", "--replay", "whatever.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "clap enforces --out-dir");
}

#[test]
fn sweep_accepts_config_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_sweep_config(dir.path());
    let out_dir = dir.path().join("env_run");
    run_ok(
        bin()
            .env("ECHOSTATE_CONFIG", cfg_path.to_str().unwrap())
            .args(["sweep", "--out-dir", out_dir.to_str().unwrap()]),
    );
    assert!(out_dir.join("summary.csv").exists());
    // Overrides apply on top of the environment-provided config.
    let out_dir2 = dir.path().join("env_run2");
    run_ok(
        bin()
            .env("ECHOSTATE_CONFIG", cfg_path.to_str().unwrap())
            .args([
                "sweep",
                "--set",
                "n_trials=2",
                "--out-dir",
                out_dir2.to_str().unwrap(),
            ]),
    );
    let manifest = Manifest::load(&out_dir2.join("manifest.json")).unwrap();
    assert_eq!(manifest.config.n_trials, 2);
}

#[test]
fn sweep_rejects_unknown_override_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_sweep_config(dir.path());
    let out = bin()
        .args([
            "sweep",
            "--config",
            cfg_path.to_str().unwrap(),
            "--set",
            "bogus_key=1",
            "--out-dir",
            dir.path().join("x").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bogus_key"), "stderr was: {stderr}");
}

#[test]
fn spectrum_overlays_two_series_and_parses_back() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate(dir.path(), "auto.csv", 21, 300);
    let b = generate(dir.path(), "real.csv", 22, 300);
    let out_csv = dir.path().join("spectrum.csv");
    let out_svg = dir.path().join("spectrum.svg");
    run_ok(bin().args([
        "spectrum",
        "--series",
        a.to_str().unwrap(),
        "--baseline",
        b.to_str().unwrap(),
        "--out",
        out_csv.to_str().unwrap(),
        "--svg",
        out_svg.to_str().unwrap(),
    ]));
    let fig = read_figure_csv(std::io::BufReader::new(
        std::fs::File::open(&out_csv).unwrap(),
    ))
    .unwrap();
    assert_eq!(fig.series.len(), 2);
    assert_eq!(fig.series[0].label, "auto");
    assert_eq!(fig.series[1].label, "real");
    // 300 samples truncate to a 256-point window: 129 frequency bins.
    assert_eq!(fig.series[0].xs.len(), 129);
    assert!(!fig.log_x);
    assert!(std::fs::read_to_string(&out_svg)
        .unwrap()
        .contains("</svg>"));
    // Mismatched grids are a runtime error.
    let short = generate(dir.path(), "short.csv", 23, 200);
    let out = bin()
        .args([
            "spectrum",
            "--series",
            a.to_str().unwrap(),
            "--baseline",
            short.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

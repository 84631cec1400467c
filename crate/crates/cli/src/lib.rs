//! Command-line front end: trajectory generation, readout training,
//! autonomous runs, metric comparison, sampling-interval sweeps and spectrum
//! analysis. All heavy lifting lives in the `echostate` library; this crate
//! parses flags, moves files and renders plot-ready CSV/SVG output.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use echostate::dynamics::{random_initial_condition, sample, Component, OdeSystem, SampledSeries};
use echostate::esn::{self, Reservoir, ReservoirConfig, SavedModel};
use echostate::experiment::{
    compare_series, fmt_f64, run_sweep, Manifest, SiAggregate, SweepConfig, SweepResult,
};
use echostate::metrics::{amplitude_spectrum, TrialMetrics};

pub mod plot;

#[derive(Parser)]
#[command(
    name = "echostate",
    version,
    about = "Echo-state-network reconstruction of chaotic attractors",
    propagate_version = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Integrate a chaotic system and emit the uniformly sampled trajectory
    /// as CSV.
    Generate(GenerateArgs),
    /// Train a ridge readout on a sampled series and save the full model.
    Train(TrainArgs),
    /// Run a saved model autonomously after a teacher-forced warmup.
    Autorun(AutorunArgs),
    /// Compare a real and a regenerated series (horizons, score, densities,
    /// tangent inner product).
    Metrics(MetricsArgs),
    /// Run a sampling-interval sweep, or replay one from its manifest.
    Sweep(SweepArgs),
    /// Amplitude spectrum of a series, optionally overlaid on a second one.
    Spectrum(SpectrumArgs),
}

#[derive(Args)]
pub struct GenerateArgs {
    /// System to integrate: lorenz or rossler.
    #[arg(long)]
    pub system: String,
    /// Sampling interval in time units.
    #[arg(long)]
    pub si: f64,
    /// Number of samples to emit.
    #[arg(long)]
    pub count: usize,
    /// Time discarded before sampling starts, in time units.
    #[arg(long, default_value_t = 50.0)]
    pub transient: f64,
    /// Seed for the random initial condition.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Explicit initial condition "x,y,z"; overrides --seed.
    #[arg(long)]
    pub initial: Option<String>,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Training series CSV (as produced by `generate`).
    #[arg(long)]
    pub series: PathBuf,
    /// Output path for the model JSON.
    #[arg(long)]
    pub model: PathBuf,
    /// Washout samples dropped before harvesting.
    #[arg(long, default_value_t = 1000)]
    pub k_buffer: usize,
    /// Ridge regularization strength.
    #[arg(long, default_value_t = 0.01)]
    pub ridge_alpha: f64,
    /// Reservoir nodes.
    #[arg(long, default_value_t = 500)]
    pub n_nodes: usize,
    /// Input gain.
    #[arg(long, default_value_t = 0.2)]
    pub gain: f64,
    /// Fraction of nonzero recurrence entries.
    #[arg(long, default_value_t = 0.02)]
    pub connectivity: f64,
    /// Spectral radius of the recurrence matrix.
    #[arg(long, default_value_t = 0.95)]
    pub spectral_radius: f64,
    /// Input weights are uniform in +/- this bound.
    #[arg(long, default_value_t = 1.0)]
    pub input_weight_range: f64,
    /// Node biases are uniform in +/- this bound.
    #[arg(long, default_value_t = 0.3)]
    pub bias_range: f64,
    /// Reservoir seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct AutorunArgs {
    /// Model JSON from `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Warmup series CSV, teacher-forced before the loop closes.
    #[arg(long)]
    pub warmup: PathBuf,
    /// Autonomous steps to generate.
    #[arg(long)]
    pub steps: usize,
    /// Output magnitude that counts as divergence.
    #[arg(long, default_value_t = 1e6)]
    pub blowup_bound: f64,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct MetricsArgs {
    /// Reference series CSV.
    #[arg(long)]
    pub real: PathBuf,
    /// Regenerated series CSV (same length and sampling interval).
    #[arg(long = "auto")]
    pub auto_series: PathBuf,
    /// System whose vector field defines the tangent inner product.
    #[arg(long)]
    pub system: String,
    /// Error threshold for the prediction horizon; system default when
    /// omitted (0.5 lorenz, 0.1 rossler).
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Density grid resolution per axis.
    #[arg(long, default_value_t = 20)]
    pub resolution: usize,
    /// Relative margin added around the reference bounding box.
    #[arg(long, default_value_t = 0.05)]
    pub margin: f64,
    /// Density smoothing constant.
    #[arg(long, default_value_t = 1e-8)]
    pub epsilon: f64,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SweepArgs {
    /// Built-in profile (desk_lorenz, desk_rossler, full_lorenz,
    /// full_rossler) or path to a sweep TOML.
    #[arg(long, env = "ECHOSTATE_CONFIG", conflicts_with = "replay")]
    pub config: Option<String>,
    /// Replay a recorded run from its manifest; requires --out-dir so the
    /// original outputs are never overwritten.
    #[arg(long, requires = "out_dir", conflicts_with = "set")]
    pub replay: Option<PathBuf>,
    /// Config override as a key=value TOML fragment, e.g. --set n_trials=50
    /// or --set reservoir.n_nodes=200. Unknown keys are rejected.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory; defaults to the config's output_dir, then to
    /// sweep_<config name>.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Also emit plot-ready CSV and SVG files (mph, l1, kld, ip).
    #[arg(long)]
    pub plots: bool,
}

#[derive(Args)]
pub struct SpectrumArgs {
    /// Input series CSV.
    #[arg(long)]
    pub series: PathBuf,
    /// Optional second series to overlay (for example the real trajectory
    /// behind an autonomous one). Must match length and sampling interval.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Component to transform: chi, psi or omega.
    #[arg(long, default_value = "chi")]
    pub component: String,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optional SVG rendering path.
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

/// Built-in sweep profiles, embedded from configs/.
pub const PROFILES: &[(&str, &str)] = &[
    (
        "desk_lorenz",
        include_str!("../../../configs/desk_lorenz.toml"),
    ),
    (
        "desk_rossler",
        include_str!("../../../configs/desk_rossler.toml"),
    ),
    (
        "full_lorenz",
        include_str!("../../../configs/full_lorenz.toml"),
    ),
    (
        "full_rossler",
        include_str!("../../../configs/full_rossler.toml"),
    ),
];

pub fn builtin_profile(name: &str) -> Option<&'static str> {
    PROFILES.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

fn parse_system(name: &str) -> Result<OdeSystem> {
    match name {
        "lorenz" => Ok(OdeSystem::lorenz()),
        "rossler" => Ok(OdeSystem::rossler()),
        other => bail!("unknown system '{other}', expected 'lorenz' or 'rossler'"),
    }
}

fn parse_component(name: &str) -> Result<Component> {
    match name {
        "chi" => Ok(Component::Chi),
        "psi" => Ok(Component::Psi),
        "omega" => Ok(Component::Omega),
        other => bail!("unknown component '{other}', expected chi, psi or omega"),
    }
}

fn parse_initial(text: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        bail!("--initial expects three comma-separated numbers, got '{text}'");
    }
    let mut ic = [0.0; 3];
    for (i, p) in parts.iter().enumerate() {
        ic[i] = p
            .trim()
            .parse::<f64>()
            .with_context(|| format!("bad --initial component '{p}'"))?;
    }
    Ok(ic)
}

fn read_series(path: &Path) -> Result<SampledSeries> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    SampledSeries::read_csv(BufReader::new(file))
        .with_context(|| format!("cannot parse series from {}", path.display()))
}

/// Write through a closure either to a file or to stdout.
fn write_output(out: &Option<PathBuf>, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match out {
        Some(path) => {
            let file =
                File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
            let mut w = BufWriter::new(file);
            f(&mut w)?;
            w.flush()?;
            Ok(())
        }
        None => {
            let stdout = std::io::stdout();
            let mut w = BufWriter::new(stdout.lock());
            f(&mut w)?;
            w.flush()?;
            Ok(())
        }
    }
}

/// Parse a bare TOML value fragment ("3", "0.5", "[1, 2]", "lorenz").
/// Fragments that are not valid TOML values are taken as strings.
fn parse_toml_value(text: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {text}")) {
        Ok(mut table) => table.remove("v").expect("key v was just parsed"),
        Err(_) => toml::Value::String(text.to_string()),
    }
}

/// Apply `--set key=value` overrides to a config document. Dotted keys
/// descend into tables, creating them as needed; the result is re-validated
/// by the config parser, which rejects unknown keys.
pub fn apply_overrides(config_text: &str, sets: &[String]) -> Result<String> {
    if sets.is_empty() {
        return Ok(config_text.to_string());
    }
    let mut table: toml::Table = toml::from_str(config_text).context("config is not valid TOML")?;
    for entry in sets {
        let (key, value) = entry
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects key=value, got '{entry}'"))?;
        let parts: Vec<&str> = key.trim().split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            bail!("--set key '{key}' is malformed");
        }
        let mut cursor = &mut table;
        for part in &parts[..parts.len() - 1] {
            cursor = cursor
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| anyhow!("--set key '{key}' descends into a non-table value"))?;
        }
        cursor.insert(
            parts[parts.len() - 1].to_string(),
            parse_toml_value(value.trim()),
        );
    }
    Ok(toml::to_string(&table)?)
}

/// Resolve --config into (validated config, short name for default paths):
/// built-in profile names first, then filesystem paths.
pub fn resolve_sweep_config(name: &str, sets: &[String]) -> Result<(SweepConfig, String)> {
    let (text, short) = match builtin_profile(name) {
        Some(text) => (text.to_string(), name.to_string()),
        None => {
            let path = Path::new(name);
            let text = std::fs::read_to_string(path).with_context(|| {
                format!(
                    "'{name}' is neither a built-in profile ({}) nor a readable file",
                    PROFILES
                        .iter()
                        .map(|(n, _)| *n)
                        .collect::<Vec<_>>()
                        .join(", ")
                )
            })?;
            let short = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "config".to_string());
            (text, short)
        }
    };
    let text = apply_overrides(&text, sets)?;
    let cfg = SweepConfig::from_toml_str(&text)?;
    Ok((cfg, short))
}

pub const METRICS_CSV_HEADER: &str = "mph_chi,mph_psi,mph_omega,mph_censored_chi,\
mph_censored_psi,mph_censored_omega,ts,l1,kld_real_auto,kld_auto_real,ip,ip_used_steps,\
ip_fixed_point_steps";

pub fn write_metrics_csv<W: Write>(mut w: W, m: &TrialMetrics) -> std::io::Result<()> {
    writeln!(w, "{METRICS_CSV_HEADER}")?;
    writeln!(
        w,
        "{},{},{},{},{},{},{},{},{},{},{},{},{}",
        fmt_f64(m.mph[0]),
        fmt_f64(m.mph[1]),
        fmt_f64(m.mph[2]),
        m.mph_censored[0],
        m.mph_censored[1],
        m.mph_censored[2],
        fmt_f64(m.ts),
        fmt_f64(m.l1),
        fmt_f64(m.kld_real_auto),
        fmt_f64(m.kld_auto_real),
        fmt_f64(m.ip),
        m.ip_used_steps,
        m.ip_fixed_point_steps,
    )
}

pub fn read_metrics_csv<R: Read>(mut r: R) -> Result<TrialMetrics> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| anyhow!("empty metrics file"))?;
    if header != METRICS_CSV_HEADER {
        bail!("unexpected metrics header: {header}");
    }
    let row = lines.next().ok_or_else(|| anyhow!("missing metrics row"))?;
    let fields: Vec<&str> = row.split(',').collect();
    if fields.len() != 13 {
        bail!("expected 13 metric fields, got {}", fields.len());
    }
    let f = |i: usize| -> Result<f64> {
        fields[i]
            .parse::<f64>()
            .with_context(|| format!("bad number '{}'", fields[i]))
    };
    let b = |i: usize| -> Result<bool> {
        fields[i]
            .parse::<bool>()
            .with_context(|| format!("bad flag '{}'", fields[i]))
    };
    let u = |i: usize| -> Result<usize> {
        fields[i]
            .parse::<usize>()
            .with_context(|| format!("bad count '{}'", fields[i]))
    };
    Ok(TrialMetrics {
        mph: [f(0)?, f(1)?, f(2)?],
        mph_censored: [b(3)?, b(4)?, b(5)?],
        ts: f(6)?,
        l1: f(7)?,
        kld_real_auto: f(8)?,
        kld_auto_real: f(9)?,
        ip: f(10)?,
        ip_used_steps: u(11)?,
        ip_fixed_point_steps: u(12)?,
        diverged: false,
    })
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let system = parse_system(&args.system)?;
    let initial = match &args.initial {
        Some(text) => parse_initial(text)?,
        None => {
            let mut rng = ChaCha12Rng::seed_from_u64(args.seed);
            random_initial_condition(&system, &mut rng)
        }
    };
    let series = sample(&system, initial, args.si, args.count, args.transient)?;
    write_output(&args.out, |w| {
        series.write_csv(w)?;
        Ok(())
    })
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let series = read_series(&args.series)?;
    let config = ReservoirConfig {
        n_nodes: args.n_nodes,
        gain: args.gain,
        connectivity: args.connectivity,
        spectral_radius: args.spectral_radius,
        input_dim: 3,
        input_weight_range: args.input_weight_range,
        bias_range: args.bias_range,
        seed: args.seed,
    };
    let mut reservoir = Reservoir::build(config)?;
    let (states, targets) = reservoir.harvest(&series, args.k_buffer)?;
    let readout = esn::train(&states, &targets, args.ridge_alpha)?;
    SavedModel::from_parts(&reservoir, &readout).save(&args.model)?;
    eprintln!(
        "trained readout on {} harvested rows (N = {}, alpha = {}); model written to {}",
        states.nrows(),
        args.n_nodes,
        args.ridge_alpha,
        args.model.display()
    );
    Ok(())
}

fn cmd_autorun(args: &AutorunArgs) -> Result<()> {
    let (mut reservoir, readout) = SavedModel::load(&args.model)?.into_parts()?;
    let warmup = read_series(&args.warmup)?;
    let run = reservoir.run_autonomous(&readout, &warmup, args.steps, args.blowup_bound)?;
    if run.diverged {
        eprintln!(
            "warning: run diverged after {} of {} steps",
            run.series.len(),
            args.steps
        );
    }
    write_output(&args.out, |w| {
        run.series.write_csv(w)?;
        Ok(())
    })
}

fn cmd_metrics(args: &MetricsArgs) -> Result<()> {
    let system = parse_system(&args.system)?;
    let real = read_series(&args.real)?;
    let auto_ = read_series(&args.auto_series)?;
    let threshold = args
        .threshold
        .unwrap_or_else(|| system.default_mph_threshold());
    let m = compare_series(
        &real,
        &auto_,
        &system,
        threshold,
        args.resolution,
        args.margin,
        args.epsilon,
    )?;
    write_output(&args.out, |w| {
        write_metrics_csv(w, &m)?;
        Ok(())
    })
}

fn print_summary_table(rows: &[SiAggregate]) {
    println!(
        "{:>10}  {:>9}  {:>22}  {:>10}  {:>12}  {:>8}",
        "si", "kept", "mph_chi (mean±std)", "l1", "kld(a||r)", "ip"
    );
    for a in rows {
        println!(
            "{:>10}  {:>4}/{:<4}  {:>12.4} ± {:<7.4}  {:>10.4}  {:>12.4}  {:>8.4}",
            format!("{:.4}", a.si),
            a.n_kept,
            a.n_trials,
            a.mph_mean[0],
            a.mph_std[0],
            a.l1_mean,
            a.kld_auto_real_mean,
            a.ip_mean
        );
    }
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let (mut cfg, short) = if let Some(manifest_path) = &args.replay {
        let manifest = Manifest::load(manifest_path)?;
        let cfg = manifest.replay_config()?;
        (cfg, "replay".to_string())
    } else {
        let name = args
            .config
            .clone()
            .ok_or_else(|| anyhow!("--config (or ECHOSTATE_CONFIG) is required"))?;
        resolve_sweep_config(&name, &args.set)?
    };
    let out_dir = args
        .out_dir
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(format!("sweep_{short}")));
    cfg.output_dir = Some(out_dir.clone());
    let result: SweepResult = run_sweep(&cfg)?;
    print_summary_table(&result.aggregates);
    let mut written = vec![
        out_dir.join("trials.csv"),
        out_dir.join("summary.csv"),
        out_dir.join("manifest.json"),
    ];
    if args.plots {
        if result.aggregates.is_empty() {
            eprintln!("note: empty sweep, no plots emitted");
        } else {
            for kind in plot::PlotKind::SUMMARY_KINDS {
                written.extend(plot::emit_plot_data(&result, kind, &out_dir, true)?);
            }
        }
    }
    for path in &written {
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_spectrum(args: &SpectrumArgs) -> Result<()> {
    let component = parse_component(&args.component)?;
    let series = read_series(&args.series)?;
    let label = |p: &Path| -> String {
        p.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "series".to_string())
    };
    let mut spectra = vec![(label(&args.series), amplitude_spectrum(&series, component)?)];
    if let Some(baseline) = &args.baseline {
        let base = read_series(baseline)?;
        spectra.push((label(baseline), amplitude_spectrum(&base, component)?));
    }
    let fig = plot::spectrum_figure(&spectra)?;
    write_output(&args.out, |w| {
        plot::write_figure_csv(w, &fig)?;
        Ok(())
    })?;
    if let Some(svg_path) = &args.svg {
        std::fs::write(svg_path, plot::render_svg(&fig)?)
            .with_context(|| format!("cannot write {}", svg_path.display()))?;
    }
    Ok(())
}

/// Dispatch a parsed command line. Errors bubble to main, which reports them
/// on stderr and exits 1; flag errors never reach this point (clap exits 2).
pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Autorun(args) => cmd_autorun(args),
        Command::Metrics(args) => cmd_metrics(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Spectrum(args) => cmd_spectrum(args),
    }
}

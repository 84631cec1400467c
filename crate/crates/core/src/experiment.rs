//! Sampling-interval sweeps: for every (si, trial) cell an independent
//! training series and reservoir are generated from a derived seed, the
//! reservoir runs autonomously, the similarity metrics are computed, outlier
//! trials are discarded, and the survivors are aggregated into ten-bucket
//! error bars. Results are persisted as two CSV files plus a JSON manifest
//! that allows byte-identical replay.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::dynamics::{
    random_initial_condition, sample, Component, DynamicsError, OdeSystem, SampledSeries,
};
use crate::esn::{self, EsnError, Reservoir, ReservoirConfig, DEFAULT_BLOWUP_BOUND};
use crate::metrics::{
    self, density, filter_outliers, inner_product, kld, l1, nmse_curve, trial_nmse_curve,
    trial_score, EnsemblePair, GridSpec, MetricsError, TrialMetrics,
};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid sweep config: {0}")]
    Config(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Esn(#[from] EsnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("manifest is inconsistent: {0}")]
    BadManifest(String),
    #[error("invalid input: {0}")]
    Input(String),
}

/// Reservoir shape shared by every trial of a sweep; the per-trial seed is
/// derived separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReservoirParams {
    pub n_nodes: usize,
    pub gain: f64,
    pub connectivity: f64,
    pub spectral_radius: f64,
    pub input_weight_range: f64,
    pub bias_range: f64,
}

impl Default for ReservoirParams {
    fn default() -> Self {
        ReservoirParams {
            n_nodes: 1500,
            gain: 0.2,
            connectivity: 0.02,
            spectral_radius: 0.95,
            input_weight_range: 1.0,
            bias_range: 0.3,
        }
    }
}

impl ReservoirParams {
    /// Reduced size that keeps a full sweep in the minutes range.
    pub fn desk() -> Self {
        ReservoirParams {
            n_nodes: 500,
            ..ReservoirParams::default()
        }
    }

    pub fn to_config(&self, seed: u64) -> ReservoirConfig {
        ReservoirConfig {
            n_nodes: self.n_nodes,
            gain: self.gain,
            connectivity: self.connectivity,
            spectral_radius: self.spectral_radius,
            input_dim: 3,
            input_weight_range: self.input_weight_range,
            bias_range: self.bias_range,
            seed,
        }
    }
}

/// Fully resolved sweep description; this is what the manifest records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub system: OdeSystem,
    pub si_grid: Vec<f64>,
    pub n_trials: usize,
    pub master_seed: u64,
    /// Training series length per trial.
    pub k_series: usize,
    /// Washout length, both for harvesting and for the autonomous warmup.
    pub k_buffer: usize,
    /// Time discarded before sampling starts, in time units.
    pub transient: f64,
    /// Steps of the autonomous output compared for NMSE/MPH.
    pub comparison_window: usize,
    /// NMSE threshold defining the prediction horizon.
    pub mph_threshold: f64,
    pub ridge_alpha: f64,
    pub grid_resolution: usize,
    pub grid_margin: f64,
    pub density_epsilon: f64,
    /// Error-bar buckets (10 reproduces the published procedure).
    pub buckets: usize,
    pub reservoir: ReservoirParams,
    /// Where run_sweep writes trials.csv / summary.csv / manifest.json;
    /// nothing is written when absent.
    pub output_dir: Option<PathBuf>,
}

fn desk_si_grid(system: &OdeSystem) -> Vec<f64> {
    match system {
        OdeSystem::Lorenz { .. } => vec![0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.3],
        OdeSystem::Rossler { .. } => vec![0.01, 0.05, 0.1, 0.2],
    }
}

impl SweepConfig {
    /// Minutes-scale profile: N=500, K=5000, 30 trials.
    pub fn desk(system: OdeSystem) -> SweepConfig {
        let si_grid = desk_si_grid(&system);
        let mph_threshold = system.default_mph_threshold();
        SweepConfig {
            system,
            si_grid,
            n_trials: 30,
            master_seed: 0,
            k_series: 5000,
            k_buffer: 1000,
            transient: 50.0,
            comparison_window: 2000,
            mph_threshold,
            ridge_alpha: 0.01,
            grid_resolution: 20,
            grid_margin: 0.05,
            density_epsilon: 1e-8,
            buckets: 10,
            reservoir: ReservoirParams::desk(),
            output_dir: None,
        }
    }

    /// Full-scale profile: N=1500, K=20000, 1000 trials. Hours of compute.
    pub fn full(system: OdeSystem) -> SweepConfig {
        SweepConfig {
            n_trials: 1000,
            k_series: 20_000,
            k_buffer: 3000,
            reservoir: ReservoirParams::default(),
            ..SweepConfig::desk(system)
        }
    }

    pub fn from_toml_str(text: &str) -> Result<SweepConfig, ExperimentError> {
        let file: SweepConfigFile = toml::from_str(text)?;
        let cfg = file.resolve()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_path(path: &Path) -> Result<SweepConfig, ExperimentError> {
        let text = std::fs::read_to_string(path)?;
        SweepConfig::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |msg: String| Err(ExperimentError::Config(msg));
        for w in self.si_grid.windows(2) {
            if !(w[0] < w[1]) {
                return bad(format!(
                    "si_grid must be strictly increasing, got {} before {}",
                    w[0], w[1]
                ));
            }
        }
        for &si in &self.si_grid {
            if !(si > 0.0 && si.is_finite()) {
                return bad(format!("sampling intervals must be positive, got {si}"));
            }
            if si < self.system.minimum_si() {
                return bad(format!(
                    "si {si} is below the {} minimum of {}",
                    self.system.name(),
                    self.system.minimum_si()
                ));
            }
        }
        if self.n_trials == 0 {
            return bad("n_trials must be at least 1".into());
        }
        if self.buckets == 0 {
            return bad("buckets must be at least 1".into());
        }
        if self.buckets > 1 && self.n_trials < self.buckets {
            return bad(format!(
                "bucketed error bars need n_trials >= buckets ({} < {})",
                self.n_trials, self.buckets
            ));
        }
        if self.k_buffer == 0 {
            return bad("k_buffer must be at least 1".into());
        }
        if self.k_series < self.k_buffer + 2 {
            return bad(format!(
                "k_series ({}) must exceed k_buffer + 1 ({})",
                self.k_series,
                self.k_buffer + 1
            ));
        }
        if self.comparison_window == 0 {
            return bad("comparison_window must be at least 1".into());
        }
        if !(self.transient >= 0.0 && self.transient.is_finite()) {
            return bad(format!(
                "transient must be non-negative, got {}",
                self.transient
            ));
        }
        if !(self.mph_threshold > 0.0 && self.mph_threshold.is_finite()) {
            return bad(format!(
                "mph_threshold must be positive, got {}",
                self.mph_threshold
            ));
        }
        if !(self.ridge_alpha > 0.0 && self.ridge_alpha.is_finite()) {
            return bad(format!(
                "ridge_alpha must be positive, got {}",
                self.ridge_alpha
            ));
        }
        if self.grid_resolution == 0 {
            return bad("grid_resolution must be at least 1".into());
        }
        if !(self.grid_margin >= 0.0 && self.grid_margin.is_finite()) {
            return bad(format!(
                "grid_margin must be non-negative, got {}",
                self.grid_margin
            ));
        }
        if !(self.density_epsilon > 0.0 && self.density_epsilon.is_finite()) {
            return bad(format!(
                "density_epsilon must be positive, got {}",
                self.density_epsilon
            ));
        }
        self.reservoir
            .to_config(0)
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        Ok(())
    }
}

/// On-disk TOML schema. Everything except the system and the SI grid has a
/// default; `system` accepts either a plain name ("lorenz", "rossler") for
/// the standard parameters or a full table with explicit coefficients.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepConfigFile {
    system: SystemField,
    si_grid: Vec<f64>,
    #[serde(default = "d_n_trials")]
    n_trials: usize,
    #[serde(default)]
    master_seed: u64,
    #[serde(default = "d_k_series")]
    k_series: usize,
    #[serde(default = "d_k_buffer")]
    k_buffer: usize,
    #[serde(default = "d_transient")]
    transient: f64,
    #[serde(default = "d_window")]
    comparison_window: usize,
    #[serde(default)]
    mph_threshold: Option<f64>,
    #[serde(default = "d_alpha")]
    ridge_alpha: f64,
    #[serde(default = "d_resolution")]
    grid_resolution: usize,
    #[serde(default = "d_margin")]
    grid_margin: f64,
    #[serde(default = "d_epsilon")]
    density_epsilon: f64,
    #[serde(default = "d_buckets")]
    buckets: usize,
    #[serde(default)]
    reservoir: ReservoirParams,
    #[serde(default)]
    output_dir: Option<PathBuf>,
}

fn d_n_trials() -> usize {
    1000
}
fn d_k_series() -> usize {
    20_000
}
fn d_k_buffer() -> usize {
    3000
}
fn d_transient() -> f64 {
    50.0
}
fn d_window() -> usize {
    2000
}
fn d_alpha() -> f64 {
    0.01
}
fn d_resolution() -> usize {
    20
}
fn d_margin() -> f64 {
    0.05
}
fn d_epsilon() -> f64 {
    1e-8
}
fn d_buckets() -> usize {
    10
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SystemField {
    Name(String),
    Full(OdeSystem),
}

impl SweepConfigFile {
    fn resolve(self) -> Result<SweepConfig, ExperimentError> {
        let system = match self.system {
            SystemField::Full(s) => s,
            SystemField::Name(name) => match name.as_str() {
                "lorenz" => OdeSystem::lorenz(),
                "rossler" => OdeSystem::rossler(),
                other => {
                    return Err(ExperimentError::Config(format!(
                        "unknown system '{other}', expected 'lorenz' or 'rossler'"
                    )))
                }
            },
        };
        let mph_threshold = self
            .mph_threshold
            .unwrap_or_else(|| system.default_mph_threshold());
        Ok(SweepConfig {
            system,
            si_grid: self.si_grid,
            n_trials: self.n_trials,
            master_seed: self.master_seed,
            k_series: self.k_series,
            k_buffer: self.k_buffer,
            transient: self.transient,
            comparison_window: self.comparison_window,
            mph_threshold,
            ridge_alpha: self.ridge_alpha,
            grid_resolution: self.grid_resolution,
            grid_margin: self.grid_margin,
            density_epsilon: self.density_epsilon,
            buckets: self.buckets,
            reservoir: self.reservoir,
            output_dir: self.output_dir,
        })
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one (si, trial) cell, mixed so that adding grid points or trials
/// never changes the randomness of existing cells.
pub fn child_seed(master_seed: u64, si: f64, trial: usize) -> u64 {
    let mut h = splitmix64(master_seed ^ 0x517c_c1b7_2722_0a95);
    h = splitmix64(h ^ si.to_bits());
    h = splitmix64(h ^ trial as u64);
    h
}

const ROLE_TRAIN_IC: u64 = 1;
const ROLE_RESERVOIR: u64 = 2;
const ROLE_EVAL_IC: u64 = 3;

fn role_seed(child: u64, role: u64) -> u64 {
    splitmix64(child ^ role)
}

/// How one trial ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrialStatus {
    /// Ran to completion.
    Ok,
    /// The autonomous output left the blow-up bound; metrics cover the
    /// surviving prefix.
    Diverged,
    /// The pipeline failed structurally (integration blow-up, ill-conditioned
    /// ridge system, ...). No metrics.
    Failed(String),
}

impl TrialStatus {
    pub fn code(&self) -> String {
        match self {
            TrialStatus::Ok => "ok".into(),
            TrialStatus::Diverged => "diverged".into(),
            TrialStatus::Failed(msg) => {
                let clean: String = msg
                    .chars()
                    .map(|c| {
                        if c == ',' || c == '\n' || c == '\r' {
                            ';'
                        } else {
                            c
                        }
                    })
                    .collect();
                format!("failed: {clean}")
            }
        }
    }
}

/// One (si, trial) cell: metrics plus the comparison windows needed for
/// bucket-level error curves (dropped before the record is stored long-term).
#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub si: f64,
    pub trial: usize,
    pub seed: u64,
    pub status: TrialStatus,
    pub metrics: TrialMetrics,
    /// Set by [`filter_trials`]: outlier-filtered or non-Ok.
    pub discarded: bool,
    pub(crate) real_window: Option<SampledSeries>,
    pub(crate) auto_window: Option<SampledSeries>,
}

impl TrialRecord {
    /// Free the comparison windows once aggregation no longer needs them.
    pub fn strip_windows(&mut self) {
        self.real_window = None;
        self.auto_window = None;
    }
}

fn failed_metrics() -> TrialMetrics {
    TrialMetrics {
        mph: [0.0; 3],
        mph_censored: [false; 3],
        ts: f64::INFINITY,
        l1: f64::NAN,
        kld_real_auto: f64::NAN,
        kld_auto_real: f64::NAN,
        ip: f64::NAN,
        ip_used_steps: 0,
        ip_fixed_point_steps: 0,
        diverged: false,
    }
}

fn slice_series(s: &SampledSeries, start: usize, len: usize) -> SampledSeries {
    SampledSeries {
        points: s.points[start..start + len].to_vec(),
        si: s.si,
    }
}

/// Run one fully deterministic trial. Structural failures are encoded in the
/// record's status; this never panics on bad dynamics.
pub fn run_trial(cfg: &SweepConfig, si: f64, trial: usize) -> TrialRecord {
    let seed = child_seed(cfg.master_seed, si, trial);
    match run_trial_inner(cfg, si, trial, seed) {
        Ok(record) => record,
        Err(e) => TrialRecord {
            si,
            trial,
            seed,
            status: TrialStatus::Failed(e.to_string()),
            metrics: failed_metrics(),
            discarded: false,
            real_window: None,
            auto_window: None,
        },
    }
}

fn run_trial_inner(
    cfg: &SweepConfig,
    si: f64,
    trial: usize,
    seed: u64,
) -> Result<TrialRecord, ExperimentError> {
    // Fresh training series from its own initial condition.
    let mut train_rng = ChaCha12Rng::seed_from_u64(role_seed(seed, ROLE_TRAIN_IC));
    let train_ic = random_initial_condition(&cfg.system, &mut train_rng);
    let train = sample(&cfg.system, train_ic, si, cfg.k_series, cfg.transient)?;

    // Fresh reservoir, trained readout.
    let mut reservoir = Reservoir::build(cfg.reservoir.to_config(role_seed(seed, ROLE_RESERVOIR)))?;
    let readout = {
        let (states, targets) = reservoir.harvest(&train, cfg.k_buffer)?;
        esn::train(&states, &targets, cfg.ridge_alpha)?
    };
    drop(train);

    // Independent evaluation series: the warmup prefix is teacher-forced,
    // the remainder is what the autonomous output is compared against.
    let mut eval_rng = ChaCha12Rng::seed_from_u64(role_seed(seed, ROLE_EVAL_IC));
    let eval_ic = random_initial_condition(&cfg.system, &mut eval_rng);
    let steps = cfg.comparison_window.max(cfg.k_series);
    let eval = sample(
        &cfg.system,
        eval_ic,
        si,
        cfg.k_buffer + steps,
        cfg.transient,
    )?;
    let warmup = slice_series(&eval, 0, cfg.k_buffer);
    let run = reservoir.run_autonomous(&readout, &warmup, steps, DEFAULT_BLOWUP_BOUND)?;
    let real = slice_series(&eval, cfg.k_buffer, steps);
    Ok(measure_trial(cfg, si, trial, seed, &real, run))
}

fn measure_trial(
    cfg: &SweepConfig,
    si: f64,
    trial: usize,
    seed: u64,
    real: &SampledSeries,
    run: esn::AutonomousRun,
) -> TrialRecord {
    let window = cfg.comparison_window;
    let avail = run.series.len().min(window);
    let real_window = slice_series(real, 0, window);
    let auto_window = slice_series(&run.series, 0, avail);

    // Per-trial error curves over the comparison window; a divergence inside
    // the window counts as an immediate exceedance at the cut-off.
    let mut mph_vals = [0.0f64; 3];
    let mut mph_censored = [false; 3];
    for (k, c) in Component::ALL.iter().enumerate() {
        let mut curve = if avail > 0 {
            trial_nmse_curve(&slice_series(real, 0, avail), &auto_window, *c)
                .expect("window slices share length and si")
        } else {
            Vec::new()
        };
        if run.diverged && avail < window {
            curve.push(f64::INFINITY);
        }
        if curve.is_empty() {
            mph_vals[k] = 0.0;
            mph_censored[k] = false;
        } else {
            let m = metrics::mph(&curve, cfg.mph_threshold, si)
                .expect("curve non-empty and arguments validated");
            mph_vals[k] = m.horizon;
            mph_censored[k] = m.censored;
        }
    }

    // Trial score over the full window; diverged runs get the maximal score
    // so the outlier filter removes them whenever the median is finite.
    let ts = if run.diverged {
        f64::INFINITY
    } else {
        trial_score(&real_window, &slice_series(&run.series, 0, window)).unwrap_or(f64::INFINITY)
    };

    // Long-term indicators over k_series samples.
    let dens_len = cfg.k_series.min(real.len());
    let real_long = slice_series(real, 0, dens_len);
    let auto_len = run.series.len().min(cfg.k_series);
    let (l1_val, kld_ra, kld_ar) = if auto_len > 0 {
        let computed = GridSpec::covering(
            &real_long,
            cfg.grid_resolution,
            cfg.grid_margin,
            cfg.density_epsilon,
        )
        .and_then(|spec| {
            let d_real = density(&real_long, &spec)?;
            let d_auto = density(&slice_series(&run.series, 0, auto_len), &spec)?;
            Ok((
                l1(&d_auto, &d_real)?,
                kld(&d_real, &d_auto)?,
                kld(&d_auto, &d_real)?,
            ))
        });
        computed.unwrap_or((f64::NAN, f64::NAN, f64::NAN))
    } else {
        // Nothing was generated at all: maximal distribution mismatch.
        (2.0, f64::INFINITY, f64::INFINITY)
    };

    let ip_res = if auto_len >= 2 {
        inner_product(&slice_series(&run.series, 0, auto_len), &cfg.system).ok()
    } else {
        None
    };
    let (ip, ip_used, ip_fixed) = match ip_res {
        Some(r) => (r.value, r.used_steps, r.fixed_point_steps),
        None => (f64::NAN, 0, 0),
    };

    TrialRecord {
        si,
        trial,
        seed,
        status: if run.diverged {
            TrialStatus::Diverged
        } else {
            TrialStatus::Ok
        },
        metrics: TrialMetrics {
            mph: mph_vals,
            mph_censored,
            ts,
            l1: l1_val,
            kld_real_auto: kld_ra,
            kld_auto_real: kld_ar,
            ip,
            ip_used_steps: ip_used,
            ip_fixed_point_steps: ip_fixed,
            diverged: run.diverged,
        },
        discarded: false,
        real_window: Some(real_window),
        auto_window: Some(auto_window),
    }
}

/// Measure one real/autonomous series pair in isolation, outside a sweep:
/// the full common length serves as both the error window and the density
/// window. Both series must share length and sampling interval.
pub fn compare_series(
    real: &SampledSeries,
    auto_: &SampledSeries,
    system: &OdeSystem,
    mph_threshold: f64,
    grid_resolution: usize,
    grid_margin: f64,
    density_epsilon: f64,
) -> Result<TrialMetrics, ExperimentError> {
    if real.len() != auto_.len() || real.is_empty() {
        return Err(ExperimentError::Input(format!(
            "series lengths must match and be non-zero, got {} and {}",
            real.len(),
            auto_.len()
        )));
    }
    // Series loaded from CSV recover their interval from timestamp
    // differences, which can be a few ULP off the generating value, so this
    // check is tolerant rather than exact.
    if (real.si - auto_.si).abs() > 1e-9 * real.si.abs().max(auto_.si.abs()) {
        return Err(ExperimentError::Input(format!(
            "sampling intervals must match, got {} and {}",
            real.si, auto_.si
        )));
    }
    let mut mph_vals = [0.0f64; 3];
    let mut mph_censored = [false; 3];
    for (k, c) in Component::ALL.iter().enumerate() {
        let curve = trial_nmse_curve(real, auto_, *c)?;
        let m = metrics::mph(&curve, mph_threshold, real.si)?;
        mph_vals[k] = m.horizon;
        mph_censored[k] = m.censored;
    }
    let ts = trial_score(real, auto_)?;
    let spec = GridSpec::covering(real, grid_resolution, grid_margin, density_epsilon)?;
    let d_real = density(real, &spec)?;
    let d_auto = density(auto_, &spec)?;
    let ip = inner_product(auto_, system)?;
    Ok(TrialMetrics {
        mph: mph_vals,
        mph_censored,
        ts,
        l1: l1(&d_auto, &d_real)?,
        kld_real_auto: kld(&d_real, &d_auto)?,
        kld_auto_real: kld(&d_auto, &d_real)?,
        ip: ip.value,
        ip_used_steps: ip.used_steps,
        ip_fixed_point_steps: ip.fixed_point_steps,
        diverged: false,
    })
}

/// Apply the trial-score outlier rule and mark non-Ok trials as discarded.
/// Returns the filter diagnostics (median, threshold, counts).
pub fn filter_trials(
    records: &mut [TrialRecord],
) -> Result<metrics::OutlierFilter, ExperimentError> {
    let scores: Vec<f64> = records.iter().map(|r| r.metrics.ts).collect();
    let filter = filter_outliers(&scores)?;
    for (r, &kept) in records.iter_mut().zip(&filter.kept) {
        r.discarded = !kept || r.status != TrialStatus::Ok;
    }
    Ok(filter)
}

/// Aggregated row for one sampling interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiAggregate {
    pub si: f64,
    pub n_trials: usize,
    pub n_kept: usize,
    pub n_discarded: usize,
    pub n_diverged: usize,
    pub n_failed: usize,
    /// True when there were too few kept trials for bucket error bars and the
    /// statistics fall back to per-trial spread.
    pub per_trial_fallback: bool,
    pub mph_mean: [f64; 3],
    pub mph_std: [f64; 3],
    /// Fraction of buckets (or trials, in fallback) whose horizon was
    /// censored at the window edge.
    pub mph_censored_frac: [f64; 3],
    pub l1_mean: f64,
    pub l1_std: f64,
    pub l1_median: f64,
    pub kld_real_auto_mean: f64,
    pub kld_real_auto_std: f64,
    pub kld_auto_real_mean: f64,
    pub kld_auto_real_std: f64,
    pub kld_auto_real_median: f64,
    pub ip_mean: f64,
    pub ip_std: f64,
    pub ts_median: f64,
    pub ts_threshold: f64,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

fn median_of(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Contiguous bucket sizes, as even as possible: n = 27, b = 10 gives seven
/// buckets of 3 and three of 2.
fn partition_sizes(n: usize, buckets: usize) -> Vec<usize> {
    let base = n / buckets;
    let rem = n % buckets;
    (0..buckets)
        .map(|i| if i < rem { base + 1 } else { base })
        .collect()
}

/// Aggregate the (already filtered) records of one sampling interval.
///
/// Kept trials are split into `cfg.buckets` contiguous buckets in trial
/// order; each bucket contributes one ensemble-NMSE horizon per component and
/// one mean per long-term indicator, and the row reports the mean and
/// population standard deviation across buckets. When the kept count cannot
/// put at least two trials in every bucket (ensemble error needs two), the
/// row falls back to per-trial statistics and is flagged.
pub fn aggregate(
    si: f64,
    records: &[TrialRecord],
    cfg: &SweepConfig,
) -> Result<SiAggregate, ExperimentError> {
    let n_trials = records.len();
    let kept: Vec<&TrialRecord> = records.iter().filter(|r| !r.discarded).collect();
    let n_kept = kept.len();
    let n_discarded = n_trials - n_kept;
    let n_diverged = records
        .iter()
        .filter(|r| r.status == TrialStatus::Diverged)
        .count();
    let n_failed = records
        .iter()
        .filter(|r| matches!(r.status, TrialStatus::Failed(_)))
        .count();
    let scores: Vec<f64> = records.iter().map(|r| r.metrics.ts).collect();
    let ts_median = median_of(&scores);
    let ts_threshold = 10.0 * ts_median;

    let l1_all: Vec<f64> = kept.iter().map(|r| r.metrics.l1).collect();
    let kld_ra_all: Vec<f64> = kept.iter().map(|r| r.metrics.kld_real_auto).collect();
    let kld_ar_all: Vec<f64> = kept.iter().map(|r| r.metrics.kld_auto_real).collect();
    let ip_all: Vec<f64> = kept.iter().map(|r| r.metrics.ip).collect();

    let bucketed = cfg.buckets >= 1 && n_kept >= 2 * cfg.buckets;
    let mut mph_mean = [f64::NAN; 3];
    let mut mph_std = [f64::NAN; 3];
    let mut mph_censored_frac = [f64::NAN; 3];
    let (l1_stats, kld_ra_stats, kld_ar_stats, ip_stats);

    if bucketed {
        let sizes = partition_sizes(n_kept, cfg.buckets);
        let mut bucket_mph: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        let mut censored_counts = [0usize; 3];
        let mut bucket_l1 = Vec::new();
        let mut bucket_kld_ra = Vec::new();
        let mut bucket_kld_ar = Vec::new();
        let mut bucket_ip = Vec::new();
        let mut start = 0usize;
        for &size in &sizes {
            let members = &kept[start..start + size];
            start += size;
            let reals: Vec<SampledSeries> = members
                .iter()
                .map(|r| {
                    r.real_window
                        .clone()
                        .expect("kept trials retain their comparison windows")
                })
                .collect();
            let autos: Vec<SampledSeries> = members
                .iter()
                .map(|r| {
                    r.auto_window
                        .clone()
                        .expect("kept trials retain their comparison windows")
                })
                .collect();
            let pair = EnsemblePair::new(reals, autos)?;
            for (k, c) in Component::ALL.iter().enumerate() {
                let curve = nmse_curve(&pair, *c);
                let m = metrics::mph(&curve, cfg.mph_threshold, si)?;
                bucket_mph[k].push(m.horizon);
                if m.censored {
                    censored_counts[k] += 1;
                }
            }
            bucket_l1.push(mean(
                &members.iter().map(|r| r.metrics.l1).collect::<Vec<_>>(),
            ));
            bucket_kld_ra.push(mean(
                &members
                    .iter()
                    .map(|r| r.metrics.kld_real_auto)
                    .collect::<Vec<_>>(),
            ));
            bucket_kld_ar.push(mean(
                &members
                    .iter()
                    .map(|r| r.metrics.kld_auto_real)
                    .collect::<Vec<_>>(),
            ));
            bucket_ip.push(mean(
                &members.iter().map(|r| r.metrics.ip).collect::<Vec<_>>(),
            ));
        }
        for k in 0..3 {
            mph_mean[k] = mean(&bucket_mph[k]);
            mph_std[k] = population_std(&bucket_mph[k]);
            mph_censored_frac[k] = censored_counts[k] as f64 / cfg.buckets as f64;
        }
        l1_stats = (mean(&bucket_l1), population_std(&bucket_l1));
        kld_ra_stats = (mean(&bucket_kld_ra), population_std(&bucket_kld_ra));
        kld_ar_stats = (mean(&bucket_kld_ar), population_std(&bucket_kld_ar));
        ip_stats = (mean(&bucket_ip), population_std(&bucket_ip));
    } else {
        for k in 0..3 {
            let vals: Vec<f64> = kept.iter().map(|r| r.metrics.mph[k]).collect();
            mph_mean[k] = mean(&vals);
            mph_std[k] = population_std(&vals);
            let censored = kept.iter().filter(|r| r.metrics.mph_censored[k]).count();
            mph_censored_frac[k] = if n_kept == 0 {
                f64::NAN
            } else {
                censored as f64 / n_kept as f64
            };
        }
        l1_stats = (mean(&l1_all), population_std(&l1_all));
        kld_ra_stats = (mean(&kld_ra_all), population_std(&kld_ra_all));
        kld_ar_stats = (mean(&kld_ar_all), population_std(&kld_ar_all));
        ip_stats = (mean(&ip_all), population_std(&ip_all));
    }

    Ok(SiAggregate {
        si,
        n_trials,
        n_kept,
        n_discarded,
        n_diverged,
        n_failed,
        per_trial_fallback: !bucketed,
        mph_mean,
        mph_std,
        mph_censored_frac,
        l1_mean: l1_stats.0,
        l1_std: l1_stats.1,
        l1_median: median_of(&l1_all),
        kld_real_auto_mean: kld_ra_stats.0,
        kld_real_auto_std: kld_ra_stats.1,
        kld_auto_real_mean: kld_ar_stats.0,
        kld_auto_real_std: kld_ar_stats.1,
        kld_auto_real_median: median_of(&kld_ar_all),
        ip_mean: ip_stats.0,
        ip_std: ip_stats.1,
        ts_median,
        ts_threshold,
    })
}

/// Complete sweep output: config echo, per-trial records (windows stripped)
/// and one aggregate row per sampling interval.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub config: SweepConfig,
    pub trials: Vec<TrialRecord>,
    pub aggregates: Vec<SiAggregate>,
}

/// Run every (si, trial) cell, filter, aggregate, and (when the config names
/// an output directory) persist trials.csv, summary.csv and manifest.json.
/// Trials of one SI run in parallel; records are kept in (si, trial) order
/// so results do not depend on scheduling.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepResult, ExperimentError> {
    cfg.validate()?;
    let mut trials = Vec::with_capacity(cfg.si_grid.len() * cfg.n_trials);
    let mut aggregates = Vec::with_capacity(cfg.si_grid.len());
    for &si in &cfg.si_grid {
        let mut records: Vec<TrialRecord> = (0..cfg.n_trials)
            .into_par_iter()
            .map(|trial| run_trial(cfg, si, trial))
            .collect();
        filter_trials(&mut records)?;
        aggregates.push(aggregate(si, &records, cfg)?);
        for mut r in records {
            r.strip_windows();
            trials.push(r);
        }
    }
    let result = SweepResult {
        config: cfg.clone(),
        trials,
        aggregates,
    };
    if let Some(dir) = &cfg.output_dir {
        write_outputs(&result, dir)?;
    }
    Ok(result)
}

/// Exact float formatting for CSV: round-trips through parse and prints
/// non-finite values as NaN / inf / -inf.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "NaN".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

pub const TRIALS_CSV_HEADER: &str = "si,trial,seed,status,discarded,ts,mph_chi,mph_psi,mph_omega,\
mph_censored_chi,mph_censored_psi,mph_censored_omega,l1,kld_real_auto,kld_auto_real,ip,\
ip_used_steps,ip_fixed_point_steps";

pub fn write_trials_csv<W: Write>(mut w: W, trials: &[TrialRecord]) -> std::io::Result<()> {
    writeln!(w, "{TRIALS_CSV_HEADER}")?;
    for r in trials {
        let m = &r.metrics;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            fmt_f64(r.si),
            r.trial,
            r.seed,
            r.status.code(),
            r.discarded,
            fmt_f64(m.ts),
            fmt_f64(m.mph[0]),
            fmt_f64(m.mph[1]),
            fmt_f64(m.mph[2]),
            m.mph_censored[0],
            m.mph_censored[1],
            m.mph_censored[2],
            fmt_f64(m.l1),
            fmt_f64(m.kld_real_auto),
            fmt_f64(m.kld_auto_real),
            fmt_f64(m.ip),
            m.ip_used_steps,
            m.ip_fixed_point_steps,
        )?;
    }
    Ok(())
}

pub const SUMMARY_CSV_HEADER: &str = "si,n_trials,n_kept,n_discarded,n_diverged,n_failed,\
per_trial_fallback,mph_chi_mean,mph_chi_std,mph_psi_mean,mph_psi_std,mph_omega_mean,\
mph_omega_std,mph_censored_frac_chi,mph_censored_frac_psi,mph_censored_frac_omega,\
l1_mean,l1_std,l1_median,kld_real_auto_mean,kld_real_auto_std,kld_auto_real_mean,\
kld_auto_real_std,kld_auto_real_median,ip_mean,ip_std,ts_median,ts_threshold";

pub fn write_summary_csv<W: Write>(mut w: W, rows: &[SiAggregate]) -> std::io::Result<()> {
    writeln!(w, "{SUMMARY_CSV_HEADER}")?;
    for a in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            fmt_f64(a.si),
            a.n_trials,
            a.n_kept,
            a.n_discarded,
            a.n_diverged,
            a.n_failed,
            a.per_trial_fallback,
            fmt_f64(a.mph_mean[0]),
            fmt_f64(a.mph_std[0]),
            fmt_f64(a.mph_mean[1]),
            fmt_f64(a.mph_std[1]),
            fmt_f64(a.mph_mean[2]),
            fmt_f64(a.mph_std[2]),
            fmt_f64(a.mph_censored_frac[0]),
            fmt_f64(a.mph_censored_frac[1]),
            fmt_f64(a.mph_censored_frac[2]),
            fmt_f64(a.l1_mean),
            fmt_f64(a.l1_std),
            fmt_f64(a.l1_median),
            fmt_f64(a.kld_real_auto_mean),
            fmt_f64(a.kld_real_auto_std),
            fmt_f64(a.kld_auto_real_mean),
            fmt_f64(a.kld_auto_real_std),
            fmt_f64(a.kld_auto_real_median),
            fmt_f64(a.ip_mean),
            fmt_f64(a.ip_std),
            fmt_f64(a.ts_median),
            fmt_f64(a.ts_threshold),
        )?;
    }
    Ok(())
}

/// Replay record: the resolved config plus every derived seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub generator: String,
    pub seed_derivation: String,
    pub config: SweepConfig,
    pub child_seeds: Vec<ManifestSeed>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSeed {
    pub si: f64,
    pub trial: usize,
    pub seed: u64,
}

impl Manifest {
    pub fn for_config(cfg: &SweepConfig) -> Manifest {
        let child_seeds = cfg
            .si_grid
            .iter()
            .flat_map(|&si| {
                (0..cfg.n_trials).map(move |trial| ManifestSeed {
                    si,
                    trial,
                    seed: child_seed(cfg.master_seed, si, trial),
                })
            })
            .collect();
        Manifest {
            format_version: MANIFEST_FORMAT_VERSION,
            generator: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
            seed_derivation: "splitmix64 chain over (master_seed, si bits, trial index); \
per-role seeds from splitmix64(child ^ role) with roles train_ic=1, reservoir=2, eval_ic=3"
                .into(),
            config: cfg.clone(),
            child_seeds,
        }
    }

    pub fn load(path: &Path) -> Result<Manifest, ExperimentError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ExperimentError> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    /// Validate and hand back the recorded config for replay. The stored
    /// seeds are re-derived and compared, which catches manifests edited by
    /// hand or produced by an incompatible derivation.
    pub fn replay_config(&self) -> Result<SweepConfig, ExperimentError> {
        if self.format_version != MANIFEST_FORMAT_VERSION {
            return Err(ExperimentError::BadManifest(format!(
                "unsupported format_version {}",
                self.format_version
            )));
        }
        let expected = Manifest::for_config(&self.config).child_seeds;
        if expected != self.child_seeds {
            return Err(ExperimentError::BadManifest(
                "recorded child seeds do not match the derivation".into(),
            ));
        }
        self.config.validate()?;
        Ok(self.config.clone())
    }
}

fn write_outputs(result: &SweepResult, dir: &Path) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(dir)?;
    let mut trials_buf = Vec::new();
    write_trials_csv(&mut trials_buf, &result.trials)?;
    std::fs::write(dir.join("trials.csv"), trials_buf)?;
    let mut summary_buf = Vec::new();
    write_summary_csv(&mut summary_buf, &result.aggregates)?;
    std::fs::write(dir.join("summary.csv"), summary_buf)?;
    Manifest::for_config(&result.config).save(&dir.join("manifest.json"))?;
    Ok(())
}

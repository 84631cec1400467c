//! Similarity measures between real and regenerated series: normalized mean
//! squared error curves, mean prediction horizon, attractor density
//! comparisons (L1 and Kullback-Leibler), the flow/difference inner product,
//! per-trial scores with outlier filtering, and Fourier amplitude spectra.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Component, OdeSystem, SampledSeries};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("series mismatch: {0}")]
    Mismatch(String),
    #[error("density grids are incompatible: {0}")]
    IncompatibleGrids(String),
}

/// A set of (real, regenerated) series pairs sharing one sampling grid.
/// Ensemble error curves are computed across the set.
#[derive(Debug, Clone)]
pub struct EnsemblePair {
    real: Vec<SampledSeries>,
    auto_: Vec<SampledSeries>,
    len: usize,
}

impl EnsemblePair {
    pub fn new(real: Vec<SampledSeries>, auto_: Vec<SampledSeries>) -> Result<Self, MetricsError> {
        if real.is_empty() || real.len() != auto_.len() {
            return Err(MetricsError::Mismatch(format!(
                "{} real vs {} regenerated series",
                real.len(),
                auto_.len()
            )));
        }
        let len = real[0].len();
        if len == 0 {
            return Err(MetricsError::InvalidArgument("empty series".into()));
        }
        let si = real[0].si;
        for s in real.iter().chain(auto_.iter()) {
            if s.len() != len {
                return Err(MetricsError::Mismatch(format!(
                    "lengths differ: {} vs {}",
                    s.len(),
                    len
                )));
            }
            if s.si != si {
                return Err(MetricsError::Mismatch(format!(
                    "sampling intervals differ: {} vs {}",
                    s.si, si
                )));
            }
        }
        Ok(EnsemblePair { real, auto_, len })
    }

    pub fn n_trials(&self) -> usize {
        self.real.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Ensemble NMSE curve for one component:
/// `NMSE(t) = sum_i (real_i(t) - auto_i(t))^2 / sum_i (real_i(t) - mean(t))^2`
/// where the mean is across trials at each time step. A zero denominator
/// (identical real values across the ensemble) yields +inf as a sentinel.
pub fn nmse_curve(pair: &EnsemblePair, component: Component) -> Vec<f64> {
    let m = pair.n_trials();
    let real: Vec<Vec<f64>> = pair.real.iter().map(|s| s.component(component)).collect();
    let auto_: Vec<Vec<f64>> = pair.auto_.iter().map(|s| s.component(component)).collect();
    let mut out = Vec::with_capacity(pair.len());
    for t in 0..pair.len() {
        let mean = real.iter().map(|r| r[t]).sum::<f64>() / m as f64;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..m {
            num += (real[i][t] - auto_[i][t]).powi(2);
            den += (real[i][t] - mean).powi(2);
        }
        out.push(if den == 0.0 { f64::INFINITY } else { num / den });
    }
    out
}

/// Single-trial NMSE curve, normalized by the temporal variance of the real
/// component over the compared window (the ensemble mean is meaningless for
/// one trial). Zero variance yields +inf sentinels.
pub fn trial_nmse_curve(
    real: &SampledSeries,
    auto_: &SampledSeries,
    component: Component,
) -> Result<Vec<f64>, MetricsError> {
    if real.len() != auto_.len() || real.is_empty() {
        return Err(MetricsError::Mismatch(format!(
            "window lengths {} vs {}",
            real.len(),
            auto_.len()
        )));
    }
    let r = real.component(component);
    let a = auto_.component(component);
    let var = population_variance(&r);
    Ok(r.iter()
        .zip(&a)
        .map(|(ri, ai)| {
            if var == 0.0 {
                f64::INFINITY
            } else {
                (ri - ai).powi(2) / var
            }
        })
        .collect())
}

fn population_variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Mean prediction horizon extracted from an error curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MphResult {
    /// Time units until the curve first exceeds the threshold; the full
    /// window duration when it never does.
    pub horizon: f64,
    /// True when the curve stayed below the threshold for the whole window,
    /// so the horizon is only a lower bound.
    pub censored: bool,
}

/// First time the error curve exceeds `threshold`, in time units of `si`.
pub fn mph(curve: &[f64], threshold: f64, si: f64) -> Result<MphResult, MetricsError> {
    if curve.is_empty() {
        return Err(MetricsError::InvalidArgument("empty error curve".into()));
    }
    if !(threshold > 0.0) || !(si > 0.0) {
        return Err(MetricsError::InvalidArgument(format!(
            "threshold and si must be positive, got {threshold} and {si}"
        )));
    }
    match curve.iter().position(|&e| e > threshold) {
        Some(k) => Ok(MphResult {
            horizon: si * k as f64,
            censored: false,
        }),
        None => Ok(MphResult {
            horizon: si * curve.len() as f64,
            censored: true,
        }),
    }
}

/// Axis-aligned box partition used for occupation densities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Per-axis [low, high] bounds in (chi, psi, omega) order.
    pub bounds: [[f64; 2]; 3],
    /// Cells per axis; the grid has resolution^3 cells.
    pub resolution: usize,
    /// Additive smoothing applied to every cell's relative frequency.
    pub epsilon: f64,
}

impl GridSpec {
    /// Bounds from the reference series, each axis padded by `margin` times
    /// its span. A collapsed axis (zero span) is widened by ±0.5 so the grid
    /// stays usable.
    pub fn covering(
        reference: &SampledSeries,
        resolution: usize,
        margin: f64,
        epsilon: f64,
    ) -> Result<GridSpec, MetricsError> {
        if reference.is_empty() {
            return Err(MetricsError::InvalidArgument(
                "cannot bound an empty series".into(),
            ));
        }
        if resolution == 0 {
            return Err(MetricsError::InvalidArgument(
                "resolution must be >= 1".into(),
            ));
        }
        if !(margin >= 0.0 && margin.is_finite()) {
            return Err(MetricsError::InvalidArgument(format!(
                "margin must be non-negative, got {margin}"
            )));
        }
        if !(epsilon > 0.0) {
            return Err(MetricsError::InvalidArgument(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        let mut bounds = [[0.0f64; 2]; 3];
        for (axis, component) in Component::ALL.iter().enumerate() {
            let vals = reference.component(*component);
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !lo.is_finite() || !hi.is_finite() {
                return Err(MetricsError::InvalidArgument(
                    "reference series has non-finite values".into(),
                ));
            }
            let span = hi - lo;
            let pad = if span > 0.0 { margin * span } else { 0.5 };
            bounds[axis] = [lo - pad, hi + pad];
        }
        Ok(GridSpec {
            bounds,
            resolution,
            epsilon,
        })
    }

    fn cell_index(&self, xyz: [f64; 3]) -> usize {
        let r = self.resolution;
        let mut idx = 0usize;
        for axis in 0..3 {
            let [lo, hi] = self.bounds[axis];
            let w = (hi - lo) / r as f64;
            // Out-of-range points (possible for regenerated series) clip to
            // the boundary cells rather than being dropped.
            let mut k = ((xyz[axis] - lo) / w).floor();
            if !k.is_finite() {
                k = 0.0;
            }
            let k = (k.max(0.0) as usize).min(r - 1);
            idx = idx * r + k;
        }
        idx
    }
}

/// Smoothed occupation density over a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub spec: GridSpec,
    /// Cell probabilities in chi-major order; sums to 1.
    pub rho: Vec<f64>,
}

/// Occupation density of `series` on `spec`:
/// `rho_l = (M_l / L + eps) / sum_l (M_l / L + eps)`.
pub fn density(series: &SampledSeries, spec: &GridSpec) -> Result<DensityGrid, MetricsError> {
    let l = series.len();
    if l == 0 {
        return Err(MetricsError::InvalidArgument(
            "cannot build a density from an empty series".into(),
        ));
    }
    let cells = spec.resolution.pow(3);
    let mut counts = vec![0u64; cells];
    for p in &series.points {
        counts[spec.cell_index(p.xyz())] += 1;
    }
    let norm = 1.0 + cells as f64 * spec.epsilon;
    let rho = counts
        .iter()
        .map(|&m| (m as f64 / l as f64 + spec.epsilon) / norm)
        .collect();
    Ok(DensityGrid {
        spec: spec.clone(),
        rho,
    })
}

fn check_compatible(a: &DensityGrid, b: &DensityGrid) -> Result<(), MetricsError> {
    if a.spec != b.spec || a.rho.len() != b.rho.len() {
        return Err(MetricsError::IncompatibleGrids(
            "densities were built on different grids".into(),
        ));
    }
    Ok(())
}

/// L1 distance between two densities on the same grid; ranges over [0, 2].
pub fn l1(a: &DensityGrid, b: &DensityGrid) -> Result<f64, MetricsError> {
    check_compatible(a, b)?;
    Ok(a.rho.iter().zip(&b.rho).map(|(x, y)| (x - y).abs()).sum())
}

/// Kullback-Leibler divergence sum_l p_l ln(p_l / q_l). The additive
/// smoothing in the densities keeps every cell positive, so this is finite.
pub fn kld(p: &DensityGrid, q: &DensityGrid) -> Result<f64, MetricsError> {
    check_compatible(p, q)?;
    Ok(p.rho
        .iter()
        .zip(&q.rho)
        .map(|(&pl, &ql)| pl * (pl / ql).ln())
        .sum())
}

/// Flow-alignment diagnostic for a regenerated series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IpResult {
    /// Mean cosine between the vector field at each point and the step
    /// actually taken to the next point. Near 1 when the series follows the
    /// flow, near 0 for uncorrelated motion.
    pub value: f64,
    pub used_steps: usize,
    /// Steps skipped because the series did not move.
    pub skipped_zero_diff: usize,
    /// Steps excluded because the field vanished at the point (the series
    /// sat on a fixed point of the flow).
    pub fixed_point_steps: usize,
}

/// Mean normalized inner product between the governing vector field and the
/// series' own difference vectors.
pub fn inner_product(series: &SampledSeries, system: &OdeSystem) -> Result<IpResult, MetricsError> {
    if series.len() < 2 {
        return Err(MetricsError::InvalidArgument(format!(
            "need at least 2 points, got {}",
            series.len()
        )));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    let mut fixed = 0usize;
    for w in series.points.windows(2) {
        let x = w[0].xyz();
        let d = [
            w[1].chi - w[0].chi,
            w[1].psi - w[0].psi,
            w[1].omega - w[0].omega,
        ];
        let dn = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if dn == 0.0 {
            skipped += 1;
            continue;
        }
        let f = system.field(x);
        let fnorm = (f[0] * f[0] + f[1] * f[1] + f[2] * f[2]).sqrt();
        if fnorm == 0.0 {
            fixed += 1;
            continue;
        }
        sum += (f[0] * d[0] + f[1] * d[1] + f[2] * d[2]) / (fnorm * dn);
        used += 1;
    }
    if used == 0 {
        return Err(MetricsError::InvalidArgument(
            "no usable steps for the inner product".into(),
        ));
    }
    Ok(IpResult {
        value: sum / used as f64,
        used_steps: used,
        skipped_zero_diff: skipped,
        fixed_point_steps: fixed,
    })
}

/// Per-trial score: squared error summed over the window and all components,
/// normalized per component by the real series' temporal variance. A mean
/// predictor scores 3K on a window of K samples.
pub fn trial_score(real: &SampledSeries, auto_: &SampledSeries) -> Result<f64, MetricsError> {
    if real.len() != auto_.len() || real.is_empty() {
        return Err(MetricsError::Mismatch(format!(
            "window lengths {} vs {}",
            real.len(),
            auto_.len()
        )));
    }
    let mut ts = 0.0;
    for component in Component::ALL {
        let r = real.component(component);
        let a = auto_.component(component);
        let var = population_variance(&r);
        let sq: f64 = r.iter().zip(&a).map(|(x, y)| (x - y).powi(2)).sum();
        if var == 0.0 {
            return Ok(f64::INFINITY);
        }
        ts += sq / var;
    }
    Ok(ts)
}

/// Which trials survive the trial-score filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierFilter {
    pub kept: Vec<bool>,
    pub median: f64,
    pub threshold: f64,
    pub n_discarded: usize,
}

/// Discard trials whose score exceeds ten times the median score. The median
/// of an even count is the midpoint of the two central values. Non-finite
/// scores sort above every finite one; an infinite median keeps everything
/// (nothing exceeds ten times infinity).
pub fn filter_outliers(scores: &[f64]) -> Result<OutlierFilter, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::InvalidArgument("no scores to filter".into()));
    }
    let mut sorted: Vec<f64> = scores
        .iter()
        .map(|&s| if s.is_nan() { f64::INFINITY } else { s })
        .collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let threshold = 10.0 * median;
    let kept: Vec<bool> = scores
        .iter()
        .map(|&s| !(s.is_nan() || s > threshold))
        .collect();
    let n_discarded = kept.iter().filter(|&&k| !k).count();
    Ok(OutlierFilter {
        kept,
        median,
        threshold,
        n_discarded,
    })
}

/// Single-sided Fourier amplitude spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    /// Frequencies in cycles per time unit, k / (n * si).
    pub frequencies: Vec<f64>,
    /// Energy-preserving amplitudes: the squared amplitudes sum to the
    /// series' total squared deviation from its mean (Parseval).
    pub amplitudes: Vec<f64>,
    /// Power-of-two window length actually transformed.
    pub window_len: usize,
}

/// Amplitude spectrum of one component. The series is truncated to the
/// largest power-of-two length, the mean is removed, and the two-sided FFT is
/// folded into a single-sided spectrum with sqrt(2) weights on interior bins.
pub fn amplitude_spectrum(
    series: &SampledSeries,
    component: Component,
) -> Result<Spectrum, MetricsError> {
    let len = series.len();
    if len < 2 {
        return Err(MetricsError::InvalidArgument(format!(
            "need at least 2 samples for a spectrum, got {len}"
        )));
    }
    if !(series.si > 0.0) {
        return Err(MetricsError::InvalidArgument(format!(
            "sampling interval must be positive, got {}",
            series.si
        )));
    }
    let n = if len.is_power_of_two() {
        len
    } else {
        len.next_power_of_two() / 2
    };
    let vals = series.component(component);
    let mean = vals[..n].iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = vals[..n]
        .iter()
        .map(|&v| Complex::new(v - mean, 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let half = n / 2;
    let sqrt_n = (n as f64).sqrt();
    let mut frequencies = Vec::with_capacity(half + 1);
    let mut amplitudes = Vec::with_capacity(half + 1);
    for k in 0..=half {
        frequencies.push(k as f64 / (n as f64 * series.si));
        let weight = if k == 0 || k == half {
            1.0
        } else {
            std::f64::consts::SQRT_2
        };
        amplitudes.push(weight * buf[k].norm() / sqrt_n);
    }
    Ok(Spectrum {
        frequencies,
        amplitudes,
        window_len: n,
    })
}

/// Everything measured on one sweep trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    /// Per-component prediction horizons over the comparison window,
    /// from the single-trial error curves.
    pub mph: [f64; 3],
    pub mph_censored: [bool; 3],
    /// Trial score used by the outlier filter; infinite for diverged runs.
    pub ts: f64,
    pub l1: f64,
    pub kld_real_auto: f64,
    pub kld_auto_real: f64,
    pub ip: f64,
    pub ip_used_steps: usize,
    pub ip_fixed_point_steps: usize,
    pub diverged: bool,
}

//! Echo-state network with a fixed random reservoir and a ridge-trained
//! linear readout.
//!
//! The update rule is
//!
//! ```text
//! X[n+1] = tanh(W_esn X[n] + G W_in u[n] + b)
//! y[n]   = X[n]^T W_out
//! ```
//!
//! Only `W_out` is learned. `W_esn` is sparse with entries drawn uniformly
//! from [-1, 1] and rescaled to a target spectral radius; `W_in` and `b` are
//! dense uniform draws. All randomness comes from a counter-based ChaCha
//! stream seeded explicitly, so a (config, seed) pair pins every weight.

pub mod sparse;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::dynamics::{SampledSeries, StatePoint};
pub use sparse::{CsrMatrix, SparseError};

/// tanh argument magnitude beyond which the output is clamped to ±1.
/// f64 tanh is already ±1 to the last bit there; the clamp makes the
/// saturation explicit and branch-predictable.
pub const TANH_SATURATION: f64 = 20.0;

/// Default output-magnitude bound above which an autonomous run is declared
/// divergent.
pub const DEFAULT_BLOWUP_BOUND: f64 = 1e6;

/// How many seed streams the builder tries before giving up on a usable
/// (nonzero spectral radius) recurrence matrix.
const MAX_BUILD_STREAMS: u64 = 64;

#[derive(Debug, thiserror::Error)]
pub enum EsnError {
    #[error("invalid reservoir config: {0}")]
    InvalidConfig(String),
    #[error("recurrence matrix had zero spectral radius after {attempts} attempts")]
    ZeroSpectralRadius { attempts: u64 },
    #[error("series of length {len} too short, need at least {needed}")]
    SeriesTooShort { len: usize, needed: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("ridge system is not positive definite; increase ridge_alpha")]
    IllConditioned,
    #[error("model file is inconsistent: {0}")]
    BadModel(String),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Everything needed to build a reservoir deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReservoirConfig {
    /// Number of reservoir nodes (N).
    pub n_nodes: usize,
    /// Input gain G applied to `W_in u`.
    pub gain: f64,
    /// Fraction of nonzero entries in the recurrence matrix.
    pub connectivity: f64,
    /// Spectral radius the recurrence matrix is rescaled to.
    pub spectral_radius: f64,
    /// Input dimension (U).
    pub input_dim: usize,
    /// Input weights are uniform on [-input_weight_range, input_weight_range].
    pub input_weight_range: f64,
    /// Biases are uniform on [-bias_range, bias_range].
    pub bias_range: f64,
    /// Seed for every random draw in the build.
    pub seed: u64,
}

impl Default for ReservoirConfig {
    fn default() -> Self {
        ReservoirConfig {
            n_nodes: 1500,
            gain: 0.2,
            connectivity: 0.02,
            spectral_radius: 0.95,
            input_dim: 3,
            input_weight_range: 1.0,
            bias_range: 0.3,
            seed: 0,
        }
    }
}

impl ReservoirConfig {
    pub fn validate(&self) -> Result<(), EsnError> {
        if self.n_nodes == 0 {
            return Err(EsnError::InvalidConfig("n_nodes must be positive".into()));
        }
        if !(self.connectivity > 0.0 && self.connectivity <= 1.0) {
            return Err(EsnError::InvalidConfig(format!(
                "connectivity must be in (0, 1], got {}",
                self.connectivity
            )));
        }
        if !(self.spectral_radius > 0.0 && self.spectral_radius.is_finite()) {
            return Err(EsnError::InvalidConfig(format!(
                "spectral_radius must be positive and finite, got {}",
                self.spectral_radius
            )));
        }
        if !self.gain.is_finite() {
            return Err(EsnError::InvalidConfig("gain must be finite".into()));
        }
        if self.input_dim == 0 {
            return Err(EsnError::InvalidConfig("input_dim must be positive".into()));
        }
        if !(self.input_weight_range >= 0.0 && self.input_weight_range.is_finite()) {
            return Err(EsnError::InvalidConfig(
                "input_weight_range must be non-negative and finite".into(),
            ));
        }
        if !(self.bias_range >= 0.0 && self.bias_range.is_finite()) {
            return Err(EsnError::InvalidConfig(
                "bias_range must be non-negative and finite".into(),
            ));
        }
        let nnz = self.nnz();
        if nnz == 0 {
            return Err(EsnError::InvalidConfig(
                "connectivity rounds to an empty recurrence matrix".into(),
            ));
        }
        Ok(())
    }

    /// Number of nonzero recurrence entries implied by the connectivity.
    pub fn nnz(&self) -> usize {
        let cells = (self.n_nodes * self.n_nodes) as f64;
        (self.connectivity * cells).round() as usize
    }
}

/// Trained linear readout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Readout {
    /// N x M weight matrix; outputs are `state^T w_out`.
    pub w_out: DMatrix<f64>,
    /// Regularization strength used for training (recorded for provenance).
    pub ridge_alpha: f64,
}

/// Built reservoir plus its evolving state.
#[derive(Debug, Clone)]
pub struct Reservoir {
    pub config: ReservoirConfig,
    /// Seed stream that produced a usable recurrence matrix (0 unless the
    /// first draw had zero spectral radius and the builder had to retry).
    pub stream: u64,
    w_esn: CsrMatrix,
    w_in: DMatrix<f64>,
    bias: DVector<f64>,
    state: DVector<f64>,
    scratch: DVector<f64>,
}

/// Output of an autonomous (closed-loop) run.
#[derive(Debug, Clone)]
pub struct AutonomousRun {
    /// The generated series; shorter than requested when the run diverged.
    pub series: SampledSeries,
    /// True when some output component left the blow-up bound. The offending
    /// value itself is not recorded.
    pub diverged: bool,
}

impl Reservoir {
    /// The recurrence matrix, rescaled to the configured spectral radius.
    pub fn w_esn(&self) -> &CsrMatrix {
        &self.w_esn
    }

    /// Build all weights from the config. Positions of the nonzero recurrence
    /// entries, their values, the input weights and the biases are drawn in
    /// that fixed order from one ChaCha stream. If the recurrence matrix comes
    /// out with zero spectral radius (possible only for degenerate sizes) the
    /// next stream of the same seed is tried.
    pub fn build(config: ReservoirConfig) -> Result<Reservoir, EsnError> {
        config.validate()?;
        let n = config.n_nodes;
        let nnz = config.nnz().min(n * n);
        for stream in 0..MAX_BUILD_STREAMS {
            let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
            rng.set_stream(stream);
            let positions = rand::seq::index::sample(&mut rng, n * n, nnz);
            let entries: Vec<(usize, usize, f64)> = positions
                .iter()
                .map(|p| (p / n, p % n, rng.random_range(-1.0..1.0)))
                .collect();
            let mut w_esn = CsrMatrix::from_entries(n, entries).map_err(EsnError::Sparse)?;
            // An acyclic pattern is nilpotent — spectral radius exactly zero,
            // impossible to rescale — so redraw from the next stream. The
            // numeric guard below covers (measure-zero) value cancellations.
            if w_esn.is_acyclic() {
                continue;
            }
            let sr = w_esn.spectral_radius(10_000, 1e-9);
            if sr <= 1e-9 {
                continue;
            }
            w_esn.scale(config.spectral_radius / sr);
            let w_in = DMatrix::from_fn(n, config.input_dim, |_, _| {
                uniform(&mut rng, config.input_weight_range)
            });
            let bias = DVector::from_fn(n, |_, _| uniform(&mut rng, config.bias_range));
            return Ok(Reservoir {
                config,
                stream,
                w_esn,
                w_in,
                bias,
                state: DVector::zeros(n),
                scratch: DVector::zeros(n),
            });
        }
        Err(EsnError::ZeroSpectralRadius {
            attempts: MAX_BUILD_STREAMS,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.config.n_nodes
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.state
    }

    pub fn recurrence(&self) -> &CsrMatrix {
        &self.w_esn
    }

    pub fn input_weights(&self) -> &DMatrix<f64> {
        &self.w_in
    }

    pub fn biases(&self) -> &DVector<f64> {
        &self.bias
    }

    pub fn reset_state(&mut self) {
        self.state.fill(0.0);
    }

    /// One update: X <- tanh(W_esn X + G W_in u + b).
    pub fn step(&mut self, u: &[f64]) {
        assert_eq!(
            u.len(),
            self.config.input_dim,
            "input dimension mismatch in step"
        );
        self.w_esn
            .matvec(self.state.as_slice(), self.scratch.as_mut_slice());
        let n = self.config.n_nodes;
        for i in 0..n {
            let mut drive = 0.0;
            for (j, uj) in u.iter().enumerate() {
                drive += self.w_in[(i, j)] * uj;
            }
            self.state[i] = bounded_tanh(self.scratch[i] + self.config.gain * drive + self.bias[i]);
        }
    }

    /// y = X^T W_out for the current state.
    pub fn readout(&self, readout: &Readout) -> Vec<f64> {
        assert_eq!(
            readout.w_out.nrows(),
            self.config.n_nodes,
            "readout row count must match reservoir size"
        );
        readout.w_out.tr_mul(&self.state).as_slice().to_vec()
    }

    /// Teacher-forced pass over `series`. The state starts from zero, the
    /// first `k_buffer` updates are discarded as washout, and each retained
    /// state is paired with the *next* sample as its target. Returns
    /// (states, targets) with `series.len() - 1 - k_buffer` rows.
    pub fn harvest(
        &mut self,
        series: &SampledSeries,
        k_buffer: usize,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), EsnError> {
        if self.config.input_dim != 3 {
            return Err(EsnError::DimensionMismatch(
                "harvest drives the reservoir with 3-component samples".into(),
            ));
        }
        let len = series.len();
        let needed = k_buffer + 2;
        if len < needed {
            return Err(EsnError::SeriesTooShort { len, needed });
        }
        let rows = len - 1 - k_buffer;
        let n = self.config.n_nodes;
        // Filled transposed so each recorded state is one contiguous column.
        let mut states_t = DMatrix::zeros(n, rows);
        let mut targets = DMatrix::zeros(rows, 3);
        self.reset_state();
        for idx in 0..len - 1 {
            self.step(&series.points[idx].xyz());
            if idx >= k_buffer {
                let r = idx - k_buffer;
                states_t.column_mut(r).copy_from(&self.state);
                let next = &series.points[idx + 1];
                targets[(r, 0)] = next.chi;
                targets[(r, 1)] = next.psi;
                targets[(r, 2)] = next.omega;
            }
        }
        Ok((states_t.transpose(), targets))
    }

    /// Closed-loop generation. The state is zeroed, the warmup series is
    /// teacher-forced, then the readout's own predictions are fed back for
    /// `steps` updates. Output times continue the warmup's sampling grid.
    pub fn run_autonomous(
        &mut self,
        readout: &Readout,
        warmup: &SampledSeries,
        steps: usize,
        blowup_bound: f64,
    ) -> Result<AutonomousRun, EsnError> {
        if readout.w_out.nrows() != self.config.n_nodes {
            return Err(EsnError::DimensionMismatch(
                "readout rows must match reservoir size".into(),
            ));
        }
        if readout.w_out.ncols() != self.config.input_dim || self.config.input_dim != 3 {
            return Err(EsnError::DimensionMismatch(
                "closed-loop feedback needs a 3-component readout".into(),
            ));
        }
        if warmup.is_empty() {
            return Err(EsnError::SeriesTooShort { len: 0, needed: 1 });
        }
        self.reset_state();
        for p in &warmup.points {
            self.step(&p.xyz());
        }
        let si = warmup.si;
        let t0 = warmup.points.last().unwrap().t;
        let mut points = Vec::with_capacity(steps);
        let mut diverged = false;
        if steps > 0 {
            let mut y = self.readout(readout);
            for i in 0..steps {
                if y.iter().any(|v| !v.is_finite() || v.abs() > blowup_bound) {
                    diverged = true;
                    break;
                }
                let t = t0 + (i + 1) as f64 * si;
                points.push(StatePoint::new(t, y[0], y[1], y[2]));
                if i + 1 < steps {
                    self.step(&y);
                    y = self.readout(readout);
                }
            }
        }
        Ok(AutonomousRun {
            series: SampledSeries { points, si },
            diverged,
        })
    }
}

/// Ridge regression (X^T X + alpha I) W = X^T Y solved by Cholesky.
pub fn train(
    states: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    ridge_alpha: f64,
) -> Result<Readout, EsnError> {
    if states.nrows() != targets.nrows() {
        return Err(EsnError::DimensionMismatch(format!(
            "{} state rows vs {} target rows",
            states.nrows(),
            targets.nrows()
        )));
    }
    if states.nrows() == 0 {
        return Err(EsnError::SeriesTooShort { len: 0, needed: 1 });
    }
    if !(ridge_alpha > 0.0 && ridge_alpha.is_finite()) {
        return Err(EsnError::InvalidConfig(format!(
            "ridge_alpha must be positive and finite, got {ridge_alpha}"
        )));
    }
    let mut gram = states.tr_mul(states);
    for i in 0..gram.nrows() {
        gram[(i, i)] += ridge_alpha;
    }
    let rhs = states.tr_mul(targets);
    let chol = Cholesky::new(gram).ok_or(EsnError::IllConditioned)?;
    Ok(Readout {
        w_out: chol.solve(&rhs),
        ridge_alpha,
    })
}

fn uniform(rng: &mut ChaCha12Rng, range: f64) -> f64 {
    if range == 0.0 {
        0.0
    } else {
        rng.random_range(-range..range)
    }
}

/// tanh with explicit saturation outside [-TANH_SATURATION, TANH_SATURATION].
pub fn bounded_tanh(x: f64) -> f64 {
    if x > TANH_SATURATION {
        1.0
    } else if x < -TANH_SATURATION {
        -1.0
    } else {
        x.tanh()
    }
}

/// On-disk model: config plus every weight, enough to resume autonomous runs
/// bit-for-bit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedModel {
    pub format_version: u32,
    pub config: ReservoirConfig,
    pub stream: u64,
    pub w_esn: CsrMatrix,
    pub w_in: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub readout: Readout,
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

impl SavedModel {
    pub fn from_parts(reservoir: &Reservoir, readout: &Readout) -> SavedModel {
        SavedModel {
            format_version: MODEL_FORMAT_VERSION,
            config: reservoir.config.clone(),
            stream: reservoir.stream,
            w_esn: reservoir.w_esn.clone(),
            w_in: reservoir.w_in.clone(),
            bias: reservoir.bias.clone(),
            readout: readout.clone(),
        }
    }

    /// Validate and unpack into a usable reservoir (state zeroed) + readout.
    pub fn into_parts(self) -> Result<(Reservoir, Readout), EsnError> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(EsnError::BadModel(format!(
                "unsupported format_version {}",
                self.format_version
            )));
        }
        self.config.validate()?;
        self.w_esn.validate()?;
        let n = self.config.n_nodes;
        if self.w_esn.size() != n {
            return Err(EsnError::BadModel("recurrence size != n_nodes".into()));
        }
        if self.w_in.nrows() != n || self.w_in.ncols() != self.config.input_dim {
            return Err(EsnError::BadModel("input weight shape mismatch".into()));
        }
        if self.bias.len() != n {
            return Err(EsnError::BadModel("bias length mismatch".into()));
        }
        if self.readout.w_out.nrows() != n {
            return Err(EsnError::BadModel("readout shape mismatch".into()));
        }
        if !self.w_in.iter().all(|v| v.is_finite())
            || !self.bias.iter().all(|v| v.is_finite())
            || !self.readout.w_out.iter().all(|v| v.is_finite())
        {
            return Err(EsnError::BadModel("non-finite weight".into()));
        }
        let reservoir = Reservoir {
            state: DVector::zeros(n),
            scratch: DVector::zeros(n),
            config: self.config,
            stream: self.stream,
            w_esn: self.w_esn,
            w_in: self.w_in,
            bias: self.bias,
        };
        Ok((reservoir, self.readout))
    }

    pub fn save(&self, path: &Path) -> Result<(), EsnError> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SavedModel, EsnError> {
        let json = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&json)?)
    }
}

//! Chaotic reference dynamics: Lorenz and Rössler vector fields, a fixed-step
//! RK4 integrator, and uniform sampling of trajectories at a requested
//! sampling interval.

use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

/// Largest internal RK4 step. Sampling intervals are split into an integer
/// number of substeps no longer than this, so integration error stays
/// decoupled from sampling coarseness.
pub const MAX_INTERNAL_STEP: f64 = 0.001;

/// Time discarded before sampling starts, so series begin on the attractor.
pub const DEFAULT_TRANSIENT: f64 = 50.0;

/// Any state component beyond this magnitude counts as a diverged trajectory.
pub const DEFAULT_BLOWUP_BOUND: f64 = 1e6;

#[derive(Debug, thiserror::Error)]
pub enum DynamicsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("trajectory diverged at t = {t:.6} (|component| > {bound:e})")]
    Diverged { t: f64, bound: f64 },
    #[error("csv parse error at line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A named three-dimensional chaotic vector field with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OdeSystem {
    Lorenz { p: f64, r: f64, b: f64 },
    Rossler { a: f64, b: f64, c: f64 },
}

impl OdeSystem {
    /// Lorenz system with the standard parameters (p, r, b) = (10, 28, 8/3).
    pub fn lorenz() -> Self {
        OdeSystem::Lorenz {
            p: 10.0,
            r: 28.0,
            b: 8.0 / 3.0,
        }
    }

    /// Rössler system with the standard parameters (a, b, c) = (0.2, 0.2, 5.7).
    pub fn rossler() -> Self {
        OdeSystem::Rossler {
            a: 0.2,
            b: 0.2,
            c: 5.7,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OdeSystem::Lorenz { .. } => "lorenz",
            OdeSystem::Rossler { .. } => "rossler",
        }
    }

    /// Evaluate the vector field f(r) at a state r = (chi, psi, omega).
    pub fn field(&self, s: [f64; 3]) -> [f64; 3] {
        let [chi, psi, omega] = s;
        match *self {
            OdeSystem::Lorenz { p, r, b } => [
                -p * chi + p * psi,
                -chi * omega + r * chi - psi,
                chi * psi - b * omega,
            ],
            OdeSystem::Rossler { a, b, c } => {
                [-psi - omega, chi + a * psi, b + chi * omega - c * omega]
            }
        }
    }

    /// Axis-aligned box from which trial initial conditions are drawn.
    /// The boxes sit inside each attractor's basin; the sampling transient
    /// carries the state onto the attractor before any point is emitted.
    pub fn initial_condition_box(&self) -> [[f64; 2]; 3] {
        match self {
            OdeSystem::Lorenz { .. } => [[-15.0, 15.0], [-15.0, 15.0], [10.0, 40.0]],
            OdeSystem::Rossler { .. } => [[-5.0, 5.0], [-5.0, 5.0], [0.0, 1.0]],
        }
    }

    /// Smallest sampling interval used for this system in the sweeps.
    pub fn minimum_si(&self) -> f64 {
        match self {
            OdeSystem::Lorenz { .. } => 0.005,
            OdeSystem::Rossler { .. } => 0.01,
        }
    }

    /// Default threshold on the error curve for the prediction horizon.
    pub fn default_mph_threshold(&self) -> f64 {
        match self {
            OdeSystem::Lorenz { .. } => 0.5,
            OdeSystem::Rossler { .. } => 0.1,
        }
    }
}

/// State component selector, shared by metrics and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Chi,
    Psi,
    Omega,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Chi, Component::Psi, Component::Omega];

    pub fn index(self) -> usize {
        match self {
            Component::Chi => 0,
            Component::Psi => 1,
            Component::Omega => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::Chi => "chi",
            Component::Psi => "psi",
            Component::Omega => "omega",
        }
    }
}

impl std::str::FromStr for Component {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "chi" | "x" => Ok(Component::Chi),
            "psi" | "y" => Ok(Component::Psi),
            "omega" | "z" => Ok(Component::Omega),
            other => Err(format!("unknown component '{other}'")),
        }
    }
}

/// One sample of the three-dimensional state at time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatePoint {
    pub t: f64,
    pub chi: f64,
    pub psi: f64,
    pub omega: f64,
}

impl StatePoint {
    pub fn new(t: f64, chi: f64, psi: f64, omega: f64) -> Self {
        StatePoint { t, chi, psi, omega }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.chi, self.psi, self.omega]
    }

    pub fn component(&self, c: Component) -> f64 {
        self.xyz()[c.index()]
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite() && self.xyz().iter().all(|v| v.is_finite())
    }
}

/// A uniformly sampled multivariate trajectory together with its sampling
/// interval. Consecutive timestamps differ by exactly `si` up to accumulated
/// floating-point rounding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledSeries {
    pub points: Vec<StatePoint>,
    pub si: f64,
}

impl SampledSeries {
    pub fn new(points: Vec<StatePoint>, si: f64) -> Self {
        SampledSeries { points, si }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Extract one component as a flat vector.
    pub fn component(&self, c: Component) -> Vec<f64> {
        self.points.iter().map(|p| p.component(c)).collect()
    }

    /// Checks the uniform-spacing invariant: timestamps drift from the grid
    /// `t0 + k*si` by no more than `1e-9 * k`.
    pub fn validate(&self) -> Result<(), DynamicsError> {
        if self.si <= 0.0 {
            return Err(DynamicsError::InvalidArgument(format!(
                "sampling interval must be positive, got {}",
                self.si
            )));
        }
        if self.points.len() < 2 {
            return Err(DynamicsError::InvalidArgument(format!(
                "series needs at least 2 points, got {}",
                self.points.len()
            )));
        }
        let t0 = self.points[0].t;
        for (k, p) in self.points.iter().enumerate() {
            if !p.is_finite() {
                return Err(DynamicsError::InvalidArgument(format!(
                    "non-finite point at index {k}"
                )));
            }
            let expected = t0 + k as f64 * self.si;
            if (p.t - expected).abs() > 1e-9 * (k as f64).max(1.0) {
                return Err(DynamicsError::InvalidArgument(format!(
                    "timestamp at index {k} is {} but the grid expects {expected}",
                    p.t
                )));
            }
        }
        Ok(())
    }

    /// Write as CSV with header `t,chi,psi,omega` and full round-trip
    /// precision (17 significant digits).
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,chi,psi,omega")?;
        for p in &self.points {
            writeln!(
                w,
                "{:.16e},{:.16e},{:.16e},{:.16e}",
                p.t, p.chi, p.psi, p.omega
            )?;
        }
        Ok(())
    }

    /// Read a series written by [`SampledSeries::write_csv`]. The sampling
    /// interval is recovered from the first two timestamps and the spacing
    /// invariant is re-checked.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, DynamicsError> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .transpose()?
            .ok_or_else(|| DynamicsError::Csv {
                line: 1,
                msg: "empty file".into(),
            })?;
        if header.trim() != "t,chi,psi,omega" {
            return Err(DynamicsError::Csv {
                line: 1,
                msg: format!("expected header 't,chi,psi,omega', got '{}'", header.trim()),
            });
        }
        let mut points = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            let lineno = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != 4 {
                return Err(DynamicsError::Csv {
                    line: lineno,
                    msg: format!("expected 4 fields, got {}", fields.len()),
                });
            }
            let mut vals = [0.0f64; 4];
            for (v, f) in vals.iter_mut().zip(&fields) {
                *v = f.trim().parse().map_err(|e| DynamicsError::Csv {
                    line: lineno,
                    msg: format!("bad float '{f}': {e}"),
                })?;
            }
            points.push(StatePoint::new(vals[0], vals[1], vals[2], vals[3]));
        }
        if points.len() < 2 {
            return Err(DynamicsError::Csv {
                line: points.len() + 1,
                msg: "series needs at least 2 points".into(),
            });
        }
        let si = points[1].t - points[0].t;
        let series = SampledSeries::new(points, si);
        series.validate()?;
        Ok(series)
    }
}

/// One classical RK4 step of size `h` under the field `f`.
fn rk4_step<F: Fn([f64; 3]) -> [f64; 3]>(f: &F, s: [f64; 3], h: f64) -> [f64; 3] {
    let k1 = f(s);
    let k2 = f([
        s[0] + 0.5 * h * k1[0],
        s[1] + 0.5 * h * k1[1],
        s[2] + 0.5 * h * k1[2],
    ]);
    let k3 = f([
        s[0] + 0.5 * h * k2[0],
        s[1] + 0.5 * h * k2[1],
        s[2] + 0.5 * h * k2[2],
    ]);
    let k4 = f([s[0] + h * k3[0], s[1] + h * k3[1], s[2] + h * k3[2]]);
    [
        s[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        s[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        s[2] + h / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
    ]
}

fn check_bound(s: [f64; 3], t: f64, bound: f64) -> Result<(), DynamicsError> {
    if s.iter().any(|v| !v.is_finite() || v.abs() > bound) {
        Err(DynamicsError::Diverged { t, bound })
    } else {
        Ok(())
    }
}

/// Integrate `system` from `initial` for `duration`, recording every internal
/// step. The number of steps is `round(duration / internal_step)`, so picking
/// `internal_step` as an exact divisor of `duration` lands exactly on the end
/// time. Deterministic given its inputs.
pub fn integrate(
    system: &OdeSystem,
    initial: StatePoint,
    duration: f64,
    internal_step: f64,
) -> Result<SampledSeries, DynamicsError> {
    integrate_bounded(
        system,
        initial,
        duration,
        internal_step,
        DEFAULT_BLOWUP_BOUND,
    )
}

/// [`integrate`] with an explicit blow-up bound.
pub fn integrate_bounded(
    system: &OdeSystem,
    initial: StatePoint,
    duration: f64,
    internal_step: f64,
    bound: f64,
) -> Result<SampledSeries, DynamicsError> {
    if internal_step <= 0.0 {
        return Err(DynamicsError::InvalidArgument(format!(
            "internal_step must be positive, got {internal_step}"
        )));
    }
    if duration < internal_step {
        return Err(DynamicsError::InvalidArgument(format!(
            "duration {duration} is shorter than one internal step {internal_step}"
        )));
    }
    let n_steps = (duration / internal_step).round().max(1.0) as usize;
    let f = |s: [f64; 3]| system.field(s);
    let mut s = initial.xyz();
    let t0 = initial.t;
    check_bound(s, t0, bound)?;
    let mut points = Vec::with_capacity(n_steps + 1);
    points.push(initial);
    for k in 1..=n_steps {
        s = rk4_step(&f, s, internal_step);
        let t = t0 + k as f64 * internal_step;
        check_bound(s, t, bound)?;
        points.push(StatePoint::new(t, s[0], s[1], s[2]));
    }
    Ok(SampledSeries::new(points, internal_step))
}

/// Number of internal RK4 substeps per sampling interval: the smallest count
/// that keeps each substep at or below [`MAX_INTERNAL_STEP`]. Near-integer
/// ratios are snapped so that e.g. si = 0.02 yields exactly 20 substeps.
pub fn substeps_for(si: f64) -> usize {
    let ratio = si / MAX_INTERNAL_STEP;
    let snapped = if (ratio - ratio.round()).abs() < 1e-9 {
        ratio.round()
    } else {
        ratio.ceil()
    };
    (snapped as usize).max(1)
}

/// Integrate past a transient and emit `count` points spaced exactly `si`
/// apart, starting at t = 0 on the post-transient state. Internally steps at
/// `si / substeps_for(si)` so the sampling grid is an exact multiple of the
/// integration grid.
pub fn sample(
    system: &OdeSystem,
    initial: [f64; 3],
    si: f64,
    count: usize,
    transient: f64,
) -> Result<SampledSeries, DynamicsError> {
    if si <= 0.0 {
        return Err(DynamicsError::InvalidArgument(format!(
            "sampling interval must be positive, got {si}"
        )));
    }
    if count < 2 {
        return Err(DynamicsError::InvalidArgument(format!(
            "count must be at least 2, got {count}"
        )));
    }
    let substeps = substeps_for(si);
    let h = si / substeps as f64;
    let f = |s: [f64; 3]| system.field(s);
    let bound = DEFAULT_BLOWUP_BOUND;

    let mut s = initial;
    check_bound(s, 0.0, bound)?;
    if transient > 0.0 {
        let n_transient = (transient / h).ceil() as usize;
        for k in 1..=n_transient {
            s = rk4_step(&f, s, h);
            check_bound(s, -(transient - k as f64 * h), bound)?;
        }
    }

    let mut points = Vec::with_capacity(count);
    points.push(StatePoint::new(0.0, s[0], s[1], s[2]));
    for k in 1..count {
        for _ in 0..substeps {
            s = rk4_step(&f, s, h);
        }
        let t = k as f64 * si;
        check_bound(s, t, bound)?;
        points.push(StatePoint::new(t, s[0], s[1], s[2]));
    }
    Ok(SampledSeries::new(points, si))
}

/// Draw an initial condition uniformly from the system's basin box.
pub fn random_initial_condition<R: rand::Rng>(system: &OdeSystem, rng: &mut R) -> [f64; 3] {
    let bx = system.initial_condition_box();
    [
        rng.random_range(bx[0][0]..bx[0][1]),
        rng.random_range(bx[1][0]..bx[1][1]),
        rng.random_range(bx[2][0]..bx[2][1]),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn lorenz_field_at_origin_is_zero() {
        let sys = OdeSystem::lorenz();
        assert_eq!(sys.field([0.0, 0.0, 0.0]), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn lorenz_field_hand_evaluated() {
        let sys = OdeSystem::lorenz();
        let d = sys.field([1.0, 1.0, 1.0]);
        assert_eq!(d[0], 0.0);
        assert_eq!(d[1], 26.0);
        assert_relative_eq!(d[2], -5.0 / 3.0, max_relative = 1e-15);
    }

    #[test]
    fn rossler_field_hand_evaluated() {
        let sys = OdeSystem::rossler();
        assert_eq!(sys.field([0.0, 0.0, 0.0]), [0.0, 0.0, 0.2]);
    }

    #[test]
    fn lorenz_nontrivial_fixed_points_have_zero_field() {
        // C± = (±sqrt(b(r-1)), ±sqrt(b(r-1)), r-1)
        let sys = OdeSystem::lorenz();
        let (b, r) = (8.0_f64 / 3.0, 28.0);
        let q = (b * (r - 1.0)).sqrt();
        for sgn in [1.0, -1.0] {
            let d = sys.field([sgn * q, sgn * q, r - 1.0]);
            for v in d {
                assert!(v.abs() < 1e-12, "field at fixed point was {v}");
            }
        }
    }

    /// Harmonic oscillator embedded in 3D: chi' = psi, psi' = -chi.
    fn harmonic(s: [f64; 3]) -> [f64; 3] {
        [s[1], -s[0], 0.0]
    }

    #[test]
    fn rk4_returns_to_start_after_one_period() {
        let period = std::f64::consts::TAU;
        let h = period / 1000.0;
        let mut s = [1.0, 0.0, 0.0];
        for _ in 0..1000 {
            s = rk4_step(&harmonic, s, h);
        }
        assert!(
            (s[0] - 1.0).abs() < 1e-9,
            "chi endpoint error {}",
            s[0] - 1.0
        );
        assert!(s[1].abs() < 1e-9, "psi endpoint error {}", s[1]);
    }

    #[test]
    fn rk4_order_is_at_least_3_7_over_three_halvings() {
        let period = std::f64::consts::TAU;
        let endpoint_error = |n: usize| {
            let h = period / n as f64;
            let mut s = [1.0, 0.0, 0.0];
            for _ in 0..n {
                s = rk4_step(&harmonic, s, h);
            }
            ((s[0] - 1.0).powi(2) + s[1].powi(2)).sqrt()
        };
        let mut prev = endpoint_error(50);
        for n in [100, 200, 400] {
            let err = endpoint_error(n);
            let order = (prev / err).log2();
            assert!(order >= 3.7, "observed order {order} at n = {n}");
            prev = err;
        }
    }

    #[test]
    fn lorenz_trajectory_stays_bounded() {
        let sys = OdeSystem::lorenz();
        let traj = integrate(&sys, StatePoint::new(0.0, 1.0, 1.0, 1.0), 100.0, 0.001).unwrap();
        for p in &traj.points {
            for v in p.xyz() {
                assert!(v.abs() < 100.0, "component {v} left the attractor box");
            }
        }
    }

    #[test]
    fn integrate_rejects_bad_arguments() {
        let sys = OdeSystem::lorenz();
        let p0 = [1.0, 1.0, 1.0];
        assert!(integrate(&sys, StatePoint::new(0.0, p0[0], p0[1], p0[2]), 1.0, 0.0).is_err());
        assert!(integrate(
            &sys,
            StatePoint::new(0.0, p0[0], p0[1], p0[2]),
            0.0005,
            0.001
        )
        .is_err());
    }

    #[test]
    fn divergence_is_reported() {
        // Inverted blow-up bound turns the attractor itself into "divergence".
        let sys = OdeSystem::lorenz();
        let p0 = [1.0, 1.0, 1.0];
        let err = integrate_bounded(
            &sys,
            StatePoint::new(0.0, p0[0], p0[1], p0[2]),
            10.0,
            0.001,
            5.0,
        )
        .unwrap_err();
        assert!(matches!(err, DynamicsError::Diverged { .. }));
    }

    #[test]
    fn sample_emits_count_points_on_the_si_grid() {
        let sys = OdeSystem::lorenz();
        let p0 = [1.0, 1.0, 1.0];
        let series = sample(&sys, p0, 0.005, 20_000, DEFAULT_TRANSIENT).unwrap();
        assert_eq!(series.len(), 20_000);
        let span = series.points.last().unwrap().t - series.points[0].t;
        assert_relative_eq!(span, 99.995, max_relative = 1e-12);
        series.validate().unwrap();
    }

    #[test]
    fn sample_minimal_two_points() {
        let sys = OdeSystem::rossler();
        let p0 = [1.0, 1.0, 0.5];
        let series = sample(&sys, p0, 0.01, 2, 1.0).unwrap();
        assert_eq!(series.len(), 2);
        assert_relative_eq!(series.points[1].t - series.points[0].t, 0.01);
    }

    #[test]
    fn sample_rejects_bad_arguments() {
        let sys = OdeSystem::lorenz();
        let p0 = [1.0, 1.0, 1.0];
        assert!(sample(&sys, p0, 0.0, 10, 1.0).is_err());
        assert!(sample(&sys, p0, 0.01, 1, 1.0).is_err());
    }

    #[test]
    fn downsampling_matches_coarser_sampling() {
        // si = 0.01 and si = 0.02 share the 0.001 internal grid and the same
        // transient, so every 2nd fine sample must equal the coarse samples.
        let sys = OdeSystem::lorenz();
        let p0 = [2.0, -1.0, 20.0];
        let fine = sample(&sys, p0, 0.01, 101, DEFAULT_TRANSIENT).unwrap();
        let coarse = sample(&sys, p0, 0.02, 51, DEFAULT_TRANSIENT).unwrap();
        for (k, cp) in coarse.points.iter().enumerate() {
            let fp = &fine.points[2 * k];
            assert!((fp.t - cp.t).abs() <= 1e-9);
            assert!((fp.chi - cp.chi).abs() <= 1e-9);
            assert!((fp.psi - cp.psi).abs() <= 1e-9);
            assert!((fp.omega - cp.omega).abs() <= 1e-9);
        }
    }

    #[test]
    fn substeps_snap_near_integer_ratios() {
        assert_eq!(substeps_for(0.02), 20);
        assert_eq!(substeps_for(0.005), 5);
        assert_eq!(substeps_for(0.3), 300);
        assert_eq!(substeps_for(0.0007), 1);
        assert_eq!(substeps_for(0.0025), 3);
    }

    #[test]
    fn sampling_is_deterministic() {
        let sys = OdeSystem::lorenz();
        let p0 = [3.0, 4.0, 25.0];
        let a = sample(&sys, p0, 0.02, 500, DEFAULT_TRANSIENT).unwrap();
        let b = sample(&sys, p0, 0.02, 500, DEFAULT_TRANSIENT).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn post_transient_lorenz_samples_stay_in_attractor_box() {
        let sys = OdeSystem::lorenz();
        for (i, ic) in [[1.0, 1.0, 1.0], [-8.0, 12.0, 30.0], [14.0, -14.0, 11.0]]
            .into_iter()
            .enumerate()
        {
            let series = sample(&sys, ic, 0.05, 4000, DEFAULT_TRANSIENT).unwrap();
            for p in &series.points {
                assert!(p.chi.abs() < 30.0, "ic {i}: chi = {}", p.chi);
                assert!(p.psi.abs() < 30.0, "ic {i}: psi = {}", p.psi);
                assert!(
                    p.omega > 0.0 && p.omega < 60.0,
                    "ic {i}: omega = {}",
                    p.omega
                );
            }
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let sys = OdeSystem::lorenz();
        let p0 = [1.0, 1.0, 1.0];
        let series = sample(&sys, p0, 0.02, 100, 10.0).unwrap();
        let mut buf = Vec::new();
        series.write_csv(&mut buf).unwrap();
        let back = SampledSeries::read_csv(buf.as_slice()).unwrap();
        assert_eq!(series.points, back.points);
    }

    #[test]
    fn csv_rejects_malformed_input() {
        let bad_header = "time,x,y,z\n0,1,2,3\n";
        assert!(SampledSeries::read_csv(bad_header.as_bytes()).is_err());
        let bad_field = "t,chi,psi,omega\n0,1,2\n";
        assert!(SampledSeries::read_csv(bad_field.as_bytes()).is_err());
        let bad_float = "t,chi,psi,omega\n0,one,2,3\n0.1,1,2,3\n";
        assert!(SampledSeries::read_csv(bad_float.as_bytes()).is_err());
    }
}

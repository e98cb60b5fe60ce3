//! Monte Carlo ensemble of beam atoms transiting the cavity mode.
//!
//! Atoms from a slow, dilute beam cross the standing-wave mode one at a time.
//! Each transit j is a straight line through the coupling profile
//!
//!   g(r) = g₀ · |cos(2πz/λ)| · exp(−(x² + y²)/w²),
//!
//! with z along the cavity axis and (x, y) transverse, giving a
//! time-dependent coupling g_j(t) over a transit time t_j (the span between
//! the first and last crossing of the 1%-of-peak threshold). Speeds are
//! Gaussian, divergence angles triangular, and entry offsets uniform over a
//! half-period of the standing wave (axial) and ±1.5 waists (transverse).
//!
//! Per transit, with the atom entering in b₀ against the settled driven
//! cavity, two time averages over the passage are computed:
//!
//!   Ī_j     = (1/t_j) ∫₀^{t_j} ⟨a₂†a₂(t)⟩ dt ,
//!   Ḡ²_j(τ) = (1/t_j) ∫₀^{t_j} ⟨a₂†(t) a₂†(t+τ) a₂(t+τ) a₂(t)⟩ dt ,
//!
//! and the ensemble-averaged, normalized correlation of the undriven mode is
//!
//!   g²(τ) = 1 + ⟨Ḡ²_j(τ)⟩_j / ( N̄ · ⟨Ī_j⟩_j² ) ,
//!
//! where N̄ ≪ 1 is the mean atom number in the mode volume: the unity
//! background correlates photons from different atoms, the term above it
//! photons from the same atom. Once an atom has left the mode the undriven
//! field can only ring down, so correlations past the atom's exit follow the
//! exact e^(−2κ(τ−τ_exit)) tail and need no further integration.
//!
//! Every trajectory draws from its own counter-derived RNG stream and the
//! ensemble reduction uses a fixed pairwise tree over trajectory indices, so
//! a seeded run is bitwise reproducible under any worker count.

use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Triangular};
use rayon::prelude::*;
use thiserror::Error;

use crate::beats::{BeatsError, CorrelationTrace, Normalization, TraceMetadata};
use crate::hilbert::{mode_annihilator, mode_number, CompositeBasis, Level, Mode};
use crate::liouville::vectorized::{rk4_step_batch, Csr, Engine, Workspace};
use crate::liouville::{DensityMatrix, Generator, LiouvilleError, SystemParams};

type C = Complex64;

/// Fraction of the peak coupling whose outermost crossings delimit a transit.
pub const COUPLING_THRESHOLD: f64 = 0.01;
/// Transverse entry offsets are drawn from ±this many waists.
pub const TRANSVERSE_BOX_WAISTS: f64 = 1.5;
/// Number of start times for the per-transit time averages.
pub const DEFAULT_START_TIMES: usize = 32;
/// Emission rate in rad/s used by the front end when none is configured
/// (6 MHz linewidth, the D2 line the default geometry belongs to).
pub const DEFAULT_GAMMA_HZ: f64 = 2.0 * std::f64::consts::PI * 6.0e6;

/// Pre-transit settling span (units of 1/γ): long enough that the driven
/// cavity transient e^(−κt) is below 1e-12 at the default κ = γ/2.
const SETTLE_SPAN: f64 = 60.0;
/// Sample count of the stored per-trajectory coupling profile.
const PROFILE_POINTS: usize = 513;
/// Ring-down factors below this are treated as exact zeros.
const TAIL_CUTOFF: f64 = 1e-14;
/// Trace drift per unit time accepted before flagging (mirrors the
/// propagator's own bookkeeping tolerance).
const TRACE_DRIFT_RATE_TOL: f64 = 1e-8;
const HERMITICITY_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum BeamError {
    #[error("invalid beam configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid mode geometry: {0}")]
    InvalidGeometry(String),
    #[error("params.gamma_hz is required to map transit times onto the rate unit")]
    MissingGammaRate,
    #[error("invalid delay grid: {0}")]
    InvalidGrid(String),
    #[error("ensemble mean intensity is zero; no undriven light was emitted")]
    ZeroIntensity,
    #[error(transparent)]
    Liouville(#[from] LiouvilleError),
    #[error(transparent)]
    Beats(#[from] BeatsError),
}

// ---------------------------------------------------------------------------
// Geometry and beam source
// ---------------------------------------------------------------------------

/// Standing-wave mode geometry. Lengths are in meters; the peak coupling is
/// a rate in units of γ like every other rate in [`SystemParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModeGeometry {
    /// Gaussian waist w of the transverse profile.
    pub waist: f64,
    /// Optical wavelength λ of the standing wave (axial period λ/2).
    pub wavelength: f64,
    /// Coupling g₀ at an antinode on the mode axis, units of γ.
    pub peak_coupling: f64,
}

impl Default for ModeGeometry {
    fn default() -> Self {
        ModeGeometry {
            waist: 56e-6,
            wavelength: 780e-9,
            peak_coupling: 0.25,
        }
    }
}

impl ModeGeometry {
    pub fn validate(&self) -> Result<(), BeamError> {
        for (name, v) in [("waist", self.waist), ("wavelength", self.wavelength)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(BeamError::InvalidGeometry(format!(
                    "{name} must be a positive length, got {v}"
                )));
            }
        }
        if !self.peak_coupling.is_finite() || self.peak_coupling < 0.0 {
            return Err(BeamError::InvalidGeometry(format!(
                "peak_coupling must be finite and nonnegative, got {}",
                self.peak_coupling
            )));
        }
        Ok(())
    }
}

/// Statistical description of the atom source: a slow beam with Gaussian
/// speeds, triangular divergence angles, and a dilute mean occupancy of the
/// mode volume.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamConfig {
    /// Mean speed v̄, m/s.
    pub mean_speed: f64,
    /// Gaussian speed deviation Δv, m/s.
    pub speed_spread: f64,
    /// Half-width of the triangular tilt toward the cavity axis, rad.
    pub divergence_parallel: f64,
    /// Half-width of the triangular tilt transverse to the cavity axis, rad.
    pub divergence_transverse: f64,
    /// Mean atom number N̄ in the interaction volume.
    pub mean_atom_number: f64,
    /// Seed for trajectory sampling.
    pub seed: u64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            mean_speed: 15.0,
            speed_spread: 1.1,
            divergence_parallel: 1.0 / 40.0,
            divergence_transverse: 1.0 / 80.0,
            mean_atom_number: 0.1,
            seed: 0,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<(), BeamError> {
        if !self.mean_speed.is_finite() || self.mean_speed <= 0.0 {
            return Err(BeamError::InvalidConfig(format!(
                "mean_speed must be positive, got {}",
                self.mean_speed
            )));
        }
        for (name, v) in [
            ("speed_spread", self.speed_spread),
            ("divergence_parallel", self.divergence_parallel),
            ("divergence_transverse", self.divergence_transverse),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(BeamError::InvalidConfig(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        if !self.mean_atom_number.is_finite() || self.mean_atom_number <= 0.0 {
            return Err(BeamError::InvalidConfig(format!(
                "mean_atom_number must be positive, got {}",
                self.mean_atom_number
            )));
        }
        Ok(())
    }

    /// The one-atom-at-a-time normalization assumes N̄ ≪ 1; above 0.2 the
    /// result is still computed but flagged.
    pub fn dilute_warning(&self) -> Option<String> {
        (self.mean_atom_number > 0.2).then(|| {
            format!(
                "mean_atom_number = {} exceeds 0.2; the one-atom-at-a-time \
                 normalization assumes a dilute beam",
                self.mean_atom_number
            )
        })
    }
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

/// How a trajectory's coupling is evaluated.
#[derive(Debug, Clone)]
enum CouplingShape {
    /// Straight line through the standing-wave mode, evaluated exactly.
    Path {
        geometry: ModeGeometry,
        /// Transverse (y) and axial (z) offsets in meters where the path
        /// crosses the mode midplane x = 0.
        entry_transverse: f64,
        entry_axial: f64,
        /// Speed in m/s and tilts (rad) toward the cavity axis and the other
        /// transverse direction.
        speed: f64,
        tilt_axial: f64,
        tilt_transverse: f64,
        /// Path time (s, relative to the midplane crossing) of the transit
        /// start.
        start_offset: f64,
    },
    /// Fixed coupling over the whole window; the synthetic shape used by the
    /// static-coupling oracle.
    Constant { value: f64 },
}

/// One atom's passage: entry point, velocity, transit time, and the coupling
/// it experiences. Times are in seconds; couplings in units of γ.
#[derive(Debug, Clone)]
pub struct Trajectory {
    shape: CouplingShape,
    transit_time: f64,
    profile: Vec<f64>,
    /// Set when the coupling never reaches the transit threshold: the atom
    /// crosses the interaction volume without scattering and contributes
    /// exact zeros, keeping roundoff of standing-wave nodes out of the
    /// dynamics.
    dark: bool,
}

impl Trajectory {
    /// Synthetic transit with a fixed coupling, used as the static-coupling
    /// reference in tests and calibration runs.
    pub fn with_constant_coupling(coupling: f64, transit_time: f64) -> Result<Self, BeamError> {
        if !coupling.is_finite() || coupling < 0.0 {
            return Err(BeamError::InvalidConfig(format!(
                "constant coupling must be finite and nonnegative, got {coupling}"
            )));
        }
        if !transit_time.is_finite() || transit_time <= 0.0 {
            return Err(BeamError::InvalidConfig(format!(
                "transit_time must be positive, got {transit_time}"
            )));
        }
        Ok(Trajectory {
            shape: CouplingShape::Constant { value: coupling },
            transit_time,
            profile: vec![coupling; PROFILE_POINTS],
            dark: coupling == 0.0,
        })
    }

    /// Transit duration t_j in seconds.
    pub fn transit_time(&self) -> f64 {
        self.transit_time
    }

    /// Coupling samples (units of γ) on the uniform grid over [0, t_j].
    pub fn profile(&self) -> &[f64] {
        &self.profile
    }

    /// (transverse, axial) midplane offsets in meters; None for synthetic
    /// constant-coupling transits.
    pub fn entry(&self) -> Option<(f64, f64)> {
        match &self.shape {
            CouplingShape::Path {
                entry_transverse,
                entry_axial,
                ..
            } => Some((*entry_transverse, *entry_axial)),
            CouplingShape::Constant { .. } => None,
        }
    }

    /// (speed m/s, axial tilt rad, transverse tilt rad); None for synthetic
    /// transits.
    pub fn velocity(&self) -> Option<(f64, f64, f64)> {
        match &self.shape {
            CouplingShape::Path {
                speed,
                tilt_axial,
                tilt_transverse,
                ..
            } => Some((*speed, *tilt_axial, *tilt_transverse)),
            CouplingShape::Constant { .. } => None,
        }
    }

    /// Upper bound on the coupling anywhere in the transit, units of γ.
    pub fn peak_coupling(&self) -> f64 {
        match &self.shape {
            CouplingShape::Path { geometry, .. } => geometry.peak_coupling,
            CouplingShape::Constant { value } => *value,
        }
    }

    /// Coupling (units of γ) at transit time t seconds; exactly zero outside
    /// [0, t_j] and for dark (subthreshold) transits.
    pub fn coupling_at(&self, t: f64) -> f64 {
        if self.dark || !(0.0..=self.transit_time).contains(&t) {
            return 0.0;
        }
        match &self.shape {
            CouplingShape::Constant { value } => *value,
            CouplingShape::Path {
                geometry,
                entry_transverse,
                entry_axial,
                speed,
                tilt_axial,
                tilt_transverse,
                start_offset,
            } => path_coupling(
                geometry,
                *entry_transverse,
                *entry_axial,
                *speed,
                *tilt_axial,
                *tilt_transverse,
                start_offset + t,
            ),
        }
    }
}

/// g at path time s (seconds relative to the midplane crossing) for a
/// straight line with the given midplane offsets and tilts.
fn path_coupling(
    geom: &ModeGeometry,
    entry_transverse: f64,
    entry_axial: f64,
    speed: f64,
    tilt_axial: f64,
    tilt_transverse: f64,
    s: f64,
) -> f64 {
    let vx = speed * tilt_axial.cos() * tilt_transverse.cos();
    let vy = speed * tilt_transverse.sin();
    let vz = speed * tilt_axial.sin();
    let x = vx * s;
    let y = entry_transverse + vy * s;
    let z = entry_axial + vz * s;
    let envelope = (-(x * x + y * y) / (geom.waist * geom.waist)).exp();
    let standing = (2.0 * std::f64::consts::PI * z / geom.wavelength).cos().abs();
    geom.peak_coupling * standing * envelope
}

/// Symmetric triangular tilt with the given half-width.
fn sample_tilt<R: Rng + ?Sized>(half_width: f64, rng: &mut R) -> f64 {
    if half_width == 0.0 {
        return 0.0;
    }
    Triangular::new(-half_width, half_width, 0.0)
        .expect("validated half-width gives a well-formed triangular law")
        .sample(rng)
}

/// Draw one trajectory: Gaussian speed (redrawn while nonpositive),
/// triangular tilts, axial offset uniform over a standing-wave half-period,
/// transverse offset uniform over ±1.5 waists.
pub fn sample_trajectory<R: Rng + ?Sized>(
    cfg: &BeamConfig,
    geom: &ModeGeometry,
    rng: &mut R,
) -> Result<Trajectory, BeamError> {
    cfg.validate()?;
    geom.validate()?;
    let speed_law = Normal::new(cfg.mean_speed, cfg.speed_spread)
        .map_err(|e| BeamError::InvalidConfig(format!("speed law: {e}")))?;
    let speed = loop {
        let v = speed_law.sample(rng);
        if v > 0.0 {
            break v;
        }
    };
    let tilt_axial = sample_tilt(cfg.divergence_parallel, rng);
    let tilt_transverse = sample_tilt(cfg.divergence_transverse, rng);
    let entry_axial = rng.gen_range(0.0..geom.wavelength / 2.0);
    let bound = TRANSVERSE_BOX_WAISTS * geom.waist;
    let entry_transverse = rng.gen_range(-bound..bound);
    trajectory_from_draw(
        geom,
        speed,
        tilt_axial,
        tilt_transverse,
        entry_transverse,
        entry_axial,
    )
}

/// Deterministic part of trajectory construction: locate the outermost
/// threshold crossings of the coupling along the straight path and sample
/// the profile between them. An atom whose coupling never reaches the
/// threshold (a node transit) gets the transverse-envelope window instead,
/// with an identically zero profile: it occupies the interaction volume
/// without scattering.
pub fn trajectory_from_draw(
    geom: &ModeGeometry,
    speed: f64,
    tilt_axial: f64,
    tilt_transverse: f64,
    entry_transverse: f64,
    entry_axial: f64,
) -> Result<Trajectory, BeamError> {
    geom.validate()?;
    if !speed.is_finite() || speed <= 0.0 {
        return Err(BeamError::InvalidConfig(format!(
            "speed must be positive, got {speed}"
        )));
    }
    for (name, v) in [
        ("tilt_axial", tilt_axial),
        ("tilt_transverse", tilt_transverse),
        ("entry_transverse", entry_transverse),
        ("entry_axial", entry_axial),
    ] {
        if !v.is_finite() {
            return Err(BeamError::InvalidConfig(format!(
                "{name} must be finite, got {v}"
            )));
        }
    }

    let g_at = |s: f64| {
        path_coupling(
            geom,
            entry_transverse,
            entry_axial,
            speed,
            tilt_axial,
            tilt_transverse,
            s,
        )
    };
    let threshold = COUPLING_THRESHOLD * geom.peak_coupling;

    // Scan the path densely enough to resolve both the Gaussian envelope and
    // the standing-wave oscillation from the axial drift.
    let half_span = 3.5 * geom.waist / speed;
    let vz = (speed * tilt_axial.sin()).abs();
    let envelope_scale = geom.waist / speed;
    let standing_scale = if vz > 0.0 {
        geom.wavelength / (2.0 * vz)
    } else {
        f64::INFINITY
    };
    let step = (envelope_scale.min(standing_scale) / 50.0).max(half_span * 2.0 / 200_000.0);
    let n_scan = (2.0 * half_span / step).ceil() as usize;

    let mut first = None;
    let mut last = None;
    if geom.peak_coupling > 0.0 {
        for i in 0..=n_scan {
            let s = -half_span + 2.0 * half_span * i as f64 / n_scan as f64;
            if g_at(s) >= threshold {
                if first.is_none() {
                    first = Some(s);
                }
                last = Some(s);
            }
        }
    }

    let (start, duration, dark) = match (first, last) {
        (Some(s0), Some(s1)) => {
            let ds = 2.0 * half_span / n_scan as f64;
            let enter = refine_crossing(&g_at, threshold, s0 - ds, s0);
            let exit = refine_crossing(&g_at, threshold, s1 + ds, s1);
            (enter, exit - enter, false)
        }
        _ => {
            // Envelope-only window: (v_x s)² + (y₀ + v_y s)² = w²·ln(1/thr).
            let vx = speed * tilt_axial.cos() * tilt_transverse.cos();
            let vy = speed * tilt_transverse.sin();
            let a = vx * vx + vy * vy;
            let b = 2.0 * entry_transverse * vy;
            let c = entry_transverse * entry_transverse
                + geom.waist * geom.waist * COUPLING_THRESHOLD.ln();
            let disc = (b * b - 4.0 * a * c).max(0.0).sqrt();
            let s_in = (-b - disc) / (2.0 * a);
            let s_out = (-b + disc) / (2.0 * a);
            (s_in, s_out - s_in, true)
        }
    };
    if !(duration > 0.0) {
        return Err(BeamError::InvalidConfig(
            "degenerate transit: the path never enters the mode volume".into(),
        ));
    }

    let profile = if dark {
        vec![0.0; PROFILE_POINTS]
    } else {
        (0..PROFILE_POINTS)
            .map(|k| g_at(start + duration * k as f64 / (PROFILE_POINTS - 1) as f64))
            .collect()
    };
    Ok(Trajectory {
        shape: CouplingShape::Path {
            geometry: geom.clone(),
            entry_transverse,
            entry_axial,
            speed,
            tilt_axial,
            tilt_transverse,
            start_offset: start,
        },
        transit_time: duration,
        profile,
        dark,
    })
}

/// Bisect g(s) = threshold between an outside point (below) and an inside
/// point (at or above).
fn refine_crossing(g: &dyn Fn(f64) -> f64, threshold: f64, outside: f64, inside: f64) -> f64 {
    let (mut lo, mut hi) = (outside, inside);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if g(mid) >= threshold {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// The coupling sequence a trajectory's kinematics produce in the given
/// geometry, on the trajectory's own stored sample grid.
pub fn coupling_profile(traj: &Trajectory, geom: &ModeGeometry) -> Vec<f64> {
    match &traj.shape {
        CouplingShape::Constant { .. } => traj.profile.clone(),
        CouplingShape::Path {
            entry_transverse,
            entry_axial,
            speed,
            tilt_axial,
            tilt_transverse,
            start_offset,
            ..
        } => (0..traj.profile.len())
            .map(|k| {
                let t = traj.transit_time * k as f64 / (traj.profile.len() - 1) as f64;
                path_coupling(
                    geom,
                    *entry_transverse,
                    *entry_axial,
                    *speed,
                    *tilt_axial,
                    *tilt_transverse,
                    start_offset + t,
                )
            })
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// Per-transit correlation sweep
// ---------------------------------------------------------------------------

/// Physicality bookkeeping of one transit sweep.
#[derive(Debug, Clone)]
pub struct SweepFlags {
    /// Largest |Tr ρ(t) − 1| / max(t, 1) over the start-time checkpoints.
    pub max_trace_drift_rate: f64,
    pub trace_ok: bool,
    /// Largest Hermiticity deviation among the checkpoints.
    pub max_hermiticity_error: f64,
    pub hermiticity_ok: bool,
    /// Whether the exit state passed the full density-matrix validation
    /// (trace, Hermiticity, positivity).
    pub state_ok: bool,
}

/// Time-averaged single-transit signals: the mean undriven-mode intensity
/// Ī_j and the unnormalized correlation Ḡ²_j(τ) on the caller's delay grid.
#[derive(Debug, Clone)]
pub struct TransitSignal {
    pub intensity: f64,
    pub correlation: Vec<f64>,
    /// State at the atom's exit, validated.
    pub final_state: DensityMatrix,
    pub flags: SweepFlags,
}

/// Fixed-step integrator over one engine, stepping at most `h_max` at a time
/// with the coupling sampled at the start, midpoint and end of each substep.
struct Stepper<'a> {
    engine: &'a Engine,
    h_max: f64,
    ws: Workspace,
}

impl Stepper<'_> {
    fn advance(&mut self, x: &mut [C], t0: f64, t1: f64, g: &dyn Fn(f64) -> f64) {
        let span = t1 - t0;
        if span <= 0.0 {
            return;
        }
        let n_sub = (span / self.h_max).ceil().max(1.0) as usize;
        let h = span / n_sub as f64;
        for k in 0..n_sub {
            let t = t0 + h * k as f64;
            rk4_step_batch(
                &self.engine.mat,
                (g(t), g(t + 0.5 * h), g(t + h)),
                h,
                x,
                1,
                &mut self.ws,
            );
        }
    }
}

/// One transit of the two-time average machinery, in rate units (1/γ):
/// settle the empty driven cavity, carry ρ(t) across the transit with the
/// time-dependent coupling, and at each of `n_starts` trapezoid start times
/// condition (a₂ρa₂†), propagate over the delay grid, and read out
/// ⟨a₂†a₂⟩. Delays past the atom's exit use the exact ring-down tail.
/// `step_scale` shrinks the integrator step for convergence studies.
fn transit_sweep(
    gen: &Generator,
    g_of_t: &dyn Fn(f64) -> f64,
    transit: f64,
    tau_grid: &[f64],
    n_starts: usize,
    step_scale: f64,
) -> Result<TransitSignal, BeamError> {
    transit_sweep_from(gen, None, g_of_t, transit, tau_grid, n_starts, step_scale)
}

/// [`transit_sweep`] with an explicit state at the transit start instead of
/// the settled b₀-entry default — the hook the static-coupling oracle uses
/// to emulate an atom that has always been inside (entry = steady state).
fn transit_sweep_from(
    gen: &Generator,
    entry_state: Option<&DensityMatrix>,
    g_of_t: &dyn Fn(f64) -> f64,
    transit: f64,
    tau_grid: &[f64],
    n_starts: usize,
    step_scale: f64,
) -> Result<TransitSignal, BeamError> {
    if !transit.is_finite() || transit <= 0.0 {
        return Err(BeamError::InvalidConfig(format!(
            "transit span must be positive, got {transit}"
        )));
    }
    if n_starts < 2 {
        return Err(BeamError::InvalidConfig(format!(
            "need at least 2 start times, got {n_starts}"
        )));
    }
    if tau_grid.is_empty() {
        return Err(BeamError::InvalidGrid("empty delay grid".into()));
    }
    if tau_grid.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(BeamError::InvalidGrid(
            "delays must be finite and nonnegative".into(),
        ));
    }
    if tau_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(BeamError::InvalidGrid(
            "delays must be strictly increasing".into(),
        ));
    }
    if !(step_scale > 0.0 && step_scale.is_finite()) {
        return Err(BeamError::InvalidConfig(format!(
            "step_scale must be positive, got {step_scale}"
        )));
    }
    let kappa = gen.params().kappa;
    if kappa <= 0.0 {
        return Err(BeamError::InvalidConfig(
            "cavity decay κ must be positive for transit correlations".into(),
        ));
    }

    let basis = gen.basis();
    let entry = match entry_state {
        Some(state) => {
            if state.basis().dim() != basis.dim() {
                return Err(BeamError::InvalidConfig(format!(
                    "entry state dimension {} does not match the generator basis {}",
                    state.basis().dim(),
                    basis.dim()
                )));
            }
            state.clone()
        }
        None => DensityMatrix::pure(basis, Level::B0, 0, 0)?,
    };
    let (engine, mut x) = gen.engine_for(entry.matrix());
    let n2_op = mode_number(basis, Mode::Undriven);
    let a2 = mode_annihilator(basis, Mode::Undriven);
    let a2_dag = a2.matrix().t().mapv(|z: C| z.conj());
    let w_n2 = engine.weight_vector(n2_op.matrix());
    let dot = |w: &[C], x: &[C]| -> f64 {
        w.iter().zip(x).map(|(a, b)| a * b).sum::<C>().re
    };

    let mut stepper = Stepper {
        engine,
        h_max: step_scale * gen.step_limit(),
        ws: Workspace::new(),
    };

    // Pre-transit: the atom in b₀ against the settled driven empty cavity.
    // An explicit entry state is taken as already settled.
    if entry_state.is_none() {
        stepper.advance(&mut x, 0.0, SETTLE_SPAN, &|_| 0.0);
    }

    // Delays past an atom's exit decay as e^(−2κΔ); beyond this horizon the
    // factor is below TAIL_CUTOFF and the contribution is an exact zero.
    let tail_horizon = (1.0 / TAIL_CUTOFF).ln() / (2.0 * kappa);

    let starts: Vec<f64> = (0..n_starts)
        .map(|s| transit * s as f64 / (n_starts - 1) as f64)
        .collect();
    let mut weights = vec![1.0 / (n_starts - 1) as f64; n_starts];
    weights[0] *= 0.5;
    weights[n_starts - 1] *= 0.5;

    let mut flags = SweepFlags {
        max_trace_drift_rate: 0.0,
        trace_ok: true,
        max_hermiticity_error: 0.0,
        hermiticity_ok: true,
        state_ok: true,
    };
    let mut correlation = vec![0.0; tau_grid.len()];
    let mut intensity = 0.0;
    let mut rho_dense = Array2::<C>::zeros((basis.dim(), basis.dim()));
    // Packed-space map of the detection sandwich ρ ↦ a₂ρa₂†, built on first
    // use: any state that reaches a click has undriven light, which requires
    // the full-sector engine, where the map cannot leak.
    let mut click_map: Option<Csr> = None;

    for (s, &t_s) in starts.iter().enumerate() {
        if s > 0 {
            stepper.advance(&mut x, starts[s - 1], t_s, g_of_t);
        }
        let i_s = dot(&w_n2, &x);
        intensity += weights[s] * i_s;

        // physicality checkpoints
        let drift = (engine.trace_of(&x) - C::new(1.0, 0.0)).norm() / t_s.max(1.0);
        flags.max_trace_drift_rate = flags.max_trace_drift_rate.max(drift);
        rho_dense = engine.decompress(&x);
        let mut herm = 0.0f64;
        for r in 0..basis.dim() {
            for c in r..basis.dim() {
                herm = herm.max((rho_dense[[r, c]] - rho_dense[[c, r]].conj()).norm());
            }
        }
        flags.max_hermiticity_error = flags.max_hermiticity_error.max(herm);

        if i_s <= 0.0 {
            continue; // dark so far: conditioning on a click contributes nothing
        }

        // Condition on a detection at t_s and follow the delay evolution
        // while the atom is still inside.
        let t_exit = transit - t_s;
        let mut needs_exit = false;
        let mut march_taus: Vec<(f64, Option<usize>)> = vec![(0.0, None)];
        for (k, &tau) in tau_grid.iter().enumerate() {
            if tau <= t_exit {
                march_taus.push((tau, Some(k)));
            } else if tau - t_exit <= tail_horizon {
                needs_exit = true;
            }
        }
        if needs_exit {
            march_taus.push((t_exit, None));
        }
        march_taus.sort_by(|a, b| a.0.total_cmp(&b.0));
        let eps = 1e-12 * transit.max(1.0);
        let mut grid: Vec<(f64, Vec<usize>)> = Vec::with_capacity(march_taus.len());
        for (t, slot) in march_taus {
            match grid.last_mut() {
                Some(lastg) if (t - lastg.0).abs() <= eps => {
                    if let Some(k) = slot {
                        lastg.1.push(k);
                    }
                }
                _ => grid.push((t, slot.into_iter().collect())),
            }
        }

        if click_map.is_none() {
            click_map = Some(engine.sandwich_map(a2.matrix(), &a2_dag).map_err(|_| {
                BeamError::InvalidConfig(
                    "click conditioning requires the full-sector engine".into(),
                )
            })?);
        }
        let mut y = vec![C::new(0.0, 0.0); engine.len()];
        click_map.as_ref().expect("just built").apply(&x, &mut y);
        let mut exit_value = 0.0;
        let mut prev_t = 0.0;
        for (i, (t, slots)) in grid.iter().enumerate() {
            if i > 0 {
                let g_shift = |tau: f64| g_of_t(t_s + tau);
                stepper.advance(&mut y, prev_t, *t, &g_shift);
            }
            prev_t = *t;
            let v = dot(&w_n2, &y);
            for &k in slots {
                correlation[k] += weights[s] * v;
            }
            if needs_exit && (*t - t_exit).abs() <= eps {
                exit_value = v;
            }
        }
        if needs_exit {
            for (k, &tau) in tau_grid.iter().enumerate() {
                if tau > t_exit && tau - t_exit <= tail_horizon {
                    correlation[k] +=
                        weights[s] * exit_value * (-2.0 * kappa * (tau - t_exit)).exp();
                }
            }
        }
    }

    flags.trace_ok = flags.max_trace_drift_rate <= TRACE_DRIFT_RATE_TOL;
    flags.hermiticity_ok = flags.max_hermiticity_error <= HERMITICITY_TOL;
    let final_state = match DensityMatrix::from_matrix(rho_dense, basis.clone()) {
        Ok(dm) => dm,
        Err(_) => {
            flags.state_ok = false;
            DensityMatrix::from_matrix_unchecked(engine.decompress(&x), basis.clone())
        }
    };

    Ok(TransitSignal {
        intensity,
        correlation,
        final_state,
        flags,
    })
}

/// Time-averaged intensity and two-time correlation of one transit, per the
/// passage averages in the module docs. The atom enters in b₀ with both
/// modes in the settled driven-cavity state; delays are in units of 1/γ and
/// may extend past the atom's exit. Requires `params.gamma_hz` to map the
/// trajectory's transit time onto the rate unit.
pub fn transit_correlation(
    traj: &Trajectory,
    params: &SystemParams,
    basis: &Arc<CompositeBasis>,
    tau_grid: &[f64],
    t_grid_size: usize,
) -> Result<TransitSignal, BeamError> {
    let gamma = gamma_rate(params)?;
    let mut p = params.clone();
    p.g = p.g.max(traj.peak_coupling());
    let gen = Generator::new(&p, basis)?;
    let transit = traj.transit_time() * gamma;
    let g_of = |t: f64| traj.coupling_at(t / gamma);
    transit_sweep(&gen, &g_of, transit, tau_grid, t_grid_size, 1.0)
}

fn gamma_rate(params: &SystemParams) -> Result<f64, BeamError> {
    let gamma = params.gamma_hz.ok_or(BeamError::MissingGammaRate)?;
    if !gamma.is_finite() || gamma <= 0.0 {
        return Err(BeamError::InvalidConfig(format!(
            "gamma_hz must be positive, got {gamma}"
        )));
    }
    Ok(gamma)
}

// ---------------------------------------------------------------------------
// Ensemble average
// ---------------------------------------------------------------------------

/// Fixed-shape pairwise reduction: the result depends only on the slice
/// contents and length, never on evaluation or completion order.
fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => pairwise_sum(&xs[..n / 2]) + pairwise_sum(&xs[n / 2..]),
    }
}

/// Basis used by [`ensemble_g2`]: two photons in each mode, enough to keep
/// the prompt two-photon amplitude of the undriven mode while staying cheap.
fn default_beam_basis() -> Arc<CompositeBasis> {
    Arc::new(CompositeBasis::core(2, 2))
}

/// Ensemble-averaged normalized correlation of the undriven mode on the
/// default beam basis. See [`ensemble_g2_with_basis`].
pub fn ensemble_g2(
    cfg: &BeamConfig,
    geom: &ModeGeometry,
    params: &SystemParams,
    n_traj: usize,
    tau_grid: &[f64],
    seed: u64,
) -> Result<CorrelationTrace, BeamError> {
    ensemble_g2_with_basis(&default_beam_basis(), cfg, geom, params, n_traj, tau_grid, seed)
}

/// g²(τ) = 1 + ⟨Ḡ²_j⟩/(N̄·⟨Ī_j⟩²) over `n_traj` seeded trajectories, with a
/// per-point jackknife standard error attached to the trace. Each trajectory
/// draws from stream j of the seeded generator and the reduction is a fixed
/// pairwise tree, so the result is bitwise reproducible under any worker
/// count.
pub fn ensemble_g2_with_basis(
    basis: &Arc<CompositeBasis>,
    cfg: &BeamConfig,
    geom: &ModeGeometry,
    params: &SystemParams,
    n_traj: usize,
    tau_grid: &[f64],
    seed: u64,
) -> Result<CorrelationTrace, BeamError> {
    cfg.validate()?;
    geom.validate()?;
    if n_traj == 0 {
        return Err(BeamError::InvalidConfig("need at least one trajectory".into()));
    }
    if let Some(w) = cfg.dilute_warning() {
        eprintln!("warning: {w}");
    }
    let gamma = gamma_rate(params)?;
    let mut p = params.clone();
    p.g = p.g.max(geom.peak_coupling);
    let gen = Generator::new(&p, basis)?;

    let signals: Vec<TransitSignal> = (0..n_traj)
        .into_par_iter()
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(j as u64 + 1);
            let traj = sample_trajectory(cfg, geom, &mut rng)?;
            let transit = traj.transit_time() * gamma;
            let g_of = |t: f64| traj.coupling_at(t / gamma);
            transit_sweep(&gen, &g_of, transit, tau_grid, DEFAULT_START_TIMES, 1.0)
        })
        .collect::<Result<_, _>>()?;

    let n = n_traj as f64;
    let intensities: Vec<f64> = signals.iter().map(|s| s.intensity).collect();
    let sum_i = pairwise_sum(&intensities);
    let mean_i = sum_i / n;
    if !(mean_i > 0.0) {
        return Err(BeamError::ZeroIntensity);
    }
    let nbar = cfg.mean_atom_number;

    let mut values = vec![0.0; tau_grid.len()];
    let mut stderr = vec![0.0; tau_grid.len()];
    let mut column = vec![0.0; n_traj];
    let mut loo = vec![0.0; n_traj];
    for k in 0..tau_grid.len() {
        for (j, s) in signals.iter().enumerate() {
            column[j] = s.correlation[k];
        }
        let sum_g = pairwise_sum(&column);
        values[k] = 1.0 + (sum_g / n) / (nbar * mean_i * mean_i);
        if n_traj < 2 {
            stderr[k] = f64::INFINITY;
            continue;
        }
        for j in 0..n_traj {
            let g_j = (sum_g - column[j]) / (n - 1.0);
            let i_j = (sum_i - intensities[j]) / (n - 1.0);
            loo[j] = if i_j > 0.0 {
                1.0 + g_j / (nbar * i_j * i_j)
            } else {
                f64::INFINITY
            };
        }
        let loo_mean = pairwise_sum(&loo) / n;
        let dev: Vec<f64> = loo.iter().map(|v| (v - loo_mean) * (v - loo_mean)).collect();
        stderr[k] = ((n - 1.0) / n * pairwise_sum(&dev)).sqrt();
    }

    let metadata = TraceMetadata {
        params: params.clone(),
        seed: Some(seed),
        qubit_populations: None,
    };
    Ok(
        CorrelationTrace::new(tau_grid.to_vec(), values, Normalization::NormalizedG2, metadata)?
            .with_stderr(stderr)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beats::{fringe_metrics_auto, g2_undriven, uniform_grid};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Half-width of the transit window in waist-crossing times: the
    /// envelope alone falls to the 1% threshold at v·t = w·√ln(100).
    const ENVELOPE_HALF_WIDTH: f64 = 2.145_966_026_289_347;

    fn beam_params() -> SystemParams {
        let mut p = SystemParams::default();
        p.drive = 1.0 / 16.0;
        p.gamma_hz = Some(DEFAULT_GAMMA_HZ);
        p
    }

    /// Small mode volume: same physics, ten times shorter transits.
    fn mini_geometry() -> ModeGeometry {
        ModeGeometry {
            waist: 5.6e-6,
            ..ModeGeometry::default()
        }
    }

    fn small_basis() -> Arc<CompositeBasis> {
        Arc::new(CompositeBasis::core(2, 1))
    }

    #[test]
    fn on_axis_antinode_transit_is_gaussian() {
        let geom = ModeGeometry::default();
        let traj = trajectory_from_draw(&geom, 15.0, 0.0, 0.0, 0.0, 0.0).unwrap();
        let expected_tj = 2.0 * ENVELOPE_HALF_WIDTH * geom.waist / 15.0;
        assert_relative_eq!(traj.transit_time(), expected_tj, max_relative = 1e-9);

        let mid = 0.5 * traj.transit_time();
        assert_relative_eq!(traj.coupling_at(mid), geom.peak_coupling, max_relative = 1e-9);
        // One waist-crossing time away from the midpoint the Gaussian gives
        // exactly one e-fold.
        let t_waist = geom.waist / 15.0;
        assert_relative_eq!(
            traj.coupling_at(mid + t_waist),
            geom.peak_coupling / std::f64::consts::E,
            max_relative = 1e-9
        );
        // The window boundaries sit on the threshold.
        let g_edge = COUPLING_THRESHOLD * geom.peak_coupling;
        assert_relative_eq!(traj.profile()[0], g_edge, max_relative = 1e-6);
        assert_relative_eq!(
            traj.profile()[PROFILE_POINTS - 1],
            g_edge,
            max_relative = 1e-6
        );
        // Symmetric profile around the midpoint.
        for k in 0..PROFILE_POINTS / 2 {
            assert_relative_eq!(
                traj.profile()[k],
                traj.profile()[PROFILE_POINTS - 1 - k],
                max_relative = 1e-9
            );
        }
    }

    #[test]
    fn node_transit_is_dark_with_positive_window() {
        let geom = ModeGeometry::default();
        let traj =
            trajectory_from_draw(&geom, 15.0, 0.0, 0.0, 0.0, geom.wavelength / 4.0).unwrap();
        assert!(traj.profile().iter().all(|g| *g == 0.0));
        assert!(traj.coupling_at(0.5 * traj.transit_time()) == 0.0);
        // The dark window is the transverse-envelope window.
        let expected_tj = 2.0 * ENVELOPE_HALF_WIDTH * geom.waist / 15.0;
        assert_relative_eq!(traj.transit_time(), expected_tj, max_relative = 1e-9);
    }

    #[test]
    fn transverse_offset_of_one_waist_costs_one_e_fold() {
        let geom = ModeGeometry::default();
        let traj = trajectory_from_draw(&geom, 15.0, 0.0, 0.0, geom.waist, 0.0).unwrap();
        let mid = 0.5 * traj.transit_time();
        assert_relative_eq!(
            traj.coupling_at(mid),
            geom.peak_coupling / std::f64::consts::E,
            max_relative = 1e-9
        );
        // Threshold crossings move in: exp(−(vt/w)² − 1) = 0.01.
        let expected_tj = 2.0 * (ENVELOPE_HALF_WIDTH.powi(2) - 1.0).sqrt() * geom.waist / 15.0;
        assert_relative_eq!(traj.transit_time(), expected_tj, max_relative = 1e-9);
    }

    #[test]
    fn tilted_transit_crosses_standing_wave_at_analytic_period() {
        let geom = ModeGeometry::default();
        let tilt = 0.0125;
        let speed = 15.0;
        let traj = trajectory_from_draw(&geom, speed, tilt, 0.0, 0.0, 0.0).unwrap();
        let vz = speed * tilt.sin();
        let expected_period = geom.wavelength / (2.0 * vz);

        // Locate the standing-wave nodes in the stored profile; they are
        // exact zeros of |cos| regardless of the envelope, so their spacing
        // is the analytic period. The dips are cusps, so refine linearly.
        let p = traj.profile();
        let dt = traj.transit_time() / (PROFILE_POINTS - 1) as f64;
        let mut nodes = Vec::new();
        for i in 1..PROFILE_POINTS - 1 {
            if p[i] < p[i - 1] && p[i] < p[i + 1] && p[i] < 0.2 * geom.peak_coupling {
                let denom = p[i - 1] + p[i + 1] - 2.0 * p[i];
                let shift = if denom > 0.0 {
                    -0.5 * (p[i + 1] - p[i - 1]) / denom
                } else {
                    0.0
                };
                nodes.push((i as f64 + shift) * dt);
            }
        }
        assert!(
            nodes.len() >= 5,
            "expected several standing-wave nodes, found {}",
            nodes.len()
        );
        for pair in nodes.windows(2) {
            assert_relative_eq!(pair[1] - pair[0], expected_period, max_relative = 0.01);
        }
    }

    #[test]
    fn sampled_speeds_are_positive_with_mean_near_target() {
        let cfg = BeamConfig::default();
        let geom = ModeGeometry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let traj = sample_trajectory(&cfg, &geom, &mut rng).unwrap();
            let (speed, _, _) = traj.velocity().unwrap();
            assert!(speed > 0.0);
            sum += speed;
        }
        let mean = sum / n as f64;
        let three_sigma = 3.0 * cfg.speed_spread / (n as f64).sqrt();
        assert!(
            (mean - cfg.mean_speed).abs() < three_sigma,
            "sample mean {mean} outside {three_sigma} of {}",
            cfg.mean_speed
        );
    }

    #[test]
    fn speeds_stay_positive_under_huge_spread() {
        let cfg = BeamConfig {
            speed_spread: 30.0,
            ..BeamConfig::default()
        };
        let geom = ModeGeometry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let traj = sample_trajectory(&cfg, &geom, &mut rng).unwrap();
            assert!(traj.velocity().unwrap().0 > 0.0);
        }
    }

    #[test]
    fn tilt_sampler_matches_triangular_moments() {
        let cfg = BeamConfig::default();
        let geom = ModeGeometry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 20_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        let half_width = cfg.divergence_parallel;
        for _ in 0..n {
            let traj = sample_trajectory(&cfg, &geom, &mut rng).unwrap();
            let (_, tilt_axial, _) = traj.velocity().unwrap();
            assert!(tilt_axial.abs() <= half_width);
            sum += tilt_axial;
            sum_sq += tilt_axial * tilt_axial;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        // Symmetric triangular law on ±a has mean 0 and variance a²/6.
        assert!(mean.abs() < 4.0 * half_width / 6f64.sqrt() / (n as f64).sqrt());
        assert_relative_eq!(var, half_width * half_width / 6.0, max_relative = 0.05);
    }

    #[test]
    fn static_coupling_recovers_undriven_correlation() {
        // An atom that has always been inside at fixed coupling: every start
        // time sees the steady state, so the passage average must reproduce
        // the stationary two-time correlation.
        let basis = small_basis();
        let params = beam_params();
        let gen = Generator::new(&params, &basis).unwrap();
        let rho_ss = gen.steady_state().unwrap();
        let tau = uniform_grid(12.0, 61);
        let reference = g2_undriven(&rho_ss, &gen, &tau).unwrap();

        let sig = transit_sweep_from(
            &gen,
            Some(&rho_ss),
            &|_| params.g,
            2400.0,
            &tau,
            DEFAULT_START_TIMES,
            1.0,
        )
        .unwrap();
        assert!(sig.flags.trace_ok && sig.flags.hermiticity_ok && sig.flags.state_ok);

        let scale = reference
            .values()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        for (k, r) in reference.values().iter().enumerate() {
            let normalized = sig.correlation[k] / (sig.intensity * sig.intensity);
            assert!(
                (normalized - r).abs() <= 0.02 * scale,
                "tau={}: transit average {normalized} vs stationary {r}",
                tau[k]
            );
        }
    }

    #[test]
    fn dark_transit_emits_nothing() {
        let geom = ModeGeometry::default();
        let traj =
            trajectory_from_draw(&geom, 15.0, 0.0, 0.0, 0.0, geom.wavelength / 4.0).unwrap();
        let tau = uniform_grid(4.0, 5);
        let sig =
            transit_correlation(&traj, &beam_params(), &small_basis(), &tau, 8).unwrap();
        assert_eq!(sig.intensity, 0.0);
        assert!(sig.correlation.iter().all(|v| *v == 0.0));
        assert!(sig.flags.trace_ok && sig.flags.hermiticity_ok);
    }

    #[test]
    fn transit_beats_decay_with_passage() {
        // Even at vanishing drive the finite passage time damps the beats:
        // late-delay fringes are far weaker than the early ones.
        let traj = trajectory_from_draw(&mini_geometry(), 15.0, 0.0, 0.0, 0.0, 0.0).unwrap();
        let tau = uniform_grid(48.0, 193);
        let sig =
            transit_correlation(&traj, &beam_params(), &small_basis(), &tau, 32).unwrap();
        assert!(sig.flags.trace_ok && sig.flags.hermiticity_ok && sig.flags.state_ok);
        let max_over = |lo: f64, hi: f64| {
            tau.iter()
                .zip(&sig.correlation)
                .filter(|(t, _)| (lo..=hi).contains(*t))
                .fold(0.0f64, |m, (_, v)| m.max(*v))
        };
        let early = max_over(0.0, 10.0);
        let late = max_over(38.0, 48.0);
        assert!(early > 0.0);
        assert!(
            late < early / 3.0,
            "no transit damping: early {early}, late {late}"
        );
    }

    #[test]
    fn halving_the_step_leaves_the_transit_converged() {
        let traj = trajectory_from_draw(&mini_geometry(), 15.0, 0.0, 0.0, 0.0, 0.0).unwrap();
        let params = beam_params();
        let basis = small_basis();
        let gamma = params.gamma_hz.unwrap();
        let mut p = params.clone();
        p.g = p.g.max(traj.peak_coupling());
        let gen = Generator::new(&p, &basis).unwrap();
        let transit = traj.transit_time() * gamma;
        let g_of = |t: f64| traj.coupling_at(t / gamma);
        let tau = uniform_grid(12.0, 25);

        let coarse = transit_sweep(&gen, &g_of, transit, &tau, 8, 1.0).unwrap();
        let fine = transit_sweep(&gen, &g_of, transit, &tau, 8, 0.5).unwrap();
        assert_relative_eq!(coarse.intensity, fine.intensity, max_relative = 1e-4);
        let scale = fine.correlation.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (c, f) in coarse.correlation.iter().zip(&fine.correlation) {
            assert!(
                (c - f).abs() <= 0.01 * scale,
                "step halving moved a point by {} (scale {scale})",
                (c - f).abs()
            );
        }
    }

    #[test]
    fn transit_fringe_keeps_path_information_balance() {
        // With symmetric ground paths the which-path predictability is zero,
        // so the fringe visibility alone must carry the full interference
        // budget: P² + V² ≈ 1 as long as the passage is slow against the
        // beat (1/t_j ≪ 2δ). Weak drive keeps the re-excitation pedestal
        // under the fringe floor. A single on-axis transit is deterministic,
        // so the budget can be checked tightly.
        let geom = ModeGeometry::default();
        let traj = trajectory_from_draw(&geom, 15.0, 0.0, 0.0, 0.0, 0.0).unwrap();
        let mut params = beam_params();
        params.drive = 1.0 / 64.0;
        let basis = Arc::new(CompositeBasis::core(2, 2));
        let tau = uniform_grid(16.0, 161);
        let sig = transit_correlation(&traj, &params, &basis, &tau, 32).unwrap();
        assert!(sig.flags.trace_ok && sig.flags.hermiticity_ok && sig.flags.state_ok);
        let fringe_values: Vec<f64> = sig
            .correlation
            .iter()
            .map(|v| v / (sig.intensity * sig.intensity))
            .collect();
        let trace = CorrelationTrace::new(
            tau.clone(),
            fringe_values,
            Normalization::UnnormalizedG2,
            TraceMetadata {
                params: params.clone(),
                seed: None,
                qubit_populations: None,
            },
        )
        .unwrap();
        let metrics = fringe_metrics_auto(&trace).unwrap();
        assert!(!metrics.flat);
        let budget =
            metrics.predictability * metrics.predictability + metrics.visibility * metrics.visibility;
        assert!(
            (budget - 1.0).abs() <= 0.05,
            "P² + V² = {budget} (P = {}, V = {})",
            metrics.predictability,
            metrics.visibility
        );
    }

    #[test]
    fn ensemble_is_bitwise_deterministic_across_worker_counts() {
        let cfg = BeamConfig::default();
        let geom = mini_geometry();
        let params = beam_params();
        let basis = small_basis();
        let tau = uniform_grid(6.0, 13);
        let run = || ensemble_g2_with_basis(&basis, &cfg, &geom, &params, 4, &tau, 3).unwrap();

        let direct = run();
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(run);
        let quad = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(run);

        assert_eq!(direct.values(), single.values());
        assert_eq!(direct.values(), quad.values());
        assert_eq!(direct.stderr().unwrap(), single.stderr().unwrap());
        assert_eq!(direct.stderr().unwrap(), quad.stderr().unwrap());
    }

    #[test]
    fn ensemble_baseline_is_unity_beyond_all_transits() {
        // Delays longer than any transit plus the cavity ring-down can only
        // pair photons from different atoms: the background of unity.
        let cfg = BeamConfig::default();
        let geom = mini_geometry();
        let tau: Vec<f64> = (0..5).map(|k| 120.0 + 10.0 * k as f64).collect();
        let trace =
            ensemble_g2_with_basis(&small_basis(), &cfg, &geom, &beam_params(), 6, &tau, 5)
                .unwrap();
        let se = trace.stderr().unwrap();
        for (k, v) in trace.values().iter().enumerate() {
            assert!(
                (v - 1.0).abs() <= 3.0 * se[k] + 1e-12,
                "tau={}: {v} is not unity within errors",
                tau[k]
            );
        }
    }

    #[test]
    fn ensemble_rejects_zero_intensity() {
        let geom = ModeGeometry {
            peak_coupling: 0.0,
            ..mini_geometry()
        };
        let tau = uniform_grid(2.0, 3);
        let err = ensemble_g2_with_basis(
            &small_basis(),
            &BeamConfig::default(),
            &geom,
            &beam_params(),
            2,
            &tau,
            1,
        )
        .unwrap_err();
        assert!(matches!(err, BeamError::ZeroIntensity));
    }

    #[test]
    fn validation_rejects_nonphysical_inputs() {
        assert!(Trajectory::with_constant_coupling(-0.1, 1.0).is_err());
        assert!(Trajectory::with_constant_coupling(f64::NAN, 1.0).is_err());
        assert!(Trajectory::with_constant_coupling(0.25, 0.0).is_err());

        let bad_speed = BeamConfig {
            mean_speed: 0.0,
            ..BeamConfig::default()
        };
        assert!(bad_speed.validate().is_err());
        let bad_spread = BeamConfig {
            speed_spread: -1.0,
            ..BeamConfig::default()
        };
        assert!(bad_spread.validate().is_err());
        let bad_nbar = BeamConfig {
            mean_atom_number: 0.0,
            ..BeamConfig::default()
        };
        assert!(bad_nbar.validate().is_err());

        let bad_waist = ModeGeometry {
            waist: 0.0,
            ..ModeGeometry::default()
        };
        assert!(bad_waist.validate().is_err());
        let bad_wavelength = ModeGeometry {
            wavelength: -780e-9,
            ..ModeGeometry::default()
        };
        assert!(bad_wavelength.validate().is_err());

        // The dilute-beam assumption is flagged, not enforced.
        assert!(BeamConfig::default().dilute_warning().is_none());
        let dense = BeamConfig {
            mean_atom_number: 0.25,
            ..BeamConfig::default()
        };
        assert!(dense.dilute_warning().is_some());

        // Transit times in seconds require the rate scale.
        let mut no_gamma = beam_params();
        no_gamma.gamma_hz = None;
        let traj = trajectory_from_draw(&ModeGeometry::default(), 15.0, 0.0, 0.0, 0.0, 0.0)
            .unwrap();
        let err = transit_correlation(&traj, &no_gamma, &small_basis(), &[0.0, 1.0], 4)
            .unwrap_err();
        assert!(matches!(err, BeamError::MissingGammaRate));
    }

    #[test]
    fn pairwise_sum_is_accurate_and_shape_fixed() {
        assert_eq!(pairwise_sum(&[]), 0.0);
        assert_eq!(pairwise_sum(&[2.5]), 2.5);
        let xs: Vec<f64> = (0..1000).map(|k| ((k * 2654435761u64 as usize) % 997) as f64).collect();
        let exact: f64 = xs.iter().sum();
        assert_relative_eq!(pairwise_sum(&xs), exact, max_relative = 1e-13);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Any drawn path yields a bounded coupling, exact zeros outside the
        /// window, and boundary values at or below the threshold.
        #[test]
        fn coupling_profile_is_bounded_and_windowed(
            speed in 1.0f64..40.0,
            tilt_axial in -0.025f64..0.025,
            tilt_transverse in -0.0125f64..0.0125,
            y0_frac in -1.5f64..1.5,
            z0_frac in 0.0f64..0.5,
            t_frac in -0.5f64..1.5,
        ) {
            let geom = ModeGeometry::default();
            let traj = trajectory_from_draw(
                &geom,
                speed,
                tilt_axial,
                tilt_transverse,
                y0_frac * geom.waist,
                z0_frac * geom.wavelength,
            )
            .unwrap();
            prop_assert!(traj.transit_time() > 0.0);
            prop_assert_eq!(traj.profile().len(), PROFILE_POINTS);

            let g = traj.coupling_at(t_frac * traj.transit_time());
            prop_assert!(g >= 0.0);
            prop_assert!(g <= geom.peak_coupling * (1.0 + 1e-12));
            if !(0.0..=1.0).contains(&t_frac) {
                prop_assert_eq!(g, 0.0);
            }

            let threshold = COUPLING_THRESHOLD * geom.peak_coupling;
            prop_assert!(traj.profile()[0] <= threshold * (1.0 + 1e-6));
            prop_assert!(traj.profile()[PROFILE_POINTS - 1] <= threshold * (1.0 + 1e-6));
        }
    }
}

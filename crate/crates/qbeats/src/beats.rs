//! Conditional photon correlations of the undriven cavity mode and the
//! fringe metrics extracted from them.
//!
//! A detection on the undriven (V-polarized) output projects the atom into a
//! ground-state Zeeman superposition; the subsequent intensity of that mode
//! oscillates at twice the Larmor frequency as the superposition precesses.
//! This module computes the normalized second-order correlation
//!
//!   g²(τ) = Tr[a₂†a₂ · e^{Lτ}(a₂ ρ_ss a₂†)] / ⟨a₂†a₂⟩²
//!
//! by propagating the conditioned matrix a₂ρa₂† with the same integrator as
//! the density matrix itself (the regression rule: two-time averages evolve
//! under the one-time generator), plus the intensity traces of arbitrarily
//! prepared states, CSV serialization, and estimators for the fringe
//! visibility, which-path predictability, beat frequency and minima
//! positions.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use thiserror::Error;

use crate::hilbert::{mode_annihilator, mode_number, CompositeBasis, Level, Mode};
use crate::liouville::{DensityMatrix, Generator, LiouvilleError, SystemParams};

type C = Complex64;

/// Smallest conditioning probability treated as nonzero.
const MIN_INTENSITY: f64 = 1e-250;
/// Intensities may round slightly negative; anything below this is an error.
const NEGATIVE_VALUE_TOL: f64 = -1e-10;
/// Grid uniformity requirement.
const UNIFORMITY_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum BeatsError {
    #[error("undriven-mode intensity is zero; cannot condition or normalize")]
    ZeroIntensity,
    #[error("invalid correlation trace: {0}")]
    InvalidTrace(String),
    #[error("invalid analysis window: {0}")]
    BadWindow(String),
    #[error("trace has no oscillation to locate a spectral peak in")]
    FlatTrace,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Liouville(#[from] LiouvilleError),
}

/// What the `values` of a [`CorrelationTrace`] mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// g²(τ), normalized by the squared mean intensity; → 1 at large τ.
    NormalizedG2,
    /// ⟨a₂†a₂⟩(τ) of a prepared (already normalized) state.
    ConditionalIntensity,
    /// Tr[a₂†a₂ · e^{Lτ}(a₂ρa₂†)] with no normalization.
    UnnormalizedG2,
}

/// Provenance carried along with a trace: the parameters it was computed
/// with, the RNG seed when the source was stochastic, and the which-path
/// (b₋₁, b₊₁) populations of the state the trace is conditioned on.
#[derive(Debug, Clone)]
pub struct TraceMetadata {
    pub params: SystemParams,
    pub seed: Option<u64>,
    /// Populations of the two interfering ground paths (b₋₁, b₊₁) in the
    /// conditioned or prepared state at τ = 0. Feeds the predictability.
    pub qubit_populations: Option<(f64, f64)>,
}

/// A real-valued correlation or intensity trace on a uniform delay grid.
#[derive(Debug, Clone)]
pub struct CorrelationTrace {
    tau_grid: Vec<f64>,
    values: Vec<f64>,
    stderr: Option<Vec<f64>>,
    normalization: Normalization,
    metadata: TraceMetadata,
}

impl CorrelationTrace {
    pub fn new(
        tau_grid: Vec<f64>,
        values: Vec<f64>,
        normalization: Normalization,
        metadata: TraceMetadata,
    ) -> Result<Self, BeatsError> {
        if tau_grid.len() != values.len() {
            return Err(BeatsError::InvalidTrace(format!(
                "{} grid points but {} values",
                tau_grid.len(),
                values.len()
            )));
        }
        if tau_grid.len() < 2 {
            return Err(BeatsError::InvalidTrace("fewer than two points".into()));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < NEGATIVE_VALUE_TOL) {
            return Err(BeatsError::InvalidTrace(format!(
                "intensity value {bad} is negative or non-finite"
            )));
        }
        let dt = tau_grid[1] - tau_grid[0];
        if dt <= 0.0 {
            return Err(BeatsError::InvalidTrace("grid not increasing".into()));
        }
        for w in tau_grid.windows(2) {
            let step = w[1] - w[0];
            if step <= 0.0 || (step - dt).abs() > UNIFORMITY_TOL {
                return Err(BeatsError::InvalidTrace(format!(
                    "grid not uniform: step {step} vs {dt}"
                )));
            }
        }
        Ok(CorrelationTrace {
            tau_grid,
            values,
            stderr: None,
            normalization,
            metadata,
        })
    }

    /// Attach a per-point standard error column (ensemble traces).
    pub fn with_stderr(mut self, stderr: Vec<f64>) -> Result<Self, BeatsError> {
        if stderr.len() != self.values.len() {
            return Err(BeatsError::InvalidTrace(
                "stderr length does not match values".into(),
            ));
        }
        self.stderr = Some(stderr);
        Ok(self)
    }

    pub fn tau_grid(&self) -> &[f64] {
        &self.tau_grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn stderr(&self) -> Option<&[f64]> {
        self.stderr.as_deref()
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn metadata(&self) -> &TraceMetadata {
        &self.metadata
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn dt(&self) -> f64 {
        self.tau_grid[1] - self.tau_grid[0]
    }

    /// Index range [lo, hi) of grid points inside the closed window.
    fn window_indices(&self, window: (f64, f64)) -> Result<(usize, usize), BeatsError> {
        let (lo, hi) = window;
        if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
            return Err(BeatsError::BadWindow(format!("[{lo}, {hi}]")));
        }
        let first = self.tau_grid.partition_point(|&t| t < lo);
        let last = self.tau_grid.partition_point(|&t| t <= hi);
        if last.saturating_sub(first) < 5 {
            return Err(BeatsError::BadWindow(format!(
                "[{lo}, {hi}] covers fewer than 5 grid points"
            )));
        }
        Ok((first, last))
    }

    /// Serialize as CSV: `# `-prefixed provenance lines, a `tau,gvalue`
    /// (or `tau,gvalue,stderr`) header, then one row per grid point with 17
    /// significant digits.
    pub fn write_csv<W: Write>(&self, w: &mut W, comments: &[String]) -> Result<(), BeatsError> {
        for line in comments {
            writeln!(w, "# {line}")?;
        }
        match &self.stderr {
            None => {
                writeln!(w, "tau,gvalue")?;
                for (t, v) in self.tau_grid.iter().zip(&self.values) {
                    writeln!(w, "{t:.16e},{v:.16e}")?;
                }
            }
            Some(errs) => {
                writeln!(w, "tau,gvalue,stderr")?;
                for ((t, v), e) in self.tau_grid.iter().zip(&self.values).zip(errs) {
                    writeln!(w, "{t:.16e},{v:.16e},{e:.16e}")?;
                }
            }
        }
        Ok(())
    }
}

/// The default delay grid for beat traces: 0 to 40 (units of 1/γ) on 4096
/// points, generated multiplicatively so it stays uniform to rounding.
pub fn default_tau_grid() -> Vec<f64> {
    uniform_grid(40.0, 4096)
}

/// Uniform grid from 0 to `tau_max` with `points` samples.
pub fn uniform_grid(tau_max: f64, points: usize) -> Vec<f64> {
    let dt = tau_max / (points - 1) as f64;
    (0..points).map(|i| i as f64 * dt).collect()
}

/// Mean photon number Tr(a†a ρ) of one cavity mode.
pub fn mean_photon(rho: &DensityMatrix, which: Mode) -> Result<f64, BeatsError> {
    let n_op = mode_number(rho.basis(), which);
    let v = n_op.expectation(rho.matrix());
    if v.im.abs() > 1e-12 {
        return Err(BeatsError::InvalidTrace(format!(
            "photon number has imaginary part {:.3e}",
            v.im
        )));
    }
    Ok(v.re)
}

/// The normalized state after a detection on the undriven mode:
/// a₂ ρ a₂† / Tr(a₂ ρ a₂†). Errors when the mode holds no photons.
pub fn conditional_state_after_click(rho: &DensityMatrix) -> Result<DensityMatrix, BeatsError> {
    let (chi, p) = conditioned_matrix(rho)?;
    let m = chi.mapv(|z| z / p);
    Ok(DensityMatrix::from_matrix_unchecked(m, rho.basis().clone()))
}

/// a₂ ρ a₂† (unnormalized) together with its trace, the click probability
/// density ⟨a₂†a₂⟩.
fn conditioned_matrix(rho: &DensityMatrix) -> Result<(Array2<C>, f64), BeatsError> {
    let a2 = mode_annihilator(rho.basis(), Mode::Undriven);
    let a2d = a2.dagger();
    let chi = a2.matrix().dot(rho.matrix()).dot(a2d.matrix());
    let p: C = (0..chi.nrows()).map(|i| chi[[i, i]]).sum();
    if !(p.re > MIN_INTENSITY) {
        return Err(BeatsError::ZeroIntensity);
    }
    Ok((chi, p.re))
}

/// Populations of the two interfering ground paths (b₋₁, b₊₁), summed over
/// both field factors.
pub fn qubit_populations(rho: &DensityMatrix) -> Result<(f64, f64), BeatsError> {
    let minus = rho.atomic_population(Level::BM1).map_err(BeatsError::from)?;
    let plus = rho.atomic_population(Level::BP1).map_err(BeatsError::from)?;
    Ok((minus, plus))
}

/// Magnitude of the (b₋₁, b₊₁) ground coherence, summed over the field
/// factors diagonally (the interference-carrying part).
pub fn qubit_coherence(rho: &DensityMatrix) -> Result<f64, BeatsError> {
    let basis = rho.basis();
    let mut acc = C::new(0.0, 0.0);
    for n1 in 0..=basis.n1_max() {
        for n2 in 0..=basis.n2_max() {
            let r = basis.index(Level::BM1, n1, n2).map_err(LiouvilleError::from)?;
            let c = basis.index(Level::BP1, n1, n2).map_err(LiouvilleError::from)?;
            acc += rho.matrix()[[r, c]];
        }
    }
    Ok(acc.norm())
}

/// g²(τ) of the undriven mode from a steady state, via propagation of the
/// conditioned matrix under the unchanged generator. The grid must start at
/// τ = 0.
pub fn g2_undriven(
    rho_ss: &DensityMatrix,
    gen: &Generator,
    tau_grid: &[f64],
) -> Result<CorrelationTrace, BeatsError> {
    if tau_grid.first() != Some(&0.0) {
        return Err(BeatsError::BadWindow("delay grid must start at 0".into()));
    }
    let (chi, p) = conditioned_matrix(rho_ss)?;
    let rho_c = chi.mapv(|z| z / p);
    let conditional =
        DensityMatrix::from_matrix_unchecked(rho_c.clone(), rho_ss.basis().clone());
    let pops = qubit_populations(&conditional)?;

    let n2_op = mode_number(gen.basis(), Mode::Undriven);
    let result = gen.march(&rho_c, tau_grid, None, &[n2_op.matrix()], false)?;
    if !result.flags.trace_ok {
        return Err(BeatsError::InvalidTrace(format!(
            "trace drifted at rate {:.3e} during regression propagation",
            result.flags.max_trace_drift_rate
        )));
    }
    let values: Vec<f64> = result.readouts[0].iter().map(|z| z.re / p).collect();
    CorrelationTrace::new(
        tau_grid.to_vec(),
        values,
        Normalization::NormalizedG2,
        TraceMetadata {
            params: gen.params().clone(),
            seed: None,
            qubit_populations: Some(pops),
        },
    )
}

/// ⟨a₂†a₂⟩(τ) of a prepared initial state evolving under the full driven
/// dynamics. The grid must start at τ = 0.
pub fn conditional_intensity(
    gen: &Generator,
    rho0: &DensityMatrix,
    tau_grid: &[f64],
) -> Result<CorrelationTrace, BeatsError> {
    if tau_grid.first() != Some(&0.0) {
        return Err(BeatsError::BadWindow("delay grid must start at 0".into()));
    }
    let pops = qubit_populations(rho0)?;
    let n2_op = mode_number(gen.basis(), Mode::Undriven);
    let result = gen.march(rho0.matrix(), tau_grid, None, &[n2_op.matrix()], false)?;
    if !result.flags.trace_ok {
        return Err(BeatsError::InvalidTrace(format!(
            "trace drifted at rate {:.3e} during propagation",
            result.flags.max_trace_drift_rate
        )));
    }
    let values: Vec<f64> = result.readouts[0].iter().map(|z| z.re).collect();
    CorrelationTrace::new(
        tau_grid.to_vec(),
        values,
        Normalization::ConditionalIntensity,
        TraceMetadata {
            params: gen.params().clone(),
            seed: None,
            qubit_populations: Some(pops),
        },
    )
}

/// Fringe observables of one trace over one analysis window.
#[derive(Debug, Clone)]
pub struct FringeMetrics {
    /// (max − min)/(max + min) from the first extremum pair in the window.
    pub visibility: f64,
    /// |p₊ − p₋|/(p₊ + p₋) from the trace's which-path populations.
    pub predictability: f64,
    /// 2π over the mean spacing of consecutive minima (rad per unit time);
    /// 0 when fewer than two minima exist.
    pub beat_frequency: f64,
    /// Parabolic-refined times of the fringe minima, in order.
    pub minima_positions: Vec<f64>,
    /// Parabolic-refined times of the fringe maxima, in order.
    pub maxima_positions: Vec<f64>,
    /// Set when no oscillation was found; visibility is 0 then, by fiat.
    pub flat: bool,
}

/// One refined extremum: time, value, and whether it is a maximum.
#[derive(Debug, Clone, Copy)]
struct Extremum {
    tau: f64,
    value: f64,
    is_max: bool,
}

/// Local extrema of `values` on indices [lo, hi), refined by fitting a
/// parabola through the three points around each grid extremum.
fn refined_extrema(tau: &[f64], values: &[f64], lo: usize, hi: usize) -> Vec<Extremum> {
    let mut out = Vec::new();
    let start = lo.max(1);
    let end = hi.min(values.len() - 1);
    let mut i = start;
    while i < end {
        let (vm, v0, vp) = (values[i - 1], values[i], values[i + 1]);
        let is_max = v0 > vm && v0 > vp;
        let is_min = v0 < vm && v0 < vp;
        if is_max || is_min {
            let denom = vm - 2.0 * v0 + vp;
            let (offset, value) = if denom.abs() > 0.0 {
                let off = 0.5 * (vm - vp) / denom;
                (off, v0 - 0.25 * (vm - vp) * off)
            } else {
                (0.0, v0)
            };
            let dt = tau[i + 1] - tau[i];
            out.push(Extremum {
                tau: tau[i] + offset * dt,
                value,
                is_max,
            });
            // neighbours of a strict extremum cannot themselves be strict
            i += 2;
        } else {
            i += 1;
        }
    }
    out
}

fn predictability_of(meta: &TraceMetadata) -> f64 {
    match meta.qubit_populations {
        Some((minus, plus)) if minus + plus > 0.0 => {
            ((plus - minus).abs() / (plus + minus)).clamp(0.0, 1.0)
        }
        _ => 0.0,
    }
}

/// Extract visibility, predictability, beat frequency and extremum positions
/// from one window of a trace. The window should begin after the
/// antibunching dip and span at least two oscillation periods; a trace with
/// no extrema in the window comes back flagged flat with zero visibility
/// rather than as an error.
pub fn fringe_metrics(
    trace: &CorrelationTrace,
    window: (f64, f64),
) -> Result<FringeMetrics, BeatsError> {
    let (lo, hi) = trace.window_indices(window)?;
    let extrema = refined_extrema(trace.tau_grid(), trace.values(), lo, hi);
    let predictability = predictability_of(trace.metadata());

    let minima: Vec<&Extremum> = extrema.iter().filter(|e| !e.is_max).collect();
    let maxima: Vec<&Extremum> = extrema.iter().filter(|e| e.is_max).collect();
    if minima.is_empty() || maxima.is_empty() {
        return Ok(FringeMetrics {
            visibility: 0.0,
            predictability,
            beat_frequency: 0.0,
            minima_positions: minima.iter().map(|e| e.tau).collect(),
            maxima_positions: maxima.iter().map(|e| e.tau).collect(),
            flat: true,
        });
    }

    // First maximum and first minimum after the window start, whichever
    // order they arrive in.
    let first_max = maxima[0].value;
    let first_min = minima[0].value.max(0.0);
    let visibility = if first_max + first_min > 0.0 {
        ((first_max - first_min) / (first_max + first_min)).clamp(0.0, 1.0)
    } else {
        0.0
    };

    let minima_positions: Vec<f64> = minima.iter().map(|e| e.tau).collect();
    let beat_frequency = if minima_positions.len() >= 2 {
        let spacings: Vec<f64> = minima_positions.windows(2).map(|w| w[1] - w[0]).collect();
        let mean = spacings.iter().sum::<f64>() / spacings.len() as f64;
        2.0 * PI / mean
    } else {
        0.0
    };

    Ok(FringeMetrics {
        visibility,
        predictability,
        beat_frequency,
        minima_positions,
        maxima_positions: maxima.iter().map(|e| e.tau).collect(),
        flat: false,
    })
}

/// The standard analysis window: from the first fringe minimum (the end of
/// the antibunching transient) through the next two full oscillations.
/// Errors when the trace has no usable oscillation.
pub fn standard_beat_window(trace: &CorrelationTrace) -> Result<(f64, f64), BeatsError> {
    let full = (
        trace.tau_grid[0],
        *trace.tau_grid.last().expect("nonempty grid"),
    );
    let probe = fringe_metrics(trace, full)?;
    if probe.flat || probe.beat_frequency <= 0.0 {
        return Err(BeatsError::FlatTrace);
    }
    let period = 2.0 * PI / probe.beat_frequency;
    let lo = probe.minima_positions[0];
    let hi = (lo + 2.0 * period).min(full.1);
    Ok((lo, hi))
}

/// Fringe metrics over the standard window; falls back to the full grid
/// (yielding the flat-flagged result) when no oscillation exists.
pub fn fringe_metrics_auto(trace: &CorrelationTrace) -> Result<FringeMetrics, BeatsError> {
    match standard_beat_window(trace) {
        Ok(window) => {
            // exclude the window-opening minimum itself: visibility pairs
            // come from the clean oscillations after it
            let nudged = (window.0 + trace.dt(), window.1);
            fringe_metrics(trace, nudged)
        }
        Err(BeatsError::FlatTrace) => {
            let full = (trace.tau_grid[0], *trace.tau_grid.last().unwrap());
            fringe_metrics(trace, full)
        }
        Err(e) => Err(e),
    }
}

/// Amplitudes |Σ_j v_j e^{-iωt_j}| at each trial frequency.
fn dft_amplitudes(times: &[f64], values: &[f64], omegas: &[f64]) -> Vec<f64> {
    let t0 = times[0];
    omegas
        .iter()
        .map(|&w| {
            let mut acc = C::new(0.0, 0.0);
            for (t, v) in times.iter().zip(values) {
                let phase = -w * (t - t0);
                acc += C::new(phase.cos() * v, phase.sin() * v);
            }
            acc.norm()
        })
        .collect()
}

/// Dominant oscillation frequency (rad per unit time) of a trace over a
/// window: running-mean detrend over one estimated period, direct discrete
/// transform, then a zoomed scan with parabolic peak interpolation. The
/// window must hold at least two full periods of any oscillation reported.
pub fn spectral_peak(trace: &CorrelationTrace, window: (f64, f64)) -> Result<f64, BeatsError> {
    let (lo, hi) = trace.window_indices(window)?;
    let times = &trace.tau_grid[lo..hi];
    let raw = &trace.values[lo..hi];
    let n = raw.len();
    if n < 16 {
        return Err(BeatsError::BadWindow(
            "window too short for spectral estimation".into(),
        ));
    }
    let dt = trace.dt();
    let span = times[n - 1] - times[0];
    let mean = raw.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = raw.iter().map(|v| v - mean).collect();
    let scale = raw.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);

    // Rough pass at the window's native resolution. Frequencies below two
    // cycles per window cannot satisfy the two-period precondition, so the
    // scan starts there — which also keeps slow optical-pumping drift from
    // masquerading as the peak.
    let d_omega = 2.0 * PI / span;
    let k_max = n / 2;
    let rough_omegas: Vec<f64> = (2..=k_max).map(|k| k as f64 * d_omega).collect();
    let rough = dft_amplitudes(times, &centered, &rough_omegas);
    let (rough_idx, rough_amp) = rough
        .iter()
        .enumerate()
        .fold((0, 0.0), |best, (i, &a)| if a > best.1 { (i, a) } else { best });
    if rough_amp < 1e-9 * scale * n as f64 {
        return Err(BeatsError::FlatTrace);
    }
    let omega_rough = rough_omegas[rough_idx];

    // Detrend: subtract the running mean over one estimated period, then
    // drop the half-window at each edge where the mean is truncated.
    let period_samples = ((2.0 * PI / omega_rough) / dt).round() as usize;
    let half = (period_samples / 2).clamp(1, n / 4);
    let mut detrended = Vec::with_capacity(n);
    for i in 0..n {
        let a = i.saturating_sub(half);
        let b = (i + half + 1).min(n);
        let local = centered[a..b].iter().sum::<f64>() / (b - a) as f64;
        detrended.push(centered[i] - local);
    }
    let interior_times = &times[half..n - half];
    let interior = &detrended[half..n - half];

    // Zoomed scan ± 1.5 native bins around the rough peak, then a parabolic
    // vertex through the best three points.
    let zoom_lo = (omega_rough - 1.5 * d_omega).max(0.5 * d_omega);
    let zoom_hi = omega_rough + 1.5 * d_omega;
    let zoom_n = 129usize;
    let zoom_step = (zoom_hi - zoom_lo) / (zoom_n - 1) as f64;
    let zoom_omegas: Vec<f64> = (0..zoom_n).map(|i| zoom_lo + i as f64 * zoom_step).collect();
    let zoom = dft_amplitudes(interior_times, interior, &zoom_omegas);
    let (zi, _) = zoom
        .iter()
        .enumerate()
        .fold((0, 0.0), |best, (i, &a)| if a > best.1 { (i, a) } else { best});
    let zi = zi.clamp(1, zoom_n - 2);
    let (am, a0, ap) = (zoom[zi - 1], zoom[zi], zoom[zi + 1]);
    let denom = am - 2.0 * a0 + ap;
    let offset = if denom.abs() > 0.0 {
        (0.5 * (am - ap) / denom).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    Ok(zoom_omegas[zi] + offset * zoom_step)
}

/// Build a normalized pure initial state: an atomic superposition
/// amp_minus·|b₋₁⟩ + amp_plus·|b₊₁⟩ with both cavity modes in (truncated)
/// coherent states — the analytic empty-cavity field the drive sustains.
pub fn superposition_with_steady_field(
    basis: &Arc<CompositeBasis>,
    amp_minus: C,
    amp_plus: C,
    params: &SystemParams,
) -> Result<DensityMatrix, BeatsError> {
    let denom = params.kappa * params.kappa + params.xi_b * params.xi_b;
    if denom <= 0.0 {
        return Err(BeatsError::InvalidTrace(
            "empty-cavity field undefined for kappa = xi_b = 0".into(),
        ));
    }
    let alpha1 = C::new(params.drive * params.kappa / denom, 0.0);
    let alpha2 = C::new(-params.drive * params.xi_b / denom, 0.0);
    let coherent = |alpha: C, n_max: usize| -> Vec<C> {
        // truncated coherent amplitudes α^n/√(n!), normalized after cutoff
        let mut amps = Vec::with_capacity(n_max + 1);
        let mut cur = C::new(1.0, 0.0);
        for n in 0..=n_max {
            if n > 0 {
                cur = cur * alpha / C::new((n as f64).sqrt(), 0.0);
            }
            amps.push(cur);
        }
        let norm: f64 = amps.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        amps.into_iter().map(|z| z / norm).collect()
    };
    let f1 = coherent(alpha1, basis.n1_max());
    let f2 = coherent(alpha2, basis.n2_max());
    let d = basis.dim();
    let mut psi = vec![C::new(0.0, 0.0); d];
    for (level, amp) in [(Level::BM1, amp_minus), (Level::BP1, amp_plus)] {
        for (n1, c1) in f1.iter().enumerate() {
            for (n2, c2) in f2.iter().enumerate() {
                let idx = basis.index(level, n1, n2).map_err(LiouvilleError::from)?;
                psi[idx] = amp * c1 * c2;
            }
        }
    }
    DensityMatrix::from_pure_vector(&psi, basis).map_err(BeatsError::from)
}

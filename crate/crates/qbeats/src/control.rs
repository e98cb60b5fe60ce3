//! Conditional control of the beat qubit: weak measurements, probabilistic
//! error correction, and scheduled feedback on the full cavity model.
//!
//! The ground-state pair (b₋₁, b₊₁) behind the quantum beats is treated as a
//! qubit, |0⟩ ≡ |b₋₁⟩ and |1⟩ ≡ |b₊₁⟩. Two engines operate on it:
//!
//! * an exact 2×2 engine — generalized measurement operators M_a = √p |1⟩⟨1|
//!   and M_b = 1 − (1 − √(1−p))|1⟩⟨1|, partial collapse on a null outcome,
//!   and the measure → swap → measure → swap protocol that restores the
//!   pre-measurement state with probability 1 − p;
//! * the full cavity model, where the same operations appear as scheduled
//!   events during conditional evolution: drive changes, instantaneous
//!   atomic unitaries (qubit swap, shelving to dark levels, superposition
//!   preparation), and weak ionization with Kraus operators acting on
//!   |b₊₁⟩ only.
//!
//! Shelving swaps the qubit amplitudes onto the dark pair (s₋₁, s₊₁) while
//! the drive is off; the beat phase is frozen, the cavity field rings down
//! at 2κ, and the beats resume with the stored phase when the amplitudes are
//! swapped back. Pulses are modeled as instantaneous ideal unitaries and
//! ionization as transfer to a dark sink level, so outcome branches stay in
//! one Hilbert space and can be averaged exactly.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;
use thiserror::Error;

use crate::beats::{
    self, BeatsError, CorrelationTrace, Normalization, TraceMetadata,
};
use crate::hilbert::{mode_number, CompositeBasis, HilbertError, Level, Mode};
use crate::liouville::{DensityMatrix, Generator, LiouvilleError, SystemParams};

type C = Complex64;

/// Amplitude-normalization tolerance on qubit states.
const NORM_TOL: f64 = 1e-12;
/// Branches below this weight are dropped from schedule runs.
const BRANCH_EPS: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("detection strength must lie in [0, 1], got {0}")]
    InvalidStrength(f64),
    #[error("qubit amplitudes must be normalized: |α0|² + |α1|² = {0}")]
    NotNormalized(f64),
    #[error("the null-outcome branch has zero probability; its state is undefined")]
    EmptyNullBranch,
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("schedule requires atomic level {0}, which the basis does not include")]
    MissingLevel(&'static str),
    #[error(transparent)]
    Liouville(#[from] LiouvilleError),
    #[error(transparent)]
    Beats(#[from] BeatsError),
    #[error(transparent)]
    Hilbert(#[from] HilbertError),
}

// ---------------------------------------------------------------------------
// Exact qubit engine
// ---------------------------------------------------------------------------

/// Pure state of the beat qubit, α0|0⟩ + α1|1⟩ with |0⟩ ≡ |b₋₁⟩, |1⟩ ≡ |b₊₁⟩.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QubitState {
    alpha0: C,
    alpha1: C,
}

impl QubitState {
    /// Build from already-normalized amplitudes (|α0|² + |α1|² = 1 within
    /// 1e-12).
    pub fn new(alpha0: C, alpha1: C) -> Result<Self, ControlError> {
        let n = alpha0.norm_sqr() + alpha1.norm_sqr();
        if !n.is_finite() || (n - 1.0).abs() > NORM_TOL {
            return Err(ControlError::NotNormalized(n));
        }
        Ok(QubitState { alpha0, alpha1 })
    }

    /// Build from arbitrary non-zero amplitudes, normalizing them.
    pub fn normalized(alpha0: C, alpha1: C) -> Result<Self, ControlError> {
        let n = (alpha0.norm_sqr() + alpha1.norm_sqr()).sqrt();
        if !n.is_finite() || n < 1e-150 {
            return Err(ControlError::NotNormalized(n * n));
        }
        Ok(QubitState {
            alpha0: alpha0 / n,
            alpha1: alpha1 / n,
        })
    }

    /// The equal superposition (|0⟩ + |1⟩)/√2 a photon detection prepares.
    pub fn equal_superposition() -> Self {
        let r = C::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        QubitState {
            alpha0: r,
            alpha1: r,
        }
    }

    pub fn alpha0(&self) -> C {
        self.alpha0
    }

    pub fn alpha1(&self) -> C {
        self.alpha1
    }

    /// Amplitudes exchanged: the action of the qubit swap pulse.
    pub fn swapped(&self) -> Self {
        QubitState {
            alpha0: self.alpha1,
            alpha1: self.alpha0,
        }
    }

    /// |⟨self|other⟩|².
    pub fn fidelity(&self, other: &QubitState) -> f64 {
        (self.alpha0.conj() * other.alpha0 + self.alpha1.conj() * other.alpha1).norm_sqr()
    }

    /// Density matrix |ψ⟩⟨ψ| of this state.
    pub fn projector(&self) -> Array2<C> {
        let v = [self.alpha0, self.alpha1];
        let mut m = Array2::zeros((2, 2));
        for r in 0..2 {
            for c in 0..2 {
                m[[r, c]] = v[r] * v[c].conj();
            }
        }
        m
    }
}

/// The two generalized measurement operators of a weak detection with
/// strength p: M_a = √p |1⟩⟨1| (detection) and M_b = 1 − (1 − √(1−p))|1⟩⟨1|
/// (null result). They satisfy M_a†M_a + M_b†M_b = 1 exactly.
#[derive(Debug, Clone)]
pub struct MeasurementOps {
    p: f64,
    m_a: Array2<C>,
    m_b: Array2<C>,
}

impl MeasurementOps {
    pub fn strength(&self) -> f64 {
        self.p
    }

    pub fn detection(&self) -> &Array2<C> {
        &self.m_a
    }

    pub fn null_result(&self) -> &Array2<C> {
        &self.m_b
    }
}

fn check_strength(p: f64) -> Result<(), ControlError> {
    if !p.is_finite() || !(0.0..=1.0).contains(&p) {
        return Err(ControlError::InvalidStrength(p));
    }
    Ok(())
}

/// Build the weak-measurement operator pair for detection strength p.
pub fn measurement_ops(p: f64) -> Result<MeasurementOps, ControlError> {
    check_strength(p)?;
    let mut m_a = Array2::zeros((2, 2));
    m_a[[1, 1]] = C::new(p.sqrt(), 0.0);
    let mut m_b = Array2::eye(2);
    m_b[[1, 1]] = C::new((1.0 - p).sqrt(), 0.0);
    Ok(MeasurementOps { p, m_a, m_b })
}

/// Apply one weak measurement to a pure qubit state. Returns the detection
/// probability p·|α1|², the null probability, and the partially collapsed
/// state after a null outcome, (α0|0⟩ + α1√(1−p)|1⟩)/√(1 − p|α1|²).
pub fn partial_measure(
    state: &QubitState,
    p: f64,
) -> Result<(f64, f64, QubitState), ControlError> {
    check_strength(p)?;
    let p_yes = p * state.alpha1.norm_sqr();
    let p_no = 1.0 - p_yes;
    if p_no <= 0.0 {
        return Err(ControlError::EmptyNullBranch);
    }
    let scale = p_no.sqrt();
    let post_no = QubitState {
        alpha0: state.alpha0 / scale,
        alpha1: state.alpha1 * (1.0 - p).sqrt() / scale,
    };
    Ok((p_yes, p_no, post_no))
}

/// Outcome of one weak measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasurementOutcome {
    Yes,
    No,
}

/// One outcome branch of a measurement protocol.
#[derive(Debug, Clone)]
pub struct ProtocolBranch {
    /// Sequence of detector readings that selects this branch.
    pub record: Vec<MeasurementOutcome>,
    pub probability: f64,
    pub post: QubitState,
}

/// All branches of a measurement protocol plus their convex average.
#[derive(Debug, Clone)]
pub struct ProtocolOutcome {
    /// Zero-probability branches are omitted.
    pub branches: Vec<ProtocolBranch>,
    /// Probability-weighted 2×2 density matrix over all branches — the
    /// physical state when the detector record is not consulted.
    pub averaged: Array2<C>,
    /// Whether the detector record is treated as available. The branch list
    /// is computed either way; when false, only `averaged` is physically
    /// meaningful.
    pub outcomes_known: bool,
}

/// Run the probabilistic recovery protocol: weak measurement, amplitude
/// swap, weak measurement, amplitude swap. A double null record leaves the
/// qubit exactly in its input state with probability 1 − p; any detection
/// leaves it in |1⟩ (the protocol stops there, so no trailing swap is
/// applied on detected branches).
pub fn qec_protocol(
    state: &QubitState,
    p: f64,
    outcomes_known: bool,
) -> Result<ProtocolOutcome, ControlError> {
    check_strength(p)?;
    let one = QubitState {
        alpha0: C::new(0.0, 0.0),
        alpha1: C::new(1.0, 0.0),
    };
    let mut branches = Vec::new();

    let p_yes1 = p * state.alpha1.norm_sqr();
    if p_yes1 > 0.0 {
        branches.push(ProtocolBranch {
            record: vec![MeasurementOutcome::Yes],
            probability: p_yes1,
            post: one,
        });
    }
    let p_no1 = 1.0 - p_yes1;
    if p_no1 > 0.0 {
        let (_, _, after_first) = partial_measure(state, p)?;
        let swapped = after_first.swapped();
        let p_yes2 = p * swapped.alpha1.norm_sqr();
        if p_yes2 > 0.0 {
            branches.push(ProtocolBranch {
                record: vec![MeasurementOutcome::No, MeasurementOutcome::Yes],
                probability: p_no1 * p_yes2,
                post: one,
            });
        }
        let p_no2 = 1.0 - p_yes2;
        if p_no2 > 0.0 {
            let (_, _, after_second) = partial_measure(&swapped, p)?;
            branches.push(ProtocolBranch {
                record: vec![MeasurementOutcome::No, MeasurementOutcome::No],
                probability: p_no1 * p_no2,
                post: after_second.swapped(),
            });
        }
    }

    let mut averaged = Array2::zeros((2, 2));
    for b in &branches {
        averaged += &(b.post.projector() * C::new(b.probability, 0.0));
    }
    Ok(ProtocolOutcome {
        branches,
        averaged,
        outcomes_known,
    })
}

// ---------------------------------------------------------------------------
// Atomic pulse unitaries on the full space
// ---------------------------------------------------------------------------

/// Unitary acting as the given 2×2 block on span{b₋₁, b₊₁} within every
/// photon sector, and as the identity elsewhere.
fn qubit_block_unitary(basis: &Arc<CompositeBasis>, block: &Array2<C>) -> Array2<C> {
    let mut u = Array2::eye(basis.dim());
    for n1 in 0..=basis.n1_max() {
        for n2 in 0..=basis.n2_max() {
            let i = basis.index(Level::BM1, n1, n2).expect("core level");
            let j = basis.index(Level::BP1, n1, n2).expect("core level");
            u[[i, i]] = block[[0, 0]];
            u[[i, j]] = block[[0, 1]];
            u[[j, i]] = block[[1, 0]];
            u[[j, j]] = block[[1, 1]];
        }
    }
    u
}

/// Exchange of the qubit amplitudes b₋₁ ↔ b₊₁ (an involution).
fn qubit_swap_unitary(basis: &Arc<CompositeBasis>) -> Array2<C> {
    let mut x = Array2::zeros((2, 2));
    x[[0, 1]] = C::new(1.0, 0.0);
    x[[1, 0]] = C::new(1.0, 0.0);
    qubit_block_unitary(basis, &x)
}

/// Phase-preserving shelving swap b₋₁ ↔ s₋₁, b₊₁ ↔ s₊₁ (an involution).
fn shelf_swap_unitary(basis: &Arc<CompositeBasis>) -> Result<Array2<C>, ControlError> {
    if !basis.levels().contains(&Level::SM1) || !basis.levels().contains(&Level::SP1) {
        return Err(ControlError::MissingLevel("s±1"));
    }
    let mut u = Array2::eye(basis.dim());
    for n1 in 0..=basis.n1_max() {
        for n2 in 0..=basis.n2_max() {
            for (b, s) in [(Level::BM1, Level::SM1), (Level::BP1, Level::SP1)] {
                let i = basis.index(b, n1, n2)?;
                let j = basis.index(s, n1, n2)?;
                u[[i, i]] = C::new(0.0, 0.0);
                u[[j, j]] = C::new(0.0, 0.0);
                u[[i, j]] = C::new(1.0, 0.0);
                u[[j, i]] = C::new(1.0, 0.0);
            }
        }
    }
    Ok(u)
}

/// Unitary that maps the equal superposition onto `target` within the qubit
/// span: U = t·v† + t⊥·v⊥† with v the equal superposition. The identity when
/// the target is the equal superposition itself.
fn prepare_unitary(basis: &Arc<CompositeBasis>, target: &QubitState) -> Array2<C> {
    let (a0, a1) = (target.alpha0, target.alpha1);
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let mut block = Array2::zeros((2, 2));
    block[[0, 0]] = (a0 + a1.conj()) * r;
    block[[0, 1]] = (a0 - a1.conj()) * r;
    block[[1, 0]] = (a1 - a0.conj()) * r;
    block[[1, 1]] = (a1 + a0.conj()) * r;
    qubit_block_unitary(basis, &block)
}

/// Rotate the qubit span of a post-detection state so the equal
/// superposition becomes `target`; identity on all other levels.
pub fn prepare_superposition(
    rho_clicked: &DensityMatrix,
    target: &QubitState,
) -> Result<DensityMatrix, ControlError> {
    let basis = rho_clicked.basis().clone();
    let u = prepare_unitary(&basis, target);
    let m = u.dot(rho_clicked.matrix()).dot(&u.mapv(|z| z.conj()).reversed_axes());
    Ok(DensityMatrix::from_matrix(m, basis)?)
}

// ---------------------------------------------------------------------------
// Schedules
// ---------------------------------------------------------------------------

/// Named instantaneous atomic unitaries available to schedules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pulse {
    /// Exchange the qubit amplitudes b₋₁ ↔ b₊₁.
    SwapQubit,
    /// Shelve/unshelve: swap b±1 with the dark pair s±1.
    SwapShelf,
    /// Rotate the equal superposition onto the given target state.
    Prepare(QubitState),
}

/// What happens at a scheduled instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EventKind {
    /// Replace the drive amplitude E for the rest of the run.
    DriveSet(f64),
    /// Apply an instantaneous atomic unitary.
    Pulse(Pulse),
    /// Weak ionization of |b₊₁⟩ with strength p: Kraus pair
    /// K_yes = √p |ion⟩⟨b₊₁| ⊗ 1 and K_no = (1 − (1−√(1−p))|b₊₁⟩⟨b₊₁|) ⊗ 1.
    WeakIonization(f64),
    /// Condition on a photon detection in the undriven mode (τ = 0 only).
    ClickCondition,
}

/// A scheduled event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
}

impl Event {
    pub fn new(time: f64, kind: EventKind) -> Self {
        Event { time, kind }
    }
}

/// A validated, time-ordered list of events.
#[derive(Debug, Clone, Default)]
pub struct Schedule {
    events: Vec<Event>,
}

impl Schedule {
    /// Validate event times (finite, ≥ 0, nondecreasing), payloads, and the
    /// click rule: at most one click condition, and only at time 0.
    pub fn new(events: Vec<Event>) -> Result<Self, ControlError> {
        let mut clicks = 0usize;
        let mut last = 0.0f64;
        for (i, ev) in events.iter().enumerate() {
            if !ev.time.is_finite() || ev.time < 0.0 {
                return Err(ControlError::InvalidSchedule(format!(
                    "event {i} has invalid time {}",
                    ev.time
                )));
            }
            if ev.time < last {
                return Err(ControlError::InvalidSchedule(format!(
                    "event {i} at t={} comes after an event at t={last}",
                    ev.time
                )));
            }
            last = ev.time;
            match ev.kind {
                EventKind::DriveSet(e) => {
                    if !e.is_finite() || e < 0.0 {
                        return Err(ControlError::InvalidSchedule(format!(
                            "event {i}: drive amplitude {e} is invalid"
                        )));
                    }
                }
                EventKind::WeakIonization(p) => check_strength(p)?,
                EventKind::ClickCondition => {
                    clicks += 1;
                    if ev.time != 0.0 {
                        return Err(ControlError::InvalidSchedule(format!(
                            "event {i}: click condition must sit at t=0, got t={}",
                            ev.time
                        )));
                    }
                }
                EventKind::Pulse(_) => {}
            }
        }
        if clicks > 1 {
            return Err(ControlError::InvalidSchedule(
                "at most one click condition is allowed".into(),
            ));
        }
        Ok(Schedule { events })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn has_click(&self) -> bool {
        self.events
            .iter()
            .any(|e| e.kind == EventKind::ClickCondition)
    }

    /// Check that every event's levels exist in the basis.
    pub fn validate_for_basis(&self, basis: &CompositeBasis) -> Result<(), ControlError> {
        for ev in &self.events {
            match ev.kind {
                EventKind::Pulse(Pulse::SwapShelf) => {
                    if !basis.levels().contains(&Level::SM1)
                        || !basis.levels().contains(&Level::SP1)
                    {
                        return Err(ControlError::MissingLevel("s±1"));
                    }
                }
                EventKind::WeakIonization(_) => {
                    if !basis.levels().contains(&Level::Ion) {
                        return Err(ControlError::MissingLevel("ion"));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Scheduled conditional evolution on the full model
// ---------------------------------------------------------------------------

/// One outcome branch of a schedule run.
#[derive(Debug)]
pub struct ScheduleBranch {
    /// Ionization detector readings that select this branch, in event order.
    pub record: Vec<MeasurementOutcome>,
    /// Branch probability.
    pub weight: f64,
    /// Normalized state at the end of the run.
    pub final_state: DensityMatrix,
}

/// Result of a schedule run: the outcome-averaged conditional trace and the
/// surviving branches.
#[derive(Debug)]
pub struct ScheduleRun {
    pub trace: CorrelationTrace,
    pub branches: Vec<ScheduleBranch>,
}

struct LiveBranch {
    record: Vec<MeasurementOutcome>,
    matrix: Array2<C>,
}

/// Expectation of a Hermitian operator against an (possibly sub-normalized)
/// dense state.
fn expectation(op: &Array2<C>, m: &Array2<C>) -> f64 {
    let d = m.nrows();
    let mut acc = C::new(0.0, 0.0);
    for r in 0..d {
        for c in 0..d {
            acc += op[[r, c]] * m[[c, r]];
        }
    }
    acc.re
}

/// Embed a state into a larger basis sharing the same photon cutoffs; added
/// levels carry zero population.
fn embed_state(
    rho: &DensityMatrix,
    target: &Arc<CompositeBasis>,
) -> Result<DensityMatrix, ControlError> {
    let src = rho.basis();
    if src.n1_max() != target.n1_max() || src.n2_max() != target.n2_max() {
        return Err(ControlError::InvalidSchedule(
            "cannot embed a state across different photon cutoffs".into(),
        ));
    }
    let mut m = Array2::zeros((target.dim(), target.dim()));
    for (r_src, r_tgt) in embed_index_map(src, target)?.iter().enumerate() {
        for (c_src, c_tgt) in embed_index_map(src, target)?.iter().enumerate() {
            m[[*r_tgt, *c_tgt]] = rho.matrix()[[r_src, c_src]];
        }
    }
    Ok(DensityMatrix::from_matrix(m, target.clone())?)
}

fn embed_index_map(
    src: &Arc<CompositeBasis>,
    target: &Arc<CompositeBasis>,
) -> Result<Vec<usize>, ControlError> {
    let mut map = Vec::with_capacity(src.dim());
    for idx in 0..src.dim() {
        let (level, n1, n2) = src.state(idx)?;
        map.push(target.index(level, n1, n2)?);
    }
    Ok(map)
}

/// Pre-event state for a schedule run started from equilibrium: the steady
/// state of the core dynamics, embedded into `basis` when it carries extra
/// dark levels (which would otherwise make the steady state degenerate).
fn equilibrium_state(
    params: &SystemParams,
    basis: &Arc<CompositeBasis>,
) -> Result<DensityMatrix, ControlError> {
    let core_only = basis
        .levels()
        .iter()
        .all(|l| !matches!(l, Level::SM1 | Level::SP1 | Level::Ion));
    if core_only {
        let gen = Generator::new(params, basis)?;
        return Ok(gen.steady_state()?);
    }
    let core = Arc::new(CompositeBasis::core(basis.n1_max(), basis.n2_max()));
    let rho = Generator::new(params, &core)?.steady_state()?;
    embed_state(&rho, basis)
}

/// Run a schedule from the steady state of the driven system.
pub fn run_conditional_schedule(
    params: &SystemParams,
    basis: &Arc<CompositeBasis>,
    schedule: &Schedule,
    tau_grid: &[f64],
) -> Result<ScheduleRun, ControlError> {
    let rho = equilibrium_state(params, basis)?;
    run_conditional_schedule_from(&rho, params, basis, schedule, tau_grid)
}

/// Run a schedule from an explicit pre-event state (a quasi-steady transit
/// state, an engineered superposition, …). The trace is the undriven-mode
/// intensity of the outcome-averaged state; when the schedule conditions on
/// a click, it is normalized by the pre-click intensity, which makes it the
/// g²(τ) the schedule modifies.
pub fn run_conditional_schedule_from(
    initial: &DensityMatrix,
    params: &SystemParams,
    basis: &Arc<CompositeBasis>,
    schedule: &Schedule,
    tau_grid: &[f64],
) -> Result<ScheduleRun, ControlError> {
    schedule.validate_for_basis(basis)?;
    if initial.basis().as_ref() != basis.as_ref() {
        return Err(ControlError::Liouville(LiouvilleError::BasisMismatch(
            initial.dim(),
            basis.dim(),
        )));
    }
    let n = tau_grid.len();
    if n < 2 || tau_grid[0] != 0.0 {
        return Err(ControlError::InvalidSchedule(
            "the delay grid must start at 0 and hold at least two points".into(),
        ));
    }
    let dt = tau_grid[1] - tau_grid[0];

    // Snap events to grid indices; simultaneous events keep schedule order.
    let mut by_index: BTreeMap<usize, Vec<EventKind>> = BTreeMap::new();
    for ev in schedule.events() {
        let idx = (ev.time / dt).round() as usize;
        if idx >= n {
            return Err(ControlError::InvalidSchedule(format!(
                "event at t={} lies beyond the trace window",
                ev.time
            )));
        }
        by_index.entry(idx).or_default().push(ev.kind);
    }

    let mut gen = Generator::new(params, basis)?;
    let n2_op = mode_number(basis, Mode::Undriven);
    let normalization = if schedule.has_click() {
        let i_pre = beats::mean_photon(initial, Mode::Undriven)?;
        if i_pre <= 0.0 {
            return Err(ControlError::Beats(BeatsError::ZeroIntensity));
        }
        i_pre
    } else {
        1.0
    };

    let mut branches = vec![LiveBranch {
        record: Vec::new(),
        matrix: initial.matrix().clone(),
    }];
    let apply_events = |branches: &mut Vec<LiveBranch>,
                            gen: &mut Generator,
                            kinds: &[EventKind]|
     -> Result<(), ControlError> {
        for kind in kinds {
            match *kind {
                EventKind::ClickCondition => {
                    for b in branches.iter_mut() {
                        let state =
                            DensityMatrix::from_matrix(b.matrix.clone(), gen.basis().clone())?;
                        b.matrix = beats::conditional_state_after_click(&state)?
                            .into_matrix();
                    }
                }
                EventKind::DriveSet(e) => {
                    *gen = gen.with_drive(e)?;
                }
                EventKind::Pulse(pulse) => {
                    let u = match pulse {
                        Pulse::SwapQubit => qubit_swap_unitary(gen.basis()),
                        Pulse::SwapShelf => shelf_swap_unitary(gen.basis())?,
                        Pulse::Prepare(target) => prepare_unitary(gen.basis(), &target),
                    };
                    let u_dag = u.mapv(|z| z.conj()).reversed_axes();
                    for b in branches.iter_mut() {
                        b.matrix = u.dot(&b.matrix).dot(&u_dag);
                    }
                }
                EventKind::WeakIonization(p) => {
                    let (k_yes, k_no) = ionization_kraus(gen.basis(), p)?;
                    let ky_dag = k_yes.mapv(|z| z.conj()).reversed_axes();
                    let kn_dag = k_no.mapv(|z| z.conj()).reversed_axes();
                    let mut next = Vec::with_capacity(branches.len() * 2);
                    for b in branches.drain(..) {
                        let yes = k_yes.dot(&b.matrix).dot(&ky_dag);
                        let no = k_no.dot(&b.matrix).dot(&kn_dag);
                        for (outcome, m) in [
                            (MeasurementOutcome::Yes, yes),
                            (MeasurementOutcome::No, no),
                        ] {
                            let w = m.diag().iter().map(|z| z.re).sum::<f64>();
                            if w > BRANCH_EPS {
                                let mut record = b.record.clone();
                                record.push(outcome);
                                next.push(LiveBranch { record, matrix: m });
                            }
                        }
                    }
                    *branches = next;
                }
            }
        }
        Ok(())
    };

    // Events at τ = 0 fire before the first readout.
    if let Some(kinds) = by_index.get(&0).cloned() {
        apply_events(&mut branches, &mut gen, &kinds)?;
    }

    let mut values = vec![0.0f64; n];
    values[0] = branches
        .iter()
        .map(|b| expectation(n2_op.matrix(), &b.matrix))
        .sum::<f64>()
        / normalization;
    let post_event_state = {
        let total = branches
            .iter()
            .fold(Array2::<C>::zeros((basis.dim(), basis.dim())), |acc, b| {
                acc + &b.matrix
            });
        DensityMatrix::from_matrix(total, basis.clone())?
    };

    let mut seg_start = 0usize;
    let boundaries: Vec<usize> = by_index
        .keys()
        .copied()
        .filter(|&i| i > 0)
        .chain(std::iter::once(n - 1))
        .collect();
    for &stop in &boundaries {
        if stop > seg_start {
            let seg_grid = &tau_grid[seg_start..=stop];
            let results: Vec<(Vec<C>, Array2<C>)> = branches
                .par_iter()
                .map(|b| {
                    gen.march(&b.matrix, seg_grid, None, &[n2_op.matrix()], false)
                        .map(|r| (r.readouts[0].clone(), r.final_matrix))
                })
                .collect::<Result<_, _>>()?;
            for (b, (readout, final_m)) in branches.iter_mut().zip(results) {
                for (k, z) in readout.iter().enumerate() {
                    if k > 0 {
                        values[seg_start + k] += z.re / normalization;
                    }
                }
                b.matrix = final_m;
            }
        }
        if stop < n - 1 {
            if let Some(kinds) = by_index.get(&stop).cloned() {
                apply_events(&mut branches, &mut gen, &kinds)?;
            }
        }
        seg_start = stop;
    }

    let tag = if schedule.has_click() {
        Normalization::NormalizedG2
    } else {
        Normalization::ConditionalIntensity
    };
    let metadata = TraceMetadata {
        params: params.clone(),
        seed: None,
        qubit_populations: beats::qubit_populations(&post_event_state).ok(),
    };
    let trace = CorrelationTrace::new(tau_grid.to_vec(), values, tag, metadata)?;

    let mut out = Vec::with_capacity(branches.len());
    for b in branches {
        let w = b.matrix.diag().iter().map(|z| z.re).sum::<f64>();
        if w <= BRANCH_EPS {
            continue;
        }
        let normalized = b.matrix.mapv(|z| z / C::new(w, 0.0));
        out.push(ScheduleBranch {
            record: b.record,
            weight: w,
            final_state: DensityMatrix::from_matrix(normalized, basis.clone())?,
        });
    }
    Ok(ScheduleRun {
        trace,
        branches: out,
    })
}

/// Kraus pair of the weak ionization of |b₊₁⟩ on the full space.
fn ionization_kraus(
    basis: &Arc<CompositeBasis>,
    p: f64,
) -> Result<(Array2<C>, Array2<C>), ControlError> {
    check_strength(p)?;
    if !basis.levels().contains(&Level::Ion) {
        return Err(ControlError::MissingLevel("ion"));
    }
    let d = basis.dim();
    let mut k_yes = Array2::zeros((d, d));
    let mut k_no = Array2::eye(d);
    let sqrt_p = C::new(p.sqrt(), 0.0);
    let keep = C::new((1.0 - p).sqrt(), 0.0);
    for n1 in 0..=basis.n1_max() {
        for n2 in 0..=basis.n2_max() {
            let b = basis.index(Level::BP1, n1, n2)?;
            let ion = basis.index(Level::Ion, n1, n2)?;
            k_yes[[ion, b]] = sqrt_p;
            k_no[[b, b]] = keep;
        }
    }
    Ok((k_yes, k_no))
}

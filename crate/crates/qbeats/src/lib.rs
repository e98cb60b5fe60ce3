//! Simulator of a weakly driven two-mode optical cavity containing a single
//! multilevel atom.
//!
//! One circularly polarized cavity mode (V, "driven") is pumped by a weak
//! coherent field; spontaneous emission and cavity decay condition the state
//! of the atom on photon detections in the orthogonally polarized mode
//! (H, "undriven").  A detection projects the atomic ground manifold onto a
//! Zeeman superposition whose Larmor precession shows up as quantum beats in
//! the delayed coincidence rate g²(τ).
//!
//! Module map:
//! - [`hilbert`]: composite basis (atom ⊗ two Fock factors) and elementary
//!   operators.
//! - [`liouville`]: Hamiltonian and Lindblad generator, fixed-step propagation,
//!   steady state.
//! - [`beats`]: regression-theorem correlation functions and fringe metrics.
//! - [`control`]: feedback (shelving) and probabilistic error-correction
//!   protocols, both on an exact qubit engine and embedded in the cavity model.
//! - [`beam`]: Monte Carlo ensemble of atoms transiting the mode from a slow
//!   atomic beam.
//! - [`cli`]: config parsing and run orchestration for the `qbeats` binary.

pub mod beam;
pub mod beats;
pub mod cli;
pub mod control;
pub mod hilbert;
pub mod liouville;

pub use hilbert::{CompositeBasis, Level, Mode, Operator};
pub use liouville::{DensityMatrix, Generator, SystemParams};

//! Composite Hilbert space of one multilevel atom and two truncated cavity
//! modes, plus the elementary operators everything else is built from.
//!
//! The atom has six core levels: three ground Zeeman sublevels b₋₁, b₀, b₊₁
//! and three excited sublevels e₋₁, e₀, e₊₁.  Two optional shelf levels s±1
//! (dark storage for the feedback protocol) and one ionized level (dark sink
//! for weak ionization measurements) can be appended; they couple to nothing.
//!
//! A composite basis state is |level⟩ ⊗ |n₁⟩ ⊗ |n₂⟩ with n₁ photons in the
//! driven mode and n₂ in the undriven mode.  Flat indexing is fixed: atomic
//! index slowest, n₁ in the middle, n₂ fastest, so that dumps and fixtures
//! are byte-stable.

use std::fmt;
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use thiserror::Error;

/// Atomic level labels. The m-quantum number is encoded in the name:
/// `BM1` is b₋₁, `EP1` is e₊₁, and so on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Level {
    BM1,
    B0,
    BP1,
    EM1,
    E0,
    EP1,
    SM1,
    SP1,
    Ion,
}

/// Kind of an atomic level; shelf and ionized levels are dark (no couplings,
/// no decay channels).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LevelKind {
    Ground,
    Excited,
    Shelf,
    Ionized,
}

impl Level {
    /// The six always-present levels.
    pub const CORE: [Level; 6] = [
        Level::BM1,
        Level::B0,
        Level::BP1,
        Level::EM1,
        Level::E0,
        Level::EP1,
    ];

    pub fn kind(self) -> LevelKind {
        match self {
            Level::BM1 | Level::B0 | Level::BP1 => LevelKind::Ground,
            Level::EM1 | Level::E0 | Level::EP1 => LevelKind::Excited,
            Level::SM1 | Level::SP1 => LevelKind::Shelf,
            Level::Ion => LevelKind::Ionized,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Level::BM1 => "b-1",
            Level::B0 => "b0",
            Level::BP1 => "b+1",
            Level::EM1 => "e-1",
            Level::E0 => "e0",
            Level::EP1 => "e+1",
            Level::SM1 => "s-1",
            Level::SP1 => "s+1",
            Level::Ion => "ion",
        }
    }

    pub fn from_label(s: &str) -> Option<Level> {
        Some(match s {
            "b-1" => Level::BM1,
            "b0" => Level::B0,
            "b+1" => Level::BP1,
            "e-1" => Level::EM1,
            "e0" => Level::E0,
            "e+1" => Level::EP1,
            "s-1" => Level::SM1,
            "s+1" => Level::SP1,
            "ion" => Level::Ion,
            _ => return None,
        })
    }

    /// Parity of the magnetic quantum number, used internally to split the
    /// evolution into invariant index sectors. Shelf levels inherit the parity
    /// of the qubit levels they store (m = ±1), and the ionized level inherits
    /// b₊₁'s, so every instantaneous control map is parity-diagonal too.
    pub(crate) fn m_parity(self) -> u8 {
        match self {
            Level::B0 | Level::E0 => 0,
            _ => 1,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Which cavity mode an operator addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// The coherently driven, V-polarized mode (a₁).
    Driven,
    /// The initially empty, H-polarized mode (a₂) whose output is detected.
    Undriven,
}

#[derive(Debug, Error, PartialEq)]
pub enum HilbertError {
    #[error("duplicate atomic level {0} in basis")]
    DuplicateLevel(&'static str),
    #[error("basis must contain at least one atomic level")]
    EmptyLevelList,
    #[error("photon truncations must satisfy n1_max >= 1 and n2_max >= 1, got ({0}, {1})")]
    BadTruncation(usize, usize),
    #[error("atomic level {0} is not part of this basis")]
    LevelNotInBasis(&'static str),
    #[error("state index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },
}

/// Ordered tensor-product basis |level⟩⊗|n₁⟩⊗|n₂⟩ with fixed flat indexing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompositeBasis {
    levels: Vec<Level>,
    n1_max: usize,
    n2_max: usize,
}

impl CompositeBasis {
    /// Build a basis from an explicit level list and Fock truncations.
    /// Flat index = (level_position · (n1_max+1) + n₁) · (n2_max+1) + n₂.
    pub fn new(levels: &[Level], n1_max: usize, n2_max: usize) -> Result<Self, HilbertError> {
        if levels.is_empty() {
            return Err(HilbertError::EmptyLevelList);
        }
        if n1_max < 1 || n2_max < 1 {
            return Err(HilbertError::BadTruncation(n1_max, n2_max));
        }
        for (i, l) in levels.iter().enumerate() {
            if levels[..i].contains(l) {
                return Err(HilbertError::DuplicateLevel(l.label()));
            }
        }
        Ok(CompositeBasis {
            levels: levels.to_vec(),
            n1_max,
            n2_max,
        })
    }

    /// The six core levels with the given truncations.
    pub fn core(n1_max: usize, n2_max: usize) -> Self {
        CompositeBasis::new(&Level::CORE, n1_max, n2_max).expect("core basis is always valid")
    }

    /// Core levels extended as requested: shelf levels s±1 and/or the ion sink.
    pub fn extended(n1_max: usize, n2_max: usize, shelf: bool, ion: bool) -> Self {
        let mut levels = Level::CORE.to_vec();
        if shelf {
            levels.push(Level::SM1);
            levels.push(Level::SP1);
        }
        if ion {
            levels.push(Level::Ion);
        }
        CompositeBasis::new(&levels, n1_max, n2_max).expect("extended basis is always valid")
    }

    /// Same levels, both photon truncations incremented by one. Used by the
    /// convergence helper: re-run an observable here and compare.
    pub fn incremented(&self) -> Self {
        CompositeBasis {
            levels: self.levels.clone(),
            n1_max: self.n1_max + 1,
            n2_max: self.n2_max + 1,
        }
    }

    /// Same levels, both photon truncations doubled.
    pub fn doubled(&self) -> Self {
        CompositeBasis {
            levels: self.levels.clone(),
            n1_max: self.n1_max * 2,
            n2_max: self.n2_max * 2,
        }
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn n1_max(&self) -> usize {
        self.n1_max
    }

    pub fn n2_max(&self) -> usize {
        self.n2_max
    }

    pub fn n1_dim(&self) -> usize {
        self.n1_max + 1
    }

    pub fn n2_dim(&self) -> usize {
        self.n2_max + 1
    }

    pub fn dim(&self) -> usize {
        self.levels.len() * self.n1_dim() * self.n2_dim()
    }

    pub fn contains(&self, level: Level) -> bool {
        self.levels.contains(&level)
    }

    pub fn level_position(&self, level: Level) -> Option<usize> {
        self.levels.iter().position(|&l| l == level)
    }

    /// Flat index of |level, n₁, n₂⟩.
    pub fn index(&self, level: Level, n1: usize, n2: usize) -> Result<usize, HilbertError> {
        let pos = self
            .level_position(level)
            .ok_or(HilbertError::LevelNotInBasis(level.label()))?;
        if n1 > self.n1_max || n2 > self.n2_max {
            return Err(HilbertError::IndexOutOfRange {
                index: n1.max(n2),
                dim: self.dim(),
            });
        }
        Ok((pos * self.n1_dim() + n1) * self.n2_dim() + n2)
    }

    /// Inverse of [`CompositeBasis::index`].
    pub fn state(&self, index: usize) -> Result<(Level, usize, usize), HilbertError> {
        if index >= self.dim() {
            return Err(HilbertError::IndexOutOfRange {
                index,
                dim: self.dim(),
            });
        }
        let n2 = index % self.n2_dim();
        let rest = index / self.n2_dim();
        let n1 = rest % self.n1_dim();
        let pos = rest / self.n1_dim();
        Ok((self.levels[pos], n1, n2))
    }

    /// Parity class of a flat basis state: (m-parity of the level + n₂) mod 2.
    /// Every generator term with ξ_b = 0 either preserves this on both sides
    /// of ρ or flips it on both sides, which the propagation engine exploits.
    pub(crate) fn state_parity(&self, index: usize) -> u8 {
        let (level, _n1, n2) = self.state(index).expect("index in range");
        (level.m_parity() + (n2 as u8 & 1)) & 1
    }
}

/// A dense operator on a [`CompositeBasis`]. Everything the model needs fits
/// comfortably at dim ≤ ~200, so operators stay dense; only the vectorized
/// generator (dim² side length) is ever treated sparsely.
#[derive(Debug, Clone)]
pub struct Operator {
    matrix: Array2<Complex64>,
    basis: Arc<CompositeBasis>,
    label: String,
}

impl Operator {
    pub fn new(matrix: Array2<Complex64>, basis: Arc<CompositeBasis>, label: &str) -> Self {
        assert_eq!(
            matrix.nrows(),
            basis.dim(),
            "operator matrix must be dim x dim"
        );
        assert_eq!(matrix.nrows(), matrix.ncols());
        Operator {
            matrix,
            basis,
            label: label.to_string(),
        }
    }

    pub fn zeros(basis: Arc<CompositeBasis>, label: &str) -> Self {
        let d = basis.dim();
        Operator::new(Array2::zeros((d, d)), basis, label)
    }

    pub fn identity(basis: Arc<CompositeBasis>) -> Self {
        let d = basis.dim();
        Operator::new(Array2::eye(d), basis, "1")
    }

    pub fn matrix(&self) -> &Array2<Complex64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> Array2<Complex64> {
        self.matrix
    }

    pub fn basis(&self) -> &Arc<CompositeBasis> {
        &self.basis
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Hermitian conjugate.
    pub fn dagger(&self) -> Operator {
        Operator {
            matrix: self.matrix.t().mapv(|z| z.conj()),
            basis: self.basis.clone(),
            label: format!("({})†", self.label),
        }
    }

    /// Operator product self · other.
    pub fn mul(&self, other: &Operator) -> Operator {
        assert_eq!(
            self.basis, other.basis,
            "operator product requires matching bases"
        );
        Operator {
            matrix: self.matrix.dot(&other.matrix),
            basis: self.basis.clone(),
            label: format!("{}·{}", self.label, other.label),
        }
    }

    /// self + scale · other.
    pub fn add_scaled(&self, other: &Operator, scale: Complex64) -> Operator {
        assert_eq!(self.basis, other.basis);
        Operator {
            matrix: &self.matrix + &other.matrix.mapv(|z| z * scale),
            basis: self.basis.clone(),
            label: format!("{}+{}", self.label, other.label),
        }
    }

    pub fn scale(&self, scale: Complex64) -> Operator {
        Operator {
            matrix: self.matrix.mapv(|z| z * scale),
            basis: self.basis.clone(),
            label: self.label.clone(),
        }
    }

    /// Expectation value Tr(O ρ) for a matrix ρ on the same basis.
    pub fn expectation(&self, rho: &Array2<Complex64>) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for i in 0..self.dim() {
            for k in 0..self.dim() {
                acc += self.matrix[[i, k]] * rho[[k, i]];
            }
        }
        acc
    }
}

/// Atomic transition operator σ_ij = |i⟩⟨j| ⊗ 1 ⊗ 1.
pub fn sigma(basis: &Arc<CompositeBasis>, i: Level, j: Level) -> Result<Operator, HilbertError> {
    let pi = basis
        .level_position(i)
        .ok_or(HilbertError::LevelNotInBasis(i.label()))?;
    let pj = basis
        .level_position(j)
        .ok_or(HilbertError::LevelNotInBasis(j.label()))?;
    let d = basis.dim();
    let block = basis.n1_dim() * basis.n2_dim();
    let mut m = Array2::zeros((d, d));
    for k in 0..block {
        m[[pi * block + k, pj * block + k]] = Complex64::new(1.0, 0.0);
    }
    Ok(Operator::new(
        m,
        basis.clone(),
        &format!("σ({},{})", i.label(), j.label()),
    ))
}

/// Truncated annihilation operator on one Fock factor, identity elsewhere:
/// ⟨n−1| a |n⟩ = √n for n ≤ n_max, zero above the truncation.
pub fn mode_annihilator(basis: &Arc<CompositeBasis>, which: Mode) -> Operator {
    let d = basis.dim();
    let mut m = Array2::zeros((d, d));
    for idx in 0..d {
        let (level, n1, n2) = basis.state(idx).expect("index in range");
        match which {
            Mode::Driven => {
                if n1 > 0 {
                    let target = basis.index(level, n1 - 1, n2).expect("valid state");
                    m[[target, idx]] = Complex64::new((n1 as f64).sqrt(), 0.0);
                }
            }
            Mode::Undriven => {
                if n2 > 0 {
                    let target = basis.index(level, n1, n2 - 1).expect("valid state");
                    m[[target, idx]] = Complex64::new((n2 as f64).sqrt(), 0.0);
                }
            }
        }
    }
    let label = match which {
        Mode::Driven => "a1",
        Mode::Undriven => "a2",
    };
    Operator::new(m, basis.clone(), label)
}

/// Photon number operator a†a of the selected mode, built directly as the
/// exact integer diagonal.
pub fn mode_number(basis: &Arc<CompositeBasis>, which: Mode) -> Operator {
    let d = basis.dim();
    let mut m = Array2::<Complex64>::zeros((d, d));
    for idx in 0..d {
        let (_, n1, n2) = basis.state(idx).expect("index in range");
        let n = match which {
            Mode::Driven => n1,
            Mode::Undriven => n2,
        };
        m[[idx, idx]] = Complex64::new(n as f64, 0.0);
    }
    let label = match which {
        Mode::Driven => "n1",
        Mode::Undriven => "n2",
    };
    Operator::new(m, basis.clone(), label)
}

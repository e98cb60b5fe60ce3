//! Vectorized (superoperator) form of the master-equation generator: sparse
//! assembly, index-sector compression, and the fixed-step Runge-Kutta kernels
//! shared by every propagation path in the crate.
//!
//! Density matrices vectorize column-major: entry ρ[r,c] sits at vec index
//! k = r + d·c. A sandwich term ρ ↦ AρB becomes the sparse matrix with value
//! A[i,k]·B[l,j] at row (i + d·j), column (k + d·l), and the generator is a
//! sum of such terms:
//!
//!   commutator   −i(Hρ − ρH)
//!   dissipator   rate·(2 oρo† − o†oρ − ρo†o)   per collapse channel
//!
//! The assembled matrix is split as L(g) = L_base + g·L_int, where L_int is
//! the commutator of the unit-coupling interaction Hamiltonian, so a transit
//! with a time-dependent coupling scalar g(t) reuses a single assembly.
//!
//! Sector compression: each basis state carries a parity bit, and a vec index
//! k ≡ (r,c) belongs to the class (parity(r) + parity(c)) mod 2. Every term
//! of this model's generator flips the parity on both sides of ρ or on
//! neither — except the birefringent mode exchange, which flips one side
//! only — so with ξ_b = 0 the even class is invariant and contains every
//! physically prepared state. The engine verifies this structurally by
//! scanning the assembled entries; if any entry crosses classes it keeps the
//! full index set instead, so the compression is an optimization, never an
//! assumption.

use ndarray::Array2;
use num_complex::Complex64;

type C = Complex64;

const C_ZERO: C = Complex64::new(0.0, 0.0);

/// Sort triplets by (row, col), merge duplicates, drop exact zeros.
fn coalesce(mut trips: Vec<(u32, u32, C)>) -> Vec<(u32, u32, C)> {
    trips.sort_unstable_by_key(|&(r, c, _)| ((r as u64) << 32) | c as u64);
    let mut out: Vec<(u32, u32, C)> = Vec::with_capacity(trips.len());
    for (r, c, v) in trips {
        match out.last_mut() {
            Some(last) if last.0 == r && last.1 == c => last.2 += v,
            _ => out.push((r, c, v)),
        }
    }
    out.retain(|&(_, _, v)| v != C_ZERO);
    out
}

fn nonzeros(m: &Array2<C>) -> Vec<(u32, u32, C)> {
    let mut out = Vec::new();
    for ((i, j), &v) in m.indexed_iter() {
        if v != C_ZERO {
            out.push((i as u32, j as u32, v));
        }
    }
    out
}

/// Plain CSR matrix. Used for instantaneous linear maps on packed states,
/// e.g. the detection sandwich ρ ↦ a₂ρa₂†.
pub(crate) struct Csr {
    pub n_rows: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<u32>,
    pub vals: Vec<C>,
}

impl Csr {
    pub fn from_triplets(n_rows: usize, trips: Vec<(u32, u32, C)>) -> Csr {
        let trips = coalesce(trips);
        let mut row_ptr = vec![0usize; n_rows + 1];
        for &(r, _, _) in &trips {
            row_ptr[r as usize + 1] += 1;
        }
        for i in 0..n_rows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Csr {
            n_rows,
            row_ptr,
            col_idx: trips.iter().map(|t| t.1).collect(),
            vals: trips.iter().map(|t| t.2).collect(),
        }
    }

    /// y = A·x.
    pub fn apply(&self, x: &[C], y: &mut [C]) {
        for i in 0..self.n_rows {
            let mut acc = C_ZERO;
            for e in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[e] * x[self.col_idx[e] as usize];
            }
            y[i] = acc;
        }
    }
}

/// CSR with two value streams over one shared sparsity pattern, representing
/// L(g) = base + g·int without re-assembly when g changes at every step.
pub(crate) struct SplitCsr {
    pub n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    base: Vec<C>,
    intr: Vec<C>,
}

impl SplitCsr {
    fn from_parts(n: usize, base_trips: Vec<(u32, u32, C)>, int_trips: Vec<(u32, u32, C)>) -> SplitCsr {
        let b = coalesce(base_trips);
        let t = coalesce(int_trips);
        let key = |e: &(u32, u32, C)| ((e.0 as u64) << 32) | e.1 as u64;
        let mut row_counts = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(b.len() + t.len());
        let mut base = Vec::with_capacity(b.len() + t.len());
        let mut intr = Vec::with_capacity(b.len() + t.len());
        let (mut i, mut j) = (0usize, 0usize);
        while i < b.len() || j < t.len() {
            let take_b = j >= t.len() || (i < b.len() && key(&b[i]) <= key(&t[j]));
            let take_t = i >= b.len() || (j < t.len() && key(&t[j]) <= key(&b[i]));
            let (r, c, vb, vi) = match (take_b, take_t) {
                (true, true) => {
                    let (eb, et) = (b[i], t[j]);
                    i += 1;
                    j += 1;
                    (eb.0, eb.1, eb.2, et.2)
                }
                (true, false) => {
                    let e = b[i];
                    i += 1;
                    (e.0, e.1, e.2, C_ZERO)
                }
                (false, true) => {
                    let e = t[j];
                    j += 1;
                    (e.0, e.1, C_ZERO, e.2)
                }
                (false, false) => unreachable!(),
            };
            row_counts[r as usize + 1] += 1;
            col_idx.push(c);
            base.push(vb);
            intr.push(vi);
        }
        for r in 0..n {
            row_counts[r + 1] += row_counts[r];
        }
        SplitCsr {
            n,
            row_ptr: row_counts,
            col_idx,
            base,
            intr,
        }
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    /// y = (base + g·int)·X for m interleaved columns: X[row·m + j] holds
    /// column j of `row`. The interleaving keeps all columns of one row
    /// adjacent, so the inner loop over j is a straight fused multiply-add
    /// sweep.
    pub fn apply_batch(&self, g: f64, x: &[C], y: &mut [C], m: usize) {
        for i in 0..self.n {
            let row = &mut y[i * m..(i + 1) * m];
            row.fill(C_ZERO);
            for e in self.row_ptr[i]..self.row_ptr[i + 1] {
                let a = self.base[e] + self.intr[e] * g;
                let xs = &x[self.col_idx[e] as usize * m..self.col_idx[e] as usize * m + m];
                for (r, xv) in row.iter_mut().zip(xs) {
                    *r += a * xv;
                }
            }
        }
    }
}

/// Scratch buffers for the Runge-Kutta kernels, reused across steps.
pub(crate) struct Workspace {
    k: Vec<C>,
    tmp: Vec<C>,
    acc: Vec<C>,
}

impl Workspace {
    pub fn new() -> Workspace {
        Workspace {
            k: Vec::new(),
            tmp: Vec::new(),
            acc: Vec::new(),
        }
    }

    fn ensure(&mut self, len: usize) {
        if self.k.len() < len {
            self.k.resize(len, C_ZERO);
            self.tmp.resize(len, C_ZERO);
            self.acc.resize(len, C_ZERO);
        }
    }
}

fn axpy(a: f64, x: &[C], y: &mut [C]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += xi * a;
    }
}

fn lincomb(out: &mut [C], x: &[C], a: f64, k: &[C]) {
    for ((o, xi), ki) in out.iter_mut().zip(x).zip(k) {
        *o = xi + ki * a;
    }
}

/// One classical Runge-Kutta step of width h for m interleaved columns. The
/// coupling scalar is sampled at the step start, midpoint and end
/// (g0, gh, g1); pass three equal values for autonomous evolution.
pub(crate) fn rk4_step_batch(
    mat: &SplitCsr,
    (g0, gh, g1): (f64, f64, f64),
    h: f64,
    x: &mut [C],
    m: usize,
    ws: &mut Workspace,
) {
    let len = mat.n * m;
    debug_assert_eq!(x.len(), len);
    ws.ensure(len);
    let Workspace { k, tmp, acc } = ws;
    let (k, tmp, acc) = (&mut k[..len], &mut tmp[..len], &mut acc[..len]);
    mat.apply_batch(g0, x, k, m); // k1
    acc.copy_from_slice(k);
    lincomb(tmp, x, 0.5 * h, k);
    mat.apply_batch(gh, tmp, k, m); // k2
    axpy(2.0, k, acc);
    lincomb(tmp, x, 0.5 * h, k);
    mat.apply_batch(gh, tmp, k, m); // k3
    axpy(2.0, k, acc);
    lincomb(tmp, x, h, k);
    mat.apply_batch(g1, tmp, k, m); // k4
    axpy(1.0, k, acc);
    axpy(h / 6.0, acc, x);
}

/// A sandwich map would carry retained indices outside the retained sector;
/// the caller must fall back to the uncompressed engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct SectorLeak;

/// Assembled generator in vectorized form, with optional sector compression.
pub(crate) struct Engine {
    d: usize,
    n: usize,
    sector: bool,
    /// compressed index -> vec index k
    keep: Vec<u32>,
    /// vec index k -> compressed index, or -1 if dropped
    pos: Vec<i32>,
    /// compressed positions of the d diagonal entries (always retained)
    diag: Vec<usize>,
    pub mat: SplitCsr,
}

impl Engine {
    /// Assemble from dense operators. `h_static` is everything in H except
    /// the dipole interaction; `h_int_unit` is the interaction at unit
    /// coupling; `collapse` lists (rate, operator) channels. `state_parity`
    /// gives the parity bit per basis state; `want_sector` requests the
    /// compressed even class when the structural scan allows it.
    pub fn new(
        h_static: &Array2<C>,
        h_int_unit: &Array2<C>,
        collapse: &[(f64, Array2<C>)],
        state_parity: &[u8],
        want_sector: bool,
    ) -> Engine {
        let d = h_static.nrows();
        assert_eq!(state_parity.len(), d);
        let nfull = d * d;

        let mut base = Vec::new();
        add_commutator(&mut base, h_static, d);
        for (rate, o) in collapse {
            add_dissipator(&mut base, *rate, o, d);
        }
        let mut intr = Vec::new();
        add_commutator(&mut intr, h_int_unit, d);

        let mut class = vec![0u8; nfull];
        for (k, cl) in class.iter_mut().enumerate() {
            *cl = (state_parity[k % d] + state_parity[k / d]) & 1;
        }
        let uniform = base
            .iter()
            .chain(intr.iter())
            .all(|&(o, i, _)| class[o as usize] == class[i as usize]);
        let sector = want_sector && uniform;

        let (keep, pos) = if sector {
            let mut keep = Vec::new();
            let mut pos = vec![-1i32; nfull];
            for (k, &cl) in class.iter().enumerate() {
                if cl == 0 {
                    pos[k] = keep.len() as i32;
                    keep.push(k as u32);
                }
            }
            (keep, pos)
        } else {
            (
                (0..nfull as u32).collect::<Vec<_>>(),
                (0..nfull as i32).collect::<Vec<_>>(),
            )
        };
        let n = keep.len();

        let remap = |trips: Vec<(u32, u32, C)>| -> Vec<(u32, u32, C)> {
            if !sector {
                return trips;
            }
            trips
                .into_iter()
                .filter_map(|(o, i, v)| {
                    let pi = pos[i as usize];
                    if pi < 0 {
                        return None; // entire odd class is unreachable from retained states
                    }
                    let po = pos[o as usize];
                    debug_assert!(po >= 0, "uniform scan guarantees class preservation");
                    Some((po as u32, pi as u32, v))
                })
                .collect()
        };
        let mat = SplitCsr::from_parts(n, remap(base), remap(intr));
        let diag = (0..d)
            .map(|i| {
                let p = pos[i + d * i];
                debug_assert!(p >= 0, "diagonal entries are always class-even");
                p as usize
            })
            .collect();
        Engine {
            d,
            n,
            sector,
            keep,
            pos,
            diag,
            mat,
        }
    }

    /// Number of retained vec indices (the packed vector length).
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn sector_active(&self) -> bool {
        self.sector
    }

    /// Pack a dense matrix into the retained-index vector. Returns the packed
    /// vector and the largest magnitude discarded; the latter is nonzero only
    /// when the input has weight outside the retained sector, in which case
    /// the caller should use an uncompressed engine instead.
    pub fn compress(&self, m: &Array2<C>) -> (Vec<C>, f64) {
        let mut x = vec![C_ZERO; self.n];
        let mut leak = 0.0f64;
        for (k, &p) in self.pos.iter().enumerate() {
            let v = m[[k % self.d, k / self.d]];
            if p >= 0 {
                x[p as usize] = v;
            } else {
                leak = leak.max(v.norm());
            }
        }
        (x, leak)
    }

    pub fn decompress(&self, x: &[C]) -> Array2<C> {
        let mut m = Array2::zeros((self.d, self.d));
        for (ki, &k) in self.keep.iter().enumerate() {
            let k = k as usize;
            m[[k % self.d, k / self.d]] = x[ki];
        }
        m
    }

    /// Readout vector w with dot(w, x) = Tr(A·ρ) for packed ρ, using
    /// Tr(Aρ) = Σ_{r,c} A[c,r]·ρ[r,c].
    pub fn weight_vector(&self, a: &Array2<C>) -> Vec<C> {
        self.keep
            .iter()
            .map(|&k| a[[k as usize / self.d, k as usize % self.d]])
            .collect()
    }

    /// Tr(ρ) of a packed state.
    pub fn trace_of(&self, x: &[C]) -> C {
        self.diag.iter().map(|&p| x[p]).sum()
    }

    /// Compressed matrix of the instantaneous map ρ ↦ AρB.
    pub fn sandwich_map(&self, a: &Array2<C>, b: &Array2<C>) -> Result<Csr, SectorLeak> {
        let d = self.d;
        let a_nz = nonzeros(a);
        let b_nz = nonzeros(b);
        let mut trips = Vec::with_capacity(a_nz.len() * b_nz.len());
        for &(i, k, va) in &a_nz {
            for &(l, j, vb) in &b_nz {
                let out = i as usize + d * j as usize;
                let inn = k as usize + d * l as usize;
                let pi = self.pos[inn];
                if pi < 0 {
                    continue;
                }
                let po = self.pos[out];
                if po < 0 {
                    return Err(SectorLeak);
                }
                trips.push((po as u32, pi as u32, va * vb));
            }
        }
        Ok(Csr::from_triplets(self.n, trips))
    }

    /// Merged (base + g·int) triplets in the retained index space, for the
    /// direct linear solve.
    pub fn assemble(&self, g: f64) -> Vec<(usize, usize, C)> {
        let mut out = Vec::with_capacity(self.mat.nnz());
        for r in 0..self.n {
            for e in self.mat.row_ptr[r]..self.mat.row_ptr[r + 1] {
                let v = self.mat.base[e] + self.mat.intr[e] * g;
                if v != C_ZERO {
                    out.push((r, self.mat.col_idx[e] as usize, v));
                }
            }
        }
        out
    }

    /// Packed positions of the matrix diagonal, index i of the basis mapping
    /// to entry (i,i).
    pub fn diagonal_positions(&self) -> &[usize] {
        &self.diag
    }
}

/// −i(Hρ − ρH) as sandwich triplets.
fn add_commutator(trips: &mut Vec<(u32, u32, C)>, h: &Array2<C>, d: usize) {
    let du = d as u32;
    let mi = Complex64::new(0.0, -1.0);
    let pi = Complex64::new(0.0, 1.0);
    for &(i, k, v) in &nonzeros(h) {
        // −i·Hρ : A = H, B = 1
        for j in 0..du {
            trips.push((i + du * j, k + du * j, mi * v));
        }
        // +i·ρH : A = 1, B = H with B[l,j] = H[i→l, k→j]
        let (l, j, v) = (i, k, v);
        for i in 0..du {
            trips.push((i + du * j, i + du * l, pi * v));
        }
    }
}

/// rate·(2 oρo† − o†oρ − ρo†o) as sandwich triplets.
fn add_dissipator(trips: &mut Vec<(u32, u32, C)>, rate: f64, o: &Array2<C>, d: usize) {
    let du = d as u32;
    let o_nz = nonzeros(o);
    if o_nz.is_empty() {
        return;
    }
    let od = o.t().mapv(|z| z.conj());
    let odo = od.dot(o);
    let od_nz = nonzeros(&od);
    // 2·rate · oρo†
    for &(i, k, va) in &o_nz {
        for &(l, j, vb) in &od_nz {
            trips.push((i + du * j, k + du * l, va * vb * (2.0 * rate)));
        }
    }
    for &(i, k, v) in &nonzeros(&odo) {
        // −rate · (o†o)ρ
        for j in 0..du {
            trips.push((i + du * j, k + du * j, v * (-rate)));
        }
        // −rate · ρ(o†o)
        let (l, j, v) = (i, k, v);
        for i in 0..du {
            trips.push((i + du * j, i + du * l, v * (-rate)));
        }
    }
}

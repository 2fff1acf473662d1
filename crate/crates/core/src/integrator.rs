//! Crank–Nicolson time stepping for `ẋ = G(t)x + Bu` with piecewise constant
//! `G`, its exact discrete adjoint, and trapezoidal quadrature.
//!
//! Controls are sampled on grid nodes and interpolated linearly inside a step,
//! which gives the recursion
//! `(I − dt/2 G_k) x_{k+1} = (I + dt/2 G_k) x_k + dt/2 B (u_k + u_{k+1})`.
//! The cost is the trapezoidal rule over the nodes plus the terminal term, and
//! the adjoint recursion is the exact transpose of the forward scheme, so the
//! gradient it produces is the gradient of the discrete functional.

use std::collections::HashMap;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector, DVectorView};
use nalgebra_sparse::CsrMatrix;

use crate::error::{Error, Result};
use crate::linalg::{identity_plus_scaled, spmv};
use crate::Scalar;

/// Uniform grid `t_k = t0 + k·dt`, `k = 0..=steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid<T> {
    t0: T,
    dt: T,
    steps: usize,
}

impl<T: Scalar> TimeGrid<T> {
    pub fn new(t0: T, dt: T, steps: usize) -> Result<Self> {
        if !(dt > T::zero()) {
            return Err(Error::GridMismatch(format!("time step must be positive, got {dt}")));
        }
        Ok(Self { t0, dt, steps })
    }

    pub fn t0(&self) -> T {
        self.t0
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn time(&self, k: usize) -> T {
        self.t0 + T::lit(k as f64) * self.dt
    }

    pub fn end(&self) -> T {
        self.time(self.steps)
    }

    /// Trapezoidal quadrature weight of node `k`.
    pub fn weight(&self, k: usize) -> T {
        if self.steps == 0 {
            T::zero()
        } else if k == 0 || k == self.steps {
            self.dt * T::lit(0.5)
        } else {
            self.dt
        }
    }
}

/// Node-sampled state and control trajectories on a [`TimeGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T: Scalar> {
    pub grid: TimeGrid<T>,
    /// `n × (steps+1)`, one column per node.
    pub states: DMatrix<T>,
    /// `m × (steps+1)`, one column per node.
    pub controls: DMatrix<T>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn new(grid: TimeGrid<T>, states: DMatrix<T>, controls: DMatrix<T>) -> Result<Self> {
        if states.ncols() != grid.nodes() || controls.ncols() != grid.nodes() {
            return Err(Error::BadDimension(format!(
                "trajectory has {} state and {} control columns, grid has {} nodes",
                states.ncols(),
                controls.ncols(),
                grid.nodes()
            )));
        }
        Ok(Self { grid, states, controls })
    }

    pub fn state_norms(&self) -> Vec<T> {
        self.states.column_iter().map(|c| c.norm()).collect()
    }

    /// CSV with columns `t, [x_1..x_n], |x|, u_1..u_m`.
    pub fn write_csv<W: Write>(&self, mut out: W, include_states: bool) -> Result<()> {
        let n = self.states.nrows();
        let m = self.controls.nrows();
        let mut header = vec!["t".to_string()];
        if include_states {
            header.extend((1..=n).map(|i| format!("x_{i}")));
        }
        header.push("norm_x".into());
        header.extend((1..=m).map(|i| format!("u_{i}")));
        writeln!(out, "{}", header.join(","))?;
        for k in 0..self.grid.nodes() {
            let mut row = vec![fmt_float(self.grid.time(k))];
            if include_states {
                row.extend(self.states.column(k).iter().map(|v| fmt_float(*v)));
            }
            row.push(fmt_float(self.states.column(k).norm()));
            row.extend(self.controls.column(k).iter().map(|v| fmt_float(*v)));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Formats a float with 17 significant digits. Negative zero prints as zero.
pub fn fmt_float<T: Scalar>(v: T) -> String {
    format!("{:.16e}", v.as_f64() + 0.0)
}

/// State weight stored in the cheapest form that represents it exactly.
#[derive(Clone, Debug)]
pub enum WeightOp<T: Scalar> {
    Zero,
    Diagonal(DVector<T>),
    Dense(DMatrix<T>),
}

impl<T: Scalar> WeightOp<T> {
    pub fn from_matrix(m: &DMatrix<T>) -> Self {
        if m.iter().all(|v| *v == T::zero()) {
            return WeightOp::Zero;
        }
        let off_diagonal_zero = m
            .column_iter()
            .enumerate()
            .all(|(j, col)| col.as_slice().iter().enumerate().all(|(i, v)| i == j || *v == T::zero()));
        if off_diagonal_zero {
            WeightOp::Diagonal(m.diagonal())
        } else {
            WeightOp::Dense(m.clone())
        }
    }

    /// `out += scale · M x`
    pub fn apply_add(&self, x: DVectorView<'_, T>, scale: T, out: &mut DVector<T>) {
        match self {
            WeightOp::Zero => {}
            WeightOp::Diagonal(d) => {
                for ((o, xi), di) in out.as_mut_slice().iter_mut().zip(x.as_slice()).zip(d.as_slice()) {
                    *o += scale * *di * *xi;
                }
            }
            WeightOp::Dense(m) => out.gemv(scale, m, &x, T::one()),
        }
    }

    /// `xᵀ M x`
    pub fn quad(&self, x: DVectorView<'_, T>) -> T {
        match self {
            WeightOp::Zero => T::zero(),
            WeightOp::Diagonal(d) => {
                x.as_slice().iter().zip(d.as_slice()).fold(T::zero(), |acc, (xi, di)| acc + *di * *xi * *xi)
            }
            WeightOp::Dense(m) => x.dot(&(m * x)),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, WeightOp::Zero)
    }
}

/// Generator of a CN step, either sparse (system matrix, RBM pieces) or dense
/// (closed-loop matrices).
#[derive(Clone, Debug)]
pub enum GeneratorMatrix<T: Scalar> {
    Sparse(CsrMatrix<T>),
    Dense(DMatrix<T>),
}

impl<T: Scalar> GeneratorMatrix<T> {
    pub fn dim(&self) -> usize {
        match self {
            GeneratorMatrix::Sparse(m) => m.nrows(),
            GeneratorMatrix::Dense(m) => m.nrows(),
        }
    }
}

#[derive(Clone, Debug)]
enum Explicit<T: Scalar> {
    Ring { forward: RingStencil<T>, transpose: RingStencil<T> },
    Sparse { forward: CsrMatrix<T>, transpose: CsrMatrix<T> },
    Dense(DMatrix<T>),
}

#[derive(Clone, Debug)]
enum Implicit<T: Scalar> {
    Banded(RingBand<T>),
    DenseInverse(DMatrix<T>),
}

/// Factorized CN step for one generator and step size: applies
/// `I + dt/2·G` and solves with `I − dt/2·G`, plus both transposes.
#[derive(Clone, Debug)]
pub struct StepOperator<T: Scalar> {
    dim: usize,
    dt: T,
    explicit: Explicit<T>,
    implicit: Implicit<T>,
}

/// Factorizes the CN step matrices of `g` for step `dt`.
///
/// Sparse generators whose pattern is a ring with at least one missing link
/// are tridiagonal after a cyclic relabeling and use an O(n) Thomas solve.
/// Everything else gets a dense inverse applied by matrix-vector products.
pub fn cn_step_matrix<T: Scalar>(g: &GeneratorMatrix<T>, dt: T) -> Result<StepOperator<T>> {
    let half = dt * T::lit(0.5);
    let dim = g.dim();
    match g {
        GeneratorMatrix::Sparse(m) => {
            if m.ncols() != dim {
                return Err(Error::BadDimension("generator must be square".into()));
            }
            let explicit = match RingStencil::new(m, half) {
                Some(forward) => Explicit::Ring { transpose: forward.transposed(), forward },
                None => {
                    let forward = identity_plus_scaled(m, half);
                    Explicit::Sparse { transpose: forward.transpose(), forward }
                }
            };
            let implicit = match ring_cut(m).and_then(|offset| RingBand::new(m, half, offset)) {
                Some(band) => Implicit::Banded(band),
                None => dense_inverse(&(DMatrix::identity(dim, dim) - crate::linalg::csr_to_dense(m) * half))?,
            };
            Ok(StepOperator { dim, dt, explicit, implicit })
        }
        GeneratorMatrix::Dense(m) => {
            if m.ncols() != dim {
                return Err(Error::BadDimension("generator must be square".into()));
            }
            let id = DMatrix::identity(dim, dim);
            let explicit = Explicit::Dense(&id + m * half);
            let implicit = dense_inverse(&(id - m * half))?;
            Ok(StepOperator { dim, dt, explicit, implicit })
        }
    }
}

fn dense_inverse<T: Scalar>(l: &DMatrix<T>) -> Result<Implicit<T>> {
    let inv = l.clone().try_inverse().ok_or(Error::SingularStepMatrix)?;
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularStepMatrix);
    }
    Ok(Implicit::DenseInverse(inv))
}

impl<T: Scalar> StepOperator<T> {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    /// Whether the implicit solve uses the O(n) banded path.
    pub fn is_banded(&self) -> bool {
        matches!(self.implicit, Implicit::Banded(_))
    }

    /// `out = (I + dt/2 G) x`
    pub fn apply_explicit(&self, x: &DVector<T>, out: &mut DVector<T>) {
        match &self.explicit {
            Explicit::Ring { forward, .. } => forward.apply(x.as_slice(), out.as_mut_slice()),
            Explicit::Sparse { forward, .. } => spmv(forward, x, out),
            Explicit::Dense(m) => out.gemv(T::one(), m, x, T::zero()),
        }
    }

    /// `out = (I + dt/2 G)ᵀ x`
    pub fn apply_explicit_transpose(&self, x: &DVector<T>, out: &mut DVector<T>) {
        match &self.explicit {
            Explicit::Ring { transpose, .. } => transpose.apply(x.as_slice(), out.as_mut_slice()),
            Explicit::Sparse { transpose, .. } => spmv(transpose, x, out),
            Explicit::Dense(m) => out.gemv_tr(T::one(), m, x, T::zero()),
        }
    }

    /// `out = (I − dt/2 G)⁻¹ rhs`
    pub fn solve(&self, rhs: &DVector<T>, out: &mut DVector<T>) {
        match &self.implicit {
            Implicit::Banded(band) => band.solve(rhs, out, false),
            Implicit::DenseInverse(inv) => out.gemv(T::one(), inv, rhs, T::zero()),
        }
    }

    /// `out = (I − dt/2 G)⁻ᵀ rhs`
    pub fn solve_transpose(&self, rhs: &DVector<T>, out: &mut DVector<T>) {
        match &self.implicit {
            Implicit::Banded(band) => band.solve(rhs, out, true),
            Implicit::DenseInverse(inv) => out.gemv_tr(T::one(), inv, rhs, T::zero()),
        }
    }
}

/// `I + half·G` for a generator coupling only ring neighbours:
/// `out[i] = lower[i]·x[i−1] + diag[i]·x[i] + upper[i]·x[i+1]`, indices mod n.
#[derive(Clone, Debug)]
struct RingStencil<T> {
    lower: Vec<T>,
    diag: Vec<T>,
    upper: Vec<T>,
}

impl<T: Scalar> RingStencil<T> {
    fn new(g: &CsrMatrix<T>, half: T) -> Option<Self> {
        let n = g.nrows();
        if n < 3 {
            return None;
        }
        let mut lower = vec![T::zero(); n];
        let mut diag = vec![T::one(); n];
        let mut upper = vec![T::zero(); n];
        for (i, j, v) in g.triplet_iter() {
            if i == j {
                diag[i] += half * *v;
            } else if j == (i + 1) % n {
                upper[i] += half * *v;
            } else if (j + 1) % n == i {
                lower[i] += half * *v;
            } else {
                return None;
            }
        }
        Some(Self { lower, diag, upper })
    }

    fn transposed(&self) -> Self {
        let n = self.diag.len();
        let lower = (0..n).map(|i| self.upper[(i + n - 1) % n]).collect();
        let upper = (0..n).map(|i| self.lower[(i + 1) % n]).collect();
        Self { lower, diag: self.diag.clone(), upper }
    }

    fn apply(&self, x: &[T], out: &mut [T]) {
        let n = x.len();
        out[0] = self.lower[0] * x[n - 1] + self.diag[0] * x[0] + self.upper[0] * x[1];
        for i in 1..n - 1 {
            out[i] = self.lower[i] * x[i - 1] + self.diag[i] * x[i] + self.upper[i] * x[i + 1];
        }
        out[n - 1] = self.lower[n - 1] * x[n - 2] + self.diag[n - 1] * x[n - 1] + self.upper[n - 1] * x[0];
    }
}

/// Offset that turns a ring-patterned matrix with a missing link into a
/// tridiagonal one, i.e. new index `r` ↔ old index `(r + offset) mod n`.
fn ring_cut<T: Scalar>(m: &CsrMatrix<T>) -> Option<usize> {
    let n = m.nrows();
    if n < 3 {
        return None;
    }
    let mut link = vec![false; n];
    for (i, j, v) in m.triplet_iter() {
        if *v == T::zero() || i == j {
            continue;
        }
        if j == (i + 1) % n {
            link[i] = true;
        } else if (j + 1) % n == i {
            link[j] = true;
        } else {
            return None;
        }
    }
    link.iter().position(|l| !l).map(|i| (i + 1) % n)
}

/// Thomas factorization of `I − half·G` in ring-cut ordering.
#[derive(Clone, Debug)]
struct RingBand<T> {
    offset: usize,
    forward: ThomasFactor<T>,
    transpose: ThomasFactor<T>,
}

#[derive(Clone, Debug)]
struct ThomasFactor<T> {
    lower: Vec<T>,
    upper_mod: Vec<T>,
    inv_pivot: Vec<T>,
}

impl<T: Scalar> ThomasFactor<T> {
    fn new(lower: Vec<T>, diag: &[T], upper: &[T]) -> Option<Self> {
        let n = diag.len();
        let mut upper_mod = vec![T::zero(); n];
        let mut inv_pivot = vec![T::zero(); n];
        let scale = diag.iter().fold(T::zero(), |acc, d| acc.max(d.abs()));
        for i in 0..n {
            let pivot = if i == 0 { diag[0] } else { diag[i] - lower[i] * upper_mod[i - 1] };
            if !(pivot.abs() > T::eps() * scale * T::lit(16.0)) {
                return None;
            }
            inv_pivot[i] = T::one() / pivot;
            upper_mod[i] = upper[i] * inv_pivot[i];
        }
        Some(Self { lower, upper_mod, inv_pivot })
    }

    fn solve_in_place(&self, d: &mut [T]) {
        let n = d.len();
        d[0] *= self.inv_pivot[0];
        for i in 1..n {
            d[i] = (d[i] - self.lower[i] * d[i - 1]) * self.inv_pivot[i];
        }
        for i in (0..n - 1).rev() {
            d[i] = d[i] - self.upper_mod[i] * d[i + 1];
        }
    }
}

impl<T: Scalar> RingBand<T> {
    fn new(g: &CsrMatrix<T>, half: T, offset: usize) -> Option<Self> {
        let n = g.nrows();
        let old = |r: usize| (r + offset) % n;
        let entry = |i: usize, j: usize| g.get_entry(i, j).map(|e| e.into_value()).unwrap_or_else(T::zero);
        let diag: Vec<T> = (0..n).map(|r| T::one() - half * entry(old(r), old(r))).collect();
        // lower[r] = L[r, r-1], upper[r] = L[r, r+1] in the relabeled ordering
        let lower: Vec<T> = (0..n).map(|r| if r == 0 { T::zero() } else { -half * entry(old(r), old(r - 1)) }).collect();
        let upper: Vec<T> = (0..n).map(|r| if r + 1 == n { T::zero() } else { -half * entry(old(r), old(r + 1)) }).collect();
        // Lᵀ[r, r-1] = L[r-1, r] and Lᵀ[r, r+1] = L[r+1, r]
        let t_lower: Vec<T> = (0..n).map(|r| if r == 0 { T::zero() } else { upper[r - 1] }).collect();
        let t_upper: Vec<T> = (0..n).map(|r| if r + 1 == n { T::zero() } else { lower[r + 1] }).collect();
        let forward = ThomasFactor::new(lower, &diag, &upper)?;
        let transpose = ThomasFactor::new(t_lower, &diag, &t_upper)?;
        Some(Self { offset, forward, transpose })
    }

    fn solve(&self, rhs: &DVector<T>, out: &mut DVector<T>, transposed: bool) {
        let n = rhs.len();
        let split = n - self.offset;
        let src = rhs.as_slice();
        let dst = out.as_mut_slice();
        dst[..split].copy_from_slice(&src[self.offset..]);
        dst[split..].copy_from_slice(&src[..self.offset]);
        if transposed {
            self.transpose.solve_in_place(dst);
        } else {
            self.forward.solve_in_place(dst);
        }
        dst.rotate_right(self.offset);
    }
}

/// Identifies a generator within one problem/splitting for caching.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GeneratorKey {
    /// The system matrix `A`.
    System,
    /// Randomized piece of listed subset `ω`.
    Subset(usize),
}

/// Step operators of one problem for a fixed `dt`, built at most once per generator.
#[derive(Debug)]
pub struct OperatorCache<T: Scalar> {
    dt: T,
    entries: Mutex<HashMap<GeneratorKey, Arc<StepOperator<T>>>>,
    factorizations: AtomicUsize,
}

impl<T: Scalar> OperatorCache<T> {
    pub fn new(dt: T) -> Self {
        Self { dt, entries: Mutex::new(HashMap::new()), factorizations: AtomicUsize::new(0) }
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    /// Number of factorizations performed so far.
    pub fn factorizations(&self) -> usize {
        self.factorizations.load(Ordering::Relaxed)
    }

    pub fn get_or_build(
        &self,
        key: GeneratorKey,
        build: impl FnOnce() -> GeneratorMatrix<T>,
    ) -> Result<Arc<StepOperator<T>>> {
        let mut entries = self.entries.lock().expect("operator cache poisoned");
        if let Some(op) = entries.get(&key) {
            return Ok(Arc::clone(op));
        }
        let op = Arc::new(cn_step_matrix(&build(), self.dt)?);
        self.factorizations.fetch_add(1, Ordering::Relaxed);
        entries.insert(key, Arc::clone(&op));
        Ok(op)
    }
}

/// Per-step CN operators over a grid (a piecewise constant generator).
#[derive(Clone, Debug)]
pub struct Propagator<T: Scalar> {
    grid: TimeGrid<T>,
    ops: Vec<Arc<StepOperator<T>>>,
}

impl<T: Scalar> Propagator<T> {
    pub fn constant(op: Arc<StepOperator<T>>, grid: TimeGrid<T>) -> Result<Self> {
        Self::from_ops(grid, vec![op; grid.steps()])
    }

    pub fn from_ops(grid: TimeGrid<T>, ops: Vec<Arc<StepOperator<T>>>) -> Result<Self> {
        if ops.len() != grid.steps() {
            return Err(Error::GridMismatch(format!("{} step operators for {} steps", ops.len(), grid.steps())));
        }
        if ops.iter().any(|op| (op.dt() - grid.dt()).abs() > T::lit(1e-12) * grid.dt()) {
            return Err(Error::GridMismatch("step operator built for a different dt".into()));
        }
        let dims: Vec<_> = ops.iter().map(|op| op.dim()).collect();
        if dims.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::BadDimension("step operators of different dimension".into()));
        }
        Ok(Self { grid, ops })
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    pub fn op(&self, k: usize) -> &StepOperator<T> {
        &self.ops[k]
    }

    /// Propagator on the first `steps` steps only.
    pub fn truncated(&self, steps: usize) -> Self {
        let steps = steps.min(self.grid.steps);
        Self { grid: TimeGrid { steps, ..self.grid }, ops: self.ops[..steps].to_vec() }
    }

    /// Number of distinct factorizations referenced.
    pub fn distinct_operators(&self) -> usize {
        let mut seen: Vec<*const StepOperator<T>> = self.ops.iter().map(Arc::as_ptr).collect();
        seen.sort();
        seen.dedup();
        seen.len()
    }
}

/// Forward CN states for controls `u` (`m × nodes`) from `x0`.
pub fn propagate_states<T: Scalar>(
    prop: &Propagator<T>,
    b: &DMatrix<T>,
    u: &DMatrix<T>,
    x0: &DVector<T>,
) -> Result<DMatrix<T>> {
    let grid = prop.grid();
    let n = x0.len();
    if u.ncols() != grid.nodes() || u.nrows() != b.ncols() || b.nrows() != n {
        return Err(Error::BadDimension(format!(
            "control is {}x{}, B is {}x{}, grid has {} nodes",
            u.nrows(),
            u.ncols(),
            b.nrows(),
            b.ncols(),
            grid.nodes()
        )));
    }
    if grid.steps() > 0 && prop.op(0).dim() != n {
        return Err(Error::BadDimension("generator and state dimension differ".into()));
    }
    let half_dt = grid.dt() * T::lit(0.5);
    let mut states = DMatrix::zeros(n, grid.nodes());
    states.set_column(0, x0);
    let mut x = x0.clone();
    let mut rhs = DVector::zeros(n);
    let mut next = DVector::zeros(n);
    let mut usum = DVector::zeros(u.nrows());
    for k in 0..grid.steps() {
        let op = prop.op(k);
        op.apply_explicit(&x, &mut rhs);
        usum.copy_from(&u.column(k));
        usum += u.column(k + 1);
        rhs.gemv(half_dt, b, &usum, T::one());
        op.solve(&rhs, &mut next);
        std::mem::swap(&mut x, &mut next);
        states.set_column(k + 1, &x);
    }
    Ok(states)
}

/// CN trajectory under the controls `u` from `x0`.
pub fn propagate<T: Scalar>(
    prop: &Propagator<T>,
    b: &DMatrix<T>,
    u: &DMatrix<T>,
    x0: &DVector<T>,
) -> Result<Trajectory<T>> {
    let states = propagate_states(prop, b, u, x0)?;
    Trajectory::new(*prop.grid(), states, u.clone())
}

/// Discrete adjoint state on the grid nodes.
///
/// For `k ≥ 1` the nodes hold half the Lagrange multipliers of the CN
/// constraints, so they approximate the continuous adjoint of
/// `−ṗ = Gᵀp + Qx`, `p(T) = Fx(T)`. Node 0 holds `½ ∂J/∂x(0)`.
#[derive(Clone, Debug)]
pub struct Adjoint<T: Scalar> {
    pub grid: TimeGrid<T>,
    pub nodes: DMatrix<T>,
}

impl<T: Scalar> Adjoint<T> {
    /// Node values `p̄_k` such that the L² gradient of the discrete cost with
    /// respect to the node controls is `2(W u_k + Bᵀ p̄_k)`.
    pub fn control_pairing(&self) -> DMatrix<T> {
        let n_steps = self.grid.steps();
        let mut out = DMatrix::zeros(self.nodes.nrows(), self.grid.nodes());
        if n_steps == 0 {
            return out;
        }
        let half = T::lit(0.5);
        out.set_column(0, &self.nodes.column(1));
        for k in 1..n_steps {
            for (o, (a, b)) in out.column_mut(k).iter_mut().zip(self.nodes.column(k).iter().zip(self.nodes.column(k + 1).iter())) {
                *o = (*a + *b) * half;
            }
        }
        out.set_column(n_steps, &self.nodes.column(n_steps));
        out
    }
}

/// Backward recursion transposed to the forward CN scheme.
pub fn propagate_adjoint<T: Scalar>(
    prop: &Propagator<T>,
    q: &WeightOp<T>,
    f: &WeightOp<T>,
    states: &DMatrix<T>,
) -> Result<Adjoint<T>> {
    let grid = *prop.grid();
    let n_steps = grid.steps();
    let n = states.nrows();
    if states.ncols() != grid.nodes() {
        return Err(Error::BadDimension("state trajectory does not match the grid".into()));
    }
    let mut nodes = DMatrix::zeros(n, grid.nodes());
    let mut rhs = DVector::zeros(n);
    let mut mu = DVector::zeros(n);
    let mut tmp = DVector::zeros(n);
    q.apply_add(states.column(n_steps), grid.weight(n_steps), &mut rhs);
    f.apply_add(states.column(n_steps), T::one(), &mut rhs);
    if n_steps == 0 {
        nodes.set_column(0, &rhs);
        return Ok(Adjoint { grid, nodes });
    }
    prop.op(n_steps - 1).solve_transpose(&rhs, &mut mu);
    nodes.set_column(n_steps, &mu);
    for k in (0..n_steps).rev() {
        prop.op(k).apply_explicit_transpose(&mu, &mut rhs);
        q.apply_add(states.column(k), grid.weight(k), &mut rhs);
        if k == 0 {
            nodes.set_column(0, &rhs);
        } else {
            prop.op(k - 1).solve_transpose(&rhs, &mut tmp);
            std::mem::swap(&mut mu, &mut tmp);
            nodes.set_column(k, &mu);
        }
    }
    Ok(Adjoint { grid, nodes })
}

/// L² gradient `2(W u_k + Bᵀ p̄_k)` of the discrete cost at controls `u`.
pub fn l2_gradient<T: Scalar>(adjoint: &Adjoint<T>, b: &DMatrix<T>, w: &DMatrix<T>, u: &DMatrix<T>) -> DMatrix<T> {
    let two = T::lit(2.0);
    (w * u + b.transpose() * adjoint.control_pairing()) * two
}

/// Trapezoidal `Σ_k w_k (x_kᵀQx_k + u_kᵀWu_k)` plus `x_Nᵀ F x_N`.
pub fn quadratic_cost<T: Scalar>(
    grid: &TimeGrid<T>,
    states: &DMatrix<T>,
    controls: &DMatrix<T>,
    q: &WeightOp<T>,
    w: &DMatrix<T>,
    f: &WeightOp<T>,
) -> T {
    let mut total = T::zero();
    let diagonal_w = w.nrows() == 1;
    for k in 0..grid.nodes() {
        let wk = grid.weight(k);
        if wk == T::zero() {
            continue;
        }
        let u = controls.column(k);
        let control = if diagonal_w { w[(0, 0)] * u[0] * u[0] } else { u.dot(&(w * u)) };
        total += wk * (q.quad(states.column(k)) + control);
    }
    total + f.quad(states.column(grid.steps()))
}

pub fn trapz_quadratic<T: Scalar>(traj: &Trajectory<T>, q: &DMatrix<T>, w: &DMatrix<T>, f: &DMatrix<T>) -> T {
    quadratic_cost(
        &traj.grid,
        &traj.states,
        &traj.controls,
        &WeightOp::from_matrix(q),
        w,
        &WeightOp::from_matrix(f),
    )
}

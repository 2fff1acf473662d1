//! Linear-quadratic problem data, operator splittings of the system matrix and
//! the heat-ring benchmark problem.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::CsrMatrix;

use crate::error::{Error, Result};
use crate::integrator::WeightOp;
use crate::linalg::{
    csr_from_triplets, csr_to_dense, is_symmetric, max_symmetric_part_eigenvalue,
    min_symmetric_eigenvalue, spectral_norm, spectral_norm_sparse,
};
use crate::Scalar;

/// Relative tolerance for the semidefiniteness checks on the weights.
const PSD_TOL: f64 = 1e-10;

/// Minimize `∫ |x|²_Q + |u|²_W dt + |x(T)|²_F` subject to `ẋ = Ax + Bu`, `x(0) = x0`.
#[derive(Clone, Debug)]
pub struct LqProblem<T: Scalar> {
    a: CsrMatrix<T>,
    b: DMatrix<T>,
    q: DMatrix<T>,
    w: DMatrix<T>,
    f: DMatrix<T>,
    x0: DVector<T>,
    w_inv: DMatrix<T>,
    q_op: WeightOp<T>,
    f_op: WeightOp<T>,
}

impl<T: Scalar> LqProblem<T> {
    pub fn new(
        a: CsrMatrix<T>,
        b: DMatrix<T>,
        q: DMatrix<T>,
        w: DMatrix<T>,
        f: DMatrix<T>,
        x0: DVector<T>,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::BadDimension(format!("A is {}x{}, expected square", n, a.ncols())));
        }
        if b.nrows() != n {
            return Err(Error::BadDimension(format!("B has {} rows, expected {n}", b.nrows())));
        }
        let m = b.ncols();
        if q.shape() != (n, n) || f.shape() != (n, n) {
            return Err(Error::BadDimension(format!("Q and F must be {n}x{n}")));
        }
        if w.shape() != (m, m) {
            return Err(Error::BadDimension(format!("W must be {m}x{m}")));
        }
        if x0.len() != n {
            return Err(Error::BadDimension(format!("x0 has length {}, expected {n}", x0.len())));
        }
        check_psd("Q", &q, false)?;
        check_psd("F", &f, false)?;
        check_psd("W", &w, true)?;
        let w_inv = w
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::InvalidProblem("W is singular".into()))?;
        let q_op = WeightOp::from_matrix(&q);
        let f_op = WeightOp::from_matrix(&f);
        Ok(Self { a, b, q, w, f, x0, w_inv, q_op, f_op })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn a(&self) -> &CsrMatrix<T> {
        &self.a
    }

    pub fn a_dense(&self) -> DMatrix<T> {
        csr_to_dense(&self.a)
    }

    pub fn b(&self) -> &DMatrix<T> {
        &self.b
    }

    pub fn q(&self) -> &DMatrix<T> {
        &self.q
    }

    pub fn w(&self) -> &DMatrix<T> {
        &self.w
    }

    pub fn w_inv(&self) -> &DMatrix<T> {
        &self.w_inv
    }

    pub fn f(&self) -> &DMatrix<T> {
        &self.f
    }

    pub(crate) fn q_op(&self) -> &WeightOp<T> {
        &self.q_op
    }

    pub(crate) fn f_op(&self) -> &WeightOp<T> {
        &self.f_op
    }

    pub fn x0(&self) -> &DVector<T> {
        &self.x0
    }

    /// `B W⁻¹ Bᵀ`
    pub fn control_coupling(&self) -> DMatrix<T> {
        &self.b * &self.w_inv * self.b.transpose()
    }

    pub fn with_terminal_weight(mut self, f: DMatrix<T>) -> Result<Self> {
        if f.shape() != self.q.shape() {
            return Err(Error::BadDimension("F must match Q".into()));
        }
        check_psd("F", &f, false)?;
        self.f_op = WeightOp::from_matrix(&f);
        self.f = f;
        Ok(self)
    }

    pub fn with_initial_state(mut self, x0: DVector<T>) -> Result<Self> {
        if x0.len() != self.n() {
            return Err(Error::BadDimension(format!("x0 has length {}, expected {}", x0.len(), self.n())));
        }
        self.x0 = x0;
        Ok(self)
    }
}

fn check_psd<T: Scalar>(name: &str, m: &DMatrix<T>, definite: bool) -> Result<()> {
    let scale = spectral_norm(m);
    let tol = T::lit(PSD_TOL) * scale;
    if !is_symmetric(m, tol) {
        return Err(Error::InvalidProblem(format!("{name} is not symmetric")));
    }
    if m.is_empty() {
        return Ok(());
    }
    let lowest = min_symmetric_eigenvalue(m);
    if definite && lowest <= tol {
        return Err(Error::InvalidProblem(format!("{name} is not positive definite (min eigenvalue {lowest:e})")));
    }
    if lowest < -tol {
        return Err(Error::InvalidProblem(format!("{name} is not positive semidefinite (min eigenvalue {lowest:e})")));
    }
    Ok(())
}

/// One subset of part indices together with its selection probability.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedSubset<T> {
    /// Zero-based part indices, sorted and free of duplicates.
    pub parts: Vec<usize>,
    pub probability: T,
}

/// Decomposition `A = Σ_m A_m` with a probability law over subsets of parts.
///
/// Only subsets with positive probability are stored. The randomized generator
/// for subset `S` is `Σ_{m∈S} A_m / π_m` where `π_m` is the probability that
/// part `m` is selected, which makes it an unbiased estimator of `A`.
#[derive(Debug)]
pub struct Splitting<T: Scalar> {
    parts: Vec<CsrMatrix<T>>,
    /// Nonzero entries of each part.
    entries: Vec<Vec<(usize, usize, T)>>,
    subsets: Vec<WeightedSubset<T>>,
    pis: Vec<T>,
    total: CsrMatrix<T>,
    variance: OnceLock<T>,
    mu_r: OnceLock<T>,
}

impl<T: Scalar> Clone for Splitting<T> {
    fn clone(&self) -> Self {
        Self {
            parts: self.parts.clone(),
            entries: self.entries.clone(),
            subsets: self.subsets.clone(),
            pis: self.pis.clone(),
            total: self.total.clone(),
            variance: self.variance.clone(),
            mu_r: self.mu_r.clone(),
        }
    }
}

/// Validates the parts and subset law and derives the inclusion probabilities.
///
/// Subset indices are zero-based. The variance of the randomized generator and
/// its quasi-dissipativity bound are computed on first access.
pub fn build_splitting<T: Scalar>(
    parts: Vec<CsrMatrix<T>>,
    subsets: Vec<(Vec<usize>, T)>,
) -> Result<Splitting<T>> {
    let first = parts.first().ok_or_else(|| Error::BadDimension("splitting needs at least one part".into()))?;
    let n = first.nrows();
    if parts.iter().any(|p| p.nrows() != n || p.ncols() != n) {
        return Err(Error::BadDimension(format!("all parts must be {n}x{n}")));
    }
    if subsets.is_empty() {
        return Err(Error::ProbabilityMass { total: 0.0 });
    }
    let n_parts = parts.len();
    let mut law = Vec::with_capacity(subsets.len());
    let mut total_p = T::zero();
    for (mut idx, p) in subsets {
        if !(p > T::zero() && p <= T::one()) {
            return Err(Error::InvalidProblem(format!("subset probability {p} outside (0, 1]")));
        }
        idx.sort_unstable();
        idx.dedup();
        if let Some(&bad) = idx.iter().find(|&&m| m >= n_parts) {
            return Err(Error::BadDimension(format!("subset refers to part {bad}, only {n_parts} parts")));
        }
        total_p += p;
        law.push(WeightedSubset { parts: idx, probability: p });
    }
    if (total_p - T::one()).abs() > T::lit(1e-12).max(T::eps() * T::lit(law.len() as f64)) {
        return Err(Error::ProbabilityMass { total: total_p.as_f64() });
    }

    let mut pis = vec![T::zero(); n_parts];
    for s in &law {
        for &m in &s.parts {
            pis[m] += s.probability;
        }
    }
    if let Some(part) = pis.iter().position(|p| *p <= T::zero()) {
        return Err(Error::ZeroInclusionProbability { part });
    }

    let entries: Vec<Vec<_>> = parts
        .iter()
        .map(|p| p.triplet_iter().filter(|(_, _, v)| **v != T::zero()).map(|(i, j, v)| (i, j, *v)).collect())
        .collect();
    let total = csr_from_triplets(n, n, entries.iter().flatten().copied());
    Ok(Splitting { parts, entries, subsets: law, pis, total, variance: OnceLock::new(), mu_r: OnceLock::new() })
}

impl<T: Scalar> Splitting<T> {
    pub fn parts(&self) -> &[CsrMatrix<T>] {
        &self.parts
    }

    pub fn subsets(&self) -> &[WeightedSubset<T>] {
        &self.subsets
    }

    /// Inclusion probability `π_m` of every part.
    pub fn pis(&self) -> &[T] {
        &self.pis
    }

    /// `Σ_m A_m`
    pub fn total(&self) -> &CsrMatrix<T> {
        &self.total
    }

    pub fn dim(&self) -> usize {
        self.total.nrows()
    }

    /// Randomized generator `Σ_{m∈S_ω} A_m/π_m` for the listed subset `omega`.
    pub fn piece(&self, omega: usize) -> CsrMatrix<T> {
        let subset = &self.subsets[omega];
        if subset.parts.len() == self.parts.len() && self.pis.iter().all(|p| *p == T::one()) {
            return self.total.clone();
        }
        let n = self.dim();
        csr_from_triplets(
            n,
            n,
            subset.parts.iter().flat_map(|&m| {
                let pi = self.pis[m];
                self.entries[m].iter().map(move |&(i, j, v)| (i, j, v / pi))
            }),
        )
    }

    /// `Var[A_R] = Σ_ω p_ω ‖A − Σ_{m∈S_ω} A_m/π_m‖²` with the spectral norm.
    pub fn variance(&self) -> T {
        *self.variance.get_or_init(|| {
            let a = csr_to_dense(&self.total);
            self.subsets
                .iter()
                .enumerate()
                .map(|(omega, s)| {
                    let dev = &a - csr_to_dense(&self.piece(omega));
                    let nrm = spectral_norm(&dev);
                    s.probability * nrm * nrm
                })
                .fold(T::zero(), |acc, v| acc + v)
        })
    }

    /// Smallest `μ_R ≥ 0` with `xᵀ A_R x ≤ μ_R |x|²` over all listed subsets.
    ///
    /// Eigenvalues within roundoff of zero (relative to the piece norm) count as zero.
    pub fn mu_r(&self) -> T {
        *self.mu_r.get_or_init(|| {
            (0..self.subsets.len())
                .map(|omega| {
                    let piece = csr_to_dense(&self.piece(omega));
                    let top = max_symmetric_part_eigenvalue(&piece);
                    let noise = T::lit(64.0) * T::eps() * T::lit(piece.nrows() as f64).sqrt() * piece.norm();
                    if top <= noise { T::zero() } else { top }
                })
                .fold(T::zero(), |acc, v| acc.max(v))
        })
    }

    /// Spectral norm of `A`, the scale for the reconstruction tolerances.
    pub fn total_norm(&self) -> T {
        spectral_norm_sparse(&self.total)
    }

    /// Splitting with a single part selected with probability one (`A_R ≡ A`).
    pub fn full_batch(a: &CsrMatrix<T>) -> Self {
        build_splitting(vec![a.clone()], vec![(vec![0], T::one())]).expect("full batch splitting is valid")
    }
}

/// Initial state profile for the heat-ring benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RingProfile {
    /// `x0 = (1, …, 1)`
    Ones,
    /// One period of a cosine, `x0_j = cos(2πj/n)`, orthogonal to the constant mode.
    Cosine,
    /// Unit mass on the half ring opposite the actuated segment.
    #[default]
    HalfRing,
    /// `x0 = 0`
    Zero,
}

impl RingProfile {
    pub fn build<T: Scalar>(self, n: usize) -> DVector<T> {
        match self {
            RingProfile::Ones => DVector::from_element(n, T::one()),
            RingProfile::Cosine => DVector::from_fn(n, |j, _| {
                T::lit((2.0 * std::f64::consts::PI * j as f64 / n as f64).cos())
            }),
            RingProfile::HalfRing => DVector::from_fn(n, |j, _| if j >= n / 2 { T::one() } else { T::zero() }),
            RingProfile::Zero => DVector::zeros(n),
        }
    }
}

/// Circulant heat-equation-on-a-ring benchmark with `n` states and one input.
///
/// `A = (n−1)² · circ(−2, 1, …, 1)`, the input acts on the first `(n−1)/10`
/// states, `Q = I/(n−1)`, `W = 1` and `F = 0`. The splitting has `M = n`
/// parts: `n−1` neighbour couplings `(n−1)²[[−1,1],[1,−1]]` and the corner
/// coupling that closes the ring; every subset that omits exactly one part has
/// probability `1/n`.
pub fn heat_ring_example<T: Scalar>(n: usize) -> Result<(LqProblem<T>, Splitting<T>)> {
    heat_ring_with_profile(n, RingProfile::default())
}

pub fn heat_ring_with_profile<T: Scalar>(n: usize, profile: RingProfile) -> Result<(LqProblem<T>, Splitting<T>)> {
    if n < 11 || (n - 1) % 10 != 0 {
        return Err(Error::BadDimension(format!("heat ring needs n >= 11 with 10 | n-1, got {n}")));
    }
    let c = T::lit(((n - 1) * (n - 1)) as f64);
    let coupling = |i: usize, j: usize| {
        csr_from_triplets(n, n, [(i, i, -c), (i, j, c), (j, i, c), (j, j, -c)])
    };
    let parts: Vec<_> = (0..n - 1).map(|i| coupling(i, i + 1)).chain(std::iter::once(coupling(0, n - 1))).collect();

    let mut triplets = Vec::with_capacity(3 * n);
    for i in 0..n {
        triplets.push((i, i, -(c + c)));
        triplets.push((i, (i + 1) % n, c));
        triplets.push((i, (i + n - 1) % n, c));
    }
    let a = csr_from_triplets(n, n, triplets);

    let actuated = (n - 1) / 10;
    let b = DMatrix::from_fn(n, 1, |i, _| if i < actuated { T::one() } else { T::zero() });
    let q = DMatrix::identity(n, n) / T::lit((n - 1) as f64);
    let w = DMatrix::identity(1, 1);
    let f = DMatrix::zeros(n, n);
    let problem = LqProblem::new(a, b, q, w, f, profile.build(n))?;

    let p = T::one() / T::lit(n as f64);
    let subsets = (0..n).map(|skip| ((0..n).filter(|&m| m != skip).collect(), p)).collect();
    let splitting = build_splitting(parts, subsets)?;
    Ok((problem, splitting))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::csr_to_dense;

    fn dense<T: Scalar>(m: &CsrMatrix<T>) -> DMatrix<T> {
        csr_to_dense(m)
    }

    #[test]
    fn ring_inclusion_probabilities() {
        let (_, s) = heat_ring_example::<f64>(101).unwrap();
        for pi in s.pis() {
            assert!((pi - 100.0 / 101.0).abs() < 1e-15);
        }
    }

    #[test]
    fn ring_parts_are_dissipative_and_mu_r_vanishes() {
        let (_, s) = heat_ring_example::<f64>(101).unwrap();
        assert_eq!(s.mu_r(), 0.0);
    }

    #[test]
    fn ring_n11_structure() {
        let (p, s) = heat_ring_example::<f64>(11).unwrap();
        assert_eq!(p.b()[(0, 0)], 1.0);
        assert!(p.b().iter().skip(1).all(|v| *v == 0.0));
        let a = p.a_dense();
        for i in 0..11 {
            assert_eq!(a.row(i).sum(), 0.0);
        }
        // reconstruct A from the parts entrywise
        let sum = s.parts().iter().fold(DMatrix::zeros(11, 11), |acc, m| acc + dense(m));
        assert_eq!(sum, a);
        assert_eq!(dense(s.total()), a);
    }

    #[test]
    fn ring_rejects_bad_sizes() {
        assert!(matches!(heat_ring_example::<f64>(12), Err(Error::BadDimension(_))));
        assert!(matches!(heat_ring_example::<f64>(1), Err(Error::BadDimension(_))));
    }

    #[test]
    fn full_batch_has_unit_pi_and_zero_variance() {
        let (p, _) = heat_ring_example::<f64>(11).unwrap();
        let parts: Vec<_> = (0..3)
            .map(|k| csr_from_triplets(11, 11, p.a().triplet_iter().filter(|(i, _, _)| i % 3 == k).map(|(i, j, v)| (i, j, *v))))
            .collect();
        let s = build_splitting(parts, vec![(vec![0, 1, 2], 1.0)]).unwrap();
        assert!(s.pis().iter().all(|p| *p == 1.0));
        assert_eq!(s.variance(), 0.0);
        assert_eq!(dense(&s.piece(0)), p.a_dense());
    }

    #[test]
    fn two_part_variance_matches_direct_evaluation() {
        let a1 = csr_from_triplets(2, 2, [(0, 0, -1.0f64), (0, 1, 2.0)]);
        let a2 = csr_from_triplets(2, 2, [(1, 0, 0.5), (1, 1, -3.0)]);
        let s = build_splitting(vec![a1.clone(), a2.clone()], vec![(vec![0], 0.5), (vec![1], 0.5)]).unwrap();
        assert_eq!(s.pis(), &[0.5, 0.5]);
        let a = dense(&a1) + dense(&a2);
        let d1 = &a - dense(&a1) * 2.0;
        let d2 = &a - dense(&a2) * 2.0;
        let expected = 0.5 * d1.singular_values().max().powi(2) + 0.5 * d2.singular_values().max().powi(2);
        assert!((s.variance() - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn rejects_zero_inclusion_probability() {
        let a1 = csr_from_triplets(2, 2, [(0, 0, -1.0)]);
        let a2 = csr_from_triplets(2, 2, [(1, 1, -1.0)]);
        let err = build_splitting(vec![a1, a2], vec![(vec![0], 1.0)]).unwrap_err();
        assert!(matches!(err, Error::ZeroInclusionProbability { part: 1 }));
    }

    #[test]
    fn rejects_probability_mass() {
        let a1 = csr_from_triplets(2, 2, [(0, 0, -1.0)]);
        let err = build_splitting(vec![a1], vec![(vec![0], 0.5), (vec![0], 0.4)]).unwrap_err();
        assert!(matches!(err, Error::ProbabilityMass { .. }));
    }

    #[test]
    fn rejects_out_of_range_index() {
        let a1 = csr_from_triplets(2, 2, [(0, 0, -1.0)]);
        let err = build_splitting(vec![a1], vec![(vec![0, 3], 1.0)]).unwrap_err();
        assert!(matches!(err, Error::BadDimension(_)));
    }

    #[test]
    fn problem_rejects_indefinite_weights() {
        let (p, _) = heat_ring_example::<f64>(11).unwrap();
        let mut q = p.q().clone();
        q[(0, 0)] = -1.0;
        let err = LqProblem::new(p.a().clone(), p.b().clone(), q, p.w().clone(), p.f().clone(), p.x0().clone());
        assert!(matches!(err, Err(Error::InvalidProblem(_))));
        let err = LqProblem::new(
            p.a().clone(),
            p.b().clone(),
            p.q().clone(),
            DMatrix::zeros(1, 1),
            p.f().clone(),
            p.x0().clone(),
        );
        assert!(matches!(err, Err(Error::InvalidProblem(_))));
        let err = LqProblem::new(p.a().clone(), DMatrix::zeros(3, 1), p.q().clone(), p.w().clone(), p.f().clone(), p.x0().clone());
        assert!(matches!(err, Err(Error::BadDimension(_))));
    }
}

//! Riccati equations: the differential equation on a finite horizon (with the
//! system matrix or a randomized schedule as generator), the algebraic
//! equation as its long-horizon limit, and the induced feedback laws.
//!
//! Backward integration does not use an explicit Runge–Kutta scheme: the ring
//! generators are stiff (spectrum down to `−4(n−1)²`), so every step applies
//! the exact flow map of the equation over one step,
//!
//! ```text
//! P ↦ Q_h + E_hᵀ P (I + G_h P)⁻¹ E_h,
//! ```
//!
//! whose parameters come from the Hamiltonian exponential over a tiny
//! interval followed by repeated doubling. The same doubling applied to the
//! `F = 0` flow yields the algebraic solution.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::integrator::{GeneratorKey, TimeGrid};
use crate::linalg::{csr_to_dense, max_real_eigenvalue, spectral_norm, symmetrize};
use crate::model::LqProblem;
use crate::rbm::{steps_in, Dynamics};
use crate::Scalar;

const BLOWUP_NORM: f64 = 1e12;

/// Exact flow of `dP/ds = GᵀP + PG − PSP + Q` over a fixed duration
/// (`s` is time to go), in the form `P ↦ Q + Eᵀ P (I + G P)⁻¹ E`.
#[derive(Clone, Debug)]
pub struct RiccatiFlow<T: Scalar> {
    e: DMatrix<T>,
    g: DMatrix<T>,
    q: DMatrix<T>,
    duration: T,
}

impl<T: Scalar> RiccatiFlow<T> {
    /// Flow of the Riccati equation with generator `a`, coupling `s = BW⁻¹Bᵀ`
    /// and state weight `q` over `duration`.
    pub fn new(a: &DMatrix<T>, s: &DMatrix<T>, q: &DMatrix<T>, duration: T) -> Result<Self> {
        let n = a.nrows();
        let mut ham = DMatrix::zeros(2 * n, 2 * n);
        ham.view_mut((0, 0), (n, n)).copy_from(&(-a));
        ham.view_mut((0, n), (n, n)).copy_from(s);
        ham.view_mut((n, 0), (n, n)).copy_from(q);
        ham.view_mut((n, n), (n, n)).copy_from(&a.transpose());
        let norm1 = ham.column_iter().map(|c| c.iter().fold(T::zero(), |acc, v| acc + v.abs())).fold(T::zero(), |acc, v| acc.max(v));
        let mut doublings = 0u32;
        let mut h0 = duration;
        while norm1 * h0 > T::lit(0.5) {
            h0 *= T::lit(0.5);
            doublings += 1;
        }
        let phi = (ham * h0).exp();
        let phi11 = phi.view((0, 0), (n, n)).into_owned();
        let lu = phi11.lu();
        let e = lu.try_inverse().ok_or(Error::SingularStepMatrix)?;
        let g = &e * phi.view((0, n), (n, n));
        let q = phi.view((n, 0), (n, n)) * &e;
        let mut flow = Self { e, g, q, duration: h0 };
        flow.symmetrize();
        for _ in 0..doublings {
            flow = flow.doubled()?;
        }
        Ok(flow)
    }

    pub fn duration(&self) -> T {
        self.duration
    }

    /// Value after running the flow from `P = 0`.
    pub fn from_zero(&self) -> &DMatrix<T> {
        &self.q
    }

    fn symmetrize(&mut self) {
        symmetrize(&mut self.g);
        symmetrize(&mut self.q);
    }

    /// Flow over twice the duration.
    pub fn doubled(&self) -> Result<Self> {
        let n = self.e.nrows();
        let inner = DMatrix::identity(n, n) + &self.g * &self.q;
        let lu = inner.lu();
        let ie = lu.solve(&self.e).ok_or(Error::SingularStepMatrix)?;
        let ig = lu.solve(&self.g).ok_or(Error::SingularStepMatrix)?;
        let e = &self.e * &ie;
        let g = &self.g + &self.e * ig * self.e.transpose();
        let q = &self.q + self.e.transpose() * &self.q * ie;
        let mut flow = Self { e, g, q, duration: self.duration * T::lit(2.0) };
        flow.symmetrize();
        Ok(flow)
    }

    /// Maps the value at time-to-go `s` to the value at `s + duration`.
    pub fn apply(&self, p: &DMatrix<T>) -> Result<DMatrix<T>> {
        let n = p.nrows();
        let inner = DMatrix::identity(n, n) + &self.g * p;
        let z = inner.lu().solve(&self.e).ok_or(Error::SingularStepMatrix)?;
        let mut out = &self.q + self.e.transpose() * (p * z);
        symmetrize(&mut out);
        Ok(out)
    }
}

/// Flow maps of one problem for a fixed step, built once per generator.
#[derive(Debug)]
pub struct FlowCache<T: Scalar> {
    dt: T,
    flows: Mutex<HashMap<GeneratorKey, Arc<RiccatiFlow<T>>>>,
}

impl<T: Scalar> FlowCache<T> {
    pub fn new(dt: T) -> Self {
        Self { dt, flows: Mutex::new(HashMap::new()) }
    }

    fn get(&self, key: GeneratorKey, build: impl FnOnce() -> Result<RiccatiFlow<T>>) -> Result<Arc<RiccatiFlow<T>>> {
        let mut flows = self.flows.lock().expect("flow cache poisoned");
        if let Some(f) = flows.get(&key) {
            return Ok(Arc::clone(f));
        }
        let f = Arc::new(build()?);
        flows.insert(key, Arc::clone(&f));
        Ok(f)
    }
}

/// Backward-in-time samples of `P(t)` on a grid with `P(T) = F`.
#[derive(Clone, Debug)]
pub struct RiccatiPath<T: Scalar> {
    pub grid: TimeGrid<T>,
    /// `values[k] = P(t_k)`.
    pub values: Vec<DMatrix<T>>,
}

impl<T: Scalar> RiccatiPath<T> {
    /// `P` at the node with time `t` (relative to the grid origin).
    pub fn at(&self, t: T) -> Result<&DMatrix<T>> {
        let k = steps_in(t - self.grid.t0(), self.grid.dt(), "Riccati path lookup")?;
        self.values
            .get(k)
            .ok_or(Error::OutOfHorizon { t: t.as_f64(), horizon: self.grid.end().as_f64() })
    }

    pub fn initial(&self) -> &DMatrix<T> {
        &self.values[0]
    }
}

/// Integrates the RDE (generator `A`) or RRDE (randomized generator) backward
/// from `P(T) = F` over `grid`.
pub fn solve_rde<T: Scalar>(
    problem: &LqProblem<T>,
    generator: Dynamics<'_, T>,
    grid: &TimeGrid<T>,
    cache: &FlowCache<T>,
) -> Result<RiccatiPath<T>> {
    if (grid.dt() - cache.dt).abs() > T::lit(1e-12) * cache.dt {
        return Err(Error::GridMismatch("flow cache built for a different step".into()));
    }
    let s = problem.control_coupling();
    let keys = generator.step_keys(grid)?;
    let flow_for_step = |k: usize| -> Result<Arc<RiccatiFlow<T>>> {
        cache.get(keys[k], || RiccatiFlow::new(&csr_to_dense(&generator.generator(problem, keys[k])), &s, problem.q(), grid.dt()))
    };
    let mut values = vec![DMatrix::zeros(0, 0); grid.nodes()];
    let mut p = problem.f().clone();
    values[grid.steps()] = p.clone();
    for k in (0..grid.steps()).rev() {
        p = flow_for_step(k)?.apply(&p)?;
        let norm = p.norm();
        if !(norm.as_f64() <= BLOWUP_NORM) {
            return Err(Error::RiccatiBlowup { norm: norm.as_f64() });
        }
        values[k] = p.clone();
    }
    Ok(RiccatiPath { grid: *grid, values })
}

/// Options of the algebraic Riccati solve.
#[derive(Clone, Copy, Debug)]
pub struct AreOptions<T> {
    /// Horizon of the first flow map; each iteration doubles the horizon.
    pub base_horizon: T,
    /// Relative change of `P` between consecutive horizons at which to stop.
    pub tol: T,
    pub max_doublings: usize,
}

impl<T: Scalar> Default for AreOptions<T> {
    fn default() -> Self {
        Self { base_horizon: T::one(), tol: T::lit(1e-10), max_doublings: 64 }
    }
}

/// Infinite-horizon LQR solution and its closed loop.
#[derive(Debug)]
pub struct StabilizedLoop<T: Scalar> {
    pub p_inf: DMatrix<T>,
    /// `A∞ = A − BW⁻¹BᵀP∞`
    pub a_inf: DMatrix<T>,
    /// `K = W⁻¹BᵀP∞`, so that `u = −Kx`.
    pub gain: DMatrix<T>,
    /// `−max Re λ(A∞)`
    pub mu_inf: T,
    /// `‖AᵀP + PA − PBW⁻¹BᵀP + Q‖`
    pub residual: T,
    /// Horizon at which the doubling converged.
    pub horizon: T,
    m_inf: OnceLock<T>,
}

/// Solves the ARE as the long-horizon limit of the RDE with `F = 0`.
pub fn solve_are<T: Scalar>(problem: &LqProblem<T>, options: AreOptions<T>) -> Result<StabilizedLoop<T>> {
    let a = problem.a_dense();
    let s = problem.control_coupling();
    let mut flow = RiccatiFlow::new(&a, &s, problem.q(), options.base_horizon)?;
    let mut prev = flow.from_zero().clone();
    let mut change = T::one();
    let mut converged = false;
    for _ in 0..options.max_doublings {
        flow = flow.doubled()?;
        let p = flow.from_zero();
        let norm = p.norm();
        if !(norm.as_f64() <= BLOWUP_NORM) {
            return Err(Error::RiccatiBlowup { norm: norm.as_f64() });
        }
        change = (p - &prev).norm();
        prev = p.clone();
        if change <= options.tol * norm {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence { iterations: options.max_doublings, change: change.as_f64() });
    }
    let p_inf = prev;
    let gain = problem.w_inv() * problem.b().transpose() * &p_inf;
    let a_inf = &a - problem.b() * &gain;
    let residual = spectral_norm(&are_residual(&a, &s, problem.q(), &p_inf));
    let max_real = max_real_eigenvalue(&a_inf);
    if !(max_real < T::zero()) {
        return Err(Error::NotStabilizing { max_real: max_real.as_f64() });
    }
    Ok(StabilizedLoop {
        p_inf,
        a_inf,
        gain,
        mu_inf: -max_real,
        residual,
        horizon: flow.duration(),
        m_inf: OnceLock::new(),
    })
}

/// `AᵀP + PA − PSP + Q`
pub fn are_residual<T: Scalar>(a: &DMatrix<T>, s: &DMatrix<T>, q: &DMatrix<T>, p: &DMatrix<T>) -> DMatrix<T> {
    a.transpose() * p + p * a - p * s * p + q
}

impl<T: Scalar> StabilizedLoop<T> {
    /// `M∞ ≈ max_t ‖e^{A∞t}‖ e^{μ∞t}` sampled on `t ∈ [0, 5/μ∞]`.
    pub fn m_inf(&self) -> T {
        *self.m_inf.get_or_init(|| {
            let samples = 200;
            let span = T::lit(5.0) / self.mu_inf;
            let dt = span / T::lit(samples as f64);
            let step = (&self.a_inf * dt).exp();
            let mut phi = DMatrix::identity(self.a_inf.nrows(), self.a_inf.ncols());
            let mut best = T::one();
            for j in 1..=samples {
                phi = &step * phi;
                let t = dt * T::lit(j as f64);
                best = best.max(spectral_norm(&phi) * (self.mu_inf * t).exp());
            }
            best
        })
    }
}

/// `u = −W⁻¹Bᵀ P x`
pub fn feedback_control<T: Scalar>(problem: &LqProblem<T>, p: &DMatrix<T>, x: &DVector<T>) -> DVector<T> {
    -(problem.w_inv() * (problem.b().transpose() * (p * x)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::csr_from_triplets;

    pub(crate) fn scalar_problem(a: f64, q: f64, f: f64) -> LqProblem<f64> {
        LqProblem::new(
            csr_from_triplets(1, 1, [(0, 0, a)]),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, q),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, f),
            DVector::from_element(1, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn doubling_equals_composition() {
        let a = DMatrix::from_row_slice(3, 3, &[-2.0, 1.0, 0.0, 0.5, -1.0, 0.3, 0.0, 0.2, 0.4]);
        let b = DMatrix::from_row_slice(3, 1, &[1.0, 0.0, 0.5]);
        let s = &b * b.transpose();
        let q = DMatrix::identity(3, 3) * 0.7;
        let flow = RiccatiFlow::new(&a, &s, &q, 0.3).unwrap();
        let p0 = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 0.5, 0.1, 0.0, 0.1, 2.0]);
        let twice = flow.apply(&flow.apply(&p0).unwrap()).unwrap();
        let doubled = flow.doubled().unwrap().apply(&p0).unwrap();
        assert!((twice - doubled).amax() < 1e-12);
    }

    #[test]
    fn scalar_rde_is_tanh() {
        let problem = scalar_problem(0.0, 1.0, 0.0);
        let grid = TimeGrid::new(0.0, 1.0, 5).unwrap();
        let path = solve_rde(&problem, Dynamics::System, &grid, &FlowCache::new(1.0)).unwrap();
        for k in 0..=5 {
            let expected = (5.0 - k as f64).tanh();
            assert!((path.values[k][(0, 0)] - expected).abs() < 1e-12, "k = {k}");
        }
    }

    #[test]
    fn scalar_are_closed_forms() {
        let l = solve_are(&scalar_problem(0.0, 1.0, 0.0), AreOptions::default()).unwrap();
        assert!((l.p_inf[(0, 0)] - 1.0).abs() < 1e-10);
        assert!((l.a_inf[(0, 0)] + 1.0).abs() < 1e-10);
        assert!((l.mu_inf - 1.0).abs() < 1e-10);
        let l = solve_are(&scalar_problem(1.0, 1.0, 0.0), AreOptions::default()).unwrap();
        assert!((l.p_inf[(0, 0)] - (1.0 + 2f64.sqrt())).abs() < 1e-9);
        assert!((l.a_inf[(0, 0)] + 2f64.sqrt()).abs() < 1e-9);
        assert!(l.m_inf() >= 1.0 && l.m_inf() < 1.0 + 1e-9);
    }

    #[test]
    fn not_stabilizable_is_reported() {
        // unstable mode that the input cannot reach
        let problem = LqProblem::new(
            csr_from_triplets(2, 2, [(0, 0, -1.0), (1, 1, 0.5)]),
            DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
            DMatrix::zeros(2, 2),
            DVector::zeros(2),
        )
        .unwrap();
        let err = solve_are(&problem, AreOptions::default()).unwrap_err();
        assert!(matches!(err, Error::RiccatiBlowup { .. } | Error::NoConvergence { .. } | Error::NotStabilizing { .. }), "{err:?}");
    }

    #[test]
    fn feedback_examples() {
        let problem = scalar_problem(0.0, 1.0, 0.0);
        let p = DMatrix::from_element(1, 1, 1.0);
        assert_eq!(feedback_control(&problem, &p, &DVector::from_element(1, 2.0))[0], -2.0);
        assert_eq!(feedback_control(&problem, &p, &DVector::zeros(1))[0], 0.0);
    }
}

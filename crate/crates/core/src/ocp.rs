//! Finite-horizon optimal control by steepest descent with adjoint gradients
//! and exact line search.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::integrator::{
    fmt_float, l2_gradient, propagate_adjoint, propagate_states, quadratic_cost, OperatorCache, TimeGrid,
    Trajectory,
};
use crate::model::LqProblem;
use crate::rbm::{build_propagator, Dynamics};
use crate::Scalar;

/// Stopping rule of the descent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OcpSettings<T> {
    /// Relative L² change of the control below which the iteration stops.
    pub tol: T,
    pub max_iter: usize,
}

impl<T: Scalar> Default for OcpSettings<T> {
    fn default() -> Self {
        Self { tol: T::lit(1e-5), max_iter: 1000 }
    }
}

/// Minimizer of one window.
#[derive(Clone, Debug)]
pub struct OcpResult<T: Scalar> {
    /// Controls and the states they produce under the window's generator.
    pub trajectory: Trajectory<T>,
    pub cost: T,
    /// Gradient evaluations performed.
    pub iterations: usize,
    pub converged: bool,
    /// `‖∇J‖_{L²}` at the returned control.
    pub gradient_norm: T,
    /// `J` before each update, then at the returned control.
    pub cost_history: Vec<T>,
    pub seconds: f64,
}

impl<T: Scalar> OcpResult<T> {
    pub fn controls(&self) -> &DMatrix<T> {
        &self.trajectory.controls
    }
}

/// `√(Σ_k w_k |u_k|²)` with trapezoidal weights.
pub fn grid_l2_norm<T: Scalar>(grid: &TimeGrid<T>, u: &DMatrix<T>) -> T {
    grid_l2_dot(grid, u, u).sqrt()
}

fn grid_l2_dot<T: Scalar>(grid: &TimeGrid<T>, a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    (0..grid.nodes()).fold(T::zero(), |acc, k| acc + grid.weight(k) * a.column(k).dot(&b.column(k)))
}

/// Minimizes the discrete cost of `problem` on `grid` from `x_init` under
/// `dynamics`. The grid origin is the window start.
pub fn solve_ocp<T: Scalar>(
    problem: &LqProblem<T>,
    dynamics: Dynamics<'_, T>,
    x_init: &DVector<T>,
    grid: &TimeGrid<T>,
    cache: &OperatorCache<T>,
    warm_start: Option<&DMatrix<T>>,
    settings: &OcpSettings<T>,
) -> Result<OcpResult<T>> {
    let clock = Instant::now();
    if x_init.len() != problem.n() {
        return Err(Error::BadDimension(format!("initial state has {} entries, expected {}", x_init.len(), problem.n())));
    }
    let prop = build_propagator(problem, dynamics, grid, cache)?;
    let b = problem.b();
    let w = problem.w();
    let (q, f) = (problem.q_op(), problem.f_op());
    let mut u = match warm_start {
        Some(u0) if u0.nrows() == problem.m() && u0.ncols() == grid.nodes() => u0.clone(),
        Some(u0) => {
            return Err(Error::GridMismatch(format!(
                "warm start is {}x{}, window needs {}x{}",
                u0.nrows(),
                u0.ncols(),
                problem.m(),
                grid.nodes()
            )))
        }
        None => DMatrix::zeros(problem.m(), grid.nodes()),
    };
    let zero = DVector::zeros(problem.n());
    let mut x = propagate_states(&prop, b, &u, x_init)?;
    let mut cost = quadratic_cost(grid, &x, &u, q, w, f);
    let mut history = vec![cost];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < settings.max_iter {
        iterations += 1;
        let adj = propagate_adjoint(&prop, q, f, &x)?;
        let g = l2_gradient(&adj, b, w, &u);
        let g2 = grid_l2_dot(grid, &g, &g);
        if g2 == T::zero() {
            converged = true;
            break;
        }
        let xg = propagate_states(&prop, b, &g, &zero)?;
        let curvature = quadratic_cost(grid, &xg, &g, q, w, f);
        if !(curvature > T::eps() * g2) {
            return Err(Error::LineSearchDegenerate { curvature: curvature.as_f64() });
        }
        let alpha = g2 / (T::lit(2.0) * curvature);
        u -= &g * alpha;
        x -= &xg * alpha;
        cost -= g2 * g2 / (T::lit(4.0) * curvature);
        history.push(cost);
        let unorm = grid_l2_norm(grid, &u);
        let step = alpha * g2.sqrt();
        if step <= settings.tol * unorm || unorm == T::zero() {
            converged = true;
            break;
        }
    }
    let states = propagate_states(&prop, b, &u, x_init)?;
    let cost = quadratic_cost(grid, &states, &u, q, w, f);
    let adj = propagate_adjoint(&prop, q, f, &states)?;
    let gradient_norm = grid_l2_norm(grid, &l2_gradient(&adj, b, w, &u));
    *history.last_mut().expect("history is never empty") = cost;
    Ok(OcpResult {
        trajectory: Trajectory::new(*grid, states, u)?,
        cost,
        iterations,
        converged,
        gradient_norm,
        cost_history: history,
        seconds: clock.elapsed().as_secs_f64(),
    })
}

/// `y*`: the state produced by `controls` under the true generator `A`.
pub fn rollout_true_dynamics<T: Scalar>(
    problem: &LqProblem<T>,
    controls: &DMatrix<T>,
    x_init: &DVector<T>,
    grid: &TimeGrid<T>,
    cache: &OperatorCache<T>,
) -> Result<Trajectory<T>> {
    let prop = build_propagator(problem, Dynamics::System, grid, cache)?;
    let states = propagate_states(&prop, problem.b(), controls, x_init)?;
    Trajectory::new(*grid, states, controls.clone())
}

/// One row of the per-solve diagnostics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveDiagnostics {
    pub window: usize,
    pub iterations: usize,
    pub converged: bool,
    pub cost: f64,
    pub gradient_norm: f64,
    pub seconds: f64,
}

impl SolveDiagnostics {
    pub const CSV_HEADER: &'static str = "window,iterations,converged,cost,gradient_norm,seconds";

    pub fn from_result<T: Scalar>(window: usize, r: &OcpResult<T>) -> Self {
        Self {
            window,
            iterations: r.iterations,
            converged: r.converged,
            cost: r.cost.as_f64(),
            gradient_norm: r.gradient_norm.as_f64(),
            seconds: r.seconds,
        }
    }

    pub fn write_csv<W: Write>(rows: &[Self], mut out: W) -> Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        for r in rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.window,
                r.iterations,
                r.converged,
                fmt_float(r.cost),
                fmt_float(r.gradient_norm),
                fmt_float(r.seconds)
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::csr_from_triplets;
    use crate::riccati::{solve_rde, FlowCache};

    fn scalar(x0: f64) -> LqProblem<f64> {
        LqProblem::new(
            csr_from_triplets(1, 1, [(0, 0, 0.0)]),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
            DVector::from_element(1, x0),
        )
        .unwrap()
    }

    #[test]
    fn zero_state_is_optimal_immediately() {
        let problem = scalar(0.0);
        let grid = TimeGrid::new(0.0, 0.1, 50).unwrap();
        let r = solve_ocp(&problem, Dynamics::System, problem.x0(), &grid, &OperatorCache::new(0.1), None, &OcpSettings::default()).unwrap();
        assert_eq!(r.iterations, 1);
        assert!(r.converged);
        assert_eq!(r.cost, 0.0);
        assert!(r.controls().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_value_matches_riccati() {
        let problem = scalar(1.0);
        let dt = 0.01;
        let grid = TimeGrid::new(0.0, dt, 500).unwrap();
        let r = solve_ocp(&problem, Dynamics::System, problem.x0(), &grid, &OperatorCache::new(dt), None, &OcpSettings { tol: 1e-8, max_iter: 1000 }).unwrap();
        assert!(r.converged);
        assert!((r.cost - 5f64.tanh()).abs() < 1e-3, "cost {}", r.cost);
        let path = solve_rde(&problem, Dynamics::System, &grid, &FlowCache::new(dt)).unwrap();
        assert!((path.initial()[(0, 0)] - r.cost).abs() < 1e-3);
    }

    #[test]
    fn descent_is_monotone_and_cost_consistent() {
        let (problem, _) = crate::model::heat_ring_example::<f64>(11).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 15).unwrap();
        let r = solve_ocp(&problem, Dynamics::System, problem.x0(), &grid, &OperatorCache::new(1.0), None, &OcpSettings::default()).unwrap();
        assert!(r.converged);
        assert!(r.cost_history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        let direct = crate::integrator::trapz_quadratic(&r.trajectory, problem.q(), problem.w(), problem.f());
        assert!((direct - r.cost).abs() <= 1e-12 * r.cost);
        let unorm = grid_l2_norm(&grid, r.controls());
        assert!(r.gradient_norm <= 1e-3 * (1.0 + unorm));
    }

    #[test]
    fn warm_start_shape_is_checked() {
        let problem = scalar(1.0);
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let bad = DMatrix::zeros(1, 3);
        let err = solve_ocp(&problem, Dynamics::System, problem.x0(), &grid, &OperatorCache::new(1.0), Some(&bad), &OcpSettings::default()).unwrap_err();
        assert!(matches!(err, Error::GridMismatch(_)));
    }

    #[test]
    fn zero_control_rollout_is_free_evolution() {
        let (problem, _) = crate::model::heat_ring_example::<f64>(11).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 5).unwrap();
        let cache = OperatorCache::new(1.0);
        let u = DMatrix::zeros(1, 6);
        let y = rollout_true_dynamics(&problem, &u, problem.x0(), &grid, &cache).unwrap();
        let prop = build_propagator(&problem, Dynamics::System, &grid, &cache).unwrap();
        assert_eq!(y.states, propagate_states(&prop, problem.b(), &u, problem.x0()).unwrap());
    }
}

//! Randomized checks of the splitting law, the discrete gradient and the
//! stability and convergence estimates behind RBM-MPC.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::CsrMatrix;
use proptest::prelude::*;
use rbm_mpc::integrator::{
    cn_step_matrix, l2_gradient, propagate_adjoint, propagate_states, quadratic_cost, GeneratorMatrix, OperatorCache,
    Propagator, TimeGrid, WeightOp,
};
use rbm_mpc::linalg::{csr_from_triplets, csr_to_dense};
use rbm_mpc::model::{build_splitting, heat_ring_example};
use rbm_mpc::rbm::{build_propagator, draw_schedule, substream, Dynamics};
use rbm_mpc::riccati::{solve_are, solve_rde, AreOptions, FlowCache};

fn sparse_from_dense(d: &DMatrix<f64>) -> CsrMatrix<f64> {
    let (r, c) = d.shape();
    csr_from_triplets(r, c, (0..r).flat_map(|i| (0..c).map(move |j| (i, j))).filter(|&(i, j)| d[(i, j)] != 0.0).map(|(i, j)| (i, j, d[(i, j)])))
}

fn largest_singular_value(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}

/// `n × n` matrix with entries in `[-3, 3]`, about half of them zero.
fn sparse_matrix(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec((any::<bool>(), -3.0..3.0f64), n * n)
        .prop_map(move |v| DMatrix::from_iterator(n, n, v.into_iter().map(|(keep, x)| if keep { x } else { 0.0 })))
}

fn dense(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0..1.0f64, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

/// Splitting with `m` parts and every nonempty subset of them listed.
fn splitting_case() -> impl Strategy<Value = (Vec<DMatrix<f64>>, Vec<(Vec<usize>, f64)>)> {
    (3usize..6, 2usize..5).prop_flat_map(|(n, m)| {
        let subsets = (1usize << m) - 1;
        (prop::collection::vec(sparse_matrix(n), m), prop::collection::vec(0.05..1.0f64, subsets)).prop_map(
            move |(parts, weights)| {
                let total: f64 = weights.iter().sum();
                let subsets = (1..=weights.len())
                    .zip(&weights)
                    .map(|(mask, w)| ((0..m).filter(|b| mask & (1 << b) != 0).collect(), w / total))
                    .collect();
                (parts, subsets)
            },
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pieces_are_unbiased_and_variance_matches_enumeration((parts, subsets) in splitting_case()) {
        let csr: Vec<_> = parts.iter().map(sparse_from_dense).collect();
        let s = build_splitting(csr, subsets.clone()).unwrap();
        let a: DMatrix<f64> = parts.iter().sum();
        let pis: Vec<f64> = (0..parts.len())
            .map(|m| subsets.iter().filter(|(set, _)| set.contains(&m)).map(|(_, p)| p).sum())
            .collect();
        let mut mean = DMatrix::zeros(a.nrows(), a.ncols());
        let mut variance = 0.0;
        for (omega, (set, p)) in subsets.iter().enumerate() {
            let piece: DMatrix<f64> = set.iter().map(|&m| &parts[m] / pis[m]).sum();
            prop_assert!((csr_to_dense(&s.piece(omega)) - &piece).amax() <= 1e-12 * (1.0 + piece.amax()));
            mean += &piece * *p;
            let dev = largest_singular_value(&(&a - &piece));
            variance += p * dev * dev;
        }
        let scale = 1.0 + largest_singular_value(&a);
        prop_assert!((mean - &a).amax() <= 1e-10 * scale);
        prop_assert!((s.variance() - variance).abs() <= 1e-12 * variance.max(1.0));
    }

    #[test]
    fn adjoint_gradient_matches_central_differences(
        a in sparse_matrix(7),
        b in dense(7, 2),
        lq in dense(7, 7),
        lw in dense(2, 2),
        lf in dense(7, 7),
        x0 in dense(7, 1),
        u in dense(2, 11),
    ) {
        let grid = TimeGrid::new(0.0, 0.1, 10).unwrap();
        let q = &lq * lq.transpose();
        let w = &lw * lw.transpose() + DMatrix::identity(2, 2);
        let f = &lf * lf.transpose();
        let x0 = DVector::from_column_slice(x0.as_slice());
        let op = cn_step_matrix(&GeneratorMatrix::Sparse(sparse_from_dense(&a)), grid.dt()).unwrap();
        let prop = Propagator::constant(Arc::new(op), grid).unwrap();
        let (qo, fo) = (WeightOp::from_matrix(&q), WeightOp::from_matrix(&f));
        let cost = |u: &DMatrix<f64>| {
            let x = propagate_states(&prop, &b, u, &x0).unwrap();
            quadratic_cost(&grid, &x, u, &qo, &w, &fo)
        };
        let x = propagate_states(&prop, &b, &u, &x0).unwrap();
        let adj = propagate_adjoint(&prop, &qo, &fo, &x).unwrap();
        let g = l2_gradient(&adj, &b, &w, &u);
        // the L² gradient pairs with the trapezoidal weights
        let analytic = DMatrix::from_fn(2, 11, |i, k| grid.weight(k) * g[(i, k)]);
        let eps = 1e-6;
        let numeric = DMatrix::from_fn(2, 11, |i, k| {
            let (mut up, mut down) = (u.clone(), u.clone());
            up[(i, k)] += eps;
            down[(i, k)] -= eps;
            (cost(&up) - cost(&down)) / (2.0 * eps)
        });
        let rel = (&numeric - &analytic).norm() / analytic.norm().max(1e-12);
        prop_assert!(rel <= 1e-5, "relative gradient error {rel:e}");
    }

    #[test]
    fn randomized_free_evolution_is_nonexpansive(seed in any::<u64>(), h_steps in 1usize..4) {
        // every piece of the ring splitting is dissipative, so μ_R = 0
        let (p, s) = heat_ring_example::<f64>(11).unwrap();
        prop_assert_eq!(s.mu_r(), 0.0);
        let dt = 0.25;
        let h = dt * h_steps as f64;
        let horizon = h * 8.0;
        let sched = draw_schedule(&s, h, horizon, dt, &mut substream(seed, 0, 0)).unwrap();
        let grid = TimeGrid::new(0.0, dt, 8 * h_steps).unwrap();
        let cache = OperatorCache::new(dt);
        let prop = build_propagator(&p, Dynamics::Randomized { splitting: &s, schedule: &sched }, &grid, &cache).unwrap();
        let x0 = DVector::from_fn(11, |i, _| ((i * 7 + seed as usize % 11) as f64).sin());
        let x = propagate_states(&prop, p.b(), &DMatrix::zeros(1, grid.nodes()), &x0).unwrap();
        for k in 1..grid.nodes() {
            prop_assert!(x.column(k).norm() <= x.column(k - 1).norm() * (1.0 + 1e-12));
        }
    }
}

#[test]
fn rde_approaches_are_at_twice_the_closed_loop_rate() {
    let (p, _) = heat_ring_example::<f64>(11).unwrap();
    let lqr = solve_are(&p, AreOptions::default()).unwrap();
    let grid = TimeGrid::new(0.0, 1.0, 40).unwrap();
    let path = solve_rde(&p, Dynamics::System, &grid, &FlowCache::new(1.0)).unwrap();
    let gap0 = largest_singular_value(&(p.f() - &lqr.p_inf));
    let mut ratios = Vec::new();
    for k in 0..=40 {
        let remaining = 40.0 - k as f64;
        let gap = largest_singular_value(&(&path.values[k] - &lqr.p_inf));
        ratios.push(gap / (gap0 * (-2.0 * lqr.mu_inf * remaining).exp()));
    }
    // a bounded constant, and the ratio settles once the fast modes are gone
    assert!(ratios.iter().all(|r| *r <= 2.5), "{ratios:?}");
    assert!((ratios[0] - ratios[4]).abs() < 0.01 * ratios[0]);
}

/// Mean squared distance between the randomized and the exact semigroup
/// shrinks linearly in `h` once `h‖A‖` is small.
#[test]
fn semigroup_gap_is_linear_in_h_for_small_steps() {
    let (p, s) = heat_ring_example::<f64>(11).unwrap();
    let a = p.a_dense();
    let horizon = 5e-4;
    let exact = (&a * horizon).exp();
    let mut points = Vec::new();
    for k in [4.0, 8.0, 16.0] {
        let h = horizon / k;
        let exps: Vec<_> = (0..s.subsets().len()).map(|w| (csr_to_dense(&s.piece(w)) * h).exp()).collect();
        let reps = 300;
        let mut mean = 0.0;
        for r in 0..reps {
            let sched = draw_schedule(&s, h, horizon, h, &mut substream(11, r, 0)).unwrap();
            let sr = sched.picks().iter().fold(DMatrix::identity(11, 11), |acc, &w| &exps[w] * acc);
            let gap = largest_singular_value(&(sr - &exact));
            mean += gap * gap / reps as f64;
        }
        assert!(mean <= h * horizon * s.variance());
        points.push((h.ln(), mean.ln()));
    }
    let slope = (points[0].1 - points[2].1) / (points[0].0 - points[2].0);
    assert!((slope - 1.0).abs() <= 0.3, "slope {slope}");
}

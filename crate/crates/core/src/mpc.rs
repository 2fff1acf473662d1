//! Receding-horizon loops: classical MPC, RBM-MPC and the infinite-horizon
//! LQR baseline, stitched onto a common grid on `[0, t_end]`.
//!
//! Windows are `[τ_{i−1}, τ_{i−1} + T]` with `τ_i = iτ`. Only the part on
//! `[τ_{i−1}, τ_i]` of each solution is applied; the control node at `τ_i`
//! belongs to the incoming window (right-continuous stitching) except at
//! `t_end`, where the last window's value is kept.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::integrator::{cn_step_matrix, propagate_states, GeneratorMatrix, OperatorCache, Propagator, TimeGrid, Trajectory};
use crate::model::{LqProblem, Splitting};
use crate::ocp::{rollout_true_dynamics, solve_ocp, OcpSettings, SolveDiagnostics};
use crate::rbm::{draw_substream_schedule, steps_in, Dynamics, RbmSchedule, RealizationLog};
use crate::riccati::StabilizedLoop;
use crate::Scalar;

/// Time parameters of a receding-horizon run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HorizonPlan<T> {
    /// Prediction horizon `T`.
    pub horizon: T,
    /// Control horizon `τ`.
    pub tau: T,
    pub t_end: T,
    pub dt: T,
    /// RBM subinterval length.
    pub h: T,
}

/// Step counts of a validated plan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlanSteps {
    pub horizon: usize,
    pub tau: usize,
    pub total: usize,
    pub windows: usize,
}

impl<T: Scalar> HorizonPlan<T> {
    pub fn validate(&self) -> Result<PlanSteps> {
        if !(self.tau > T::zero()) || self.tau > self.horizon {
            return Err(Error::GridMismatch(format!("need 0 < tau <= T, got tau = {} and T = {}", self.tau, self.horizon)));
        }
        let horizon = steps_in(self.horizon, self.dt, "step dt vs horizon T")?;
        let tau = steps_in(self.tau, self.dt, "step dt vs control horizon tau")?;
        let total = steps_in(self.t_end, self.dt, "step dt vs final time")?;
        let windows = steps_in(self.t_end, self.tau, "control horizon tau vs final time")?;
        steps_in(self.horizon, self.h, "subinterval length h vs horizon T")?;
        steps_in(self.h, self.dt, "integrator step dt vs subinterval length h")?;
        if windows == 0 {
            return Err(Error::GridMismatch("final time must be positive".into()));
        }
        Ok(PlanSteps { horizon, tau, total, windows })
    }

    /// Grid of the stitched run.
    pub fn grid(&self) -> Result<TimeGrid<T>> {
        TimeGrid::new(T::zero(), self.dt, self.validate()?.total)
    }

    /// Grid of one window relative to its start.
    pub fn window_grid(&self) -> Result<TimeGrid<T>> {
        TimeGrid::new(T::zero(), self.dt, self.validate()?.horizon)
    }
}

/// Solver options shared by the windows of a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MpcOptions<T> {
    pub ocp: OcpSettings<T>,
    /// Start each window from the previous window's unused tail.
    pub warm_start: bool,
}

impl<T: Scalar> Default for MpcOptions<T> {
    fn default() -> Self {
        Self { ocp: OcpSettings::default(), warm_start: false }
    }
}

/// A stitched closed-loop run.
#[derive(Clone, Debug)]
pub struct MpcRun<T: Scalar> {
    /// States under the true generator and the applied controls on `[0, t_end]`.
    pub trajectory: Trajectory<T>,
    /// Schedules drawn (empty for classical MPC and LQR).
    pub log: RealizationLog<T>,
    pub windows: Vec<SolveDiagnostics>,
}

/// Runs receding-horizon loops for one problem and plan, sharing step
/// factorizations between runs.
#[derive(Debug)]
pub struct MpcEngine<'a, T: Scalar> {
    problem: &'a LqProblem<T>,
    plan: HorizonPlan<T>,
    steps: PlanSteps,
    options: MpcOptions<T>,
    cache: OperatorCache<T>,
}

impl<'a, T: Scalar> MpcEngine<'a, T> {
    pub fn new(problem: &'a LqProblem<T>, plan: HorizonPlan<T>, options: MpcOptions<T>) -> Result<Self> {
        let steps = plan.validate()?;
        Ok(Self { problem, plan, steps, options, cache: OperatorCache::new(plan.dt) })
    }

    pub fn plan(&self) -> &HorizonPlan<T> {
        &self.plan
    }

    pub fn cache(&self) -> &OperatorCache<T> {
        &self.cache
    }

    /// Classical MPC: every window uses `A`.
    pub fn run_mpc(&self) -> Result<MpcRun<T>> {
        self.receding(|_| Ok(None))
    }

    /// RBM-MPC with schedules drawn from the substreams of (`seed`, `realization`).
    pub fn run_rbm_mpc(&self, splitting: &Splitting<T>, seed: u64, realization: u64) -> Result<MpcRun<T>> {
        self.check_splitting(splitting)?;
        let p = self.plan;
        self.receding(|i| {
            draw_substream_schedule(splitting, p.h, p.horizon, p.dt, seed, realization, i as u64)
                .map(|s| Some((splitting, s)))
        })
    }

    /// RBM-MPC with the schedules of a recorded log.
    pub fn replay(&self, splitting: &Splitting<T>, log: &RealizationLog<T>) -> Result<MpcRun<T>> {
        self.check_splitting(splitting)?;
        if log.len() != self.steps.windows {
            return Err(Error::GridMismatch(format!("log has {} schedules, plan has {} windows", log.len(), self.steps.windows)));
        }
        self.receding(|i| {
            let s = log.schedules[i].clone();
            RbmSchedule::from_picks(splitting, s.h(), s.horizon(), s.picks().to_vec())?;
            Ok(Some((splitting, s)))
        })
    }

    fn check_splitting(&self, splitting: &Splitting<T>) -> Result<()> {
        if splitting.dim() != self.problem.n() {
            return Err(Error::BadDimension(format!("splitting is {}-dimensional, problem {}", splitting.dim(), self.problem.n())));
        }
        Ok(())
    }

    fn receding<'s>(
        &self,
        mut schedule_for: impl FnMut(usize) -> Result<Option<(&'s Splitting<T>, RbmSchedule<T>)>>,
    ) -> Result<MpcRun<T>> {
        let problem = self.problem;
        let PlanSteps { horizon, tau, total, windows } = self.steps;
        let grid = TimeGrid::new(T::zero(), self.plan.dt, total)?;
        let window_grid = TimeGrid::new(T::zero(), self.plan.dt, horizon)?;
        let kept_grid = TimeGrid::new(T::zero(), self.plan.dt, tau)?;
        let mut states = DMatrix::zeros(problem.n(), grid.nodes());
        let mut controls = DMatrix::zeros(problem.m(), grid.nodes());
        let mut log = RealizationLog::default();
        let mut diagnostics = Vec::with_capacity(windows);
        let mut x = problem.x0().clone();
        let mut guess: Option<DMatrix<T>> = None;
        for i in 0..windows {
            let drawn = schedule_for(i).map_err(|e| e.in_window(i))?;
            let dynamics = match &drawn {
                Some((splitting, schedule)) => Dynamics::Randomized { splitting, schedule },
                None => Dynamics::System,
            };
            let res = solve_ocp(problem, dynamics, &x, &window_grid, &self.cache, guess.as_ref(), &self.options.ocp)
                .map_err(|e| e.in_window(i))?;
            let u = res.controls();
            let kept_u = u.columns(0, tau + 1).into_owned();
            let y = rollout_true_dynamics(problem, &kept_u, &x, &kept_grid, &self.cache).map_err(|e| e.in_window(i))?;
            let offset = i * tau;
            let last = if i + 1 == windows { tau + 1 } else { tau };
            controls.columns_mut(offset, last).copy_from(&u.columns(0, last));
            states.columns_mut(offset, tau + 1).copy_from(&y.states);
            x = y.states.column(tau).into_owned();
            if self.options.warm_start {
                let mut next = DMatrix::zeros(problem.m(), horizon + 1);
                let tail = horizon + 1 - tau;
                next.columns_mut(0, tail).copy_from(&u.columns(tau, tail));
                for k in tail..=horizon {
                    next.set_column(k, &u.column(horizon));
                }
                guess = Some(next);
            }
            diagnostics.push(SolveDiagnostics::from_result(i, &res));
            if let Some((_, schedule)) = drawn {
                log.schedules.push(schedule);
            }
        }
        Ok(MpcRun { trajectory: Trajectory::new(grid, states, controls)?, log, windows: diagnostics })
    }
}

/// LQR closed loop `ẋ = A∞x`, `u = −Kx`, on `grid` (CN in time).
pub fn run_infinite_horizon<T: Scalar>(
    problem: &LqProblem<T>,
    lqr: &StabilizedLoop<T>,
    grid: &TimeGrid<T>,
) -> Result<MpcRun<T>> {
    let op = std::sync::Arc::new(cn_step_matrix(&GeneratorMatrix::Dense(lqr.a_inf.clone()), grid.dt())?);
    let prop = Propagator::constant(op, *grid)?;
    let zero_b = DMatrix::zeros(problem.n(), problem.m());
    let zero_u = DMatrix::zeros(problem.m(), grid.nodes());
    let states = propagate_states(&prop, &zero_b, &zero_u, problem.x0())?;
    let controls = -(&lqr.gain * &states);
    Ok(MpcRun { trajectory: Trajectory::new(*grid, states, controls)?, log: RealizationLog::default(), windows: Vec::new() })
}

/// State norms `|x(t_k)|` of a run.
pub fn state_norm_series<T: Scalar>(run: &MpcRun<T>) -> DVector<T> {
    DVector::from_vec(run.trajectory.state_norms())
}

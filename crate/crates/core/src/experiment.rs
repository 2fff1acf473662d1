//! Monte-Carlo experiments on top of the receding-horizon engine: error
//! metrics, parameter sweeps, rate fits and wall-clock benchmarks.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::integrator::{fmt_float, OperatorCache, TimeGrid};
use crate::model::{heat_ring_with_profile, LqProblem, RingProfile, Splitting};
use crate::mpc::{run_infinite_horizon, HorizonPlan, MpcEngine, MpcOptions, MpcRun};
use crate::ocp::{grid_l2_norm, solve_ocp};
use crate::rbm::Dynamics;
use crate::riccati::{solve_are, AreOptions, StabilizedLoop};
use crate::Scalar;

/// `(∫ |u|² dt)^{1/2}` by the trapezoidal rule on the grid nodes.
pub fn l2_time_norm<T: Scalar>(grid: &TimeGrid<T>, signal: &DMatrix<T>) -> T {
    grid_l2_norm(grid, signal)
}

/// `max_t (x(t)ᵀx(t)/n)^{1/2}` over the grid nodes.
pub fn linf_scaled_norm<T: Scalar>(states: &DMatrix<T>) -> T {
    let n = T::lit(states.nrows().max(1) as f64);
    states.column_iter().map(|c| (c.norm_squared() / n).sqrt()).fold(T::zero(), |a, b| a.max(b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    L2Time,
    LinfScaled,
}

/// `‖a − reference‖ / ‖reference‖`.
pub fn relative_error<T: Scalar>(
    grid: &TimeGrid<T>,
    a: &DMatrix<T>,
    reference: &DMatrix<T>,
    kind: NormKind,
) -> Result<T> {
    if a.shape() != reference.shape() {
        return Err(Error::GridMismatch(format!("signals of shape {:?} and {:?}", a.shape(), reference.shape())));
    }
    let norm = |m: &DMatrix<T>| match kind {
        NormKind::L2Time => l2_time_norm(grid, m),
        NormKind::LinfScaled => linf_scaled_norm(m),
    };
    let denom = norm(reference);
    if denom == T::zero() {
        return Err(Error::ZeroReference);
    }
    Ok(norm(&(a - reference)) / denom)
}

/// Error quantities reported per realization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    URmVsInf,
    URmVsM,
    UMVsInf,
    XRmVsInf,
    XRmVsM,
    XMVsInf,
}

impl Metric {
    pub const ALL: [Metric; 6] =
        [Metric::URmVsInf, Metric::URmVsM, Metric::UMVsInf, Metric::XRmVsInf, Metric::XRmVsM, Metric::XMVsInf];

    pub fn name(self) -> &'static str {
        match self {
            Metric::URmVsInf => "rel_u_rm_vs_inf",
            Metric::URmVsM => "rel_u_rm_vs_m",
            Metric::UMVsInf => "rel_u_m_vs_inf",
            Metric::XRmVsInf => "rel_x_rm_vs_inf",
            Metric::XRmVsM => "rel_x_rm_vs_m",
            Metric::XMVsInf => "rel_x_m_vs_inf",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Sample mean and unbiased standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        let count = values.len();
        if count == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, count };
        }
        let mean = values.iter().sum::<f64>() / count as f64;
        let std = if count > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, count }
    }

    /// Two standard deviations of the population.
    pub fn two_sigma(&self) -> f64 {
        2.0 * self.std
    }

    /// Two standard errors of the mean.
    pub fn two_sigma_mean(&self) -> f64 {
        2.0 * self.std / (self.count as f64).sqrt()
    }
}

/// Relative errors of one parameter value over all realizations.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorReport {
    pub parameter: f64,
    /// `samples[r][metric]`
    pub samples: Vec<[f64; 6]>,
}

impl ErrorReport {
    pub fn values(&self, metric: Metric) -> Vec<f64> {
        self.samples.iter().map(|s| s[metric.index()]).collect()
    }

    pub fn stats(&self, metric: Metric) -> Stats {
        Stats::of(&self.values(metric))
    }
}

/// Terminal weight used by a scenario.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalWeight {
    /// `F = 0`
    #[default]
    Zero,
    /// `F = P∞`
    Riccati,
}

/// Where the problem and splitting of a scenario come from.
#[derive(Clone, Debug)]
pub enum ProblemSource<T: Scalar> {
    HeatRing { n: usize, profile: RingProfile },
    Given { problem: LqProblem<T>, splitting: Splitting<T> },
}

/// Everything needed to run one experiment point.
#[derive(Clone, Debug)]
pub struct Scenario<T: Scalar> {
    pub source: ProblemSource<T>,
    pub terminal: TerminalWeight,
    pub plan: HorizonPlan<T>,
    pub options: MpcOptions<T>,
    pub realizations: usize,
    pub base_seed: u64,
}

impl<T: Scalar> Scenario<T> {
    /// Heat ring with the given size and the default receding-horizon setup
    /// (`T = 15`, `τ = 10`, `t_end = 200`, `dt = h = 1`, 20 realizations).
    pub fn heat_ring(n: usize) -> Self {
        Self {
            source: ProblemSource::HeatRing { n, profile: RingProfile::default() },
            terminal: TerminalWeight::Zero,
            plan: HorizonPlan {
                horizon: T::lit(15.0),
                tau: T::lit(10.0),
                t_end: T::lit(200.0),
                dt: T::one(),
                h: T::one(),
            },
            options: MpcOptions::default(),
            realizations: 20,
            base_seed: 0,
        }
    }

    /// Problem (with the terminal weight applied), splitting and LQR solution.
    pub fn build(&self) -> Result<(LqProblem<T>, Splitting<T>, StabilizedLoop<T>)> {
        let (problem, splitting, lqr) = self.assemble(true)?;
        Ok((problem, splitting, lqr.expect("requested")))
    }

    /// Problem and splitting only. The ARE is solved only when the terminal
    /// weight needs it.
    pub fn build_problem(&self) -> Result<(LqProblem<T>, Splitting<T>)> {
        let (problem, splitting, _) = self.assemble(false)?;
        Ok((problem, splitting))
    }

    fn assemble(&self, want_lqr: bool) -> Result<(LqProblem<T>, Splitting<T>, Option<StabilizedLoop<T>>)> {
        let (problem, splitting) = match &self.source {
            ProblemSource::HeatRing { n, profile } => heat_ring_with_profile(*n, *profile)?,
            ProblemSource::Given { problem, splitting } => (problem.clone(), splitting.clone()),
        };
        let lqr = match (want_lqr, self.terminal) {
            (false, TerminalWeight::Zero) => None,
            _ => Some(solve_are(&problem, AreOptions::default())?),
        };
        let problem = match (self.terminal, &lqr) {
            (TerminalWeight::Riccati, Some(l)) => problem.with_terminal_weight(l.p_inf.clone())?,
            _ => problem,
        };
        Ok((problem, splitting, lqr))
    }

    /// Copy with one parameter changed. Varying `h` also sets `dt = h`.
    pub fn with_parameter(&self, axis: SweepAxis, value: f64) -> Result<Self> {
        let mut s = self.clone();
        let v = T::lit(value);
        match axis {
            SweepAxis::H => {
                s.plan.h = v;
                s.plan.dt = v;
            }
            SweepAxis::Horizon => s.plan.horizon = v,
            SweepAxis::Tau => s.plan.tau = v,
            SweepAxis::N => match &mut s.source {
                ProblemSource::HeatRing { n, .. } if value >= 0.0 && value.fract() == 0.0 => *n = value as usize,
                _ => return Err(Error::Config("the n axis needs a heat-ring problem and integer values".into())),
            },
        }
        s.plan.validate()?;
        Ok(s)
    }
}

/// Baselines and RBM-MPC realizations of one scenario.
#[derive(Debug)]
pub struct Ensemble<T: Scalar> {
    pub parameter: f64,
    pub grid: TimeGrid<T>,
    pub lqr: StabilizedLoop<T>,
    pub mpc: MpcRun<T>,
    pub infinite: MpcRun<T>,
    pub rbm: Vec<MpcRun<T>>,
}

/// Runs MPC, the LQR loop and `realizations` RBM-MPC runs. Realization `r`
/// draws from substream `(base_seed, r, ·)`; results are ordered by `r`.
pub fn run_ensemble<T: Scalar>(scenario: &Scenario<T>, parameter: f64) -> Result<Ensemble<T>> {
    let (problem, splitting, lqr) = scenario.build()?;
    let engine = MpcEngine::new(&problem, scenario.plan, scenario.options)?;
    let grid = scenario.plan.grid()?;
    let mpc = engine.run_mpc()?;
    let infinite = run_infinite_horizon(&problem, &lqr, &grid)?;
    let rbm = (0..scenario.realizations)
        .into_par_iter()
        .map(|r| engine.run_rbm_mpc(&splitting, scenario.base_seed, r as u64))
        .collect::<Result<Vec<_>>>()?;
    Ok(Ensemble { parameter, grid, lqr, mpc, infinite, rbm })
}

impl<T: Scalar> Ensemble<T> {
    pub fn report(&self) -> Result<ErrorReport> {
        let g = &self.grid;
        let (um, xm) = (&self.mpc.trajectory.controls, &self.mpc.trajectory.states);
        let (ui, xi) = (&self.infinite.trajectory.controls, &self.infinite.trajectory.states);
        let u_m_inf = relative_error(g, um, ui, NormKind::L2Time)?.as_f64();
        let x_m_inf = relative_error(g, xm, xi, NormKind::LinfScaled)?.as_f64();
        let samples = self
            .rbm
            .iter()
            .map(|run| {
                let (ur, xr) = (&run.trajectory.controls, &run.trajectory.states);
                let mut s = [0.0; 6];
                s[Metric::URmVsInf.index()] = relative_error(g, ur, ui, NormKind::L2Time)?.as_f64();
                s[Metric::URmVsM.index()] = relative_error(g, ur, um, NormKind::L2Time)?.as_f64();
                s[Metric::UMVsInf.index()] = u_m_inf;
                s[Metric::XRmVsInf.index()] = relative_error(g, xr, xi, NormKind::LinfScaled)?.as_f64();
                s[Metric::XRmVsM.index()] = relative_error(g, xr, xm, NormKind::LinfScaled)?.as_f64();
                s[Metric::XMVsInf.index()] = x_m_inf;
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ErrorReport { parameter: self.parameter, samples })
    }

    /// Sample mean over realizations of `|x_{R−M}(t_k)|`.
    pub fn mean_rbm_state_norms(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.grid.nodes()];
        for run in &self.rbm {
            for (m, v) in mean.iter_mut().zip(run.trajectory.state_norms()) {
                *m += v.as_f64() / self.rbm.len() as f64;
            }
        }
        mean
    }
}

/// Parameter varied by a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    H,
    #[serde(rename = "T")]
    Horizon,
    Tau,
    N,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::H => "h",
            SweepAxis::Horizon => "T",
            SweepAxis::Tau => "tau",
            SweepAxis::N => "n",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "h" => Ok(SweepAxis::H),
            "T" => Ok(SweepAxis::Horizon),
            "tau" => Ok(SweepAxis::Tau),
            "n" => Ok(SweepAxis::N),
            other => Err(Error::Config(format!("unknown sweep axis {other:?} (expected h, T, tau or n)"))),
        }
    }
}

/// Validates every point of a sweep before any run starts.
pub fn sweep_scenarios<T: Scalar>(base: &Scenario<T>, axis: SweepAxis, values: &[f64]) -> Result<Vec<Scenario<T>>> {
    values
        .iter()
        .map(|&v| base.with_parameter(axis, v).map_err(|e| e.at_parameter(v)))
        .collect()
}

/// Error reports for each value of `axis`, in the order given.
pub fn sweep<T: Scalar>(base: &Scenario<T>, axis: SweepAxis, values: &[f64]) -> Result<Vec<ErrorReport>> {
    let scenarios = sweep_scenarios(base, axis, values)?;
    scenarios
        .par_iter()
        .zip(values.par_iter())
        .map(|(s, &v)| run_ensemble(s, v).and_then(|e| e.report()).map_err(|e| e.at_parameter(v)))
        .collect()
}

/// Least-squares fit with a 2σ confidence half-width on the fitted coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    /// Log-log slope for power laws, decay rate for exponentials.
    pub value: f64,
    pub confidence: f64,
    /// `(abscissa, mean, std)`
    pub points: Vec<(f64, f64, f64)>,
}

fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    let k = xs.len();
    if k < 3 || ys.iter().any(|y| !y.is_finite()) {
        return Err(Error::InvalidProblem(format!("a fit needs at least 3 finite points, got {k}")));
    }
    let mx = xs.iter().sum::<f64>() / k as f64;
    let my = ys.iter().sum::<f64>() / k as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let resid: f64 = xs.iter().zip(ys).map(|(x, y)| (y - my - slope * (x - mx)).powi(2)).sum();
    let se = (resid / (k - 2) as f64 / sxx).sqrt();
    Ok((slope, 2.0 * se))
}

/// Slope of `log(mean)` against `log(abscissa)`.
pub fn fit_power_law(points: &[(f64, f64, f64)]) -> Result<FitResult> {
    let xs: Vec<_> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<_> = points.iter().map(|p| p.1.ln()).collect();
    let (value, confidence) = linear_fit(&xs, &ys)?;
    Ok(FitResult { value, confidence, points: points.to_vec() })
}

/// Rate `μ` of `mean ≈ C e^{−μ·abscissa}`.
pub fn fit_exponential_rate(points: &[(f64, f64, f64)]) -> Result<FitResult> {
    let xs: Vec<_> = points.iter().map(|p| p.0).collect();
    let ys: Vec<_> = points.iter().map(|p| p.1.ln()).collect();
    let (slope, confidence) = linear_fit(&xs, &ys)?;
    Ok(FitResult { value: -slope, confidence, points: points.to_vec() })
}

/// `(parameter, mean, std)` of one metric across reports.
pub fn metric_points(reports: &[ErrorReport], metric: Metric) -> Vec<(f64, f64, f64)> {
    reports
        .iter()
        .map(|r| {
            let s = r.stats(metric);
            (r.parameter, s.mean, s.std)
        })
        .collect()
}

pub fn write_errors_csv<W: Write>(reports: &[ErrorReport], mut out: W) -> Result<()> {
    writeln!(out, "parameter,realization,metric,value")?;
    for r in reports {
        for (i, s) in r.samples.iter().enumerate() {
            for m in Metric::ALL {
                writeln!(out, "{},{i},{m},{}", fmt_float(r.parameter), fmt_float(s[m.index()]))?;
            }
        }
    }
    Ok(())
}

pub fn write_summary_csv<W: Write>(reports: &[ErrorReport], mut out: W) -> Result<()> {
    writeln!(out, "parameter,metric,mean,std,count,two_sigma,two_sigma_mean")?;
    for r in reports {
        for m in Metric::ALL {
            let s = r.stats(m);
            writeln!(
                out,
                "{},{m},{},{},{},{},{}",
                fmt_float(r.parameter),
                fmt_float(s.mean),
                fmt_float(s.std),
                s.count,
                fmt_float(s.two_sigma()),
                fmt_float(s.two_sigma_mean())
            )?;
        }
    }
    Ok(())
}

/// Method timed by the benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    DirectOcp,
    Mpc,
    RbmMpc,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::DirectOcp, Method::Mpc, Method::RbmMpc];

    pub fn name(self) -> &'static str {
        match self {
            Method::DirectOcp => "direct-ocp",
            Method::Mpc => "mpc",
            Method::RbmMpc => "rbm-mpc",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimingSample {
    pub method: Method,
    pub n: usize,
    pub repeat: usize,
    pub seconds: f64,
}

/// Wall times of the three methods per problem size.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TimingReport {
    pub samples: Vec<TimingSample>,
}

impl TimingReport {
    pub fn stats(&self, method: Method, n: usize) -> Stats {
        let v: Vec<_> = self.samples.iter().filter(|s| s.method == method && s.n == n).map(|s| s.seconds).collect();
        Stats::of(&v)
    }

    /// `mean(slow) / mean(fast)`
    pub fn speedup(&self, slow: Method, fast: Method, n: usize) -> f64 {
        self.stats(slow, n).mean / self.stats(fast, n).mean
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "method,n,repeat,seconds")?;
        for s in &self.samples {
            writeln!(out, "{},{},{},{}", s.method.name(), s.n, s.repeat, fmt_float(s.seconds))?;
        }
        Ok(())
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut n: Vec<_> = self.samples.iter().map(|s| s.n).collect();
        n.sort_unstable();
        n.dedup();
        n
    }

    /// Mean and std per method and size, plus the MPC over RBM-MPC and
    /// direct over MPC ratios of the means.
    pub fn write_summary_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "n,method,mean,std,count,mpc_over_rbm_mpc,direct_over_mpc")?;
        for n in self.sizes() {
            let ratio = |a: Method, b: Method| {
                let present = |m: Method| self.samples.iter().any(|s| s.n == n && s.method == m);
                if present(a) && present(b) { fmt_float(self.speedup(a, b, n)) } else { String::new() }
            };
            let (fast, slow) = (ratio(Method::Mpc, Method::RbmMpc), ratio(Method::DirectOcp, Method::Mpc));
            for m in Method::ALL {
                let st = self.stats(m, n);
                if st.count == 0 {
                    continue;
                }
                writeln!(out, "{n},{},{},{},{},{fast},{slow}", m.name(), fmt_float(st.mean), fmt_float(st.std), st.count)?;
            }
        }
        Ok(())
    }
}

/// Fewest repeats accepted by [`benchmark`].
pub const MIN_REPEATS: usize = 5;

/// Times one direct OCP on `[0, t_end]`, MPC and RBM-MPC for each heat-ring
/// size, `repeats` times each. Problem construction is excluded; every solve
/// starts from an empty factorization cache. Runs are sequential so timings
/// do not compete for cores. RBM-MPC repeat `r` uses realization `r`.
pub fn benchmark<T: Scalar>(
    sizes: &[usize],
    repeats: usize,
    base: &Scenario<T>,
    methods: &[Method],
) -> Result<TimingReport> {
    if repeats < MIN_REPEATS {
        return Err(Error::Config(format!("benchmark needs at least {MIN_REPEATS} repeats, got {repeats}")));
    }
    let mut report = TimingReport::default();
    for &n in sizes {
        let scenario = base.with_parameter(SweepAxis::N, n as f64)?;
        let (problem, splitting) = scenario.build_problem()?;
        let plan = scenario.plan;
        let grid = plan.grid()?;
        for repeat in 0..repeats {
            for &method in methods {
                let clock = Instant::now();
                match method {
                    Method::DirectOcp => {
                        let cache = OperatorCache::new(plan.dt);
                        solve_ocp(&problem, Dynamics::System, problem.x0(), &grid, &cache, None, &scenario.options.ocp)?;
                    }
                    Method::Mpc => {
                        MpcEngine::new(&problem, plan, scenario.options)?.run_mpc()?;
                    }
                    Method::RbmMpc => {
                        MpcEngine::new(&problem, plan, scenario.options)?.run_rbm_mpc(
                            &splitting,
                            scenario.base_seed,
                            repeat as u64,
                        )?;
                    }
                }
                report.samples.push(TimingSample { method, n, repeat, seconds: clock.elapsed().as_secs_f64() });
            }
        }
    }
    Ok(report)
}

/// Runs `f` on a pool of `jobs` worker threads (all cores when `None`).
pub fn with_jobs<R: Send>(jobs: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        builder = builder.num_threads(j.max(1));
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norm_examples() {
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let zero = DMatrix::<f64>::zeros(1, 5);
        assert_eq!(l2_time_norm(&grid, &zero), 0.0);
        assert_eq!(linf_scaled_norm(&zero), 0.0);
        assert!((l2_time_norm(&grid, &DMatrix::from_element(1, 5, 1.0)) - 2.0).abs() < 1e-15);
        assert!((linf_scaled_norm(&DMatrix::<f64>::from_element(7, 3, 1.0)) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn relative_error_examples() {
        let grid = TimeGrid::new(0.0f64, 1.0, 2).unwrap();
        let r = DMatrix::from_row_slice(1, 3, &[1.0, -2.0, 0.5]);
        assert_eq!(relative_error(&grid, &r, &r, NormKind::L2Time).unwrap(), 0.0);
        assert!((relative_error(&grid, &(&r * 2.0), &r, NormKind::L2Time).unwrap() - 1.0).abs() < 1e-15);
        assert!((relative_error(&grid, &(&r * 2.0), &r, NormKind::LinfScaled).unwrap() - 1.0).abs() < 1e-15);
        let z = DMatrix::zeros(1, 3);
        assert!(matches!(relative_error(&grid, &r, &z, NormKind::L2Time), Err(Error::ZeroReference)));
    }

    #[test]
    fn stats_are_unbiased() {
        let s = Stats::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((s.two_sigma_mean() - s.std).abs() < 1e-15);
        assert_eq!(Stats::of(&[3.0]).std, 0.0);
    }

    #[test]
    fn fits_recover_exact_laws() {
        let pts: Vec<_> = [1.0, 0.5, 0.25, 0.125].iter().map(|&h: &f64| (h, 3.0 * h.sqrt(), 0.0)).collect();
        let f = fit_power_law(&pts).unwrap();
        assert!((f.value - 0.5).abs() < 1e-12 && f.confidence < 1e-10);
        let pts: Vec<_> = [5.0, 10.0, 15.0].iter().map(|&t: &f64| (t, 2.0 * (-0.2 * t).exp(), 0.0)).collect();
        assert!((fit_exponential_rate(&pts).unwrap().value - 0.2).abs() < 1e-12);
        assert!(fit_power_law(&pts[..2]).is_err());
    }

    #[test]
    fn sweep_rejects_bad_grid_before_running() {
        let base = Scenario::<f64>::heat_ring(11);
        let err = sweep_scenarios(&base, SweepAxis::H, &[1.0, 0.4]).unwrap_err();
        assert_eq!(err.code(), "GridMismatch");
        assert!(matches!(err, Error::Parameter { .. }));
    }

    #[test]
    fn small_ensemble_is_deterministic_across_pools() {
        let mut s = Scenario::<f64>::heat_ring(11);
        s.plan.t_end = 30.0;
        s.realizations = 4;
        let a = with_jobs(Some(1), || run_ensemble(&s, 1.0).unwrap().report().unwrap()).unwrap();
        let b = with_jobs(Some(3), || run_ensemble(&s, 1.0).unwrap().report().unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.stats(Metric::UMVsInf).std, 0.0);
        let mut csv = Vec::new();
        write_summary_csv(&[a], &mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 7);
    }
}

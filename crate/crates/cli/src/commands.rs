use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rbm_mpc::experiment::{
    benchmark, fit_exponential_rate, fit_power_law, metric_points, sweep, sweep_scenarios, write_errors_csv,
    write_summary_csv, Method, Metric, SweepAxis,
};
use rbm_mpc::integrator::{fmt_float, OperatorCache, Trajectory};
use rbm_mpc::mpc::{run_infinite_horizon, MpcEngine, MpcRun};
use rbm_mpc::ocp::{solve_ocp, SolveDiagnostics};
use rbm_mpc::rbm::{Dynamics, RealizationLog};
use rbm_mpc::riccati::{solve_are, AreOptions};
use rbm_mpc::{Error, Result};
use serde::Serialize;

use crate::config::{default_sweep_values, RunConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Ocp,
    Mpc,
    RbmMpc,
    Lqr,
}

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const SCHEDULES_FILE: &str = "schedules.log";
pub const ERRORS_FILE: &str = "errors.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const TIMING_SUMMARY_FILE: &str = "timing_summary.csv";

/// Reproducibility record, written before any computation starts and
/// rewritten with `status = "complete"` at the end.
#[derive(Serialize)]
struct Manifest<'a> {
    version: &'a str,
    command: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    mode: Option<Mode>,
    status: &'a str,
    config: &'a str,
    /// RBM schedules of realization `r`, window `i` come from the ChaCha8
    /// substream keyed by `(base_seed, r, i)`.
    base_seed: u64,
    realizations: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    jobs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    replayed_log: Option<String>,
    artifacts: Vec<&'a str>,
}

struct Output<'a> {
    dir: &'a Path,
    manifest: Manifest<'a>,
}

impl<'a> Output<'a> {
    fn start(config: &'a RunConfig, manifest: Manifest<'a>) -> Result<Self> {
        let dir = config.out.as_path();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), config.to_toml())?;
        let out = Self { dir, manifest };
        out.write_manifest()?;
        Ok(out)
    }

    fn write_manifest(&self) -> Result<()> {
        let text = toml::to_string(&self.manifest).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(self.dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.dir.join(name))?))
    }

    fn finish(mut self) -> Result<PathBuf> {
        self.manifest.status = "complete";
        self.write_manifest()?;
        Ok(self.dir.to_path_buf())
    }
}

fn manifest<'a>(command: &'a str, mode: Option<Mode>, config: &RunConfig, realizations: Vec<u64>, jobs: Option<usize>) -> Manifest<'a> {
    Manifest {
        version: env!("CARGO_PKG_VERSION"),
        command,
        mode,
        status: "started",
        config: CONFIG_FILE,
        base_seed: config.seed,
        realizations,
        jobs,
        replayed_log: None,
        artifacts: Vec::new(),
    }
}

fn write_trajectory(out: &Output, traj: &Trajectory<f64>) -> Result<()> {
    let mut w = out.create(TRAJECTORY_FILE)?;
    traj.write_csv(&mut w, true)?;
    w.flush()?;
    Ok(())
}

fn write_run(out: &mut Output, run: &MpcRun<f64>, with_log: bool) -> Result<()> {
    write_trajectory(out, &run.trajectory)?;
    let mut w = out.create(DIAGNOSTICS_FILE)?;
    SolveDiagnostics::write_csv(&run.windows, &mut w)?;
    w.flush()?;
    out.manifest.artifacts.extend([TRAJECTORY_FILE, DIAGNOSTICS_FILE]);
    if with_log {
        fs::write(out.dir.join(SCHEDULES_FILE), run.log.to_text())?;
        out.manifest.artifacts.push(SCHEDULES_FILE);
    }
    Ok(())
}

pub fn run(mode: Mode, config: &RunConfig, jobs: Option<usize>) -> Result<PathBuf> {
    let scenario = config.scenario()?;
    let plan = scenario.plan;
    let grid = plan.grid()?;
    // invalid problem data fails before the output directory exists
    let (problem, splitting) = scenario.build_problem()?;
    let realizations = if mode == Mode::RbmMpc { vec![config.realization] } else { Vec::new() };
    let mut out = Output::start(config, manifest("run", Some(mode), config, realizations, jobs))?;
    match mode {
        Mode::Ocp => {
            let cache = OperatorCache::new(plan.dt);
            let r = solve_ocp(&problem, Dynamics::System, problem.x0(), &grid, &cache, None, &scenario.options.ocp)?;
            write_trajectory(&out, &r.trajectory)?;
            let mut w = out.create(DIAGNOSTICS_FILE)?;
            SolveDiagnostics::write_csv(&[SolveDiagnostics::from_result(0, &r)], &mut w)?;
            w.flush()?;
            out.manifest.artifacts.extend([TRAJECTORY_FILE, DIAGNOSTICS_FILE]);
        }
        Mode::Mpc => {
            let run = MpcEngine::new(&problem, plan, scenario.options)?.run_mpc()?;
            write_run(&mut out, &run, false)?;
        }
        Mode::RbmMpc => {
            let run = MpcEngine::new(&problem, plan, scenario.options)?.run_rbm_mpc(&splitting, config.seed, config.realization)?;
            write_run(&mut out, &run, true)?;
        }
        Mode::Lqr => {
            let lqr = solve_are(&problem, AreOptions::default())?;
            let run = run_infinite_horizon(&problem, &lqr, &grid)?;
            write_trajectory(&out, &run.trajectory)?;
            let mut w = out.create(DIAGNOSTICS_FILE)?;
            writeln!(w, "mu_inf,are_residual,doubling_horizon")?;
            writeln!(w, "{},{},{}", fmt_float(lqr.mu_inf), fmt_float(lqr.residual), fmt_float(lqr.horizon))?;
            w.flush()?;
            out.manifest.artifacts.extend([TRAJECTORY_FILE, DIAGNOSTICS_FILE]);
        }
    }
    out.finish()
}

pub fn replay(config: &RunConfig, log_path: &Path) -> Result<PathBuf> {
    let text = fs::read_to_string(log_path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", log_path.display())))?;
    let log = RealizationLog::<f64>::from_text(&text)?;
    let scenario = config.scenario()?;
    scenario.plan.validate()?;
    let realizations = log.schedules.first().map(|s| vec![s.realization()]).unwrap_or_default();
    let mut m = manifest("replay", Some(Mode::RbmMpc), config, realizations, None);
    if let Some(s) = log.schedules.first() {
        m.base_seed = s.seed();
    }
    m.replayed_log = Some(log_path.display().to_string());
    let (problem, splitting) = scenario.build_problem()?;
    let mut out = Output::start(config, m)?;
    let run = MpcEngine::new(&problem, scenario.plan, scenario.options)?.replay(&splitting, &log)?;
    write_run(&mut out, &run, true)?;
    out.finish()
}

pub fn sweep_cmd(axis: SweepAxis, config: &RunConfig, jobs: Option<usize>) -> Result<PathBuf> {
    let values = config.sweep_values.clone().unwrap_or_else(|| default_sweep_values(axis));
    let scenario = config.scenario()?;
    // every point is validated before anything is written
    sweep_scenarios(&scenario, axis, &values)?;
    let realizations = (0..config.realizations as u64).collect();
    let mut out = Output::start(config, manifest("sweep", None, config, realizations, jobs))?;
    let reports = sweep(&scenario, axis, &values)?;
    let mut w = out.create(ERRORS_FILE)?;
    write_errors_csv(&reports, &mut w)?;
    w.flush()?;
    let mut w = out.create(SUMMARY_FILE)?;
    write_summary_csv(&reports, &mut w)?;
    w.flush()?;
    out.manifest.artifacts.extend([ERRORS_FILE, SUMMARY_FILE]);

    if values.len() >= 3 {
        let fit = match axis {
            SweepAxis::H => fit_power_law(&metric_points(&reports, Metric::URmVsM)).ok().map(|f| ("slope of rel_u_rm_vs_m", f)),
            SweepAxis::Horizon => {
                fit_exponential_rate(&metric_points(&reports, Metric::UMVsInf)).ok().map(|f| ("rate of rel_u_m_vs_inf", f))
            }
            _ => None,
        };
        if let Some((what, f)) = fit {
            println!("{what}: {:.4} +- {:.4}", f.value, f.confidence);
        }
    }
    out.finish()
}

pub fn bench(config: &RunConfig) -> Result<PathBuf> {
    let scenario = config.scenario()?;
    if config.bench_sizes.is_empty() {
        return Err(Error::Config("bench_sizes is empty".into()));
    }
    for &n in &config.bench_sizes {
        scenario.with_parameter(SweepAxis::N, n as f64).map_err(|e| e.at_parameter(n as f64))?;
    }
    if config.bench_repeats < rbm_mpc::experiment::MIN_REPEATS {
        return Err(Error::Config(format!(
            "bench_repeats must be at least {}, got {}",
            rbm_mpc::experiment::MIN_REPEATS,
            config.bench_repeats
        )));
    }
    let realizations = (0..config.bench_repeats as u64).collect();
    let mut out = Output::start(config, manifest("bench", None, config, realizations, Some(1)))?;
    let report = benchmark(&config.bench_sizes, config.bench_repeats, &scenario, &Method::ALL)?;
    let mut w = out.create(TIMINGS_FILE)?;
    report.write_csv(&mut w)?;
    w.flush()?;
    let mut w = out.create(TIMING_SUMMARY_FILE)?;
    report.write_summary_csv(&mut w)?;
    w.flush()?;
    out.manifest.artifacts.extend([TIMINGS_FILE, TIMING_SUMMARY_FILE]);
    for &n in &config.bench_sizes {
        println!(
            "n = {n}: direct {:.3} s, mpc {:.3} s, rbm-mpc {:.3} s, speedup {:.2}",
            report.stats(Method::DirectOcp, n).mean,
            report.stats(Method::Mpc, n).mean,
            report.stats(Method::RbmMpc, n).mean,
            report.speedup(Method::Mpc, Method::RbmMpc, n)
        );
    }
    out.finish()
}

//! `rbm-mpc`: single runs, parameter sweeps, timing benchmarks and replay of
//! recorded RBM schedules.
//!
//! Failures print one line `error: <Code> <message>` on stderr and exit with
//! the code's stable status (see `Error::exit_code`).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rbm_mpc::experiment::{with_jobs, SweepAxis};
use rbm_mpc::Result;

use commands::Mode;
use config::RunConfig;

#[derive(Parser)]
#[command(name = "rbm-mpc", version, about = "Random-batch MPC experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat TOML run configuration; defaults reproduce the reference heat-ring setup.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Base seed of the RBM substreams.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads (all cores when omitted).
    #[arg(long, value_name = "N")]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override a config key, e.g. `--set n=11` or `--set F_mode=riccati`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// One trajectory: direct OCP on [0, t_end], MPC, RBM-MPC or the LQR loop.
    Run {
        #[arg(long, value_enum)]
        mode: Mode,
        #[command(flatten)]
        common: Common,
    },
    /// Monte-Carlo error sweep over one parameter.
    Sweep {
        /// h, T, tau or n; falls back to `sweep_axis` in the config.
        #[arg(long)]
        axis: Option<SweepAxis>,
        #[command(flatten)]
        common: Common,
    },
    /// Wall-clock comparison of direct OCP, MPC and RBM-MPC.
    Bench {
        #[command(flatten)]
        common: Common,
    },
    /// Re-runs RBM-MPC from a recorded schedule log.
    Replay {
        #[arg(long, value_name = "PATH")]
        log: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(out) = &self.out {
            overrides.push(format!("out={}", toml::Value::String(out.display().to_string())));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

fn execute(cli: Cli) -> Result<PathBuf> {
    match cli.command {
        Command::Run { mode, common } => {
            let config = common.load()?;
            with_jobs(common.jobs, || commands::run(mode, &config, common.jobs))?
        }
        Command::Sweep { axis, common } => {
            let config = common.load()?;
            let axis = axis.or(config.sweep_axis).ok_or_else(|| {
                rbm_mpc::Error::Config("no sweep axis: pass --axis or set sweep_axis".into())
            })?;
            with_jobs(common.jobs, || commands::sweep_cmd(axis, &config, common.jobs))?
        }
        Command::Bench { common } => {
            let config = common.load()?;
            commands::bench(&config)
        }
        Command::Replay { log, common } => {
            let config = common.load()?;
            with_jobs(common.jobs, || commands::replay(&config, &log))?
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(dir) => {
            println!("wrote {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error: {} {message}", e.code());
            ExitCode::from(e.exit_code().clamp(1, 255) as u8)
        }
    }
}

//! Run configuration: one flat TOML file per run, with scalar overrides from
//! the command line.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::io::load_coo_from_matrix_market_file;
use nalgebra_sparse::{CooMatrix, CsrMatrix};
use rbm_mpc::experiment::{ProblemSource, Scenario, SweepAxis, TerminalWeight};
use rbm_mpc::model::{build_splitting, LqProblem, RingProfile};
use rbm_mpc::mpc::{HorizonPlan, MpcOptions};
use rbm_mpc::ocp::OcpSettings;
use rbm_mpc::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Heat-ring size; ignored when `a_file` is set.
    pub n: usize,
    pub profile: RingProfile,

    /// Matrix Market files of a user-supplied problem. Relative paths are
    /// resolved against the config file's directory.
    pub a_file: Option<PathBuf>,
    pub b_file: Option<PathBuf>,
    pub q_file: Option<PathBuf>,
    pub w_file: Option<PathBuf>,
    pub f_file: Option<PathBuf>,
    pub x0_file: Option<PathBuf>,
    pub part_files: Vec<PathBuf>,
    /// 0-based part indices of each listed subset.
    pub subsets: Vec<Vec<usize>>,
    pub subset_probabilities: Vec<f64>,

    pub dt: f64,
    pub h: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub tau: f64,
    pub t_end: f64,
    #[serde(rename = "F_mode")]
    pub f_mode: TerminalWeight,

    pub tol: f64,
    pub max_iter: usize,
    pub warm_start: bool,

    pub realizations: usize,
    pub seed: u64,
    /// Realization drawn by `run --mode rbm-mpc`.
    pub realization: u64,

    pub sweep_axis: Option<SweepAxis>,
    pub sweep_values: Option<Vec<f64>>,

    pub bench_sizes: Vec<usize>,
    pub bench_repeats: usize,

    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n: 101,
            profile: RingProfile::default(),
            a_file: None,
            b_file: None,
            q_file: None,
            w_file: None,
            f_file: None,
            x0_file: None,
            part_files: Vec::new(),
            subsets: Vec::new(),
            subset_probabilities: Vec::new(),
            dt: 1.0,
            h: 1.0,
            horizon: 15.0,
            tau: 10.0,
            t_end: 200.0,
            f_mode: TerminalWeight::Zero,
            tol: 1e-5,
            max_iter: 1000,
            warm_start: false,
            realizations: 20,
            seed: 0,
            realization: 0,
            sweep_axis: None,
            sweep_values: None,
            bench_sizes: vec![11, 101],
            bench_repeats: 5,
            out: PathBuf::from("out"),
        }
    }
}

/// Values swept when the config names an axis but no values.
pub fn default_sweep_values(axis: SweepAxis) -> Vec<f64> {
    match axis {
        SweepAxis::H => vec![1.0, 0.5, 0.25, 0.125],
        SweepAxis::Horizon => vec![12.0, 15.0, 20.0, 25.0, 30.0],
        SweepAxis::Tau => vec![1.0, 2.0, 5.0, 10.0],
        SweepAxis::N => vec![11.0, 101.0],
    }
}

impl RunConfig {
    /// Reads `path` (defaults when `None`) and applies `key=value` overrides.
    /// Override values are parsed as TOML, falling back to a bare string.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| Error::Parse(format!("{}: {}", p.display(), e.message())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not of the form key=value")))?;
            let value = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            table.insert(key.trim().to_string(), value);
        }
        let mut config: RunConfig =
            table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        if let Some(base) = path.and_then(Path::parent) {
            config.resolve_paths(base);
        }
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.a_file, &mut self.b_file, &mut self.q_file, &mut self.w_file, &mut self.f_file, &mut self.x0_file]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        self.part_files.iter_mut().for_each(fix);
    }

    /// Checks everything that can be checked without building the problem.
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        if self.realizations == 0 {
            return Err(Error::Config("realizations must be at least 1".into()));
        }
        self.plan().validate()?;
        if self.a_file.is_some() {
            let missing: Vec<_> = [("b_file", &self.b_file), ("q_file", &self.q_file), ("w_file", &self.w_file), ("x0_file", &self.x0_file)]
                .iter()
                .filter(|(_, v)| v.is_none())
                .map(|(k, _)| *k)
                .collect();
            if !missing.is_empty() {
                return Err(Error::Config(format!("a_file given without {}", missing.join(", "))));
            }
            if self.part_files.is_empty() || self.subsets.len() != self.subset_probabilities.len() || self.subsets.is_empty() {
                return Err(Error::Config(
                    "a matrix-file problem needs part_files and matching subsets / subset_probabilities".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn plan(&self) -> HorizonPlan<f64> {
        HorizonPlan { horizon: self.horizon, tau: self.tau, t_end: self.t_end, dt: self.dt, h: self.h }
    }

    pub fn options(&self) -> MpcOptions<f64> {
        MpcOptions { ocp: OcpSettings { tol: self.tol, max_iter: self.max_iter }, warm_start: self.warm_start }
    }

    pub fn scenario(&self) -> Result<Scenario<f64>> {
        let source = match &self.a_file {
            None => ProblemSource::HeatRing { n: self.n, profile: self.profile },
            Some(a) => self.load_matrices(a)?,
        };
        Ok(Scenario {
            source,
            terminal: self.f_mode,
            plan: self.plan(),
            options: self.options(),
            realizations: self.realizations,
            base_seed: self.seed,
        })
    }

    fn load_matrices(&self, a: &Path) -> Result<ProblemSource<f64>> {
        let a = sparse(a)?;
        let n = a.nrows();
        let dense_at = |p: &Option<PathBuf>| p.as_deref().map(dense).transpose();
        let b = dense_at(&self.b_file)?.expect("validated");
        let q = dense_at(&self.q_file)?.expect("validated");
        let w = dense_at(&self.w_file)?.expect("validated");
        let f = dense_at(&self.f_file)?.unwrap_or_else(|| DMatrix::zeros(n, n));
        let x0 = dense_at(&self.x0_file)?.expect("validated");
        if x0.ncols() != 1 {
            return Err(Error::BadDimension(format!("x0 must be a single column, got {} columns", x0.ncols())));
        }
        let x0 = DVector::from_column_slice(x0.as_slice());
        let problem = LqProblem::new(a, b, q, w, f, x0)?;
        let parts = self.part_files.iter().map(|p| sparse(p)).collect::<Result<Vec<_>>>()?;
        let subsets = self.subsets.iter().cloned().zip(self.subset_probabilities.iter().copied()).collect();
        let splitting = build_splitting(parts, subsets)?;
        Ok(ProblemSource::Given { problem, splitting })
    }

    /// The resolved configuration as TOML; loading it reproduces `self`.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn coo(path: &Path) -> Result<CooMatrix<f64>> {
    load_coo_from_matrix_market_file(path).map_err(|e| Error::Parse(format!("{}: {}", path.display(), e.message())))
}

fn sparse(path: &Path) -> Result<CsrMatrix<f64>> {
    Ok(CsrMatrix::from(&coo(path)?))
}

fn dense(path: &Path) -> Result<DMatrix<f64>> {
    Ok(DMatrix::from(&coo(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_reference_setup() {
        let c = RunConfig::load(None, &[]).unwrap();
        assert_eq!((c.n, c.dt, c.h, c.horizon, c.tau, c.t_end), (101, 1.0, 1.0, 15.0, 10.0, 200.0));
        assert_eq!((c.tol, c.max_iter, c.realizations), (1e-5, 1000, 20));
        assert_eq!(c.f_mode, TerminalWeight::Zero);
    }

    #[test]
    fn overrides_parse_as_toml_values() {
        let c = RunConfig::load(None, &["n=11".into(), "F_mode=riccati".into(), "sweep_values=[1, 0.5, 0.25]".into()])
            .unwrap();
        assert_eq!(c.n, 11);
        assert_eq!(c.f_mode, TerminalWeight::Riccati);
        assert_eq!(c.sweep_values, Some(vec![1.0, 0.5, 0.25]));
    }

    #[test]
    fn roundtrip_through_toml() {
        let c = RunConfig::load(None, &["h=0.5".into(), "dt=0.25".into(), "sweep_axis=\"T\"".into()]).unwrap();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_values() {
        let code = |o: &str| RunConfig::load(None, &[o.to_string()]).unwrap_err().code();
        assert_eq!(code("tol=0"), "ConfigError");
        assert_eq!(code("realizations=0"), "ConfigError");
        assert_eq!(code("h=4"), "GridMismatch");
        assert_eq!(code("bogus=1"), "ConfigError");
    }
}

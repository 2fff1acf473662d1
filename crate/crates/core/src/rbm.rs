//! Random batch schedules: per-subinterval subset draws and the piecewise
//! constant randomized generator they induce.

use std::fmt::Write as _;

use nalgebra_sparse::CsrMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::integrator::{GeneratorKey, GeneratorMatrix, OperatorCache, Propagator, TimeGrid};
use crate::model::{LqProblem, Splitting};
use crate::Scalar;

/// Number of whole `step`s in `span`, or `GridMismatch` when `step` does not divide `span`.
pub fn steps_in<T: Scalar>(span: T, step: T, what: &str) -> Result<usize> {
    if !(step > T::zero()) || span < T::zero() {
        return Err(Error::GridMismatch(format!("{what}: step {step} and span {span} must be positive")));
    }
    let ratio = (span / step).round();
    let k = ratio.as_f64() as usize;
    let tol = T::lit(1e-12) * span.max(T::one());
    if (ratio * step - span).abs() > tol {
        return Err(Error::GridMismatch(format!("{what}: {step} does not divide {span}")));
    }
    Ok(k)
}

/// Counter-based generator for one schedule.
///
/// The ChaCha stream id is the realization index and the word position is
/// derived from the MPC iteration, so every (seed, realization, iteration)
/// triple owns a disjoint block of the keystream regardless of draw order.
pub fn substream(seed: u64, realization: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(realization);
    rng.set_word_pos((iteration as u128) << 40);
    rng
}

/// One realization `ω_i`: the subset drawn for each of the `K` subintervals of
/// length `h` covering the prediction horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct RbmSchedule<T> {
    h: T,
    horizon: T,
    picks: Vec<usize>,
    seed: u64,
    realization: u64,
    iteration: u64,
}

impl<T: Scalar> RbmSchedule<T> {
    /// Schedule with explicit picks, validated against the splitting.
    pub fn from_picks(splitting: &Splitting<T>, h: T, horizon: T, picks: Vec<usize>) -> Result<Self> {
        let k = steps_in(horizon, h, "subinterval length h vs horizon T")?;
        if picks.len() != k {
            return Err(Error::GridMismatch(format!("schedule has {} picks, horizon needs {k}", picks.len())));
        }
        if let Some(bad) = picks.iter().find(|&&p| p >= splitting.subsets().len()) {
            return Err(Error::BadDimension(format!("pick {bad} is not a listed subset")));
        }
        Ok(Self { h, horizon, picks, seed: 0, realization: 0, iteration: 0 })
    }

    pub fn h(&self) -> T {
        self.h
    }

    pub fn horizon(&self) -> T {
        self.horizon
    }

    pub fn picks(&self) -> &[usize] {
        &self.picks
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn realization(&self) -> u64 {
        self.realization
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Subinterval index containing time `t` (relative to the window start).
    pub fn subinterval(&self, t: T) -> Result<usize> {
        if t < T::zero() || t >= self.horizon {
            return Err(Error::OutOfHorizon { t: t.as_f64(), horizon: self.horizon.as_f64() });
        }
        let k = (t / self.h).floor().as_f64() as usize;
        Ok(k.min(self.picks.len() - 1))
    }
}

/// Draws `K = T/h` i.i.d. subset indices with probabilities `p_ω`.
///
/// `dt` is the integrator step; `h` must be a multiple of it so that generator
/// switches fall on integrator nodes.
pub fn draw_schedule<T: Scalar, R: Rng>(
    splitting: &Splitting<T>,
    h: T,
    horizon: T,
    dt: T,
    rng: &mut R,
) -> Result<RbmSchedule<T>> {
    let k = steps_in(horizon, h, "subinterval length h vs horizon T")?;
    steps_in(h, dt, "integrator step dt vs subinterval length h")?;
    let mut cdf = Vec::with_capacity(splitting.subsets().len());
    let mut acc = 0.0;
    for s in splitting.subsets() {
        acc += s.probability.as_f64();
        cdf.push(acc);
    }
    let last = cdf.len() - 1;
    let picks = (0..k)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * acc;
            cdf.iter().position(|&c| u < c).unwrap_or(last)
        })
        .collect();
    Ok(RbmSchedule { h, horizon, picks, seed: 0, realization: 0, iteration: 0 })
}

/// Draws the schedule of MPC iteration `iteration` for one realization from its own substream.
pub fn draw_substream_schedule<T: Scalar>(
    splitting: &Splitting<T>,
    h: T,
    horizon: T,
    dt: T,
    seed: u64,
    realization: u64,
    iteration: u64,
) -> Result<RbmSchedule<T>> {
    let mut rng = substream(seed, realization, iteration);
    let mut schedule = draw_schedule(splitting, h, horizon, dt, &mut rng)?;
    schedule.seed = seed;
    schedule.realization = realization;
    schedule.iteration = iteration;
    Ok(schedule)
}

/// `A_R(ω, t) = Σ_{m∈S_ω(k)} A_m/π_m` on the subinterval containing `t`.
pub fn randomized_generator<T: Scalar>(
    splitting: &Splitting<T>,
    schedule: &RbmSchedule<T>,
    t: T,
) -> Result<CsrMatrix<T>> {
    let k = schedule.subinterval(t)?;
    Ok(splitting.piece(schedule.picks[k]))
}

/// Generator of a window: the system matrix or a randomized schedule.
#[derive(Clone, Copy, Debug)]
pub enum Dynamics<'a, T: Scalar> {
    System,
    Randomized { splitting: &'a Splitting<T>, schedule: &'a RbmSchedule<T> },
}

impl<T: Scalar> Dynamics<'_, T> {
    /// Generator of each step of `grid`, whose origin is the schedule start.
    pub fn step_keys(&self, grid: &TimeGrid<T>) -> Result<Vec<GeneratorKey>> {
        match self {
            Dynamics::System => Ok(vec![GeneratorKey::System; grid.steps()]),
            Dynamics::Randomized { schedule, .. } => {
                let per = steps_in(schedule.h, grid.dt(), "integrator step dt vs subinterval length h")?;
                if per * schedule.picks.len() != grid.steps() {
                    return Err(Error::GridMismatch(format!(
                        "grid of {} steps does not cover a schedule of {} subintervals of {per} steps",
                        grid.steps(),
                        schedule.picks.len()
                    )));
                }
                Ok((0..grid.steps()).map(|k| GeneratorKey::Subset(schedule.picks[k / per])).collect())
            }
        }
    }

    /// Generator matrix behind `key`.
    pub fn generator(&self, problem: &LqProblem<T>, key: GeneratorKey) -> CsrMatrix<T> {
        match (self, key) {
            (Dynamics::Randomized { splitting, .. }, GeneratorKey::Subset(omega)) => splitting.piece(omega),
            _ => problem.a().clone(),
        }
    }
}

/// CN propagator of `dynamics` on `grid`, reusing factorizations from `cache`.
pub fn build_propagator<T: Scalar>(
    problem: &LqProblem<T>,
    dynamics: Dynamics<'_, T>,
    grid: &TimeGrid<T>,
    cache: &OperatorCache<T>,
) -> Result<Propagator<T>> {
    if (grid.dt() - cache.dt()).abs() > T::lit(1e-12) * cache.dt() {
        return Err(Error::GridMismatch("operator cache built for a different step".into()));
    }
    let ops = dynamics
        .step_keys(grid)?
        .into_iter()
        .map(|key| cache.get_or_build(key, || GeneratorMatrix::Sparse(dynamics.generator(problem, key))))
        .collect::<Result<Vec<_>>>()?;
    Propagator::from_ops(*grid, ops)
}

/// `Ω_i`: the schedules drawn so far, one per completed MPC iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct RealizationLog<T> {
    pub schedules: Vec<RbmSchedule<T>>,
}

impl<T> Default for RealizationLog<T> {
    fn default() -> Self {
        Self { schedules: Vec::new() }
    }
}

const LOG_HEADER: &str = "# rbm-realization-log v1: seed realization iteration h T picks...";

impl<T: Scalar> RealizationLog<T> {
    pub fn len(&self) -> usize {
        self.schedules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.schedules.is_empty()
    }

    /// One schedule per line: `seed realization iteration h T pick pick ...`.
    pub fn to_text(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for s in &self.schedules {
            write!(out, "{} {} {} {} {}", s.seed, s.realization, s.iteration, s.h.as_f64(), s.horizon.as_f64()).unwrap();
            for p in &s.picks {
                write!(out, " {p}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut schedules = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::Parse(format!("realization log line {}: {what}", lineno + 1));
            let mut fields = line.split_whitespace();
            let mut next = |what: &str| fields.next().ok_or_else(|| bad(what)).map(str::to_owned);
            let seed = next("seed")?.parse().map_err(|_| bad("seed"))?;
            let realization = next("realization")?.parse().map_err(|_| bad("realization"))?;
            let iteration = next("iteration")?.parse().map_err(|_| bad("iteration"))?;
            let h: f64 = next("h")?.parse().map_err(|_| bad("h"))?;
            let horizon: f64 = next("T")?.parse().map_err(|_| bad("T"))?;
            let picks = fields.map(|f| f.parse().map_err(|_| bad("pick"))).collect::<Result<Vec<usize>>>()?;
            schedules.push(RbmSchedule {
                h: T::lit(h),
                horizon: T::lit(horizon),
                picks,
                seed,
                realization,
                iteration,
            });
        }
        Ok(Self { schedules })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::csr_to_dense;
    use crate::model::heat_ring_example;
    use nalgebra::DMatrix;

    #[test]
    fn single_subset_always_picked() {
        let (p, _) = heat_ring_example::<f64>(11).unwrap();
        let s = Splitting::full_batch(p.a());
        for seed in 0..5 {
            let sched = draw_schedule(&s, 1.0, 15.0, 1.0, &mut substream(seed, 0, 0)).unwrap();
            assert_eq!(sched.picks(), &[0; 15]);
        }
    }

    #[test]
    fn horizon_fifteen_gives_fifteen_subintervals() {
        let (_, s) = heat_ring_example::<f64>(11).unwrap();
        let sched = draw_schedule(&s, 1.0, 15.0, 1.0, &mut substream(1, 0, 0)).unwrap();
        assert_eq!(sched.picks().len(), 15);
    }

    #[test]
    fn grid_mismatch_detected() {
        let (_, s) = heat_ring_example::<f64>(11).unwrap();
        let mut rng = substream(0, 0, 0);
        assert!(matches!(draw_schedule(&s, 2.0, 15.0, 1.0, &mut rng), Err(Error::GridMismatch(_))));
        assert!(matches!(draw_schedule(&s, 0.5, 15.0, 0.3, &mut rng), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn empirical_frequencies_match_probabilities() {
        let (_, s) = heat_ring_example::<f64>(11).unwrap();
        let draws = 100_000usize;
        let sched = draw_schedule(&s, 1.0, draws as f64, 1.0, &mut substream(7, 3, 2)).unwrap();
        let mut counts = [0usize; 11];
        for &p in sched.picks() {
            counts[p] += 1;
        }
        let p = 1.0 / 11.0;
        let band = 3.0 * (p * (1.0 - p) / draws as f64).sqrt();
        for c in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - p).abs() <= band, "frequency {freq} outside {p} ± {band}");
        }
    }

    #[test]
    fn substreams_are_deterministic_and_distinct() {
        let (_, s) = heat_ring_example::<f64>(11).unwrap();
        let a = draw_substream_schedule(&s, 1.0, 15.0, 1.0, 42, 1, 3).unwrap();
        let b = draw_substream_schedule(&s, 1.0, 15.0, 1.0, 42, 1, 3).unwrap();
        let c = draw_substream_schedule(&s, 1.0, 15.0, 1.0, 42, 1, 4).unwrap();
        let d = draw_substream_schedule(&s, 1.0, 15.0, 1.0, 42, 2, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.picks(), c.picks());
        assert_ne!(a.picks(), d.picks());
    }

    #[test]
    fn full_batch_generator_is_a() {
        let (p, _) = heat_ring_example::<f64>(11).unwrap();
        let s = Splitting::full_batch(p.a());
        let sched = draw_schedule(&s, 1.0, 3.0, 1.0, &mut substream(0, 0, 0)).unwrap();
        let g = randomized_generator(&s, &sched, 2.5).unwrap();
        assert_eq!(csr_to_dense(&g), p.a_dense());
        assert!(matches!(randomized_generator(&s, &sched, 3.0), Err(Error::OutOfHorizon { .. })));
    }

    #[test]
    fn omitting_corner_gives_open_chain() {
        let n = 11;
        let (_, s) = heat_ring_example::<f64>(n).unwrap();
        // subset n-1 omits the corner coupling (last part)
        let sched = RbmSchedule::from_picks(&s, 1.0, 1.0, vec![n - 1]).unwrap();
        let g = csr_to_dense(&randomized_generator(&s, &sched, 0.0).unwrap()) * ((n - 1) as f64 / n as f64);
        let c = ((n - 1) * (n - 1)) as f64;
        let mut chain = DMatrix::zeros(n, n);
        for i in 0..n - 1 {
            chain[(i, i)] -= c;
            chain[(i + 1, i + 1)] -= c;
            chain[(i, i + 1)] += c;
            chain[(i + 1, i)] += c;
        }
        assert!((g - &chain).abs().max() < 1e-9);
        for i in 0..n {
            for j in 0..n {
                if i.abs_diff(j) > 1 {
                    assert_eq!(chain[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn probability_weighted_pieces_average_to_a() {
        let (p, s) = heat_ring_example::<f64>(11).unwrap();
        let mean = (0..s.subsets().len()).fold(DMatrix::zeros(11, 11), |acc, w| {
            acc + csr_to_dense(&s.piece(w)) * s.subsets()[w].probability
        });
        assert!((mean - p.a_dense()).abs().max() <= 1e-10 * s.total_norm());
    }

    #[test]
    fn log_text_round_trip() {
        let (_, s) = heat_ring_example::<f64>(11).unwrap();
        let log = RealizationLog {
            schedules: (0..3).map(|i| draw_substream_schedule(&s, 0.5, 15.0, 0.25, 9, 4, i).unwrap()).collect(),
        };
        let back = RealizationLog::<f64>::from_text(&log.to_text()).unwrap();
        assert_eq!(back, log);
        assert!(RealizationLog::<f64>::from_text("1 2 x").is_err());
    }
}

//! Euler–Maruyama path generation with per-path counter-based random streams.
//!
//! Paths are streamed through observers; no trajectory is stored. Batches are
//! split into fixed-size chunks whose aggregates are folded in path order, so
//! merged results do not depend on the number of worker threads.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{DiffusionModel, GaussianLaw, ModelKind};
use crate::observers::{Observation, ObserverSpec, PathObserver, Tally};

/// Paths per work item. Fixed so the fold order is a function of `n_paths`
/// only.
const CHUNK_PATHS: u64 = 64;

const MAX_GRID_POINTS: usize = 50_000_000;

/// Time discretization. Uniform step `dt`, optionally stretched so that the
/// step grows proportionally to `t` once `t` exceeds `stretch_after`, with
/// checkpoint times inserted exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    points: Arc<[f64]>,
    dt: f64,
    stretch_after: Option<f64>,
    checkpoints: Arc<[f64]>,
}

impl TimeGrid {
    pub fn uniform(t_start: f64, t_end: f64, dt: f64) -> Result<Self> {
        Self::new(t_start, t_end, dt, None, &[])
    }

    pub fn new(t_start: f64, t_end: f64, dt: f64, stretch_after: Option<f64>, checkpoints: &[f64]) -> Result<Self> {
        if !(t_start.is_finite() && t_end.is_finite() && t_end > t_start) {
            return Err(Error::InvalidParameter(format!(
                "time grid needs finite t_start < t_end, got [{t_start}, {t_end}]"
            )));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        if let Some(tau) = stretch_after {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "stretch threshold must be positive, got {tau}"
                )));
            }
        }
        let mut stops: Vec<f64> = checkpoints.to_vec();
        if stops.iter().any(|c| !(*c >= t_start && *c <= t_end)) {
            return Err(Error::InvalidParameter(format!(
                "checkpoints must lie in [{t_start}, {t_end}]"
            )));
        }
        stops.sort_by(f64::total_cmp);
        stops.dedup();

        let mut points = vec![t_start];
        let checkpoints: Arc<[f64]> = stops.clone().into();
        let mut stop_iter = stops.into_iter().filter(|c| *c > t_start).peekable();
        let mut t = t_start;
        let mut k: u64 = 0;
        loop {
            let (mut next, step) = match stretch_after {
                Some(tau) if t >= tau => (t + dt * t / tau, dt * t / tau),
                _ => (t_start + (k + 1) as f64 * dt, dt),
            };
            k += 1;
            let snap = 1e-9 * step;
            while let Some(&c) = stop_iter.peek() {
                if c <= t + snap {
                    stop_iter.next();
                } else {
                    break;
                }
            }
            if let Some(&c) = stop_iter.peek() {
                if next >= c - snap {
                    next = c;
                    stop_iter.next();
                }
            }
            if next >= t_end - snap {
                points.push(t_end);
                break;
            }
            points.push(next);
            t = next;
            if points.len() > MAX_GRID_POINTS {
                return Err(Error::InvalidParameter(format!(
                    "time grid exceeds {MAX_GRID_POINTS} points"
                )));
            }
        }
        Ok(Self {
            points: points.into(),
            dt,
            stretch_after,
            checkpoints,
        })
    }

    /// Degenerate grid holding a single time (no steps).
    pub fn instant(t: f64) -> Self {
        Self {
            points: vec![t].into(),
            dt: 0.0,
            stretch_after: None,
            checkpoints: Arc::new([]),
        }
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn t_start(&self) -> f64 {
        self.points[0]
    }

    pub fn t_end(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    pub fn n_steps(&self) -> usize {
        self.points.len() - 1
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn stretch_after(&self) -> Option<f64> {
        self.stretch_after
    }

    pub fn checkpoints(&self) -> &[f64] {
        &self.checkpoints
    }

    /// The grid rebuilt with `dt/2`, same stretch threshold and checkpoints.
    pub fn refined(&self) -> Result<Self> {
        if self.n_steps() == 0 {
            return Ok(self.clone());
        }
        Self::new(
            self.t_start(),
            self.t_end(),
            0.5 * self.dt,
            self.stretch_after,
            &self.checkpoints,
        )
    }
}

/// Master seed plus per-path stream selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedPolicy {
    pub master_seed: u64,
}

impl SeedPolicy {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    /// Independent ChaCha stream for `path_index`; depends on nothing else.
    pub fn stream(&self, path_index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(path_index);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathState {
    pub t: f64,
    pub x: Vec<f64>,
}

/// `x' = x + b(t, x)·dt + noise`, `t' = t + dt`.
pub fn euler_maruyama_step(state: &PathState, model: &DiffusionModel, dt: f64, noise: &[f64]) -> Result<PathState> {
    if state.x.len() != model.dimension() || noise.len() != model.dimension() {
        return Err(Error::DimensionMismatch {
            expected: model.dimension(),
            got: state.x.len().max(noise.len()),
        });
    }
    let mut drift = vec![0.0; state.x.len()];
    let mut next = state.clone();
    step_in_place(model, &mut next.t, &mut next.x, dt, state.t + dt, noise, &mut drift)?;
    Ok(next)
}

#[inline]
fn step_in_place(
    model: &DiffusionModel,
    t: &mut f64,
    x: &mut [f64],
    dt: f64,
    t_next: f64,
    noise: &[f64],
    drift: &mut [f64],
) -> Result<()> {
    model.drift_into(*t, x, drift);
    let mut finite = true;
    for ((xi, bi), wi) in x.iter_mut().zip(drift.iter()).zip(noise) {
        *xi += bi * dt + wi;
        finite &= xi.is_finite();
    }
    *t = t_next;
    if finite {
        Ok(())
    } else {
        Err(Error::NonFiniteState { t: t_next })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseMode {
    #[default]
    Gaussian,
    /// Zero Brownian increments (the ODE limit); the initial draw is kept.
    Suppressed,
}

/// Aggregated output of a batch run, one tally per observer spec.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    pub n_paths: u64,
    pub tallies: Vec<Tally>,
}

/// A model, a grid and a seed policy bound together for path generation.
#[derive(Debug, Clone)]
pub struct Simulation<'a> {
    model: &'a DiffusionModel,
    grid: &'a TimeGrid,
    seeds: SeedPolicy,
    noise: NoiseMode,
    threads: Option<usize>,
    start_law: GaussianLaw,
}

impl<'a> Simulation<'a> {
    pub fn new(model: &'a DiffusionModel, grid: &'a TimeGrid, seeds: SeedPolicy) -> Result<Self> {
        let t_start = grid.t_start();
        let t0 = model.start_time();
        if t_start < t0 {
            return Err(Error::TimeDomain {
                t: t_start,
                reason: "grid starts before the model start time",
            });
        }
        if matches!(model.kind(), ModelKind::RayModel) && !(t_start > 0.0) {
            return Err(Error::TimeDomain {
                t: t_start,
                reason: "ray drift is singular at t <= 0",
            });
        }
        let start_law = if t_start == t0 {
            model.initial_law().clone()
        } else if model.is_closed_form() {
            model.law_at(t_start)?
        } else {
            return Err(Error::InvalidParameter(format!(
                "custom models must start the grid at t0 = {t0}, got {t_start}"
            )));
        };
        Ok(Self {
            model,
            grid,
            seeds,
            noise: NoiseMode::Gaussian,
            threads: None,
            start_law,
        })
    }

    pub fn with_noise(mut self, noise: NoiseMode) -> Self {
        self.noise = noise;
        self
    }

    /// Worker count for [`Simulation::batch_run`]; `None` uses the global pool.
    pub fn with_threads(mut self, threads: Option<usize>) -> Self {
        self.threads = threads;
        self
    }

    pub fn start_law(&self) -> &GaussianLaw {
        &self.start_law
    }

    /// Runs one path through `observers`, returning their observations in
    /// order.
    pub fn simulate_path(&self, path_index: u64, observers: Vec<Box<dyn PathObserver>>) -> Result<Vec<Observation>> {
        let d = self.model.dimension();
        let mut rng = self.seeds.stream(path_index);
        let mut x = vec![0.0; d];
        self.start_law.sample_into(&mut rng, &mut x);
        let mut observers = observers;
        let points = self.grid.points();
        let mut t = points[0];
        for o in observers.iter_mut() {
            o.start(t, &x);
        }
        let mut drift = vec![0.0; d];
        let mut noise = vec![0.0; d];
        for &t_next in &points[1..] {
            let dt = t_next - t;
            match self.noise {
                NoiseMode::Gaussian => {
                    let sd = dt.sqrt();
                    for w in noise.iter_mut() {
                        let z: f64 = rng.sample(StandardNormal);
                        *w = sd * z;
                    }
                }
                NoiseMode::Suppressed => {}
            }
            step_in_place(self.model, &mut t, &mut x, dt, t_next, &noise, &mut drift)
                .map_err(|_| Error::SimulationFault { path_index, t: t_next })?;
            for o in observers.iter_mut() {
                o.observe(t, &x);
            }
        }
        Ok(observers.into_iter().map(|o| o.finish(t, &x)).collect())
    }

    /// Runs paths `0..n_paths`, possibly concurrently, and merges their
    /// observations into one tally per spec.
    pub fn batch_run(&self, n_paths: u64, specs: &[ObserverSpec]) -> Result<BatchResult> {
        let n_chunks = n_paths.div_ceil(CHUNK_PATHS);
        let run_chunk = |chunk: u64| -> ChunkOutcome {
            let mut tallies: Vec<Tally> = specs.iter().map(ObserverSpec::empty_tally).collect();
            let mut faults = 0u64;
            let mut first_fault = None;
            let lo = chunk * CHUNK_PATHS;
            let hi = (lo + CHUNK_PATHS).min(n_paths);
            for path_index in lo..hi {
                let observers = specs.iter().map(ObserverSpec::build).collect();
                match self.simulate_path(path_index, observers) {
                    Ok(obs) => {
                        for (tally, o) in tallies.iter_mut().zip(obs) {
                            tally.record(path_index, o);
                        }
                    }
                    Err(e) => {
                        faults += 1;
                        first_fault.get_or_insert(e);
                    }
                }
            }
            ChunkOutcome {
                tallies,
                faults,
                first_fault,
            }
        };

        let outcomes: Vec<ChunkOutcome> = match self.threads {
            Some(1) => (0..n_chunks).map(run_chunk).collect(),
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
                pool.install(|| (0..n_chunks).into_par_iter().map(run_chunk).collect())
            }
            None => (0..n_chunks).into_par_iter().map(run_chunk).collect(),
        };

        let mut tallies: Vec<Tally> = specs.iter().map(ObserverSpec::empty_tally).collect();
        let mut faults = 0u64;
        let mut first_fault = None;
        for outcome in outcomes {
            for (acc, t) in tallies.iter_mut().zip(outcome.tallies) {
                acc.merge(t);
            }
            faults += outcome.faults;
            if first_fault.is_none() {
                first_fault = outcome.first_fault;
            }
        }
        if let Some(first) = first_fault {
            return Err(Error::BatchFailed {
                fault_count: faults,
                first: Box::new(first),
            });
        }
        Ok(BatchResult { n_paths, tallies })
    }
}

struct ChunkOutcome {
    tallies: Vec<Tally>,
    faults: u64,
    first_fault: Option<Error>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Domain;
    use crate::model::CustomDrift;

    fn const_model(c: [f64; 3], law: GaussianLaw) -> DiffusionModel {
        DiffusionModel::constant_drift(c.to_vec(), 0.0, law).unwrap()
    }

    #[test]
    fn uniform_grid_step_count() {
        let g = TimeGrid::uniform(0.0, 4.0, 1e-3).unwrap();
        assert_eq!(g.n_steps(), 4000);
        assert_eq!(g.t_end(), 4.0);
        let g = TimeGrid::uniform(0.0, 1.0, 0.3).unwrap();
        assert_eq!(g.n_steps(), 4);
        assert_eq!(g.points()[4], 1.0);
        assert!(TimeGrid::uniform(1.0, 1.0, 0.1).is_err());
        assert!(TimeGrid::uniform(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn grid_hits_checkpoints_exactly() {
        let g = TimeGrid::new(0.0, 1.0, 0.3, None, &[0.5, 0.9]).unwrap();
        assert!(g.points().contains(&0.5));
        assert!(g.points().contains(&0.9));
        assert!(g.points().windows(2).all(|w| w[1] > w[0]));
        let g = TimeGrid::new(0.0, 4.0, 1e-3, None, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(g.n_steps(), 4000);
        assert!(g.points().contains(&3.0));
    }

    #[test]
    fn stretched_grid_grows_geometrically() {
        let g = TimeGrid::new(1.0, 100.0, 0.01, Some(1.0), &[10.0]).unwrap();
        assert!(g.points().contains(&10.0));
        // ≈ ln(100)/ln(1.01) steps
        let expected = (100f64).ln() / (1.01f64).ln();
        assert!((g.n_steps() as f64 - expected).abs() < 3.0, "{}", g.n_steps());
        let g2 = TimeGrid::new(0.0, 3.0, 0.1, Some(2.0), &[]).unwrap();
        let steps: Vec<f64> = g2.points().windows(2).map(|w| w[1] - w[0]).collect();
        assert!((steps[0] - 0.1).abs() < 1e-12);
        assert!(steps.iter().cloned().fold(0.0, f64::max) > 0.1 + 1e-9);
    }

    #[test]
    fn step_examples() {
        let zero = const_model([0.0; 3], GaussianLaw::standard(3));
        let s = PathState { t: 0.0, x: vec![1.0, 2.0, 3.0] };
        let n = euler_maruyama_step(&s, &zero, 0.5, &[0.0; 3]).unwrap();
        assert_eq!(n, PathState { t: 0.5, x: vec![1.0, 2.0, 3.0] });

        let c = const_model([1.0, 0.0, 0.0], GaussianLaw::standard(3));
        let s = PathState { t: 0.0, x: vec![0.0; 3] };
        assert_eq!(euler_maruyama_step(&s, &c, 0.5, &[0.0; 3]).unwrap().x, vec![0.5, 0.0, 0.0]);

        let r = DiffusionModel::ray(1.0, GaussianLaw::standard(3)).unwrap();
        let s = PathState { t: 1.0, x: vec![1.0, 0.0, 0.0] };
        assert_eq!(euler_maruyama_step(&s, &r, 0.5, &[0.0; 3]).unwrap().x, vec![1.5, 0.0, 0.0]);
    }

    #[test]
    fn non_finite_state_faults() {
        let blowup = DiffusionModel::custom(
            CustomDrift::new("blowup", |_, _, out: &mut [f64]| out.fill(f64::INFINITY)),
            0.0,
            GaussianLaw::standard(3),
        )
        .unwrap();
        let s = PathState { t: 0.0, x: vec![0.0; 3] };
        assert!(matches!(euler_maruyama_step(&s, &blowup, 0.1, &[0.0; 3]), Err(Error::NonFiniteState { .. })));

        let grid = TimeGrid::uniform(0.0, 1.0, 0.1).unwrap();
        let sim = Simulation::new(&blowup, &grid, SeedPolicy::new(1)).unwrap();
        let spec = ObserverSpec::domain_flux(Domain::unit_ball(3), vec![]);
        match sim.batch_run(10, &[spec]) {
            Err(Error::BatchFailed { fault_count, first }) => {
                assert_eq!(fault_count, 10);
                assert!(matches!(*first, Error::SimulationFault { path_index: 0, .. }));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_path_reports_no_crossings() {
        let m = const_model([1.0, 0.0, 0.0], GaussianLaw::standard(3));
        let grid = TimeGrid::instant(0.0);
        let sim = Simulation::new(&m, &grid, SeedPolicy::new(3)).unwrap();
        let spec = ObserverSpec::domain_flux(Domain::unit_ball(3), vec![]);
        let obs = sim.simulate_path(0, vec![spec.build()]).unwrap();
        let Observation::Flux(f) = &obs[0] else { panic!() };
        assert_eq!((f.sample.net, f.sample.n_plus, f.sample.n_minus), (0, 0, 0));
    }

    #[test]
    fn suppressed_noise_follows_ode() {
        let x0 = [0.5, -1.0, 2.0];
        let m = const_model([1.0, 2.0, -0.5], GaussianLaw::deterministic(x0.to_vec()).unwrap());
        let grid = TimeGrid::uniform(0.0, 3.0, 0.01).unwrap();
        let sim = Simulation::new(&m, &grid, SeedPolicy::new(9)).unwrap().with_noise(NoiseMode::Suppressed);
        let spec = ObserverSpec::ScaledPositions { times: vec![3.0].into() };
        let obs = sim.simulate_path(0, vec![spec.build()]).unwrap();
        let Observation::Scaled(v) = &obs[0] else { panic!() };
        let want = [0.5 + 3.0, -1.0 + 6.0, 2.0 - 1.5];
        for (got, w) in v[0].iter().zip(want) {
            assert!((got * 3.0 - w).abs() < 1e-12);
        }
    }

    #[test]
    fn single_path_batch_matches_simulate_path() {
        let m = const_model([1.0, 0.0, 0.0], GaussianLaw::new(vec![0.0; 3], 0.25).unwrap());
        let grid = TimeGrid::uniform(0.0, 2.0, 0.01).unwrap();
        let sim = Simulation::new(&m, &grid, SeedPolicy::new(5)).unwrap();
        let mut spec = ObserverSpec::domain_flux(Domain::unit_ball(3), vec![]);
        if let ObserverSpec::DomainFlux { keep_samples, .. } = &mut spec {
            *keep_samples = true;
        }
        let batch = sim.batch_run(1, std::slice::from_ref(&spec)).unwrap();
        let obs = sim.simulate_path(0, vec![spec.build()]).unwrap();
        let Observation::Flux(f) = &obs[0] else { panic!() };
        let tally = batch.tallies[0].as_flux().unwrap();
        assert_eq!(tally.samples.as_ref().unwrap()[0], (0, f.sample));
    }

    #[test]
    fn propagated_start_law() {
        let m = const_model([1.0, 0.0, 0.0], GaussianLaw::new(vec![0.0; 3], 0.25).unwrap());
        let grid = TimeGrid::uniform(2.0, 3.0, 0.1).unwrap();
        let sim = Simulation::new(&m, &grid, SeedPolicy::new(5)).unwrap();
        assert_eq!(sim.start_law().mean(), &[2.0, 0.0, 0.0]);
        assert!((sim.start_law().variance() - 2.25).abs() < 1e-15);

        let custom = DiffusionModel::custom(CustomDrift::new("zero", |_, _, o: &mut [f64]| o.fill(0.0)), 0.0, GaussianLaw::standard(3)).unwrap();
        assert!(Simulation::new(&custom, &grid, SeedPolicy::new(5)).is_err());
        let ray = DiffusionModel::ray(1.0, GaussianLaw::standard(3)).unwrap();
        let early = TimeGrid::uniform(0.5, 3.0, 0.1).unwrap();
        assert!(Simulation::new(&ray, &early, SeedPolicy::new(5)).is_err());
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let s = SeedPolicy::new(42);
        let a: Vec<u64> = (0..4).map(|_| s.stream(7).random::<u64>()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        assert_ne!(s.stream(7).random::<u64>(), s.stream(8).random::<u64>());
    }
}

//! Statistical behaviour of the Euler–Maruyama engine against closed-form laws.

use std::sync::Arc;

use fluxlab::engine::{NoiseMode, SeedPolicy, Simulation, TimeGrid};
use fluxlab::geometry::Domain;
use fluxlab::model::{DiffusionModel, GaussianLaw};
use fluxlab::observers::ObserverSpec;

fn scaled_at(times: &[f64]) -> ObserverSpec {
    ObserverSpec::ScaledPositions {
        times: Arc::from(times.to_vec()),
    }
}

#[test]
fn constant_drift_is_exact_in_law() {
    // Euler is exact for constant drift, so any dt gives the law at T.
    let law = GaussianLaw::new(vec![0.5, -1.0], 0.3).unwrap();
    let model = DiffusionModel::constant_drift(vec![2.0, 1.0], 0.0, law).unwrap();
    let grid = TimeGrid::uniform(0.0, 2.0, 0.25).unwrap();
    let sim = Simulation::new(&model, &grid, SeedPolicy::new(2)).unwrap();
    let res = sim.batch_run(40_000, &[scaled_at(&[2.0])]).unwrap();
    let scaled = res.tallies[0].as_scaled().unwrap();
    let exact = model.law_at(2.0).unwrap();
    for (i, m) in scaled.moments[0].iter().enumerate() {
        // moments are of X_t / t
        let mean = m.summary().unwrap();
        let var = m.variance_summary().unwrap();
        assert!((mean.mean * 2.0 - exact.mean()[i]).abs() <= 4.0 * 2.0 * mean.std_error, "{mean:?}");
        assert!((var.mean * 4.0 - exact.variance()).abs() <= 4.0 * 4.0 * var.std_error, "{var:?}");
    }
}

#[test]
fn suppressed_noise_mean_converges_at_first_order() {
    // Without noise and from a point mass, the path is the Euler polygon of
    // m' = -θ m, whose error at T is O(dt).
    let theta = 0.7;
    let law = GaussianLaw::deterministic(vec![1.0]).unwrap();
    let model = DiffusionModel::stationary_symmetric(theta, 0.0, law).unwrap();
    let exact = (-theta * 2.0f64).exp();
    let mut errors = Vec::new();
    for dt in [0.1, 0.05, 0.025, 0.0125] {
        let grid = TimeGrid::uniform(0.0, 2.0, dt).unwrap();
        let sim = Simulation::new(&model, &grid, SeedPolicy::new(1))
            .unwrap()
            .with_noise(NoiseMode::Suppressed);
        let res = sim.batch_run(2, &[scaled_at(&[2.0])]).unwrap();
        let m = res.tallies[0].as_scaled().unwrap().moments[0][0].mean() * 2.0;
        errors.push((m - exact).abs());
    }
    for w in errors.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.8..2.2).contains(&ratio), "{errors:?}");
    }
}

#[test]
fn ray_model_second_moment_step_bias_shrinks() {
    // For x' = x(1 + dt/t) + noise the Euler second moment is computable by
    // recursion; the engine must track that recursion, not the exact law.
    let law = GaussianLaw::new(vec![1.0, 0.0, 0.0], 0.1).unwrap();
    let model = DiffusionModel::ray(1.0, law).unwrap();
    let t_end = 3.0;
    let euler_moments = |dt: f64| {
        let (mut m, mut s, mut t) = (1.0f64, 0.1f64, 1.0f64);
        while t < t_end - 1e-12 {
            let g = 1.0 + dt / t;
            m *= g;
            s = s * g * g + dt;
            t += dt;
        }
        (m, s)
    };
    let exact = model.law_at(t_end).unwrap();
    let (_, s_coarse) = euler_moments(0.2);
    let (_, s_fine) = euler_moments(0.05);
    assert!((s_coarse - exact.variance()).abs() > 3.0 * (s_fine - exact.variance()).abs());

    let grid = TimeGrid::uniform(1.0, t_end, 0.2).unwrap();
    let sim = Simulation::new(&model, &grid, SeedPolicy::new(77)).unwrap();
    let res = sim.batch_run(60_000, &[scaled_at(&[t_end])]).unwrap();
    let m = &res.tallies[0].as_scaled().unwrap().moments[0];
    let (mean_e, var_e) = euler_moments(0.2);
    let mean = m[0].summary().unwrap();
    let var = m[1].variance_summary().unwrap();
    let scale = t_end * t_end;
    assert!((mean.mean * t_end - mean_e).abs() <= 4.0 * t_end * mean.std_error);
    assert!((var.mean * scale - var_e).abs() <= 4.0 * scale * var.std_error);
}

#[test]
fn batch_results_do_not_depend_on_thread_count() {
    let law = GaussianLaw::new(vec![0.0; 3], 0.25).unwrap();
    let model = DiffusionModel::constant_drift(vec![1.0, 0.0, 0.0], 0.0, law).unwrap();
    let grid = TimeGrid::new(0.0, 2.0, 0.01, None, &[1.0]).unwrap();
    let specs = [
        ObserverSpec::domain_flux(Domain::unit_ball(3), vec![1.0, 2.0]),
        scaled_at(&[1.0, 2.0]),
    ];
    let run = |threads| {
        Simulation::new(&model, &grid, SeedPolicy::new(99))
            .unwrap()
            .with_threads(Some(threads))
            .batch_run(3_001, &specs)
            .unwrap()
    };
    let one = run(1);
    assert_eq!(one, run(8));
    assert_eq!(one, run(3));
    let other_seed = Simulation::new(&model, &grid, SeedPolicy::new(100))
        .unwrap()
        .batch_run(3_001, &specs)
        .unwrap();
    assert_ne!(one, other_seed);
}

#[test]
fn ray_grid_must_start_after_zero() {
    let model = DiffusionModel::ray(0.5, GaussianLaw::standard(2)).unwrap();
    let grid = TimeGrid::uniform(0.0, 1.0, 0.1).unwrap();
    assert!(Simulation::new(&model, &grid, SeedPolicy::new(0)).is_err());
}

//! The five experiment drivers. Each appends checks to the report and writes
//! its CSV tables through [`Output`].

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{ExperimentConfig, GridConfig};
use super::{Budgets, Check, RunError, RunReport};
use crate::engine::{SeedPolicy, Simulation, TimeGrid};
use crate::flux::{
    boundary_flux_integral, cone_flux_integral, gaussian_cone_probability, integrand_sup, lateral_flux_integral,
    region_probability, residuals as point_residuals, FluxIntegralSpec, FluxSurface, LateralFluxSpec,
};
use crate::geometry::Cone;
use crate::model::{DiffusionModel, GaussianLaw, LimitingVelocity};
use crate::observers::{ObserverSpec, TruncatedCone};
use crate::stats::{compare, compare_estimates, Confidence, EstimateSummary};

pub(super) struct Output {
    dir: PathBuf,
    pub files: Vec<PathBuf>,
}

impl Output {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    fn io_error(path: &Path, source: impl Into<std::io::Error>) -> RunError {
        RunError::Io {
            path: path.to_path_buf(),
            source: source.into(),
        }
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), RunError> {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(|e| Self::io_error(&path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        w.write_record(header).map_err(|e| Self::io_error(&path, e))?;
        for row in rows {
            w.write_record(row).map_err(|e| Self::io_error(&path, e))?;
        }
        w.flush().map_err(|e| Self::io_error(&path, e))?;
        self.files.push(path);
        Ok(())
    }

    fn with_file<F>(&mut self, name: &str, f: F) -> Result<(), RunError>
    where
        F: FnOnce(BufWriter<File>) -> std::io::Result<()>,
    {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(|e| Self::io_error(&path, e))?;
        f(BufWriter::new(file)).map_err(|e| Self::io_error(&path, e))?;
        self.files.push(path);
        Ok(())
    }
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn build_grid(g: &GridConfig, dt: f64, checkpoints: &[f64]) -> crate::Result<TimeGrid> {
    TimeGrid::new(g.t_start, g.t_end, dt, g.stretch_after, checkpoints)
}

fn level(cfg: &ExperimentConfig) -> Confidence {
    Confidence::Sigmas(cfg.tolerances.sigmas)
}

fn simulation<'a>(cfg: &ExperimentConfig, model: &'a DiffusionModel, grid: &'a TimeGrid) -> crate::Result<Simulation<'a>> {
    Ok(Simulation::new(model, grid, SeedPolicy::new(cfg.master_seed))?.with_threads(cfg.threads))
}

fn verdict_check(name: &str, est: &EstimateSummary, oracle: f64, extra: f64, level: Confidence) -> Check {
    let v = compare(est, oracle, extra, level);
    Check::new(name, v.passed(), v.to_string())
}

fn truncation_check(cfg: &ExperimentConfig, name: &str, fraction: f64, report: &mut RunReport) {
    match cfg.tolerances.truncation_tol {
        Some(tol) => report.checks.push(Check::new(
            name,
            fraction <= tol,
            format!("fraction of paths not escaped at the horizon {fraction:.3e} (tolerance {tol:.3e})"),
        )),
        None => report
            .notes
            .push(format!("{name}: fraction of paths not escaped {fraction:.3e} (not enforced)")),
    }
}

pub(super) fn boundary_flux(cfg: &ExperimentConfig, report: &mut RunReport, out: &mut Output) -> Result<(), RunError> {
    let model = cfg.model.build()?;
    let domain = cfg.domain.as_ref().expect("validated").build()?;
    let g = cfg.grid.as_ref().expect("validated");
    let mut horizons = g.checkpoints.clone();
    if horizons.last() != Some(&g.t_end) {
        horizons.push(g.t_end);
    }
    let spec = ObserverSpec::DomainFlux {
        domain: Arc::new(domain.clone()),
        checkpoints: horizons.clone().into(),
        escape_radius: domain.bounding_radius(),
        keep_samples: cfg.output.samples,
    };
    let grid = build_grid(g, g.dt, &horizons)?;
    let result = simulation(cfg, &model, &grid)?.batch_run(cfg.n_paths, std::slice::from_ref(&spec))?;
    let tally = result.tallies[0].as_flux().expect("flux tally");

    // coarse rerun for the discretization budget
    let sweep = match &cfg.dt_sweep {
        Some(s) => {
            let coarse = build_grid(g, 2.0 * g.dt, &horizons)?;
            let n = s.n_paths.unwrap_or(cfg.n_paths);
            let plain = ObserverSpec::DomainFlux {
                domain: Arc::new(domain.clone()),
                checkpoints: horizons.clone().into(),
                escape_radius: domain.bounding_radius(),
                keep_samples: false,
            };
            let r = simulation(cfg, &model, &coarse)?.batch_run(n, &[plain])?;
            let t = r.tallies[0].as_flux().expect("flux tally").clone();
            Some(t)
        }
        None => None,
    };

    let level = level(cfg);
    let mut rows = Vec::new();
    for (k, &tb) in horizons.iter().enumerate() {
        let est = tally.checkpoints[k].summary()?;
        let discretization = match &sweep {
            Some(coarse) => Some((est.mean - coarse.checkpoints[k].summary()?.mean).abs()),
            None => None,
        };
        if !model.is_closed_form() {
            rows.push(vec![num(tb), num(est.mean), num(est.std_error), String::new(), "n/a".into()]);
            report.checks.push(
                Check::new(
                    format!("mc_flux t_b={tb}"),
                    true,
                    format!("mean={:.6} se={:.3e} (no closed-form oracle)", est.mean, est.std_error),
                )
                .with_budgets(Budgets {
                    statistical: Some(est.ci_halfwidth(level)),
                    discretization,
                    truncation: None,
                }),
            );
            continue;
        }
        let ispec = FluxIntegralSpec::new(&model, FluxSurface::Boundary(domain.clone()), (g.t_start, tb))
            .with_orders(cfg.quadrature.time_order, cfg.quadrature.surface_order);
        let integral = boundary_flux_integral(&ispec)?;
        let verdict = compare(&est, integral.value, cfg.tolerances.extra_tolerance, level);
        rows.push(vec![
            num(tb),
            num(est.mean),
            num(est.std_error),
            num(integral.value),
            verdict.outcome.to_string(),
        ]);
        report.checks.push(
            Check::new(format!("mc_vs_flux_integral t_b={tb}"), verdict.passed(), verdict.to_string()).with_budgets(
                Budgets {
                    statistical: Some(verdict.ci_halfwidth),
                    discretization,
                    truncation: integral.tail_bound,
                },
            ),
        );
        if let Ok(p_start) = region_probability(&model.law_at(g.t_start)?, &domain) {
            let p_end = region_probability(&model.law_at(tb)?, &domain)?;
            let telescoped = p_start - p_end;
            let gap = (integral.value - telescoped).abs();
            report.checks.push(Check::new(
                format!("flux_integral_vs_region_probabilities t_b={tb}"),
                gap <= cfg.tolerances.oracle_tolerance,
                format!(
                    "integral={:.10} P(start)-P(end)={:.10} |diff|={gap:.3e} (tolerance {:.1e})",
                    integral.value, telescoped, cfg.tolerances.oracle_tolerance
                ),
            ));
        }
    }
    if let (Some(tol), true) = (cfg.tolerances.zero_integrand_tol, model.is_closed_form()) {
        let ispec = FluxIntegralSpec::new(&model, FluxSurface::Boundary(domain.clone()), (g.t_start, g.t_end))
            .with_orders(cfg.quadrature.time_order, cfg.quadrature.surface_order);
        let sup = integrand_sup(&ispec, 32)?;
        report.checks.push(Check::new(
            "integrand_vanishes",
            sup <= tol,
            format!("max |rho v.n| over sampled nodes {sup:.3e} (tolerance {tol:.1e})"),
        ));
    }
    report.checks.push(Check::new(
        "telescoping",
        tally.telescoping_violations == 0,
        format!(
            "{} of {} paths violate net = chi(start) - chi(end)",
            tally.telescoping_violations,
            tally.paths()
        ),
    ));
    truncation_check(cfg, "truncation", tally.truncation_fraction(), report);
    report.notes.push(format!(
        "raw crossings over the run: outward {} inward {} (step-size dependent, not certified)",
        tally.n_plus, tally.n_minus
    ));
    out.csv("boundary_flux.csv", &["t_b", "mc_mean", "mc_se", "oracle", "verdict"], &rows)?;
    if cfg.output.samples {
        out.with_file("samples.csv", |w| tally.write_samples_csv(w))?;
    }
    Ok(())
}

fn limit_law(model: &DiffusionModel) -> Option<GaussianLaw> {
    match model.limiting_velocity_law() {
        LimitingVelocity::Gaussian(law) => Some(law),
        LimitingVelocity::Deterministic(v) => GaussianLaw::deterministic(v).ok(),
        LimitingVelocity::Absent => None,
    }
}

pub(super) fn asymptotic_flux(cfg: &ExperimentConfig, report: &mut RunReport, out: &mut Output) -> Result<(), RunError> {
    let model = cfg.model.build()?;
    let cone_cfg = cfg.cone.as_ref().expect("validated");
    let cone = Arc::new(cone_cfg.shape.build()?);
    let radius = cone_cfg.radius.expect("validated");
    let g = cfg.grid.as_ref().expect("validated");
    let level = level(cfg);
    let law = limit_law(&model).expect("validated");
    let oracle = gaussian_cone_probability(&law, &cone)?;

    let mut specs = vec![
        ObserverSpec::TruncatedCone {
            region: TruncatedCone {
                cone: cone.clone(),
                radius,
            },
            escape_radius: radius,
            keep_samples: cfg.output.samples,
        },
        ObserverSpec::AsymptoticIndicator { cone: cone.clone() },
        ObserverSpec::LastExit {
            radius,
            late_after: g.t_end - 1.0,
        },
    ];
    if let Some(r2) = cone_cfg.second_radius {
        specs.push(ObserverSpec::truncated_cone((*cone).clone(), r2));
    }
    let grid = build_grid(g, g.dt, &[])?;
    let result = simulation(cfg, &model, &grid)?.batch_run(cfg.n_paths, &specs)?;
    let net = result.tallies[0].as_flux().expect("flux tally");
    let indicator = result.tallies[1].as_indicator().expect("indicator tally");
    let last_exit = result.tallies[2].as_last_exit().expect("last exit tally");
    let net_est = net.summary()?;
    let ind_est = indicator.summary()?;
    let tail = crate::flux::gaussian_ball_probability(&model.law_at(g.t_end)?, &vec![0.0; model.dimension()], radius)?;

    let extra = cfg.tolerances.extra_tolerance + oracle.std_error.map_or(0.0, |se| level.quantile() * se);
    let mut rows = Vec::new();
    for (name, est) in [("truncated_cone_net", &net_est), ("asymptotic_indicator", &ind_est)] {
        let v = compare(est, oracle.value, extra, level);
        rows.push(vec![
            name.to_string(),
            num(est.mean),
            num(est.std_error),
            num(oracle.value),
            v.outcome.to_string(),
        ]);
        report.checks.push(
            Check::new(format!("{name}_vs_cone_probability"), v.passed(), v.to_string()).with_budgets(Budgets {
                statistical: Some(v.ci_halfwidth),
                discretization: None,
                truncation: Some(tail),
            }),
        );
    }
    let pair = compare_estimates(&net_est, &ind_est, 0.0, level);
    report.checks.push(Check::new("net_vs_indicator", pair.passed(), pair.to_string()));
    if let Some(r2) = cone_cfg.second_radius {
        let far = result.tallies[3].as_flux().expect("flux tally").summary()?;
        let v = compare_estimates(&net_est, &far, 0.0, level);
        report.checks.push(Check::new(format!("radius_consistency R={radius} vs R={r2}"), v.passed(), v.to_string()));
    }
    let late = last_exit.late_fraction();
    report.checks.push(Check::new(
        "late_last_exit",
        late < cfg.tolerances.late_exit_tol,
        format!(
            "fraction with last exit from B_R after T-1: {late:.3e} (tolerance {:.1e}); never inside {}",
            cfg.tolerances.late_exit_tol, last_exit.never_inside
        ),
    ));
    report.checks.push(Check::new(
        "telescoping",
        net.telescoping_violations == 0,
        format!("{} of {} paths violate net = chi(end) - chi(start)", net.telescoping_violations, net.paths()),
    ));
    truncation_check(cfg, "truncation", net.truncation_fraction(), report);
    if let Some(se) = oracle.std_error {
        report.notes.push(format!("cone probability from quasi-Monte Carlo, standard error {se:.2e}"));
    }
    out.csv("asymptotic_flux.csv", &["estimator", "mc_mean", "mc_se", "oracle", "verdict"], &rows)?;
    if cfg.output.samples {
        out.with_file("samples.csv", |w| net.write_samples_csv(w))?;
    }

    if let Some(cl) = &cfg.cone_limit {
        let t0 = model.start_time();
        let mut rows = Vec::new();
        let mut devs = Vec::new();
        for &r in &cl.radii {
            let spec = FluxIntegralSpec::new(
                &model,
                FluxSurface::Cap {
                    cone: (*cone).clone(),
                    radius: r,
                },
                (t0, (cl.window_factor * r).max(t0)),
            )
            .with_orders(cfg.quadrature.time_order, cfg.quadrature.surface_order);
            let integral = cone_flux_integral(&spec)?;
            let dev = (integral.value - oracle.value).abs();
            devs.push(dev);
            rows.push(vec![num(r), num(integral.value), num(oracle.value), num(dev)]);
        }
        out.csv("cone_limit.csv", &["R", "integral", "oracle", "abs_diff"], &rows)?;
        let last = *devs.last().expect("nonempty radii");
        let sequence = devs.iter().map(|d| format!("{d:.3e}")).collect::<Vec<_>>().join(", ");
        report.checks.push(Check::new(
            "cone_limit_final_deviation",
            last <= cl.tolerance,
            format!("deviations [{sequence}] at R {:?}; final {last:.3e} (tolerance {:.1e})", cl.radii, cl.tolerance),
        ));
        report.checks.push(Check::new(
            "cone_limit_monotone",
            devs.windows(2).all(|w| w[1] < w[0]),
            format!("deviations [{sequence}] decrease along the radii"),
        ));
    }
    Ok(())
}

pub(super) fn residuals(cfg: &ExperimentConfig, report: &mut RunReport, out: &mut Output) -> Result<(), RunError> {
    let model = cfg.model.build()?;
    let rc = cfg.residuals.as_ref().expect("validated");
    let d = model.dimension();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);
    let names = ["continuity", "duality", "fokker_planck"];
    let mut rows = Vec::new();
    let mut order_rows = Vec::new();
    let mut failures = [0usize; 3];
    let mut worst = [0.0f64; 3];
    let mut min_ratio = [f64::INFINITY; 3];
    for point in 0..rc.n_points {
        let t = rng.random_range(rc.t_range[0]..rc.t_range[1]);
        let law = model.law_at(t)?;
        let sd = law.variance().sqrt();
        let x: Vec<f64> = law
            .mean()
            .iter()
            .map(|m| {
                let z: f64 = rng.sample(StandardNormal);
                m + sd * z.clamp(-rc.spread, rc.spread)
            })
            .collect();
        // the step is relative to the local spread of the law
        let h = rc.h * sd;
        let coarse = point_residuals(&model, t, &x, h)?;
        let fine = point_residuals(&model, t, &x, 0.5 * h)?;
        let floor = rc.floor * (2.0 * std::f64::consts::PI * law.variance()).powf(-(d as f64) / 2.0);
        let mut row = vec![num(t)];
        row.extend(x.iter().map(|v| num(*v)));
        row.extend([coarse.continuity, coarse.duality, coarse.fokker_planck].map(num));
        rows.push(row);
        let pairs = [
            (coarse.continuity, fine.continuity),
            (coarse.duality, fine.duality),
            (coarse.fokker_planck, fine.fokker_planck),
        ];
        for (k, (a, b)) in pairs.into_iter().enumerate() {
            let (a, b) = (a.abs(), b.abs());
            let exact = a < floor && b < floor;
            let ratio = a / b;
            let ok = exact || ratio >= rc.min_ratio;
            failures[k] += (!ok) as usize;
            worst[k] = worst[k].max(a);
            if !exact {
                min_ratio[k] = min_ratio[k].min(ratio);
            }
            order_rows.push(vec![
                point.to_string(),
                names[k].to_string(),
                num(a),
                num(b),
                if exact { "exact".into() } else { num(ratio) },
                if ok { "PASS" } else { "FAIL" }.to_string(),
            ]);
        }
    }
    for k in 0..3 {
        let ratio = if min_ratio[k].is_finite() {
            format!("{:.3}", min_ratio[k])
        } else {
            "n/a (all at roundoff)".into()
        };
        report.checks.push(Check::new(
            format!("{}_second_order", names[k]),
            failures[k] == 0,
            format!(
                "{} of {} points fail; smallest halving ratio {ratio} (required {}); max residual at h={}·sd is {:.3e}",
                failures[k], rc.n_points, rc.min_ratio, rc.h, worst[k]
            ),
        ));
    }
    let mut header = vec!["t".to_string()];
    header.extend((1..=d).map(|i| format!("x{i}")));
    header.extend(names.iter().map(|s| s.to_string()));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv("residuals.csv", &header, &rows)?;
    out.csv(
        "residual_order.csv",
        &["point", "identity", "residual_h", "residual_half_h", "ratio", "verdict"],
        &order_rows,
    )?;
    Ok(())
}

pub(super) fn limiting_velocity(cfg: &ExperimentConfig, report: &mut RunReport, out: &mut Output) -> Result<(), RunError> {
    let model = cfg.model.build()?;
    let g = cfg.grid.as_ref().expect("validated");
    let times = g.checkpoints.clone();
    let grid = build_grid(g, g.dt, &times)?;
    let spec = ObserverSpec::ScaledPositions {
        times: times.clone().into(),
    };
    let result = simulation(cfg, &model, &grid)?.batch_run(cfg.n_paths, &[spec])?;
    let tally = result.tallies[0].as_scaled().expect("scaled tally");
    let level = level(cfg);
    let extra = cfg.tolerances.extra_tolerance;
    let mut rows = Vec::new();
    for (k, &t) in times.iter().enumerate() {
        let law = model.law_at(t)?;
        let var_oracle = law.variance() / (t * t);
        for (i, m) in tally.moments[k].iter().enumerate() {
            let mean_oracle = law.mean()[i] / t;
            let mean = m.summary()?;
            let var = m.variance_summary()?;
            let vm = compare(&mean, mean_oracle, extra, level);
            let vv = compare(&var, var_oracle, extra, level);
            rows.push(vec![
                num(t),
                (i + 1).to_string(),
                num(mean.mean),
                num(mean.std_error),
                num(mean_oracle),
                num(var.mean),
                num(var.std_error),
                num(var_oracle),
                crate::stats::Outcome::from_bool(vm.passed() && vv.passed()).to_string(),
            ]);
            report.checks.push(verdict_check(&format!("mean t={t} x{}", i + 1), &mean, mean_oracle, extra, level));
            report.checks.push(
                Check::new(format!("variance t={t} x{}", i + 1), vv.passed(), vv.to_string()).with_budgets(Budgets {
                    statistical: Some(vv.ci_halfwidth),
                    discretization: None,
                    truncation: None,
                }),
            );
        }
    }
    match limit_law(&model) {
        Some(l) => report.notes.push(format!(
            "limiting velocity law: mean {:?}, variance {} per coordinate",
            l.mean(),
            l.variance()
        )),
        None => report.notes.push("model has no limiting velocity".into()),
    }
    out.csv(
        "limiting_velocity.csv",
        &[
            "t",
            "coordinate",
            "mean",
            "mean_se",
            "mean_oracle",
            "variance",
            "variance_se",
            "variance_oracle",
            "verdict",
        ],
        &rows,
    )
}

pub(super) fn lateral_vanishing(cfg: &ExperimentConfig, report: &mut RunReport, out: &mut Output) -> Result<(), RunError> {
    let model = cfg.model.build()?;
    let cone: Cone = cfg.cone.as_ref().expect("validated").shape.build()?;
    let lc = cfg.lateral.as_ref().expect("validated");
    let window = (lc.window[0], lc.window[1]);
    let mut values = Vec::new();
    for &r in &lc.radii {
        let mut spec = LateralFluxSpec::new(&model, cone.clone(), r, window);
        spec.time_order = cfg.quadrature.time_order.min(10);
        values.push(lateral_flux_integral(&spec)?);
    }
    let rows: Vec<Vec<String>> = lc.radii.iter().zip(&values).map(|(r, v)| vec![num(*r), num(*v)]).collect();
    out.csv("lateral.csv", &["R", "integral"], &rows)?;
    let (first, last) = (values[0], *values.last().expect("two radii"));
    let ratio = first / last;
    report.checks.push(Check::new(
        "lateral_decay_ratio",
        ratio >= lc.min_ratio,
        format!(
            "integral {first:.4e} at R={} vs {last:.4e} at R={}: ratio {ratio:.2} (required {})",
            lc.radii[0],
            lc.radii.last().expect("two radii"),
            lc.min_ratio
        ),
    ));
    report.checks.push(Check::new(
        "lateral_monotone",
        values.windows(2).all(|w| w[1] < w[0]),
        format!("values {values:?} decrease along the radii"),
    ));
    Ok(())
}

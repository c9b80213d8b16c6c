//! Quadrature evaluation of surface flux integrals `∫∫ ρ v·n dσ dt` for the
//! closed-form models, Gaussian region and cone probabilities, and
//! finite-difference residuals of the continuity, duality and Fokker–Planck
//! identities.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{Error, Result};
use crate::geometry::{Cone, Domain, SurfaceQuadrature};
use crate::model::{DiffusionModel, GaussianLaw};
use crate::quadrature::{normal_cdf, AdaptiveIntegrator, NeumaierSum};
use crate::vector::{dot, norm};

/// Log-densities below this are flushed to zero density.
const LOG_FLUSH: f64 = -700.0;

/// Residuals are refused where the density is below this.
const DENSITY_GUARD: f64 = 1e-300;

/// Surface carrying the flux.
#[derive(Debug, Clone)]
pub enum FluxSurface {
    /// `∂D` with outward normals.
    Boundary(Domain),
    /// Spherical patch `C ∩ S_R` of a cap cone, radial normals.
    Cap { cone: Cone, radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TailBoundMode {
    None,
    #[default]
    Report,
}

#[derive(Debug, Clone)]
pub struct FluxIntegralSpec<'a> {
    pub model: &'a DiffusionModel,
    pub surface: FluxSurface,
    pub window: (f64, f64),
    pub time_order: usize,
    pub surface_order: usize,
    pub tail_bound_mode: TailBoundMode,
    /// Absolute tolerance of the adaptive time integration.
    pub time_tolerance: f64,
}

impl<'a> FluxIntegralSpec<'a> {
    pub fn new(model: &'a DiffusionModel, surface: FluxSurface, window: (f64, f64)) -> Self {
        Self {
            model,
            surface,
            window,
            time_order: 16,
            surface_order: 48,
            tail_bound_mode: TailBoundMode::Report,
            time_tolerance: 1e-12,
        }
    }

    pub fn with_orders(mut self, time_order: usize, surface_order: usize) -> Self {
        self.time_order = time_order;
        self.surface_order = surface_order;
        self
    }

    fn validate(&self) -> Result<()> {
        let (ta, tb) = self.window;
        check_model(self.model, "flux integral")?;
        if self.time_order < 2 || self.surface_order < 2 {
            return Err(Error::InvalidParameter(format!(
                "quadrature orders must be >= 2, got time {} surface {}",
                self.time_order, self.surface_order
            )));
        }
        check_window(self.model, ta, tb)?;
        if !(self.time_tolerance > 0.0) {
            return Err(Error::InvalidParameter("time tolerance must be positive".into()));
        }
        Ok(())
    }

    fn quadrature(&self) -> Result<SurfaceQuadrature> {
        match &self.surface {
            FluxSurface::Boundary(domain) => domain.boundary_quadrature(self.surface_order),
            FluxSurface::Cap { cone, radius } => cone.cap_quadrature(*radius, self.surface_order),
        }
    }
}

/// Value of a finite-window flux integral, together with the mass that can
/// still cross after the window closes (when requested).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluxIntegral {
    pub value: f64,
    pub tail_bound: Option<f64>,
}

fn check_model(model: &DiffusionModel, operation: &'static str) -> Result<()> {
    if !model.is_closed_form() {
        return Err(Error::UnsupportedModel {
            kind: model.kind().name(),
            operation,
        });
    }
    if model.dimension() != 3 {
        return Err(Error::DimensionMismatch {
            expected: 3,
            got: model.dimension(),
        });
    }
    Ok(())
}

fn check_window(model: &DiffusionModel, ta: f64, tb: f64) -> Result<()> {
    if !(ta >= model.start_time()) {
        return Err(Error::TimeDomain {
            t: ta,
            reason: "window starts before the model start time",
        });
    }
    if !(tb >= ta && tb.is_finite()) {
        return Err(Error::InvalidParameter(format!("time window [{ta}, {tb}] is not ordered")));
    }
    // law_at performs the remaining (ray t > 0) check
    model.law_at(ta)?;
    Ok(())
}

/// `Σ_k w_k ρ_t(x_k) v_t(x_k)·n_k` (or its absolute value per node) at one time.
fn surface_sum(model: &DiffusionModel, law: &GaussianLaw, t: f64, q: &SurfaceQuadrature, absolute: bool) -> f64 {
    let m = law.mean();
    let s = law.variance();
    let log_norm = -1.5 * (2.0 * PI * s).ln();
    let mut acc = NeumaierSum::default();
    let mut b = [0.0; 3];
    for ((x, w), n) in q.nodes.iter().zip(&q.weights).zip(&q.normals) {
        let d = [x[0] - m[0], x[1] - m[1], x[2] - m[2]];
        let log_rho = log_norm - (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) / (2.0 * s);
        if log_rho < LOG_FLUSH {
            continue;
        }
        model.drift_into(t, x, &mut b);
        let mut vn = 0.0;
        for i in 0..3 {
            vn += (b[i] + d[i] / (2.0 * s)) * n[i];
        }
        let term = log_rho.exp() * vn;
        acc.add(w * if absolute { term.abs() } else { term });
    }
    acc.sum()
}

/// Adaptive time integral of `g(t, law_t)` over the window; geometric seed
/// panels when the window spans more than a factor of four.
fn time_integral<F>(model: &DiffusionModel, window: (f64, f64), order: usize, tol: f64, mut g: F) -> Result<f64>
where
    F: FnMut(f64, &GaussianLaw) -> f64,
{
    let (ta, tb) = window;
    if tb == ta {
        return Ok(0.0);
    }
    let geometric = ta > 0.0 && tb / ta > 4.0;
    let panels = if geometric { ((tb / ta).log2().ceil() as usize).max(8) } else { 8 };
    let integrator = AdaptiveIntegrator::new(order, tol);
    let mut failure = None;
    let value = integrator.integrate(ta, tb, panels, geometric, |t| match model.law_at(t) {
        Ok(law) if !law.is_deterministic() => g(t, &law),
        Ok(_) => 0.0,
        Err(e) => {
            failure.get_or_insert(e);
            0.0
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(value),
    }
}

fn flux_integral(spec: &FluxIntegralSpec<'_>) -> Result<FluxIntegral> {
    spec.validate()?;
    let q = spec.quadrature()?;
    let model = spec.model;
    let value = time_integral(model, spec.window, spec.time_order, spec.time_tolerance, |t, law| {
        surface_sum(model, law, t, &q, false)
    })?;
    let tail_bound = match spec.tail_bound_mode {
        TailBoundMode::None => None,
        TailBoundMode::Report => {
            let law = model.law_at(spec.window.1)?;
            Some(match &spec.surface {
                FluxSurface::Boundary(domain) => region_probability(&law, domain)?,
                FluxSurface::Cap { radius, .. } => gaussian_ball_probability(&law, &[0.0; 3], *radius)?,
            })
        }
    };
    Ok(FluxIntegral { value, tail_bound })
}

/// `∫_{t_a}^{t_b} ∫_{∂D} ρ v·n dσ dt` with the outward normal of `D`. By the
/// continuity equation this equals `P(X_{t_a} ∈ D) − P(X_{t_b} ∈ D)`; the
/// reported tail bound is `P(X_{t_b} ∈ D)`.
pub fn boundary_flux_integral(spec: &FluxIntegralSpec<'_>) -> Result<FluxIntegral> {
    if !matches!(spec.surface, FluxSurface::Boundary(_)) {
        return Err(Error::InvalidParameter("boundary flux needs a domain boundary surface".into()));
    }
    flux_integral(spec)
}

/// `∫_{t_a}^{t_b} ∫_{C ∩ S_R} ρ v·n dσ dt` with radial normals; the tail bound
/// is `P(|X_{t_b}| < R)`.
pub fn cone_flux_integral(spec: &FluxIntegralSpec<'_>) -> Result<FluxIntegral> {
    if !matches!(spec.surface, FluxSurface::Cap { .. }) {
        return Err(Error::InvalidParameter("cone flux needs a cap surface".into()));
    }
    flux_integral(spec)
}

/// Largest `|ρ v·n|` over the surface nodes at `n_times` Gauss–Legendre times
/// of the window (both endpoints included).
pub fn integrand_sup(spec: &FluxIntegralSpec<'_>, n_times: usize) -> Result<f64> {
    spec.validate()?;
    let q = spec.quadrature()?;
    let (ta, tb) = spec.window;
    let mut times = vec![ta, tb];
    if tb > ta && n_times > 0 {
        times.extend(crate::quadrature::GaussLegendre::new(n_times).on_interval(ta, tb).map(|(t, _)| t));
    }
    let mut sup = 0.0f64;
    let mut b = [0.0; 3];
    for t in times {
        let law = spec.model.law_at(t)?;
        let m = law.mean();
        let s = law.variance();
        for (x, n) in q.nodes.iter().zip(&q.normals) {
            let rho = law.density(x).unwrap_or(0.0);
            spec.model.drift_into(t, x, &mut b);
            let vn: f64 = (0..3).map(|i| (b[i] + (x[i] - m[i]) / (2.0 * s)) * n[i]).sum();
            sup = sup.max((rho * vn).abs());
        }
    }
    Ok(sup)
}

/// Lateral wall integral `∫∫ |ρ v·n| dσ dt` over `∂C ∩ {r_min < |x| < r_max}`.
#[derive(Debug, Clone)]
pub struct LateralFluxSpec<'a> {
    pub model: &'a DiffusionModel,
    pub cone: Cone,
    pub r_min: f64,
    /// Defaults to `max_t |m(t)| + 12 √s(t)` over the window.
    pub r_max: Option<f64>,
    pub window: (f64, f64),
    pub time_order: usize,
    pub radial_order: usize,
    pub radial_panels: usize,
    pub azimuths: usize,
    pub time_tolerance: f64,
}

impl<'a> LateralFluxSpec<'a> {
    pub fn new(model: &'a DiffusionModel, cone: Cone, r_min: f64, window: (f64, f64)) -> Self {
        Self {
            model,
            cone,
            r_min,
            r_max: None,
            window,
            time_order: 10,
            radial_order: 16,
            radial_panels: 64,
            azimuths: 96,
            time_tolerance: 1e-10,
        }
    }
}

pub fn lateral_flux_integral(spec: &LateralFluxSpec<'_>) -> Result<f64> {
    check_model(spec.model, "lateral flux integral")?;
    check_window(spec.model, spec.window.0, spec.window.1)?;
    let r_max = match spec.r_max {
        Some(r) => r,
        None => {
            let (ta, tb) = spec.window;
            let mut r = 0.0f64;
            for k in 0..=64 {
                let t = ta + (tb - ta) * k as f64 / 64.0;
                let law = spec.model.law_at(t)?;
                r = r.max(norm(law.mean()) + 12.0 * law.variance().sqrt());
            }
            r
        }
    };
    if !(r_max > spec.r_min) {
        return Ok(0.0);
    }
    let q = spec
        .cone
        .lateral_quadrature(spec.r_min, r_max, spec.radial_order, spec.radial_panels, spec.azimuths)?;
    time_integral(spec.model, spec.window, spec.time_order, spec.time_tolerance, |t, law| {
        surface_sum(spec.model, law, t, &q, true)
    })
}

/// `P(|Y − center| < r)` for `Y ~ law`.
pub fn gaussian_ball_probability(law: &GaussianLaw, center: &[f64], radius: f64) -> Result<f64> {
    let d = law.dimension();
    if center.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: center.len(),
        });
    }
    if !(radius >= 0.0) {
        return Err(Error::InvalidParameter(format!("ball radius must be nonnegative, got {radius}")));
    }
    let offset: Vec<f64> = law.mean().iter().zip(center).map(|(m, c)| m - c).collect();
    let a = norm(&offset);
    if law.is_deterministic() {
        return Ok(if a < radius { 1.0 } else { 0.0 });
    }
    let sigma = law.variance().sqrt();
    let p = match d {
        1 => normal_cdf((radius - a) / sigma) - normal_cdf((-radius - a) / sigma),
        3 if a > 1e-3 * sigma => {
            let (u, v) = ((radius - a) / sigma, (radius + a) / sigma);
            let ratio = sigma / (a * (2.0 * PI).sqrt());
            normal_cdf(u) - normal_cdf(-v) + ratio * ((-0.5 * v * v).exp() - (-0.5 * u * u).exp())
        }
        _ => noncentral_chi2_cdf(d as f64, (a / sigma).powi(2), (radius / sigma).powi(2)),
    };
    Ok(p.clamp(0.0, 1.0))
}

/// Poisson mixture of central chi-square CDFs.
fn noncentral_chi2_cdf(k: f64, lambda: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let half = 0.5 * lambda;
    if half == 0.0 {
        return gamma_lr(0.5 * k, 0.5 * x);
    }
    let mode = half.floor() as u64;
    let mut acc = NeumaierSum::default();
    let weight = |j: u64| (-half + j as f64 * half.ln() - ln_gamma(j as f64 + 1.0)).exp();
    // sum outward from the Poisson mode until the weights are negligible
    let mut j = mode;
    loop {
        let w = weight(j);
        acc.add(w * gamma_lr(0.5 * k + j as f64, 0.5 * x));
        if w < 1e-17 && j > mode {
            break;
        }
        j += 1;
    }
    let mut j = mode;
    while j > 0 {
        j -= 1;
        let w = weight(j);
        acc.add(w * gamma_lr(0.5 * k + j as f64, 0.5 * x));
        if w < 1e-17 {
            break;
        }
    }
    acc.sum()
}

/// `P(Y ∈ D)` for Ball and Box domains.
pub fn region_probability(law: &GaussianLaw, domain: &Domain) -> Result<f64> {
    if law.dimension() != domain.dimension() {
        return Err(Error::DimensionMismatch {
            expected: domain.dimension(),
            got: law.dimension(),
        });
    }
    match domain {
        Domain::Ball { center, radius } => gaussian_ball_probability(law, center, *radius),
        Domain::Box { lo, hi } => {
            if law.is_deterministic() {
                return Ok(if domain.contains(law.mean()) { 1.0 } else { 0.0 });
            }
            let sigma = law.variance().sqrt();
            Ok(law
                .mean()
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(m, (l, h))| normal_cdf((h - m) / sigma) - normal_cdf((l - m) / sigma))
                .product())
        }
        Domain::Implicit(_) => Err(Error::UnsupportedDomain {
            kind: "implicit",
            operation: "region_probability",
        }),
    }
}

/// Cone probability; `std_error` is set when the value comes from
/// randomized quasi-Monte Carlo.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConeProbability {
    pub value: f64,
    pub std_error: Option<f64>,
}

impl ConeProbability {
    fn exact(value: f64) -> Self {
        Self { value, std_error: None }
    }
}

/// `P(Y ∈ C)` for `Y ~ law`.
pub fn gaussian_cone_probability(law: &GaussianLaw, cone: &Cone) -> Result<ConeProbability> {
    if law.dimension() != cone.dimension() {
        return Err(Error::DimensionMismatch {
            expected: cone.dimension(),
            got: law.dimension(),
        });
    }
    if law.is_deterministic() {
        return Ok(ConeProbability::exact(if cone.contains(law.mean()) { 1.0 } else { 0.0 }));
    }
    let sigma = law.variance().sqrt();
    match cone {
        Cone::HalfSpace { normal } => Ok(ConeProbability::exact(normal_cdf(dot(law.mean(), normal) / sigma))),
        Cone::Cap { half_angle, .. } if *half_angle >= PI => Ok(ConeProbability::exact(1.0)),
        Cone::Cap { axis, half_angle } if axis.len() == 3 => {
            Ok(ConeProbability::exact(cap_probability_3d(law, axis, *half_angle)))
        }
        _ => Ok(qmc_cone_probability(law, cone)),
    }
}

/// Cap probability in three dimensions by a one-dimensional integral over the
/// angle `β` from the mean direction. The direction `Y/|Y|` has surface
/// density
/// `f(c) = (2π)^{-3/2} e^{-μ²(1-c²)/2} [a e^{-a²/2} + (1+a²) √(2π) Φ(a)]`,
/// `μ = |m|/σ`, `a = μ c`, and the cap occupies an azimuth arc of length
/// `L(β)` around the mean direction.
fn cap_probability_3d(law: &GaussianLaw, axis: &[f64], alpha: f64) -> f64 {
    let m = law.mean();
    let mu = norm(m) / law.variance().sqrt();
    let gamma = if norm(m) == 0.0 {
        0.0
    } else {
        (dot(m, axis) / norm(m)).clamp(-1.0, 1.0).acos()
    };
    let density = |c: f64| {
        let a = mu * c;
        let radial = a * (-0.5 * a * a).exp() + (1.0 + a * a) * (2.0 * PI).sqrt() * normal_cdf(a);
        (2.0 * PI).powf(-1.5) * (-0.5 * mu * mu * (1.0 - c * c)).exp() * radial
    };
    let (sg, cg) = gamma.sin_cos();
    let ca = alpha.cos();
    let arc = |beta: f64| {
        let (sb, cb) = beta.sin_cos();
        let denom = sb * sg;
        if denom.abs() < 1e-300 {
            return if cb * cg > ca { 2.0 * PI } else { 0.0 };
        }
        2.0 * ((ca - cb * cg) / denom).clamp(-1.0, 1.0).acos()
    };
    let mut cuts = vec![0.0, (gamma - alpha).abs(), (gamma + alpha).min(PI), PI];
    cuts.sort_by(f64::total_cmp);
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
    let integrator = AdaptiveIntegrator::new(20, 1e-14);
    let mut acc = NeumaierSum::default();
    for pair in cuts.windows(2) {
        acc.add(integrator.integrate(pair[0], pair[1], 8, false, |beta| {
            density(beta.cos()) * beta.sin() * arc(beta)
        }));
    }
    acc.sum().clamp(0.0, 1.0)
}

const QMC_POINTS: usize = 1 << 14;
const QMC_REPLICATES: usize = 16;

/// Randomly shifted Halton points mapped through the normal quantile;
/// replicate means give the standard error. Fixed seed, so deterministic.
fn qmc_cone_probability(law: &GaussianLaw, cone: &Cone) -> ConeProbability {
    let d = law.dimension();
    let primes = first_primes(d);
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let sigma = law.variance().sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_c0de);
    let mut y = vec![0.0; d];
    let mut estimates = Vec::with_capacity(QMC_REPLICATES);
    for _ in 0..QMC_REPLICATES {
        let shift: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
        let mut hits = 0u64;
        for i in 1..=QMC_POINTS {
            for k in 0..d {
                let u = (radical_inverse(i as u64, primes[k]) + shift[k]).fract();
                let u = u.clamp(1e-16, 1.0 - 1e-16);
                y[k] = law.mean()[k] + sigma * normal.inverse_cdf(u);
            }
            hits += cone.contains(&y) as u64;
        }
        estimates.push(hits as f64 / QMC_POINTS as f64);
    }
    let r = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / r;
    let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (r - 1.0);
    ConeProbability {
        value: mean,
        std_error: Some((var / r).sqrt()),
    }
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut out = 0.0;
    while i > 0 {
        out += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    out
}

fn first_primes(n: usize) -> Vec<u64> {
    let mut primes = Vec::with_capacity(n);
    let mut c = 2u64;
    while primes.len() < n {
        if primes.iter().take_while(|p| *p * *p <= c).all(|p| c % p != 0) {
            primes.push(c);
        }
        c += 1;
    }
    primes
}

/// Central-difference residuals of the three identities at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residuals {
    /// `∂ₜρ + ∇·(ρ v)`.
    pub continuity: f64,
    /// `max_i |b_i − b*_i − ∂ᵢρ/ρ|` with the gradient by differences.
    pub duality: f64,
    /// `∂ₜρ + ∇·(ρ b) − ½Δρ`.
    pub fokker_planck: f64,
}

/// Evaluates all three residuals with step `h` in time and space. Needs
/// `t − h` inside the model's time domain.
pub fn residuals(model: &DiffusionModel, t: f64, x: &[f64], h: f64) -> Result<Residuals> {
    if !model.is_closed_form() {
        return Err(Error::UnsupportedModel {
            kind: model.kind().name(),
            operation: "residuals",
        });
    }
    if x.len() != model.dimension() {
        return Err(Error::DimensionMismatch {
            expected: model.dimension(),
            got: x.len(),
        });
    }
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!("step must be positive, got {h}")));
    }
    let d = x.len();
    let now = model.law_at(t)?;
    let before = model.law_at(t - h)?;
    let after = model.law_at(t + h)?;
    let rho = |law: &GaussianLaw, y: &[f64]| law.density(y).unwrap_or(0.0);
    let rho0 = rho(&now, x);
    if !(rho0 > DENSITY_GUARD) {
        return Err(Error::Underflow { density: rho0 });
    }
    let drho_dt = (rho(&after, x) - rho(&before, x)) / (2.0 * h);

    let m = now.mean();
    let s = now.variance();
    let mut b = vec![0.0; d];
    let mut y = x.to_vec();
    let mut div_current = 0.0;
    let mut div_drift = 0.0;
    let mut laplacian = 0.0;
    let mut duality = 0.0f64;
    let b_here = model.eval_drift(t, x)?;
    let dual_here = model.dual_drift(t, x)?;
    for i in 0..d {
        let mut flux_current = [0.0; 2];
        let mut flux_drift = [0.0; 2];
        let mut rho_side = [0.0; 2];
        for (k, sign) in [-1.0, 1.0].into_iter().enumerate() {
            y[i] = x[i] + sign * h;
            let r = rho(&now, &y);
            model.drift_into(t, &y, &mut b);
            let v = b[i] + (y[i] - m[i]) / (2.0 * s);
            flux_current[k] = r * v;
            flux_drift[k] = r * b[i];
            rho_side[k] = r;
        }
        y[i] = x[i];
        div_current += (flux_current[1] - flux_current[0]) / (2.0 * h);
        div_drift += (flux_drift[1] - flux_drift[0]) / (2.0 * h);
        laplacian += (rho_side[1] - 2.0 * rho0 + rho_side[0]) / (h * h);
        let grad_log = (rho_side[1] - rho_side[0]) / (2.0 * h) / rho0;
        duality = duality.max((b_here[i] - dual_here[i] - grad_log).abs());
    }
    Ok(Residuals {
        continuity: drho_dt + div_current,
        duality,
        fokker_planck: drho_dt + div_drift - 0.5 * laplacian,
    })
}

pub fn continuity_residual(model: &DiffusionModel, t: f64, x: &[f64], h: f64) -> Result<f64> {
    residuals(model, t, x, h).map(|r| r.continuity)
}

pub fn duality_residual(model: &DiffusionModel, t: f64, x: &[f64], h: f64) -> Result<f64> {
    residuals(model, t, x, h).map(|r| r.duality)
}

pub fn fokker_planck_residual(model: &DiffusionModel, t: f64, x: &[f64], h: f64) -> Result<f64> {
    residuals(model, t, x, h).map(|r| r.fokker_planck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn law3(mean: [f64; 3], var: f64) -> GaussianLaw {
        GaussianLaw::new(mean.to_vec(), var).unwrap()
    }

    /// `P(|Y − c| < r)` by integrating the radial density
    /// `(r/a) (2πs)^{-1/2} e^{-(r²+a²)/2s} 2 sinh(ra/s)`.
    fn ball_oracle(mean: [f64; 3], var: f64, radius: f64) -> f64 {
        let a = norm(&mean);
        let integ = AdaptiveIntegrator::new(20, 1e-14);
        integ.integrate(0.0, radius, 16, false, |r| {
            if a == 0.0 {
                4.0 * PI * r * r * (2.0 * PI * var).powf(-1.5) * (-r * r / (2.0 * var)).exp()
            } else {
                let e = (-(r * r + a * a) / (2.0 * var)).exp();
                r / a * e * 2.0 * (r * a / var).sinh() / (2.0 * PI * var).sqrt()
            }
        })
    }

    fn constant_model() -> DiffusionModel {
        DiffusionModel::constant_drift(vec![1.0, 0.0, 0.0], 0.0, law3([0.0; 3], 0.25)).unwrap()
    }

    fn ray_model() -> DiffusionModel {
        DiffusionModel::ray(1.0, law3([1.0, 0.0, 0.0], 0.1)).unwrap()
    }

    #[test]
    fn ball_probability_matches_radial_oracle() {
        for (mean, var, r) in [
            ([0.0, 0.0, 0.0], 0.25, 1.0),
            ([4.0, 0.0, 0.0], 4.25, 1.0),
            ([0.3, -0.2, 0.1], 1.0, 2.0),
            ([1e-6, 0.0, 0.0], 1.0, 1.5),
            ([30.0, 0.0, 0.0], 900.0, 20.0),
        ] {
            let got = gaussian_ball_probability(&law3(mean, var), &[0.0; 3], r).unwrap();
            let want = ball_oracle(mean, var, r);
            assert!((got - want).abs() < 1e-10, "{mean:?} {var} {r}: {got} vs {want}");
        }
    }

    #[test]
    fn ball_probability_matches_monte_carlo() {
        let law = law3([0.5, 0.5, 0.0], 0.5);
        let p = gaussian_ball_probability(&law, &[0.2, 0.0, 0.0], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 400_000;
        let mut hits = 0;
        let mut y = [0.0; 3];
        for _ in 0..n {
            law.sample_into(&mut rng, &mut y);
            hits += ((y[0] - 0.2).powi(2) + y[1] * y[1] + y[2] * y[2] < 1.0) as u32;
        }
        let mc = hits as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((mc - p).abs() < 4.0 * se, "{mc} vs {p}");
    }

    #[test]
    fn ball_probability_other_dimensions() {
        let law1 = GaussianLaw::new(vec![0.5], 2.0).unwrap();
        let p1 = gaussian_ball_probability(&law1, &[0.0], 1.0).unwrap();
        let want1 = normal_cdf(0.5 / 2f64.sqrt()) - normal_cdf(-1.5 / 2f64.sqrt());
        assert!((p1 - want1).abs() < 1e-14);
        // two dimensions, centered: 1 − e^{-r²/2s}
        let law2 = GaussianLaw::new(vec![0.0, 0.0], 0.7).unwrap();
        let p2 = gaussian_ball_probability(&law2, &[0.0, 0.0], 1.3).unwrap();
        assert!((p2 - (1.0 - (-1.69f64 / 1.4).exp())).abs() < 1e-12);
        // off-center series agrees with the three dimensional closed form
        let law3d = law3([1.0, 0.5, 0.0], 0.8);
        let closed = gaussian_ball_probability(&law3d, &[0.0; 3], 1.2).unwrap();
        let series = noncentral_chi2_cdf(3.0, 1.25 / 0.8, 1.44 / 0.8);
        assert!((closed - series).abs() < 1e-12);
    }

    #[test]
    fn box_probability_is_product() {
        let law = law3([0.0; 3], 1.0);
        let b = Domain::cuboid(vec![-1.0; 3], vec![1.0; 3]).unwrap();
        let p = region_probability(&law, &b).unwrap();
        assert!((p - (2.0 * normal_cdf(1.0) - 1.0).powi(3)).abs() < 1e-14);
    }

    #[test]
    fn boundary_flux_telescopes() {
        let model = constant_model();
        let spec = FluxIntegralSpec::new(&model, FluxSurface::Boundary(Domain::unit_ball(3)), (0.0, 4.0));
        let got = boundary_flux_integral(&spec).unwrap();
        let want = ball_oracle([0.0; 3], 0.25, 1.0) - ball_oracle([4.0, 0.0, 0.0], 4.25, 1.0);
        assert!((got.value - want).abs() < 1e-6, "{} vs {want}", got.value);
        let tail = got.tail_bound.unwrap();
        assert!((tail - ball_oracle([4.0, 0.0, 0.0], 4.25, 1.0)).abs() < 1e-10);
    }

    #[test]
    fn box_boundary_flux_telescopes() {
        let model = DiffusionModel::stationary_symmetric(0.5, 0.0, law3([0.2, 0.0, -0.1], 0.1)).unwrap();
        let domain = Domain::cuboid(vec![-1.0, -0.5, -1.0], vec![1.0, 1.5, 0.5]).unwrap();
        let spec = FluxIntegralSpec::new(&model, FluxSurface::Boundary(domain.clone()), (0.5, 3.0));
        let got = boundary_flux_integral(&spec).unwrap().value;
        let p = |t: f64| region_probability(&model.law_at(t).unwrap(), &domain).unwrap();
        assert!((got - (p(0.5) - p(3.0))).abs() < 1e-6);
    }

    #[test]
    fn window_additivity() {
        let model = constant_model();
        let surface = FluxSurface::Boundary(Domain::unit_ball(3));
        let f = |a, b| {
            boundary_flux_integral(&FluxIntegralSpec::new(&model, surface.clone(), (a, b)))
                .unwrap()
                .value
        };
        assert!((f(0.0, 1.3) + f(1.3, 4.0) - f(0.0, 4.0)).abs() < 1e-10);
        assert_eq!(f(2.0, 2.0), 0.0);
    }

    #[test]
    fn doubling_orders_changes_little() {
        let model = ray_model();
        let cone = Cone::cap(vec![1.0, 0.0, 0.0], PI / 3.0).unwrap();
        let surface = FluxSurface::Cap { cone, radius: 5.0 };
        let base = FluxIntegralSpec::new(&model, surface, (1.0, 20.0)).with_orders(12, 32);
        let a = cone_flux_integral(&base).unwrap().value;
        let b = cone_flux_integral(&base.clone().with_orders(24, 64)).unwrap().value;
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");

        let model = constant_model();
        let base = FluxIntegralSpec::new(&model, FluxSurface::Boundary(Domain::unit_ball(3)), (0.0, 4.0))
            .with_orders(12, 32);
        let a = boundary_flux_integral(&base).unwrap().value;
        let b = boundary_flux_integral(&base.clone().with_orders(24, 64)).unwrap().value;
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }

    #[test]
    fn symmetric_model_has_no_flux() {
        let model = DiffusionModel::stationary_invariant(0.7, 3, 0.0).unwrap();
        let spec = FluxIntegralSpec::new(&model, FluxSurface::Boundary(Domain::unit_ball(3)), (0.0, 5.0));
        assert!(boundary_flux_integral(&spec).unwrap().value.abs() < 1e-12);
        assert!(integrand_sup(&spec, 8).unwrap() <= 1e-12);
        let cone = Cone::cap(vec![0.0, 1.0, 0.0], 1.0).unwrap();
        let spec = FluxIntegralSpec::new(&model, FluxSurface::Cap { cone, radius: 2.0 }, (0.0, 5.0));
        assert!(cone_flux_integral(&spec).unwrap().value.abs() < 1e-12);
    }

    #[test]
    fn full_sphere_cone_flux_telescopes() {
        let model = ray_model();
        let cone = Cone::cap(vec![1.0, 0.0, 0.0], PI).unwrap();
        let radius = 4.0;
        let spec = FluxIntegralSpec::new(&model, FluxSurface::Cap { cone, radius }, (1.0, 30.0));
        let got = cone_flux_integral(&spec).unwrap();
        let outside = |t: f64| {
            let law = model.law_at(t).unwrap();
            1.0 - ball_oracle([law.mean()[0], 0.0, 0.0], law.variance(), radius)
        };
        let want = outside(30.0) - outside(1.0);
        assert!((got.value - want).abs() < 1e-6, "{} vs {want}", got.value);
        assert!((got.tail_bound.unwrap() - (1.0 - outside(30.0))).abs() < 1e-10);
    }

    #[test]
    fn unsupported_inputs() {
        let custom = DiffusionModel::custom(
            crate::model::CustomDrift::new("zero", |_, _, out| out.fill(0.0)),
            0.0,
            law3([0.0; 3], 1.0),
        )
        .unwrap();
        let spec = FluxIntegralSpec::new(&custom, FluxSurface::Boundary(Domain::unit_ball(3)), (0.0, 1.0));
        assert!(matches!(boundary_flux_integral(&spec), Err(Error::UnsupportedModel { .. })));
        let model = constant_model();
        let spec = FluxIntegralSpec::new(&model, FluxSurface::Boundary(Domain::unit_ball(3)), (2.0, 1.0));
        assert!(boundary_flux_integral(&spec).is_err());
        let cone = Cone::cap(vec![1.0, 0.0, 0.0], 1.0).unwrap();
        let spec = FluxIntegralSpec::new(&model, FluxSurface::Cap { cone, radius: 1.0 }, (0.0, 1.0));
        assert!(boundary_flux_integral(&spec).is_err());
    }

    fn mc_cone(law: &GaussianLaw, cone: &Cone, n: usize, seed: u64) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut y = vec![0.0; law.dimension()];
        let mut hits = 0u64;
        for _ in 0..n {
            law.sample_into(&mut rng, &mut y);
            hits += cone.contains(&y) as u64;
        }
        let p = hits as f64 / n as f64;
        (p, (p * (1.0 - p) / n as f64).sqrt())
    }

    #[test]
    fn cone_probability_trivial_cases() {
        let law = GaussianLaw::standard(3);
        for n in [[1.0, 0.0, 0.0], [0.3, -0.4, 0.2]] {
            let h = Cone::half_space(n.to_vec()).unwrap();
            assert!((gaussian_cone_probability(&law, &h).unwrap().value - 0.5).abs() < 1e-15);
        }
        let full = Cone::cap(vec![0.0, 0.0, 1.0], PI).unwrap();
        assert_eq!(gaussian_cone_probability(&law, &full).unwrap().value, 1.0);
        // centered law: solid-angle fraction
        let cap = Cone::cap(vec![0.0, 0.0, 1.0], 1.1).unwrap();
        let p = gaussian_cone_probability(&law, &cap).unwrap().value;
        assert!((p - 0.5 * (1.0 - 1.1f64.cos())).abs() < 1e-12);
        let point = GaussianLaw::deterministic(vec![2.0, 0.1, 0.0]).unwrap();
        assert_eq!(gaussian_cone_probability(&point, &cap).unwrap().value, 0.0);
    }

    #[test]
    fn cap_probability_matches_monte_carlo() {
        let cases = [
            (law3([1.0, 0.0, 0.0], 1.1), vec![1.0, 0.0, 0.0], PI / 3.0),
            (law3([2.0, 1.0, -0.5], 0.7), vec![1.0, 0.0, 0.0], 0.6),
            (law3([0.0, 0.0, -1.5], 1.0), vec![0.0, 0.3, 1.0], 2.0),
            (law3([5.0, 0.0, 0.0], 1.0), vec![0.0, 1.0, 0.0], PI / 4.0),
        ];
        for (k, (law, axis, alpha)) in cases.into_iter().enumerate() {
            let cone = Cone::cap(axis, alpha).unwrap();
            let p = gaussian_cone_probability(&law, &cone).unwrap();
            assert!(p.std_error.is_none());
            let (mc, se) = mc_cone(&law, &cone, 1_000_000, 100 + k as u64);
            assert!((p.value - mc).abs() <= 3.0 * se.max(1e-7), "case {k}: {} vs {mc} ± {se}", p.value);
        }
    }

    #[test]
    fn half_space_and_poly_probabilities() {
        let law = law3([0.4, -0.2, 0.1], 0.5);
        let h = Cone::half_space(vec![1.0, 1.0, 0.0]).unwrap();
        let (mc, se) = mc_cone(&law, &h, 400_000, 9);
        let p = gaussian_cone_probability(&law, &h).unwrap().value;
        assert!((p - mc).abs() < 4.0 * se);

        // orthant: product of independent coordinate probabilities
        let orthant = Cone::poly(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let p = gaussian_cone_probability(&law, &orthant).unwrap();
        let want: f64 = law.mean().iter().map(|m| normal_cdf(m / 0.5f64.sqrt())).product();
        let se = p.std_error.unwrap();
        assert!(se < 1e-3);
        assert!((p.value - want).abs() < 4.0 * se + 1e-4, "{} vs {want}", p.value);
    }

    #[test]
    fn cap_probability_in_two_dimensions() {
        let law = GaussianLaw::new(vec![1.0, 0.5], 0.8).unwrap();
        let cone = Cone::cap(vec![1.0, 0.0], 0.7).unwrap();
        let p = gaussian_cone_probability(&law, &cone).unwrap();
        let (mc, se) = mc_cone(&law, &cone, 1_000_000, 5);
        assert!((p.value - mc).abs() < 4.0 * se.hypot(p.std_error.unwrap()));
    }

    #[test]
    fn limiting_cone_flux_near_cone_probability() {
        let model = ray_model();
        let cone = Cone::cap(vec![1.0, 0.0, 0.0], PI / 3.0).unwrap();
        let crate::model::LimitingVelocity::Gaussian(limit) = model.limiting_velocity_law() else {
            panic!("ray model has a gaussian limit");
        };
        let oracle = gaussian_cone_probability(&limit, &cone).unwrap().value;
        let spec = FluxIntegralSpec::new(&model, FluxSurface::Cap { cone, radius: 10.0 }, (1.0, 200.0));
        let v = cone_flux_integral(&spec).unwrap().value;
        assert!((v - oracle).abs() < 0.05, "{v} vs {oracle}");
    }

    #[test]
    fn lateral_integral_decreases_with_radius() {
        let model = ray_model();
        let cone = Cone::cap(vec![1.0, 0.0, 0.0], PI / 3.0).unwrap();
        let at = |r| lateral_flux_integral(&LateralFluxSpec::new(&model, cone.clone(), r, (1.0, 20.0))).unwrap();
        let (a, b) = (at(10.0), at(20.0));
        assert!(a > 0.0 && b < a, "{a} {b}");
    }

    fn random_points(model: &DiffusionModel, t_lo: f64, t_hi: f64, n: usize, seed: u64) -> Vec<(f64, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let t = rng.random_range(t_lo..t_hi);
                let law = model.law_at(t).unwrap();
                let sd = law.variance().sqrt();
                let x = law
                    .mean()
                    .iter()
                    .map(|m| {
                        let z: f64 = rng.sample(StandardNormal);
                        m + sd * z.clamp(-2.0, 2.0)
                    })
                    .collect();
                (t, x)
            })
            .collect()
    }

    #[test]
    fn residuals_decay_at_second_order() {
        let models = [
            (constant_model(), 0.05, 3.0),
            (ray_model(), 1.05, 5.0),
            (
                DiffusionModel::stationary_symmetric(0.8, 0.0, law3([1.0, -0.5, 0.2], 0.2)).unwrap(),
                0.05,
                2.0,
            ),
        ];
        for (model, lo, hi) in &models {
            for (t, x) in random_points(model, *lo, *hi, 100, 21) {
                let coarse = residuals(model, t, &x, 4e-3).unwrap();
                let fine = residuals(model, t, &x, 2e-3).unwrap();
                let floor = 1e-10 * model.law_at(t).unwrap().density(model.law_at(t).unwrap().mean()).unwrap();
                for (a, b) in [
                    (coarse.continuity, fine.continuity),
                    (coarse.duality, fine.duality),
                    (coarse.fokker_planck, fine.fokker_planck),
                ] {
                    let ok = (a.abs() < floor && b.abs() < floor) || a.abs() >= 3.5 * b.abs();
                    assert!(ok, "{} t={t} x={x:?}: {a:e} -> {b:e}", model.kind().name());
                }
            }
        }
    }

    #[test]
    fn stationary_continuity_and_duality_at_mean_vanish() {
        let model = DiffusionModel::stationary_invariant(1.3, 3, 0.0).unwrap();
        let r = residuals(&model, 1.0, &[0.3, -0.2, 0.4], 1e-3).unwrap();
        assert!(r.continuity.abs() < 1e-9);
        let model = constant_model();
        let m = model.law_at(1.5).unwrap().mean().to_vec();
        assert!(duality_residual(&model, 1.5, &m, 1e-3).unwrap() < 1e-12);
    }

    #[test]
    fn residual_guards() {
        let model = constant_model();
        assert!(matches!(
            residuals(&model, 1.0, &[80.0, 0.0, 0.0], 1e-3),
            Err(Error::Underflow { .. })
        ));
        assert!(residuals(&model, 0.0, &[0.0; 3], 1e-3).is_err());
        assert!(continuity_residual(&model, 1.0, &[0.0; 2], 1e-3).is_err());
        assert!(fokker_planck_residual(&model, 1.0, &[0.0; 3], 1e-3).unwrap().abs() < 1e-4);
    }
}

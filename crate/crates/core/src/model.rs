//! Diffusion models `dX = b(t, X) dt + dW` with unit noise, and the closed-form
//! Gaussian solutions used as analytic oracles.
//!
//! Every closed-form kind keeps the law of `X_t` an isotropic Gaussian
//! `N(m(t), s(t) I)`, so the osmotic velocity is `u = ½∇log ρ = -(x - m)/(2s)`,
//! the current velocity is `v = b - u` and the dual drift is `b* = b - ∇log ρ`.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Isotropic Gaussian law: mean vector plus a per-coordinate variance.
///
/// A zero variance is only representable through [`GaussianLaw::deterministic`].
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLaw {
    mean: Vec<f64>,
    variance: f64,
    deterministic: bool,
}

impl GaussianLaw {
    pub fn new(mean: Vec<f64>, variance: f64) -> Result<Self> {
        check_mean(&mean)?;
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "gaussian variance must be positive and finite, got {variance}"
            )));
        }
        Ok(Self {
            mean,
            variance,
            deterministic: false,
        })
    }

    /// Point mass at `mean`.
    pub fn deterministic(mean: Vec<f64>) -> Result<Self> {
        check_mean(&mean)?;
        Ok(Self {
            mean,
            variance: 0.0,
            deterministic: true,
        })
    }

    pub fn standard(dimension: usize) -> Self {
        Self {
            mean: vec![0.0; dimension],
            variance: 1.0,
            deterministic: false,
        }
    }

    pub fn dimension(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn is_deterministic(&self) -> bool {
        self.deterministic
    }

    /// `log ρ(x)`, or `None` for a point mass.
    pub fn log_density(&self, x: &[f64]) -> Option<f64> {
        if self.deterministic {
            return None;
        }
        let d = self.mean.len() as f64;
        let r2: f64 = x
            .iter()
            .zip(&self.mean)
            .map(|(a, m)| (a - m) * (a - m))
            .sum();
        Some(-0.5 * d * (2.0 * std::f64::consts::PI * self.variance).ln() - r2 / (2.0 * self.variance))
    }

    pub fn density(&self, x: &[f64]) -> Option<f64> {
        self.log_density(x).map(f64::exp)
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let sd = self.variance.sqrt();
        for (o, m) in out.iter_mut().zip(&self.mean) {
            let z: f64 = rng.sample(StandardNormal);
            *o = m + sd * z;
        }
    }
}

fn check_mean(mean: &[f64]) -> Result<()> {
    if mean.is_empty() {
        return Err(Error::InvalidParameter("mean vector is empty".into()));
    }
    if mean.iter().any(|m| !m.is_finite()) {
        return Err(Error::InvalidParameter("mean vector is not finite".into()));
    }
    Ok(())
}

/// Drift field signature for user-supplied models: writes `b(t, x)` into `out`.
pub type DriftFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;

#[derive(Clone)]
pub struct CustomDrift {
    name: String,
    field: Arc<DriftFn>,
}

impl CustomDrift {
    pub fn new<F>(name: impl Into<String>, field: F) -> Self
    where
        F: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            field: Arc::new(field),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

impl fmt::Debug for CustomDrift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomDrift").field("name", &self.name).finish()
    }
}

#[derive(Debug, Clone)]
pub enum ModelKind {
    /// `b = c`.
    ConstantDrift { velocity: Vec<f64> },
    /// `b = x / t`, the reference model with limiting velocity.
    RayModel,
    /// `b = -θ x`: gradient drift, recurrent, zero current velocity in its
    /// invariant law `N(0, I/(2θ))`.
    StationarySymmetric { theta: f64 },
    /// Simulation and pathwise counting only.
    Custom(CustomDrift),
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::ConstantDrift { .. } => "constant_drift",
            ModelKind::RayModel => "ray",
            ModelKind::StationarySymmetric { .. } => "stationary_symmetric",
            ModelKind::Custom(_) => "custom",
        }
    }
}

/// Pointwise decomposition of the drift at one `(t, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocities {
    pub drift: Vec<f64>,
    pub current: Vec<f64>,
    pub osmotic: Vec<f64>,
    pub dual_drift: Vec<f64>,
}

/// Law of `lim X_t / t`.
#[derive(Debug, Clone, PartialEq)]
pub enum LimitingVelocity {
    Gaussian(GaussianLaw),
    /// A deterministic limit; the law is not absolutely continuous, so the
    /// model does not satisfy the asymptotic-velocity hypothesis in full.
    Deterministic(Vec<f64>),
    /// No limit (recurrent or unknown).
    Absent,
}

impl LimitingVelocity {
    pub fn is_absolutely_continuous(&self) -> bool {
        matches!(self, LimitingVelocity::Gaussian(_))
    }
}

#[derive(Debug, Clone)]
pub struct DiffusionModel {
    dimension: usize,
    start_time: f64,
    initial_law: GaussianLaw,
    kind: ModelKind,
}

impl DiffusionModel {
    pub fn constant_drift(velocity: Vec<f64>, start_time: f64, initial_law: GaussianLaw) -> Result<Self> {
        if velocity.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter("drift velocity is not finite".into()));
        }
        if velocity.len() != initial_law.dimension() {
            return Err(Error::DimensionMismatch {
                expected: initial_law.dimension(),
                got: velocity.len(),
            });
        }
        Self::build(ModelKind::ConstantDrift { velocity }, start_time, initial_law)
    }

    pub fn ray(start_time: f64, initial_law: GaussianLaw) -> Result<Self> {
        if !(start_time > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "ray model needs start_time > 0 (drift x/t is singular at t = 0), got {start_time}"
            )));
        }
        Self::build(ModelKind::RayModel, start_time, initial_law)
    }

    pub fn stationary_symmetric(theta: f64, start_time: f64, initial_law: GaussianLaw) -> Result<Self> {
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(Error::InvalidParameter(format!("theta must be positive, got {theta}")));
        }
        Self::build(ModelKind::StationarySymmetric { theta }, start_time, initial_law)
    }

    /// Stationary symmetric model started in its invariant law.
    pub fn stationary_invariant(theta: f64, dimension: usize, start_time: f64) -> Result<Self> {
        let law = GaussianLaw::new(vec![0.0; dimension], 1.0 / (2.0 * theta))?;
        Self::stationary_symmetric(theta, start_time, law)
    }

    pub fn custom(drift: CustomDrift, start_time: f64, initial_law: GaussianLaw) -> Result<Self> {
        Self::build(ModelKind::Custom(drift), start_time, initial_law)
    }

    fn build(kind: ModelKind, start_time: f64, initial_law: GaussianLaw) -> Result<Self> {
        if !(start_time >= 0.0 && start_time.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "start_time must be finite and nonnegative, got {start_time}"
            )));
        }
        Ok(Self {
            dimension: initial_law.dimension(),
            start_time,
            initial_law,
            kind,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn start_time(&self) -> f64 {
        self.start_time
    }

    pub fn initial_law(&self) -> &GaussianLaw {
        &self.initial_law
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn is_closed_form(&self) -> bool {
        !matches!(self.kind, ModelKind::Custom(_))
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if matches!(self.kind, ModelKind::RayModel) && !(t > 0.0) {
            return Err(Error::TimeDomain {
                t,
                reason: "ray drift is singular at t <= 0",
            });
        }
        if !(t >= self.start_time) {
            return Err(Error::TimeDomain {
                t,
                reason: "before the model start time",
            });
        }
        Ok(())
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn require_closed_form(&self, operation: &'static str) -> Result<()> {
        if self.is_closed_form() {
            Ok(())
        } else {
            Err(Error::UnsupportedModel {
                kind: self.kind.name(),
                operation,
            })
        }
    }

    pub fn eval_drift(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.check_time(t)?;
        self.check_point(x)?;
        let mut out = vec![0.0; self.dimension];
        self.drift_into(t, x, &mut out);
        Ok(out)
    }

    /// Unchecked drift evaluation for the stepping loop.
    #[inline]
    pub fn drift_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            ModelKind::ConstantDrift { velocity } => out.copy_from_slice(velocity),
            ModelKind::RayModel => {
                let inv = 1.0 / t;
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = xi * inv;
                }
            }
            ModelKind::StationarySymmetric { theta } => {
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = -theta * xi;
                }
            }
            ModelKind::Custom(c) => (c.field)(t, x, out),
        }
    }

    /// Closed-form law of `X_t` for `t >= t₀`.
    pub fn law_at(&self, t: f64) -> Result<GaussianLaw> {
        self.require_closed_form("law_at")?;
        self.check_time(t)?;
        let t0 = self.start_time;
        let m0 = self.initial_law.mean();
        let s0 = self.initial_law.variance();
        let tau = t - t0;
        let (mean, variance): (Vec<f64>, f64) = match &self.kind {
            ModelKind::ConstantDrift { velocity } => (
                m0.iter().zip(velocity).map(|(m, c)| m + c * tau).collect(),
                s0 + tau,
            ),
            ModelKind::RayModel => {
                let r = t / t0;
                (m0.iter().map(|m| m * r).collect(), r * r * s0 + t * tau / t0)
            }
            ModelKind::StationarySymmetric { theta } => {
                let decay = (-theta * tau).exp();
                let invariant = 1.0 / (2.0 * theta);
                (
                    m0.iter().map(|m| m * decay).collect(),
                    invariant + (s0 - invariant) * decay * decay,
                )
            }
            ModelKind::Custom(_) => unreachable!(),
        };
        if variance == 0.0 {
            GaussianLaw::deterministic(mean)
        } else {
            GaussianLaw::new(mean, variance)
        }
    }

    pub fn log_density(&self, t: f64, x: &[f64]) -> Result<f64> {
        self.require_closed_form("density")?;
        self.check_point(x)?;
        let law = self.law_at(t)?;
        law.log_density(x).ok_or_else(|| {
            Error::InvalidParameter(format!("law at t = {t} is a point mass and has no density"))
        })
    }

    pub fn density(&self, t: f64, x: &[f64]) -> Result<f64> {
        self.log_density(t, x).map(f64::exp)
    }

    /// `∇ log ρ_t(x) = -(x - m)/s`.
    pub fn grad_log_density(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.require_closed_form("grad_log_density")?;
        self.check_point(x)?;
        let law = self.law_at(t)?;
        if law.is_deterministic() {
            return Err(Error::InvalidParameter(format!(
                "law at t = {t} is a point mass and has no density"
            )));
        }
        let s = law.variance();
        Ok(x.iter().zip(law.mean()).map(|(xi, m)| -(xi - m) / s).collect())
    }

    pub fn velocities(&self, t: f64, x: &[f64]) -> Result<Velocities> {
        let grad = self.grad_log_density(t, x)?;
        let drift = self.eval_drift(t, x)?;
        let osmotic: Vec<f64> = grad.iter().map(|g| 0.5 * g).collect();
        let current = drift.iter().zip(&osmotic).map(|(b, u)| b - u).collect();
        let dual_drift = drift.iter().zip(&grad).map(|(b, g)| b - g).collect();
        Ok(Velocities {
            drift,
            current,
            osmotic,
            dual_drift,
        })
    }

    pub fn current_velocity(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.velocities(t, x).map(|v| v.current)
    }

    pub fn osmotic_velocity(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.velocities(t, x).map(|v| v.osmotic)
    }

    pub fn dual_drift(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.velocities(t, x).map(|v| v.dual_drift)
    }

    /// Law of `v∞ = lim X_t / t`.
    ///
    /// For the ray model `X_t / t = X_{t₀}/t₀ + ∫_{t₀}^t s⁻¹ dW_s`, whose limit
    /// is Gaussian with variance `σ₀²/t₀² + 1/t₀` per coordinate.
    pub fn limiting_velocity_law(&self) -> LimitingVelocity {
        match &self.kind {
            ModelKind::ConstantDrift { velocity } => LimitingVelocity::Deterministic(velocity.clone()),
            ModelKind::RayModel => {
                let t0 = self.start_time;
                let mean = self.initial_law.mean().iter().map(|m| m / t0).collect();
                let variance = self.initial_law.variance() / (t0 * t0) + 1.0 / t0;
                // variance >= 1/t₀ > 0, so construction cannot fail
                LimitingVelocity::Gaussian(
                    GaussianLaw::new(mean, variance).expect("positive limiting variance"),
                )
            }
            ModelKind::StationarySymmetric { .. } | ModelKind::Custom(_) => LimitingVelocity::Absent,
        }
    }
}

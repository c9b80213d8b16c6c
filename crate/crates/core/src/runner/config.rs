//! Experiment configuration: TOML text → validated [`ExperimentConfig`].
//!
//! Parsing goes through permissive raw structs (every field optional, unknown
//! keys rejected); validation then checks every block and collects all
//! problems at once, each anchored to the line of the offending key when it
//! can be located.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::geometry::{Cone, Domain, ImplicitDomain};
use crate::model::{CustomDrift, DiffusionModel, GaussianLaw};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// All problems found in one config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<ConfigError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    BoundaryFlux,
    AsymptoticFlux,
    Residuals,
    LimitingVelocity,
    LateralVanishing,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::BoundaryFlux => "boundary_flux",
            ExperimentKind::AsymptoticFlux => "asymptotic_flux",
            ExperimentKind::Residuals => "residuals",
            ExperimentKind::LimitingVelocity => "limiting_velocity",
            ExperimentKind::LateralVanishing => "lateral_vanishing",
        }
    }

    pub fn is_monte_carlo(self) -> bool {
        matches!(
            self,
            ExperimentKind::BoundaryFlux | ExperimentKind::AsymptoticFlux | ExperimentKind::LimitingVelocity
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriftSpec {
    ConstantDrift { velocity: Vec<f64> },
    Ray,
    StationarySymmetric { theta: f64 },
    /// `b(t, x) = A x + c`; simulated only, no closed form.
    Affine { matrix: Vec<Vec<f64>>, offset: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelConfig {
    #[serde(flatten)]
    pub drift: DriftSpec,
    pub t0: f64,
    pub initial_mean: Vec<f64>,
    /// Zero means a deterministic start.
    pub initial_variance: f64,
}

impl ModelConfig {
    pub fn dimension(&self) -> usize {
        self.initial_mean.len()
    }

    pub fn build(&self) -> crate::Result<DiffusionModel> {
        let law = if self.initial_variance == 0.0 {
            GaussianLaw::deterministic(self.initial_mean.clone())?
        } else {
            GaussianLaw::new(self.initial_mean.clone(), self.initial_variance)?
        };
        match &self.drift {
            DriftSpec::ConstantDrift { velocity } => DiffusionModel::constant_drift(velocity.clone(), self.t0, law),
            DriftSpec::Ray => DiffusionModel::ray(self.t0, law),
            DriftSpec::StationarySymmetric { theta } => DiffusionModel::stationary_symmetric(*theta, self.t0, law),
            DriftSpec::Affine { matrix, offset } => {
                let (a, c) = (matrix.clone(), offset.clone());
                let drift = CustomDrift::new("affine", move |_t, x, out| {
                    for (i, o) in out.iter_mut().enumerate() {
                        *o = c[i] + a[i].iter().zip(x).map(|(aij, xj)| aij * xj).sum::<f64>();
                    }
                });
                DiffusionModel::custom(drift, self.t0, law)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainSpec {
    Ball { center: Vec<f64>, radius: f64 },
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Ellipsoid { center: Vec<f64>, semi_axes: Vec<f64> },
}

impl DomainSpec {
    pub fn dimension(&self) -> usize {
        match self {
            DomainSpec::Ball { center, .. } | DomainSpec::Ellipsoid { center, .. } => center.len(),
            DomainSpec::Box { lo, .. } => lo.len(),
        }
    }

    pub fn build(&self) -> crate::Result<Domain> {
        match self {
            DomainSpec::Ball { center, radius } => Domain::ball(center.clone(), *radius),
            DomainSpec::Box { lo, hi } => Domain::cuboid(lo.clone(), hi.clone()),
            DomainSpec::Ellipsoid { center, semi_axes } => Ok(Domain::Implicit(ImplicitDomain::ellipsoid(
                center.clone(),
                semi_axes.clone(),
            )?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConeSpec {
    Cap { axis: Vec<f64>, half_angle: f64 },
    HalfSpace { normal: Vec<f64> },
    Poly { normals: Vec<Vec<f64>> },
}

impl ConeSpec {
    pub fn build(&self) -> crate::Result<Cone> {
        match self {
            ConeSpec::Cap { axis, half_angle } => Cone::cap(axis.clone(), *half_angle),
            ConeSpec::HalfSpace { normal } => Cone::half_space(normal.clone()),
            ConeSpec::Poly { normals } => Cone::poly(normals.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConeConfig {
    #[serde(flatten)]
    pub shape: ConeSpec,
    /// Truncation radius `R` of the region `C ∩ B_R^c`.
    pub radius: Option<f64>,
    /// Optional larger radius for the R-consistency check.
    pub second_radius: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridConfig {
    pub t_start: f64,
    pub t_end: f64,
    pub dt: f64,
    pub stretch_after: Option<f64>,
    pub checkpoints: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadratureConfig {
    pub time_order: usize,
    pub surface_order: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Tolerances {
    pub extra_tolerance: f64,
    /// When set, the fraction of paths not yet escaped must stay below it.
    pub truncation_tol: Option<f64>,
    pub sigmas: f64,
    /// Allowed gap between a flux integral and its telescoped probabilities.
    pub oracle_tolerance: f64,
    /// Maximum fraction of paths with a last exit from `B_R` after `T − 1`.
    pub late_exit_tol: f64,
    /// Largest `|ρ v·n|` allowed when the flux must vanish identically.
    pub zero_integrand_tol: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub samples: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DtSweepConfig {
    /// Paths for the coarse (`2 dt`) rerun; defaults to `n_paths`.
    pub n_paths: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConeLimitConfig {
    pub radii: Vec<f64>,
    /// Window `[t0, factor · R]` per radius.
    pub window_factor: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualConfig {
    pub n_points: usize,
    /// Finite-difference step in units of the local standard deviation
    /// `√s(t)`; the order check compares `h` with `h/2`.
    pub h: f64,
    pub t_range: [f64; 2],
    /// Points are drawn within this many standard deviations of the mean.
    pub spread: f64,
    pub min_ratio: f64,
    /// Residual pairs both below `floor · peak density` count as exact.
    pub floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LateralConfig {
    pub radii: Vec<f64>,
    pub window: [f64; 2],
    pub min_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub n_paths: u64,
    pub master_seed: u64,
    pub threads: Option<usize>,
    pub model: ModelConfig,
    pub domain: Option<DomainSpec>,
    pub cone: Option<ConeConfig>,
    pub grid: Option<GridConfig>,
    pub quadrature: QuadratureConfig,
    pub tolerances: Tolerances,
    pub output: OutputConfig,
    pub dt_sweep: Option<DtSweepConfig>,
    pub cone_limit: Option<ConeLimitConfig>,
    pub residuals: Option<ResidualConfig>,
    pub lateral: Option<LateralConfig>,
}

impl ExperimentConfig {
    /// Resolved configuration with every default filled in, as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_else(|e| format!("# could not render config: {e}\n"))
    }
}

// ---------------------------------------------------------------------------
// raw layer

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    experiment: Option<String>,
    n_paths: Option<u64>,
    master_seed: Option<u64>,
    threads: Option<usize>,
    model: Option<RawModel>,
    domain: Option<RawDomain>,
    cone: Option<RawCone>,
    grid: Option<RawGrid>,
    quadrature: Option<RawQuadrature>,
    tolerances: Option<RawTolerances>,
    output: Option<RawOutput>,
    dt_sweep: Option<RawDtSweep>,
    cone_limit: Option<RawConeLimit>,
    residuals: Option<RawResiduals>,
    lateral: Option<RawLateral>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    kind: Option<String>,
    t0: Option<f64>,
    initial_mean: Option<Vec<f64>>,
    initial_variance: Option<f64>,
    velocity: Option<Vec<f64>>,
    theta: Option<f64>,
    matrix: Option<Vec<Vec<f64>>>,
    offset: Option<Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDomain {
    kind: Option<String>,
    center: Option<Vec<f64>>,
    radius: Option<f64>,
    lo: Option<Vec<f64>>,
    hi: Option<Vec<f64>>,
    semi_axes: Option<Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCone {
    kind: Option<String>,
    axis: Option<Vec<f64>>,
    half_angle: Option<f64>,
    normal: Option<Vec<f64>>,
    normals: Option<Vec<Vec<f64>>>,
    radius: Option<f64>,
    second_radius: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    t_start: Option<f64>,
    t_end: Option<f64>,
    dt: Option<f64>,
    stretch_after: Option<f64>,
    checkpoints: Option<Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawQuadrature {
    time_order: Option<usize>,
    surface_order: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTolerances {
    extra_tolerance: Option<f64>,
    truncation_tol: Option<f64>,
    sigmas: Option<f64>,
    oracle_tolerance: Option<f64>,
    late_exit_tol: Option<f64>,
    zero_integrand_tol: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<PathBuf>,
    samples: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDtSweep {
    n_paths: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConeLimit {
    radii: Option<Vec<f64>>,
    window_factor: Option<f64>,
    tolerance: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawResiduals {
    n_points: Option<usize>,
    h: Option<f64>,
    t_range: Option<[f64; 2]>,
    spread: Option<f64>,
    min_ratio: Option<f64>,
    floor: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLateral {
    radii: Option<Vec<f64>>,
    window: Option<[f64; 2]>,
    min_ratio: Option<f64>,
}

// ---------------------------------------------------------------------------
// validation

/// Finds the line (1-based) of `key = ...` inside `[table]` (top level when
/// `table` is empty), or of the table header when `key` is empty.
fn locate(text: &str, table: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut header_line = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(rest) = line.strip_prefix('[') {
            current = rest.trim_end_matches(']').trim().to_string();
            if current == table {
                header_line = Some(i + 1);
                if key.is_empty() {
                    return header_line;
                }
            }
            continue;
        }
        if current == table && !key.is_empty() {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    header_line
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|b| *b == b'\n').count() + 1
}

struct Validator<'a> {
    text: &'a str,
    errors: Vec<ConfigError>,
}

impl<'a> Validator<'a> {
    fn error(&mut self, table: &str, key: &str, message: impl Into<String>) {
        let line = locate(self.text, table, key);
        self.errors.push(ConfigError {
            line,
            message: message.into(),
        });
    }

    fn missing(&mut self, table: &str, key: &str) {
        let path = if table.is_empty() {
            key.to_string()
        } else {
            format!("{table}.{key}")
        };
        self.error(table, if table.is_empty() { key } else { "" }, format!("missing required field `{path}`"));
    }

    fn require<T: Clone>(&mut self, value: &Option<T>, table: &str, key: &str) -> Option<T> {
        if value.is_none() {
            self.missing(table, key);
        }
        value.clone()
    }

    fn positive(&mut self, value: f64, table: &str, key: &str) -> bool {
        if !(value > 0.0 && value.is_finite()) {
            self.error(table, key, format!("`{key}` must be positive and finite, got {value}"));
            return false;
        }
        true
    }

    fn finite_vec(&mut self, v: &[f64], table: &str, key: &str, dim: Option<usize>) -> bool {
        if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
            self.error(table, key, format!("`{key}` must be a nonempty list of finite numbers"));
            return false;
        }
        if let Some(d) = dim {
            if v.len() != d {
                self.error(table, key, format!("`{key}` has length {}, expected dimension {d}", v.len()));
                return false;
            }
        }
        true
    }
}

/// Parses and validates config text. Nothing partially valid is returned.
pub fn validate_config(text: &str) -> Result<ExperimentConfig, ConfigErrors> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| {
        ConfigErrors(vec![ConfigError {
            line: e.span().map(|s| line_of_offset(text, s.start)),
            message: e.message().trim().to_string(),
        }])
    })?;
    let mut v = Validator {
        text,
        errors: Vec::new(),
    };

    let experiment = match v.require(&raw.experiment, "", "experiment") {
        Some(name) => match name.as_str() {
            "boundary_flux" => Some(ExperimentKind::BoundaryFlux),
            "asymptotic_flux" => Some(ExperimentKind::AsymptoticFlux),
            "residuals" => Some(ExperimentKind::Residuals),
            "limiting_velocity" => Some(ExperimentKind::LimitingVelocity),
            "lateral_vanishing" => Some(ExperimentKind::LateralVanishing),
            other => {
                v.error(
                    "",
                    "experiment",
                    format!(
                        "unknown experiment `{other}` (expected boundary_flux, asymptotic_flux, residuals, \
                         limiting_velocity or lateral_vanishing)"
                    ),
                );
                None
            }
        },
        None => None,
    };
    let master_seed = v.require(&raw.master_seed, "", "master_seed");
    let n_paths = match (experiment, raw.n_paths) {
        (Some(kind), None) if kind.is_monte_carlo() => {
            v.missing("", "n_paths");
            None
        }
        (Some(kind), Some(n)) if kind.is_monte_carlo() && n < 100 => {
            v.error("", "n_paths", format!("n_paths must be at least 100, got {n}"));
            None
        }
        (_, n) => Some(n.unwrap_or(0)),
    };
    if raw.threads == Some(0) {
        v.error("", "threads", "threads must be at least 1");
    }

    let model = validate_model(&mut v, raw.model.as_ref());
    let dim = model.as_ref().map(ModelConfig::dimension);
    let grid = validate_grid(&mut v, raw.grid.as_ref(), model.as_ref(), experiment);
    let domain = validate_domain(&mut v, raw.domain.as_ref(), dim, experiment);
    let cone = validate_cone(&mut v, raw.cone.as_ref(), dim, experiment);

    let q = raw.quadrature.unwrap_or_default();
    let quadrature = QuadratureConfig {
        time_order: q.time_order.unwrap_or(16),
        surface_order: q.surface_order.unwrap_or(48),
    };
    if quadrature.time_order < 2 {
        v.error("quadrature", "time_order", "time_order must be at least 2");
    }
    if quadrature.surface_order < 2 {
        v.error("quadrature", "surface_order", "surface_order must be at least 2");
    }

    let t = raw.tolerances.unwrap_or_default();
    let tolerances = Tolerances {
        extra_tolerance: t.extra_tolerance.unwrap_or(0.0),
        truncation_tol: t.truncation_tol,
        sigmas: t.sigmas.unwrap_or(3.0),
        oracle_tolerance: t.oracle_tolerance.unwrap_or(1e-6),
        late_exit_tol: t.late_exit_tol.unwrap_or(1e-3),
        zero_integrand_tol: t.zero_integrand_tol,
    };
    for (key, value) in [
        ("extra_tolerance", Some(tolerances.extra_tolerance)),
        ("truncation_tol", tolerances.truncation_tol),
        ("oracle_tolerance", Some(tolerances.oracle_tolerance)),
        ("late_exit_tol", Some(tolerances.late_exit_tol)),
        ("zero_integrand_tol", tolerances.zero_integrand_tol),
    ] {
        if let Some(x) = value {
            if !(x >= 0.0 && x.is_finite()) {
                v.error("tolerances", key, format!("`{key}` must be nonnegative, got {x}"));
            }
        }
    }
    v.positive(tolerances.sigmas, "tolerances", "sigmas");

    let o = raw.output.unwrap_or_default();
    let output = OutputConfig {
        dir: o
            .dir
            .unwrap_or_else(|| PathBuf::from(format!("out/{}", experiment.map_or("run", ExperimentKind::name)))),
        samples: o.samples.unwrap_or(false),
    };

    let dt_sweep = raw.dt_sweep.map(|d| DtSweepConfig { n_paths: d.n_paths });

    let cone_limit = raw.cone_limit.map(|c| {
        let cfg = ConeLimitConfig {
            radii: c.radii.unwrap_or_default(),
            window_factor: c.window_factor.unwrap_or(20.0),
            tolerance: c.tolerance.unwrap_or(1e-2),
        };
        if cfg.radii.is_empty() || cfg.radii.iter().any(|r| !(*r > 0.0)) {
            v.error("cone_limit", "radii", "cone_limit.radii must be a nonempty list of positive radii");
        }
        v.positive(cfg.window_factor, "cone_limit", "window_factor");
        cfg
    });
    if cone_limit.is_some() && !matches!(cone.as_ref().map(|c| &c.shape), Some(ConeSpec::Cap { .. })) {
        v.error("cone_limit", "", "cone_limit needs a cap cone");
    }

    let residuals = match (experiment, raw.residuals) {
        (Some(ExperimentKind::Residuals), None) => {
            v.missing("", "residuals");
            None
        }
        (_, Some(r)) => {
            let t0 = model.as_ref().map_or(0.0, |m| m.t0);
            let cfg = ResidualConfig {
                n_points: r.n_points.unwrap_or(100),
                h: r.h.unwrap_or(4e-3),
                t_range: r.t_range.unwrap_or([t0 + 0.1, t0 + 5.0]),
                spread: r.spread.unwrap_or(2.0),
                min_ratio: r.min_ratio.unwrap_or(3.5),
                floor: r.floor.unwrap_or(1e-10),
            };
            v.positive(cfg.h, "residuals", "h");
            v.positive(cfg.spread, "residuals", "spread");
            if cfg.n_points == 0 {
                v.error("residuals", "n_points", "n_points must be positive");
            }
            let [a, b] = cfg.t_range;
            if !(a > t0 && b > a && b.is_finite()) {
                v.error(
                    "residuals",
                    "t_range",
                    format!("t_range must satisfy t0 < a < b, got [{a}, {b}] with t0 = {t0}"),
                );
            }
            Some(cfg)
        }
        _ => None,
    };

    let lateral = match (experiment, raw.lateral) {
        (Some(ExperimentKind::LateralVanishing), None) => {
            v.missing("", "lateral");
            None
        }
        (_, Some(l)) => {
            let cfg = LateralConfig {
                radii: v.require(&l.radii, "lateral", "radii").unwrap_or_default(),
                window: v.require(&l.window, "lateral", "window").unwrap_or([0.0, 0.0]),
                min_ratio: l.min_ratio.unwrap_or(10.0),
            };
            if l.radii.is_some() && (cfg.radii.len() < 2 || cfg.radii.iter().any(|r| !(*r > 0.0))) {
                v.error("lateral", "radii", "lateral.radii needs at least two positive radii");
            }
            if l.window.is_some() {
                let t0 = model.as_ref().map_or(0.0, |m| m.t0);
                let [a, b] = cfg.window;
                if !(a >= t0 && b > a && b.is_finite()) {
                    v.error("lateral", "window", format!("window must satisfy t0 <= a < b, got [{a}, {b}]"));
                }
            }
            Some(cfg)
        }
        _ => None,
    };

    if let (Some(kind), Some(m)) = (experiment, model.as_ref()) {
        // affine drifts have no closed-form law: only boundary_flux can run
        // them, reporting Monte Carlo estimates without an oracle
        let closed_form = !matches!(m.drift, DriftSpec::Affine { .. });
        if !closed_form && kind != ExperimentKind::BoundaryFlux {
            v.error(
                "model",
                "kind",
                format!("experiment {} needs a closed-form model; affine drift can only be simulated", kind.name()),
            );
        }
        if kind == ExperimentKind::AsymptoticFlux && matches!(m.drift, DriftSpec::StationarySymmetric { .. }) {
            v.error(
                "model",
                "kind",
                "asymptotic_flux needs a transient model with a limiting velocity (ray or constant_drift)",
            );
        }
        if matches!(kind, ExperimentKind::LateralVanishing | ExperimentKind::BoundaryFlux) && m.dimension() != 3 {
            v.error("model", "initial_mean", "surface quadrature needs dimension 3");
        }
    }
    if let (Some(ExperimentKind::LateralVanishing), Some(c)) = (experiment, cone.as_ref()) {
        if !matches!(c.shape, ConeSpec::Cap { .. }) {
            v.error("cone", "kind", "lateral_vanishing needs a cap cone");
        }
    }

    if !v.errors.is_empty() {
        return Err(ConfigErrors(v.errors));
    }
    Ok(ExperimentConfig {
        experiment: experiment.expect("checked"),
        n_paths: n_paths.expect("checked"),
        master_seed: master_seed.expect("checked"),
        threads: raw.threads,
        model: model.expect("checked"),
        domain,
        cone,
        grid,
        quadrature,
        tolerances,
        output,
        dt_sweep,
        cone_limit,
        residuals,
        lateral,
    })
}

fn validate_model(v: &mut Validator<'_>, raw: Option<&RawModel>) -> Option<ModelConfig> {
    let Some(m) = raw else {
        v.missing("", "model");
        return None;
    };
    let kind = v.require(&m.kind, "model", "kind");
    let mean = v.require(&m.initial_mean, "model", "initial_mean");
    let variance = v.require(&m.initial_variance, "model", "initial_variance");
    let t0 = m.t0.unwrap_or(0.0);
    let mut ok = kind.is_some() && mean.is_some() && variance.is_some();
    if let Some(mean) = &mean {
        ok &= v.finite_vec(mean, "model", "initial_mean", None);
    }
    if let Some(s) = variance {
        if !(s >= 0.0 && s.is_finite()) {
            v.error("model", "initial_variance", format!("initial_variance must be >= 0, got {s}"));
            ok = false;
        }
    }
    if !(t0 >= 0.0 && t0.is_finite()) {
        v.error("model", "t0", format!("t0 must be finite and nonnegative, got {t0}"));
        ok = false;
    }
    let dim = mean.as_ref().map(Vec::len);
    let drift = match kind.as_deref() {
        Some("constant_drift") => {
            let vel = v.require(&m.velocity, "model", "velocity");
            match vel {
                Some(vel) if v.finite_vec(&vel, "model", "velocity", dim) => Some(DriftSpec::ConstantDrift { velocity: vel }),
                _ => None,
            }
        }
        Some("ray") => {
            if t0 == 0.0 {
                v.error("model", "t0", "ray model: drift singular at t=0 (t0 must be > 0)");
                ok = false;
            }
            Some(DriftSpec::Ray)
        }
        Some("stationary_symmetric") => match v.require(&m.theta, "model", "theta") {
            Some(theta) if v.positive(theta, "model", "theta") => Some(DriftSpec::StationarySymmetric { theta }),
            _ => None,
        },
        Some("affine") => {
            let matrix = v.require(&m.matrix, "model", "matrix");
            let offset = m.offset.clone().unwrap_or_else(|| vec![0.0; dim.unwrap_or(0)]);
            match (matrix, dim) {
                (Some(a), Some(d)) => {
                    let square = a.len() == d && a.iter().all(|row| row.len() == d && row.iter().all(|x| x.is_finite()));
                    if !square {
                        v.error("model", "matrix", format!("matrix must be {d}x{d} with finite entries"));
                        None
                    } else if v.finite_vec(&offset, "model", "offset", Some(d)) {
                        Some(DriftSpec::Affine { matrix: a, offset })
                    } else {
                        None
                    }
                }
                _ => None,
            }
        }
        Some(other) => {
            v.error(
                "model",
                "kind",
                format!("unknown model kind `{other}` (expected constant_drift, ray, stationary_symmetric or affine)"),
            );
            None
        }
        None => None,
    };
    let drift = drift?;
    if !ok {
        return None;
    }
    Some(ModelConfig {
        drift,
        t0,
        initial_mean: mean?,
        initial_variance: variance?,
    })
}

fn validate_grid(
    v: &mut Validator<'_>,
    raw: Option<&RawGrid>,
    model: Option<&ModelConfig>,
    experiment: Option<ExperimentKind>,
) -> Option<GridConfig> {
    let needed = experiment.is_some_and(ExperimentKind::is_monte_carlo);
    let Some(g) = raw else {
        if needed {
            v.missing("", "grid");
        }
        return None;
    };
    let t_start = v.require(&g.t_start, "grid", "t_start")?;
    let t_end = v.require(&g.t_end, "grid", "t_end")?;
    let dt = v.require(&g.dt, "grid", "dt")?;
    let mut ok = v.positive(dt, "grid", "dt");
    if !(t_end > t_start && t_end.is_finite()) {
        v.error("grid", "t_end", format!("t_end must exceed t_start, got [{t_start}, {t_end}]"));
        ok = false;
    }
    if let Some(m) = model {
        if matches!(m.drift, DriftSpec::Ray) && t_start <= 0.0 {
            v.error("grid", "t_start", "ray model: drift singular at t=0 (t_start must be > 0)");
            ok = false;
        } else if t_start < m.t0 {
            v.error("grid", "t_start", format!("t_start {t_start} precedes the model start time {}", m.t0));
            ok = false;
        } else if t_start > m.t0 && matches!(m.drift, DriftSpec::Affine { .. }) {
            v.error("grid", "t_start", "affine models must start the grid at t0");
            ok = false;
        }
    }
    if let Some(tau) = g.stretch_after {
        ok &= v.positive(tau, "grid", "stretch_after");
    }
    let checkpoints = g.checkpoints.clone().unwrap_or_default();
    if checkpoints.iter().any(|c| !(*c > t_start && *c <= t_end)) || checkpoints.windows(2).any(|w| w[0] >= w[1]) {
        v.error(
            "grid",
            "checkpoints",
            "checkpoints must be increasing and lie in (t_start, t_end]",
        );
        ok = false;
    }
    if matches!(experiment, Some(ExperimentKind::LimitingVelocity)) && checkpoints.is_empty() {
        v.error("grid", "checkpoints", "limiting_velocity needs at least one checkpoint");
        ok = false;
    }
    ok.then_some(GridConfig {
        t_start,
        t_end,
        dt,
        stretch_after: g.stretch_after,
        checkpoints,
    })
}

fn validate_domain(
    v: &mut Validator<'_>,
    raw: Option<&RawDomain>,
    dim: Option<usize>,
    experiment: Option<ExperimentKind>,
) -> Option<DomainSpec> {
    let Some(d) = raw else {
        if matches!(experiment, Some(ExperimentKind::BoundaryFlux)) {
            v.missing("", "domain");
        }
        return None;
    };
    let spec = match v.require(&d.kind, "domain", "kind")?.as_str() {
        "ball" => {
            let center = d.center.clone().unwrap_or_else(|| vec![0.0; dim.unwrap_or(3)]);
            let radius = v.require(&d.radius, "domain", "radius")?;
            (v.finite_vec(&center, "domain", "center", dim) & v.positive(radius, "domain", "radius"))
                .then_some(DomainSpec::Ball { center, radius })
        }
        "box" => {
            let lo = v.require(&d.lo, "domain", "lo")?;
            let hi = v.require(&d.hi, "domain", "hi")?;
            let ok = v.finite_vec(&lo, "domain", "lo", dim) & v.finite_vec(&hi, "domain", "hi", dim);
            if ok && lo.iter().zip(&hi).any(|(l, h)| !(l < h)) {
                v.error("domain", "hi", "box needs lo < hi in every coordinate");
                None
            } else {
                ok.then_some(DomainSpec::Box { lo, hi })
            }
        }
        "ellipsoid" => {
            let center = d.center.clone().unwrap_or_else(|| vec![0.0; dim.unwrap_or(3)]);
            let semi_axes = v.require(&d.semi_axes, "domain", "semi_axes")?;
            let ok = v.finite_vec(&center, "domain", "center", dim)
                & v.finite_vec(&semi_axes, "domain", "semi_axes", dim);
            if ok && semi_axes.iter().any(|a| !(*a > 0.0)) {
                v.error("domain", "semi_axes", "semi_axes must be positive");
                None
            } else {
                ok.then_some(DomainSpec::Ellipsoid { center, semi_axes })
            }
        }
        other => {
            v.error("domain", "kind", format!("unknown domain kind `{other}` (expected ball, box or ellipsoid)"));
            None
        }
    };
    if let (Some(DomainSpec::Ellipsoid { .. }), Some(ExperimentKind::BoundaryFlux)) = (&spec, experiment) {
        v.error(
            "domain",
            "kind",
            "boundary_flux needs a ball or box (no surface quadrature for implicit domains)",
        );
    }
    spec
}

fn validate_cone(
    v: &mut Validator<'_>,
    raw: Option<&RawCone>,
    dim: Option<usize>,
    experiment: Option<ExperimentKind>,
) -> Option<ConeConfig> {
    let needed = matches!(
        experiment,
        Some(ExperimentKind::AsymptoticFlux | ExperimentKind::LateralVanishing)
    );
    let Some(c) = raw else {
        if needed {
            v.missing("", "cone");
        }
        return None;
    };
    let shape = match v.require(&c.kind, "cone", "kind")?.as_str() {
        "cap" => {
            let axis = v.require(&c.axis, "cone", "axis")?;
            let alpha = v.require(&c.half_angle, "cone", "half_angle")?;
            let ok = v.finite_vec(&axis, "cone", "axis", dim);
            if !(alpha > 0.0 && alpha <= std::f64::consts::PI) {
                v.error("cone", "half_angle", format!("half_angle must lie in (0, pi], got {alpha}"));
                None
            } else if ok && axis.iter().all(|a| *a == 0.0) {
                v.error("cone", "axis", "axis must be nonzero");
                None
            } else {
                ok.then_some(ConeSpec::Cap { axis, half_angle: alpha })
            }
        }
        "half_space" => {
            let normal = v.require(&c.normal, "cone", "normal")?;
            (v.finite_vec(&normal, "cone", "normal", dim) && normal.iter().any(|x| *x != 0.0))
                .then_some(ConeSpec::HalfSpace { normal })
        }
        "poly" => {
            let normals = v.require(&c.normals, "cone", "normals")?;
            let ok = !normals.is_empty() && normals.iter().all(|n| n.iter().any(|x| *x != 0.0));
            if !ok || normals.iter().any(|n| !v.finite_vec(n, "cone", "normals", dim)) {
                if !ok {
                    v.error("cone", "normals", "normals must be a nonempty list of nonzero vectors");
                }
                None
            } else {
                Some(ConeSpec::Poly { normals })
            }
        }
        other => {
            v.error("cone", "kind", format!("unknown cone kind `{other}` (expected cap, half_space or poly)"));
            None
        }
    };
    if matches!(experiment, Some(ExperimentKind::AsymptoticFlux)) && c.radius.is_none() {
        v.missing("cone", "radius");
    }
    for (key, r) in [("radius", c.radius), ("second_radius", c.second_radius)] {
        if let Some(r) = r {
            v.positive(r, "cone", key);
        }
    }
    if let (Some(r1), Some(r2)) = (c.radius, c.second_radius) {
        if !(r2 > r1) {
            v.error("cone", "second_radius", "second_radius must exceed radius");
        }
    }
    Some(ConeConfig {
        shape: shape?,
        radius: c.radius,
        second_radius: c.second_radius,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
experiment = "boundary_flux"
n_paths = 1000
master_seed = 7

[model]
kind = "constant_drift"
velocity = [1.0, 0.0, 0.0]
initial_mean = [0.0, 0.0, 0.0]
initial_variance = 0.25

[domain]
kind = "ball"
radius = 1.0

[grid]
t_start = 0.0
t_end = 4.0
dt = 0.001
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = validate_config(MINIMAL).unwrap();
        assert_eq!(cfg.experiment, ExperimentKind::BoundaryFlux);
        assert_eq!(cfg.tolerances.sigmas, 3.0);
        assert_eq!(cfg.quadrature.surface_order, 48);
        assert_eq!(cfg.output.dir, PathBuf::from("out/boundary_flux"));
        assert_eq!(
            cfg.domain,
            Some(DomainSpec::Ball {
                center: vec![0.0; 3],
                radius: 1.0
            })
        );
        let echoed = cfg.to_toml();
        assert!(echoed.contains("sigmas = 3.0"), "{echoed}");
        assert!(echoed.contains("master_seed = 7"));
    }

    #[test]
    fn missing_seed_is_named() {
        let text = MINIMAL.replace("master_seed = 7\n", "");
        let err = validate_config(&text).unwrap_err();
        assert!(err.to_string().contains("master_seed"), "{err}");
    }

    #[test]
    fn ray_at_zero_is_singular() {
        let text = r#"
experiment = "asymptotic_flux"
n_paths = 1000
master_seed = 1

[model]
kind = "ray"
t0 = 1.0
initial_mean = [1.0, 0.0, 0.0]
initial_variance = 0.1

[cone]
kind = "cap"
axis = [1.0, 0.0, 0.0]
half_angle = 1.0
radius = 20.0

[grid]
t_start = 0.0
t_end = 100.0
dt = 0.01
"#;
        let err = validate_config(text).unwrap_err();
        assert_eq!(err.0.len(), 1, "{err}");
        assert!(err.0[0].message.contains("drift singular at t=0"));
        assert_eq!(err.0[0].line, Some(locate(text, "grid", "t_start").unwrap()));
        assert_eq!(err.0[0].line, Some(19));
    }

    #[test]
    fn errors_are_aggregated_and_line_anchored() {
        let text = MINIMAL.replace("dt = 0.001", "dt = -1.0").replace("radius = 1.0", "radius = 0.0");
        let err = validate_config(&text).unwrap_err();
        assert_eq!(err.0.len(), 2, "{err}");
        for e in &err.0 {
            let line = e.line.expect("anchored");
            let src = text.lines().nth(line - 1).unwrap();
            assert!(src.contains("dt") || src.contains("radius"), "{src}");
        }
    }

    #[test]
    fn unknown_keys_and_syntax_errors_report_lines() {
        let text = MINIMAL.replace("dt = 0.001", "dt = 0.001\nstep = 3");
        let err = validate_config(&text).unwrap_err();
        assert!(err.0[0].message.contains("step"), "{err}");
        assert_eq!(err.0[0].line, Some(20));
        let err = validate_config("experiment = \n").unwrap_err();
        assert_eq!(err.0[0].line, Some(1));
    }

    #[test]
    fn too_few_paths() {
        let text = MINIMAL.replace("n_paths = 1000", "n_paths = 10");
        let err = validate_config(&text).unwrap_err();
        assert!(err.to_string().contains("at least 100"));
    }

    #[test]
    fn models_build() {
        let cfg = validate_config(MINIMAL).unwrap();
        let model = cfg.model.build().unwrap();
        assert_eq!(model.dimension(), 3);
        let affine = ModelConfig {
            drift: DriftSpec::Affine {
                matrix: vec![vec![0.0, 1.0], vec![-1.0, 0.0]],
                offset: vec![0.5, 0.0],
            },
            t0: 0.0,
            initial_mean: vec![0.0, 0.0],
            initial_variance: 0.0,
        };
        let m = affine.build().unwrap();
        assert_eq!(m.eval_drift(0.0, &[1.0, 2.0]).unwrap(), vec![2.5, -1.0]);
    }
}

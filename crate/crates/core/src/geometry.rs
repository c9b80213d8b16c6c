//! Bounded domains, open cones, outward normals and surface quadrature on
//! `∂D` and on spherical patches `C ∩ S_R`.
//!
//! Membership is strict everywhere (open sets). Quadrature is three-dimensional
//! only.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::quadrature::GaussLegendre;
use crate::vector::{dot, norm, normalized, orthonormal_frame};

pub type LevelSetFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// Domain given by a level set `φ`, inside where `φ < 0`.
#[derive(Clone)]
pub struct ImplicitDomain {
    name: String,
    dimension: usize,
    level_set: Arc<LevelSetFn>,
    bounding_radius: f64,
}

impl ImplicitDomain {
    pub fn new<F>(name: impl Into<String>, dimension: usize, bounding_radius: f64, level_set: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        if !(bounding_radius > 0.0 && bounding_radius.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "implicit domain needs a finite bounding radius, got {bounding_radius}"
            )));
        }
        if dimension == 0 {
            return Err(Error::InvalidParameter("dimension must be positive".into()));
        }
        Ok(Self {
            name: name.into(),
            dimension,
            level_set: Arc::new(level_set),
            bounding_radius,
        })
    }

    /// Axis-aligned ellipsoid `Σ ((x_i - c_i)/a_i)² < 1`.
    pub fn ellipsoid(center: Vec<f64>, semi_axes: Vec<f64>) -> Result<Self> {
        if center.len() != semi_axes.len() {
            return Err(Error::DimensionMismatch {
                expected: center.len(),
                got: semi_axes.len(),
            });
        }
        if semi_axes.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(Error::InvalidParameter("ellipsoid semi-axes must be positive".into()));
        }
        let bound = norm(&center) + semi_axes.iter().cloned().fold(0.0, f64::max);
        let d = center.len();
        Self::new("ellipsoid", d, bound, move |x| {
            x.iter()
                .zip(&center)
                .zip(&semi_axes)
                .map(|((xi, ci), ai)| ((xi - ci) / ai).powi(2))
                .sum::<f64>()
                - 1.0
        })
    }

    pub fn level(&self, x: &[f64]) -> f64 {
        (self.level_set)(x)
    }
}

impl fmt::Debug for ImplicitDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImplicitDomain")
            .field("name", &self.name)
            .field("dimension", &self.dimension)
            .field("bounding_radius", &self.bounding_radius)
            .finish()
    }
}

#[derive(Debug, Clone)]
pub enum Domain {
    Ball { center: Vec<f64>, radius: f64 },
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Implicit(ImplicitDomain),
}

impl Domain {
    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        if center.is_empty() || center.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter("ball center must be finite and non-empty".into()));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidParameter(format!("ball radius must be positive, got {radius}")));
        }
        Ok(Domain::Ball { center, radius })
    }

    pub fn unit_ball(dimension: usize) -> Self {
        Domain::Ball {
            center: vec![0.0; dimension],
            radius: 1.0,
        }
    }

    pub fn cuboid(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch {
                expected: lo.len(),
                got: hi.len(),
            });
        }
        if lo.is_empty() || lo.iter().zip(&hi).any(|(l, h)| !(l < h) || !l.is_finite() || !h.is_finite()) {
            return Err(Error::InvalidParameter("box needs lo < hi componentwise".into()));
        }
        Ok(Domain::Box { lo, hi })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Domain::Ball { .. } => "ball",
            Domain::Box { .. } => "box",
            Domain::Implicit(_) => "implicit",
        }
    }

    pub fn dimension(&self) -> usize {
        match self {
            Domain::Ball { center, .. } => center.len(),
            Domain::Box { lo, .. } => lo.len(),
            Domain::Implicit(imp) => imp.dimension,
        }
    }

    /// Radius of a ball about the origin containing the closure of `D`.
    pub fn bounding_radius(&self) -> f64 {
        match self {
            Domain::Ball { center, radius } => norm(center) + radius,
            Domain::Box { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(l, h)| l.abs().max(h.abs()).powi(2))
                .sum::<f64>()
                .sqrt(),
            Domain::Implicit(imp) => imp.bounding_radius,
        }
    }

    fn scale(&self) -> f64 {
        match self {
            Domain::Ball { radius, .. } => *radius,
            Domain::Box { lo, hi } => lo.iter().zip(hi).map(|(l, h)| h - l).fold(0.0, f64::max),
            Domain::Implicit(imp) => imp.bounding_radius,
        }
    }

    /// `χ_D(x)` for the open set `D`.
    #[inline]
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Domain::Ball { center, radius } => {
                let r2: f64 = x.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum();
                r2 < radius * radius
            }
            Domain::Box { lo, hi } => x.iter().zip(lo.iter().zip(hi)).all(|(xi, (l, h))| l < xi && xi < h),
            Domain::Implicit(imp) => imp.level(x) < 0.0,
        }
    }

    /// Outward unit normal at a boundary point. Box edges and corners resolve
    /// to the active face with the smallest axis index.
    pub fn outward_normal(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dimension() {
            return Err(Error::DimensionMismatch {
                expected: self.dimension(),
                got: x.len(),
            });
        }
        let tol = 1e-8 * self.scale();
        match self {
            Domain::Ball { center, radius } => {
                let rel: Vec<f64> = x.iter().zip(center).map(|(a, c)| a - c).collect();
                let r = norm(&rel);
                if (r - radius).abs() > tol {
                    return Err(Error::NotOnBoundary {
                        distance: (r - radius).abs(),
                    });
                }
                Ok(rel.iter().map(|c| c / r).collect())
            }
            Domain::Box { lo, hi } => {
                // distance outside the closed box
                let outside = x
                    .iter()
                    .zip(lo.iter().zip(hi))
                    .map(|(xi, (l, h))| (l - xi).max(xi - h).max(0.0).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if outside > tol {
                    return Err(Error::NotOnBoundary { distance: outside });
                }
                let mut best: Option<(usize, f64, f64)> = None;
                for (i, (xi, (l, h))) in x.iter().zip(lo.iter().zip(hi)).enumerate() {
                    for (gap, sign) in [((xi - l).abs(), -1.0), ((h - xi).abs(), 1.0)] {
                        if gap <= tol && best.is_none() {
                            best = Some((i, gap, sign));
                        }
                    }
                }
                match best {
                    Some((axis, _, sign)) => {
                        let mut n = vec![0.0; x.len()];
                        n[axis] = sign;
                        Ok(n)
                    }
                    None => {
                        let distance = x
                            .iter()
                            .zip(lo.iter().zip(hi))
                            .map(|(xi, (l, h))| (xi - l).abs().min((h - xi).abs()))
                            .fold(f64::INFINITY, f64::min);
                        Err(Error::NotOnBoundary { distance })
                    }
                }
            }
            Domain::Implicit(imp) => {
                let h = 1e-6 * imp.bounding_radius;
                let mut grad = vec![0.0; x.len()];
                let mut probe = x.to_vec();
                for i in 0..x.len() {
                    probe[i] = x[i] + h;
                    let up = imp.level(&probe);
                    probe[i] = x[i] - h;
                    let down = imp.level(&probe);
                    probe[i] = x[i];
                    grad[i] = (up - down) / (2.0 * h);
                }
                let gnorm = norm(&grad);
                if !(gnorm >= 1e-12) {
                    return Err(Error::DegenerateNormal { norm: gnorm });
                }
                let distance = imp.level(x).abs() / gnorm;
                if distance > tol {
                    return Err(Error::NotOnBoundary { distance });
                }
                Ok(grad.iter().map(|g| g / gnorm).collect())
            }
        }
    }

    /// Product Gauss–Legendre rule on `∂D` (three dimensions, Ball or Box).
    ///
    /// Ball: `order` Gauss–Legendre nodes in `cos θ` times `2·order` equispaced
    /// azimuths. Box: `order × order` tensor rule on each face.
    pub fn boundary_quadrature(&self, order: usize) -> Result<SurfaceQuadrature> {
        if order == 0 {
            return Err(Error::InvalidParameter("quadrature order must be positive".into()));
        }
        if let Domain::Implicit(_) = self {
            return Err(Error::UnsupportedDomain {
                kind: "implicit",
                operation: "boundary_quadrature",
            });
        }
        if self.dimension() != 3 {
            return Err(Error::DimensionMismatch {
                expected: 3,
                got: self.dimension(),
            });
        }
        match self {
            Domain::Ball { center, radius } => {
                let c = [center[0], center[1], center[2]];
                Ok(spherical_patch(&c, &[0.0, 0.0, 1.0], *radius, -1.0, order))
            }
            Domain::Box { lo, hi } => {
                let gl = GaussLegendre::new(order);
                let mut q = SurfaceQuadrature::default();
                for axis in 0..3 {
                    let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
                    for (side, sign) in [(lo[axis], -1.0), (hi[axis], 1.0)] {
                        let mut normal = [0.0; 3];
                        normal[axis] = sign;
                        for (ua, wa) in gl.on_interval(lo[a], hi[a]) {
                            for (ub, wb) in gl.on_interval(lo[b], hi[b]) {
                                let mut p = [0.0; 3];
                                p[axis] = side;
                                p[a] = ua;
                                p[b] = ub;
                                q.push(p, wa * wb, normal);
                            }
                        }
                    }
                }
                Ok(q)
            }
            Domain::Implicit(_) => unreachable!(),
        }
    }
}

/// Open cone through the origin; the origin itself is excluded.
#[derive(Debug, Clone, PartialEq)]
pub enum Cone {
    /// `angle(x, axis) < half_angle`, `half_angle ∈ (0, π]`.
    Cap { axis: Vec<f64>, half_angle: f64 },
    /// `x · normal > 0`.
    HalfSpace { normal: Vec<f64> },
    /// Intersection of open half-spaces `x · n_i > 0`.
    Poly { normals: Vec<Vec<f64>> },
}

impl Cone {
    pub fn cap(axis: Vec<f64>, half_angle: f64) -> Result<Self> {
        let axis = normalized(&axis).ok_or_else(|| Error::InvalidParameter("cone axis must be nonzero".into()))?;
        if !(half_angle > 0.0 && half_angle <= PI) {
            return Err(Error::InvalidParameter(format!(
                "cap half-angle must lie in (0, π], got {half_angle}"
            )));
        }
        Ok(Cone::Cap { axis, half_angle })
    }

    pub fn half_space(normal: Vec<f64>) -> Result<Self> {
        let normal =
            normalized(&normal).ok_or_else(|| Error::InvalidParameter("half-space normal must be nonzero".into()))?;
        Ok(Cone::HalfSpace { normal })
    }

    pub fn poly(normals: Vec<Vec<f64>>) -> Result<Self> {
        if normals.is_empty() {
            return Err(Error::InvalidParameter("poly cone needs at least one normal".into()));
        }
        let d = normals[0].len();
        let normals = normals
            .iter()
            .map(|n| {
                if n.len() != d {
                    return Err(Error::DimensionMismatch { expected: d, got: n.len() });
                }
                normalized(n).ok_or_else(|| Error::InvalidParameter("poly cone normal must be nonzero".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Cone::Poly { normals })
    }

    pub fn dimension(&self) -> usize {
        match self {
            Cone::Cap { axis, .. } => axis.len(),
            Cone::HalfSpace { normal } => normal.len(),
            Cone::Poly { normals } => normals[0].len(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Cone::Cap { .. } => "cap",
            Cone::HalfSpace { .. } => "half_space",
            Cone::Poly { .. } => "poly",
        }
    }

    /// `χ_C(x)`. Scale invariant; `contains(0) = false`.
    #[inline]
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Cone::Cap { axis, half_angle } => {
                let along = dot(x, axis);
                let perp2: f64 = x
                    .iter()
                    .zip(axis)
                    .map(|(xi, ai)| {
                        let p = xi - along * ai;
                        p * p
                    })
                    .sum();
                if along == 0.0 && perp2 == 0.0 {
                    return false;
                }
                perp2.sqrt().atan2(along) < *half_angle
            }
            Cone::HalfSpace { normal } => dot(x, normal) > 0.0,
            Cone::Poly { normals } => normals.iter().all(|n| dot(x, n) > 0.0),
        }
    }

    /// Quadrature on `Σ_R = C ∩ S_R` with radially outward normals.
    pub fn cap_quadrature(&self, radius: f64, order: usize) -> Result<SurfaceQuadrature> {
        let Cone::Cap { axis, half_angle } = self else {
            return Err(Error::InvalidParameter(format!(
                "cap quadrature needs a cap cone, got {}",
                self.kind_name()
            )));
        };
        if axis.len() != 3 {
            return Err(Error::DimensionMismatch {
                expected: 3,
                got: axis.len(),
            });
        }
        if !(radius > 0.0) || order == 0 {
            return Err(Error::InvalidParameter("cap quadrature needs radius > 0 and order > 0".into()));
        }
        let a = [axis[0], axis[1], axis[2]];
        Ok(spherical_patch(&[0.0; 3], &a, radius, half_angle.cos(), order))
    }

    /// Product rule on the lateral wall `∂C ∩ {r_min < |x| < r_max}` of a cap
    /// cone: composite Gauss–Legendre in the radius, trapezoid in azimuth.
    /// Normals point out of the cone (direction of increasing polar angle).
    pub fn lateral_quadrature(
        &self,
        r_min: f64,
        r_max: f64,
        radial_order: usize,
        radial_panels: usize,
        azimuths: usize,
    ) -> Result<SurfaceQuadrature> {
        let Cone::Cap { axis, half_angle } = self else {
            return Err(Error::InvalidParameter(format!(
                "lateral quadrature needs a cap cone, got {}",
                self.kind_name()
            )));
        };
        if axis.len() != 3 {
            return Err(Error::DimensionMismatch {
                expected: 3,
                got: axis.len(),
            });
        }
        if !(0.0 < r_min && r_min < r_max) || radial_order == 0 || radial_panels == 0 || azimuths == 0 {
            return Err(Error::InvalidParameter("lateral quadrature needs 0 < r_min < r_max".into()));
        }
        let a = [axis[0], axis[1], axis[2]];
        let (e1, e2) = orthonormal_frame(&a);
        let (sa, ca) = half_angle.sin_cos();
        let gl = GaussLegendre::new(radial_order);
        let dphi = 2.0 * PI / azimuths as f64;
        let mut q = SurfaceQuadrature::default();
        let width = (r_max - r_min) / radial_panels as f64;
        for p in 0..radial_panels {
            let lo = r_min + p as f64 * width;
            let hi = if p + 1 == radial_panels { r_max } else { lo + width };
            for (r, wr) in gl.on_interval(lo, hi) {
                for k in 0..azimuths {
                    let (sp, cp) = (k as f64 * dphi).sin_cos();
                    let mut x = [0.0; 3];
                    let mut n = [0.0; 3];
                    for i in 0..3 {
                        let perp = cp * e1[i] + sp * e2[i];
                        x[i] = r * (ca * a[i] + sa * perp);
                        n[i] = -sa * a[i] + ca * perp;
                    }
                    q.push(x, wr * r * sa * dphi, n);
                }
            }
        }
        Ok(q)
    }
}

/// Spherical patch `{c + r ω : ω·axis > z_min}` with outward radial normals.
fn spherical_patch(center: &[f64; 3], axis: &[f64; 3], radius: f64, z_min: f64, order: usize) -> SurfaceQuadrature {
    let gl = GaussLegendre::new(order);
    let azimuths = 2 * order;
    let dphi = 2.0 * PI / azimuths as f64;
    let (e1, e2) = orthonormal_frame(axis);
    let mut q = SurfaceQuadrature::default();
    for (z, wz) in gl.on_interval(z_min, 1.0) {
        let s = (1.0 - z * z).max(0.0).sqrt();
        for k in 0..azimuths {
            let (sp, cp) = (k as f64 * dphi).sin_cos();
            let mut n = [0.0; 3];
            let mut x = [0.0; 3];
            for i in 0..3 {
                n[i] = z * axis[i] + s * (cp * e1[i] + sp * e2[i]);
            }
            let nn = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            for i in 0..3 {
                n[i] /= nn;
                x[i] = center[i] + radius * n[i];
            }
            q.push(x, radius * radius * wz * dphi, n);
        }
    }
    q
}

/// Nodes, positive weights and unit normals of a surface rule in three
/// dimensions.
#[derive(Debug, Clone, Default)]
pub struct SurfaceQuadrature {
    pub nodes: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
    pub normals: Vec<[f64; 3]>,
}

impl SurfaceQuadrature {
    fn push(&mut self, node: [f64; 3], weight: f64, normal: [f64; 3]) {
        self.nodes.push(node);
        self.weights.push(weight);
        self.normals.push(normal);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn integrate<F: FnMut(&[f64; 3], &[f64; 3]) -> f64>(&self, mut f: F) -> f64 {
        let mut acc = crate::quadrature::NeumaierSum::default();
        for ((x, w), n) in self.nodes.iter().zip(&self.weights).zip(&self.normals) {
            acc.add(w * f(x, n));
        }
        acc.sum()
    }

    /// CSV dump with columns `x1,x2,x3,w,n1,n2,n3`.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["x1", "x2", "x3", "w", "n1", "n2", "n3"])?;
        for ((x, w), n) in self.nodes.iter().zip(&self.weights).zip(&self.normals) {
            wtr.serialize((x[0], x[1], x[2], w, n[0], n[1], n[2]))?;
        }
        wtr.flush()
    }
}

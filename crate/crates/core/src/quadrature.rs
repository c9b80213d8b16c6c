//! One-dimensional quadrature primitives shared by the surface rules and the
//! time integrals: Gauss–Legendre nodes, an adaptive panel integrator and a
//! compensated accumulator.

use std::f64::consts::PI;

/// Gauss–Legendre rule on the reference interval `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    /// Builds the `n`-point rule by Newton iteration on the Legendre
    /// three-term recurrence. Exact for polynomials of degree `2n - 1`.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() <= 1e-16 * x.abs().max(1.0) {
                    let (_, d) = legendre_with_derivative(n, x);
                    dp = d;
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Nodes and weights mapped affinely onto `[a, b]`.
    pub fn on_interval(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&x, &w)| (mid + half * x, half * w))
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let mut acc = NeumaierSum::default();
        for (x, w) in self.on_interval(a, b) {
            acc.add(w * f(x));
        }
        acc.sum()
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let d = n as f64 * (x * p - p0) / (x * x - 1.0);
    (p, d)
}

/// Adaptive bisection on top of a fixed Gauss–Legendre panel rule.
///
/// A panel is accepted when the two-half estimate agrees with the one-panel
/// estimate to within its share of `abs_tol`, with a global cap on the number
/// of splits. Panels are processed in a fixed left-to-right order so the
/// result is reproducible bit for bit.
#[derive(Debug, Clone)]
pub struct AdaptiveIntegrator {
    rule: GaussLegendre,
    abs_tol: f64,
    max_depth: u32,
    max_panels: usize,
}

impl AdaptiveIntegrator {
    pub fn new(order: usize, abs_tol: f64) -> Self {
        Self {
            rule: GaussLegendre::new(order),
            abs_tol,
            max_depth: 40,
            max_panels: 1 << 16,
        }
    }

    pub fn order(&self) -> usize {
        self.rule.len()
    }

    /// Integrates `f` over `[a, b]`, seeding the search with `initial_panels`
    /// equal sub-intervals (or geometric ones when `geometric` is set and
    /// `a > 0`).
    pub fn integrate<F: FnMut(f64) -> f64>(
        &self,
        a: f64,
        b: f64,
        initial_panels: usize,
        geometric: bool,
        mut f: F,
    ) -> f64 {
        if b == a {
            return 0.0;
        }
        let panels = initial_panels.max(1);
        let mut edges = Vec::with_capacity(panels + 1);
        for k in 0..=panels {
            let s = k as f64 / panels as f64;
            let e = if geometric && a > 0.0 && b > 0.0 {
                a * (b / a).powf(s)
            } else {
                a + (b - a) * s
            };
            edges.push(e);
        }
        edges[0] = a;
        edges[panels] = b;

        let mut total = NeumaierSum::default();
        let width = (b - a).abs();
        // splits left before every remaining panel is accepted as is
        let mut budget = self.max_panels;
        for pair in edges.windows(2) {
            let (lo, hi) = (pair[0], pair[1]);
            let whole = self.rule.integrate(lo, hi, &mut f);
            // explicit stack of (lo, hi, estimate, depth), left-most first
            let mut stack = vec![(lo, hi, whole, 0u32)];
            while let Some((lo, hi, est, depth)) = stack.pop() {
                let mid = 0.5 * (lo + hi);
                let left = self.rule.integrate(lo, mid, &mut f);
                let right = self.rule.integrate(mid, hi, &mut f);
                let refined = left + right;
                let share = self.abs_tol * ((hi - lo).abs() / width).max(1e-6);
                if (refined - est).abs() <= share || depth >= self.max_depth || budget == 0 {
                    total.add(refined);
                } else {
                    budget -= 1;
                    stack.push((mid, hi, right, depth + 1));
                    stack.push((lo, mid, left, depth + 1));
                }
            }
        }
        total.sum()
    }
}

/// Kahan–Babuška–Neumaier compensated summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    compensation: f64,
}

impl NeumaierSum {
    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn sum(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl std::iter::Sum<f64> for NeumaierSum {
    fn sum<I: Iterator<Item = f64>>(iter: I) -> Self {
        let mut acc = NeumaierSum::default();
        for v in iter {
            acc.add(v);
        }
        acc
    }
}

/// Standard normal cumulative distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

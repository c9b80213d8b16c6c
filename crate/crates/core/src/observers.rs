//! Streaming per-path functionals and their mergeable aggregates.
//!
//! Sign conventions:
//! - bounded domains count outward crossings as `+1`, so the per-path net is
//!   `χ_D(X₀) − χ_D(X_T)` and a source has positive mean flux;
//! - truncated cones `C ∩ B_R^c` count entries as `+1`, so the net is
//!   `χ(X_T) − χ(X₀)`, which tends to `χ_C(v∞)` for large `R` and `T`.

use std::sync::Arc;

use crate::error::Result;
use crate::geometry::{Cone, Domain};
use crate::stats::{EstimateSummary, IntegerTally, Moments};
use crate::vector::dot;

/// Membership-transition counter for one path and one region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrossingCounter {
    inside: bool,
    initial: bool,
    n_out: u64,
    n_in: u64,
}

impl CrossingCounter {
    pub fn new(initially_inside: bool) -> Self {
        Self {
            inside: initially_inside,
            initial: initially_inside,
            n_out: 0,
            n_in: 0,
        }
    }

    #[inline]
    pub fn update(&mut self, inside: bool) {
        match (self.inside, inside) {
            (true, false) => self.n_out += 1,
            (false, true) => self.n_in += 1,
            _ => {}
        }
        self.inside = inside;
    }

    pub fn is_inside(&self) -> bool {
        self.inside
    }

    pub fn initially_inside(&self) -> bool {
        self.initial
    }

    pub fn n_out(&self) -> u64 {
        self.n_out
    }

    pub fn n_in(&self) -> u64 {
        self.n_in
    }

    /// `n_out − n_in`; always equals `χ(start) − χ(now)`.
    pub fn net_outward(&self) -> i64 {
        self.n_out as i64 - self.n_in as i64
    }

    pub fn net_inward(&self) -> i64 {
        -self.net_outward()
    }
}

/// Advances `counter` with the membership of the next path point.
pub fn update_crossings<F>(counter: &mut CrossingCounter, x_next: &[f64], region: F)
where
    F: Fn(&[f64]) -> bool,
{
    counter.update(region(x_next));
}

/// Signed crossing count of one path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FluxSample {
    pub net: i64,
    /// Crossings counted `+1` under the region's sign convention.
    pub n_plus: u64,
    /// Crossings counted `−1`.
    pub n_minus: u64,
    pub truncation_ok: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FluxObservation {
    pub sample: FluxSample,
    /// Net count accumulated up to each checkpoint time.
    pub checkpoint_nets: Vec<i64>,
    /// Net count agrees with the endpoint memberships.
    pub telescoping_ok: bool,
}

/// Finalized output of one observer on one path.
#[derive(Debug, Clone, PartialEq)]
pub enum Observation {
    Flux(FluxObservation),
    Indicator(bool),
    /// Last grid time strictly inside the ball; `None` if never inside.
    LastExit(Option<f64>),
    /// `X_t / t` at each checkpoint time.
    Scaled(Vec<Vec<f64>>),
}

/// A streaming functional of one path. `start` sees the initial state,
/// `observe` every subsequent grid state, `finish` the final state again.
pub trait PathObserver: Send {
    fn start(&mut self, t: f64, x: &[f64]);
    fn observe(&mut self, t: f64, x: &[f64]);
    fn finish(self: Box<Self>, t: f64, x: &[f64]) -> Observation;
}

#[inline]
fn norm_sq(x: &[f64]) -> f64 {
    dot(x, x)
}

pub struct DomainFluxObserver {
    domain: Arc<Domain>,
    checkpoints: Arc<[f64]>,
    escape_radius: f64,
    counter: CrossingCounter,
    next_checkpoint: usize,
    checkpoint_nets: Vec<i64>,
}

impl DomainFluxObserver {
    pub fn new(domain: Arc<Domain>, checkpoints: Arc<[f64]>, escape_radius: f64) -> Self {
        Self {
            domain,
            checkpoints,
            escape_radius,
            counter: CrossingCounter::new(false),
            next_checkpoint: 0,
            checkpoint_nets: Vec::new(),
        }
    }

    fn record_checkpoints(&mut self, t: f64) {
        while self.next_checkpoint < self.checkpoints.len() && t >= self.checkpoints[self.next_checkpoint] {
            self.checkpoint_nets.push(self.counter.net_outward());
            self.next_checkpoint += 1;
        }
    }
}

impl PathObserver for DomainFluxObserver {
    fn start(&mut self, t: f64, x: &[f64]) {
        self.counter = CrossingCounter::new(self.domain.contains(x));
        self.checkpoint_nets.clear();
        self.next_checkpoint = 0;
        self.record_checkpoints(t);
    }

    #[inline]
    fn observe(&mut self, t: f64, x: &[f64]) {
        self.counter.update(self.domain.contains(x));
        if self.next_checkpoint < self.checkpoints.len() {
            self.record_checkpoints(t);
        }
    }

    fn finish(self: Box<Self>, _t: f64, x: &[f64]) -> Observation {
        let end_inside = self.domain.contains(x);
        let net = self.counter.net_outward();
        let telescoping_ok = net == self.counter.initially_inside() as i64 - end_inside as i64;
        let truncation_ok = !end_inside && norm_sq(x) > self.escape_radius * self.escape_radius;
        Observation::Flux(FluxObservation {
            sample: FluxSample {
                net,
                n_plus: self.counter.n_out(),
                n_minus: self.counter.n_in(),
                truncation_ok,
            },
            checkpoint_nets: self.checkpoint_nets,
            telescoping_ok,
        })
    }
}

/// Region `C ∩ B_R^c`: strictly inside the cone and strictly outside the
/// closed ball of radius `R`.
#[derive(Debug, Clone)]
pub struct TruncatedCone {
    pub cone: Arc<Cone>,
    pub radius: f64,
}

impl TruncatedCone {
    #[inline]
    pub fn contains(&self, x: &[f64]) -> bool {
        norm_sq(x) > self.radius * self.radius && self.cone.contains(x)
    }
}

pub struct TruncatedConeObserver {
    region: TruncatedCone,
    escape_radius: f64,
    counter: CrossingCounter,
}

impl TruncatedConeObserver {
    pub fn new(region: TruncatedCone, escape_radius: f64) -> Self {
        Self {
            region,
            escape_radius,
            counter: CrossingCounter::new(false),
        }
    }
}

impl PathObserver for TruncatedConeObserver {
    fn start(&mut self, _t: f64, x: &[f64]) {
        self.counter = CrossingCounter::new(self.region.contains(x));
    }

    #[inline]
    fn observe(&mut self, _t: f64, x: &[f64]) {
        self.counter.update(self.region.contains(x));
    }

    fn finish(self: Box<Self>, _t: f64, x: &[f64]) -> Observation {
        let end_inside = self.region.contains(x);
        let net = self.counter.net_inward();
        let telescoping_ok = net == end_inside as i64 - self.counter.initially_inside() as i64;
        Observation::Flux(FluxObservation {
            sample: FluxSample {
                net,
                n_plus: self.counter.n_in(),
                n_minus: self.counter.n_out(),
                truncation_ok: norm_sq(x) > self.escape_radius * self.escape_radius,
            },
            checkpoint_nets: Vec::new(),
            telescoping_ok,
        })
    }
}

/// `χ_C(X_T / T)`, the direct estimator of `χ_C(v∞)`.
pub struct AsymptoticIndicator {
    cone: Arc<Cone>,
}

impl AsymptoticIndicator {
    pub fn new(cone: Arc<Cone>) -> Self {
        Self { cone }
    }

    pub fn evaluate(cone: &Cone, t: f64, x: &[f64]) -> bool {
        let scaled: Vec<f64> = x.iter().map(|xi| xi / t).collect();
        cone.contains(&scaled)
    }
}

impl PathObserver for AsymptoticIndicator {
    fn start(&mut self, _t: f64, _x: &[f64]) {}

    fn observe(&mut self, _t: f64, _x: &[f64]) {}

    fn finish(self: Box<Self>, t: f64, x: &[f64]) -> Observation {
        Observation::Indicator(Self::evaluate(&self.cone, t, x))
    }
}

/// Last grid time with `‖X_t‖ < R`, a lower bound for the last exit time
/// `τ_R` on the truncated horizon.
pub struct LastExitObserver {
    radius: f64,
    last_inside: Option<f64>,
}

impl LastExitObserver {
    pub fn new(radius: f64) -> Self {
        Self {
            radius,
            last_inside: None,
        }
    }
}

impl PathObserver for LastExitObserver {
    fn start(&mut self, t: f64, x: &[f64]) {
        self.last_inside = (norm_sq(x) < self.radius * self.radius).then_some(t);
    }

    #[inline]
    fn observe(&mut self, t: f64, x: &[f64]) {
        if norm_sq(x) < self.radius * self.radius {
            self.last_inside = Some(t);
        }
    }

    fn finish(self: Box<Self>, _t: f64, _x: &[f64]) -> Observation {
        Observation::LastExit(self.last_inside)
    }
}

/// Records `X_t / t` at fixed checkpoint times.
pub struct ScaledPositionObserver {
    times: Arc<[f64]>,
    next: usize,
    values: Vec<Vec<f64>>,
}

impl ScaledPositionObserver {
    pub fn new(times: Arc<[f64]>) -> Self {
        Self {
            times,
            next: 0,
            values: Vec::new(),
        }
    }

    fn record(&mut self, t: f64, x: &[f64]) {
        while self.next < self.times.len() && t >= self.times[self.next] {
            self.values.push(x.iter().map(|xi| xi / t).collect());
            self.next += 1;
        }
    }
}

impl PathObserver for ScaledPositionObserver {
    fn start(&mut self, t: f64, x: &[f64]) {
        self.next = 0;
        self.values.clear();
        self.record(t, x);
    }

    #[inline]
    fn observe(&mut self, t: f64, x: &[f64]) {
        if self.next < self.times.len() {
            self.record(t, x);
        }
    }

    fn finish(self: Box<Self>, _t: f64, _x: &[f64]) -> Observation {
        Observation::Scaled(self.values)
    }
}

/// Recipe for a per-path observer plus its empty aggregate. Acts as the
/// observer factory for batch runs.
#[derive(Debug, Clone)]
pub enum ObserverSpec {
    DomainFlux {
        domain: Arc<Domain>,
        checkpoints: Arc<[f64]>,
        escape_radius: f64,
        keep_samples: bool,
    },
    TruncatedCone {
        region: TruncatedCone,
        escape_radius: f64,
        keep_samples: bool,
    },
    AsymptoticIndicator {
        cone: Arc<Cone>,
    },
    LastExit {
        radius: f64,
        /// Paths whose proxy exceeds this time count as late exits.
        late_after: f64,
    },
    ScaledPositions {
        times: Arc<[f64]>,
    },
}

impl ObserverSpec {
    pub fn domain_flux(domain: Domain, checkpoints: Vec<f64>) -> Self {
        let escape_radius = domain.bounding_radius();
        ObserverSpec::DomainFlux {
            domain: Arc::new(domain),
            checkpoints: checkpoints.into(),
            escape_radius,
            keep_samples: false,
        }
    }

    pub fn truncated_cone(cone: Cone, radius: f64) -> Self {
        ObserverSpec::TruncatedCone {
            region: TruncatedCone {
                cone: Arc::new(cone),
                radius,
            },
            escape_radius: radius,
            keep_samples: false,
        }
    }

    pub fn build(&self) -> Box<dyn PathObserver> {
        match self {
            ObserverSpec::DomainFlux {
                domain,
                checkpoints,
                escape_radius,
                ..
            } => Box::new(DomainFluxObserver::new(domain.clone(), checkpoints.clone(), *escape_radius)),
            ObserverSpec::TruncatedCone {
                region, escape_radius, ..
            } => Box::new(TruncatedConeObserver::new(region.clone(), *escape_radius)),
            ObserverSpec::AsymptoticIndicator { cone } => Box::new(AsymptoticIndicator::new(cone.clone())),
            ObserverSpec::LastExit { radius, .. } => Box::new(LastExitObserver::new(*radius)),
            ObserverSpec::ScaledPositions { times } => Box::new(ScaledPositionObserver::new(times.clone())),
        }
    }

    pub fn empty_tally(&self) -> Tally {
        match self {
            ObserverSpec::DomainFlux {
                checkpoints,
                keep_samples,
                ..
            } => Tally::Flux(FluxTally::new(checkpoints.len(), *keep_samples)),
            ObserverSpec::TruncatedCone { keep_samples, .. } => Tally::Flux(FluxTally::new(0, *keep_samples)),
            ObserverSpec::AsymptoticIndicator { .. } => Tally::Indicator(IntegerTally::default()),
            ObserverSpec::LastExit { late_after, .. } => Tally::LastExit(LastExitTally {
                late_after: *late_after,
                ..LastExitTally::default()
            }),
            ObserverSpec::ScaledPositions { times } => Tally::Scaled(ScaledTally {
                times: times.to_vec(),
                moments: vec![Vec::new(); times.len()],
            }),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FluxTally {
    pub net: IntegerTally,
    pub n_plus: u64,
    pub n_minus: u64,
    pub truncation_failures: u64,
    pub telescoping_violations: u64,
    pub checkpoints: Vec<IntegerTally>,
    /// Per-path samples in path order, when requested.
    pub samples: Option<Vec<(u64, FluxSample)>>,
}

impl FluxTally {
    pub fn new(checkpoints: usize, keep_samples: bool) -> Self {
        Self {
            checkpoints: vec![IntegerTally::default(); checkpoints],
            samples: keep_samples.then(Vec::new),
            ..Self::default()
        }
    }

    pub fn paths(&self) -> u64 {
        self.net.n
    }

    pub fn summary(&self) -> Result<EstimateSummary> {
        self.net.summary()
    }

    pub fn truncation_fraction(&self) -> f64 {
        if self.net.n == 0 {
            0.0
        } else {
            self.truncation_failures as f64 / self.net.n as f64
        }
    }

    fn record(&mut self, path_index: u64, obs: FluxObservation) {
        let s = obs.sample;
        self.net.push(s.net);
        self.n_plus += s.n_plus;
        self.n_minus += s.n_minus;
        self.truncation_failures += (!s.truncation_ok) as u64;
        self.telescoping_violations += (!obs.telescoping_ok) as u64;
        for (tally, net) in self.checkpoints.iter_mut().zip(&obs.checkpoint_nets) {
            tally.push(*net);
        }
        if let Some(samples) = &mut self.samples {
            samples.push((path_index, s));
        }
    }

    fn merge(&mut self, other: FluxTally) {
        self.net.merge(&other.net);
        self.n_plus += other.n_plus;
        self.n_minus += other.n_minus;
        self.truncation_failures += other.truncation_failures;
        self.telescoping_violations += other.telescoping_violations;
        for (a, b) in self.checkpoints.iter_mut().zip(&other.checkpoints) {
            a.merge(b);
        }
        if let (Some(a), Some(b)) = (&mut self.samples, other.samples) {
            a.extend(b);
        }
    }

    pub fn write_samples_csv<W: std::io::Write>(&self, out: W) -> std::io::Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["path_index", "net", "n_plus", "n_minus", "truncation_ok"])?;
        for (i, s) in self.samples.iter().flatten() {
            wtr.serialize((i, s.net, s.n_plus, s.n_minus, s.truncation_ok))?;
        }
        wtr.flush()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LastExitTally {
    pub n: u64,
    pub never_inside: u64,
    pub late_exits: u64,
    pub late_after: f64,
    pub times: Moments,
}

impl LastExitTally {
    pub fn late_fraction(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.late_exits as f64 / self.n as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScaledTally {
    pub times: Vec<f64>,
    /// `moments[checkpoint][coordinate]`.
    pub moments: Vec<Vec<Moments>>,
}

/// Aggregate of one observer over many paths.
#[derive(Debug, Clone, PartialEq)]
pub enum Tally {
    Flux(FluxTally),
    Indicator(IntegerTally),
    LastExit(LastExitTally),
    Scaled(ScaledTally),
}

impl Tally {
    pub fn record(&mut self, path_index: u64, obs: Observation) {
        match (self, obs) {
            (Tally::Flux(t), Observation::Flux(o)) => t.record(path_index, o),
            (Tally::Indicator(t), Observation::Indicator(hit)) => t.push(hit as i64),
            (Tally::LastExit(t), Observation::LastExit(last)) => {
                t.n += 1;
                match last {
                    None => t.never_inside += 1,
                    Some(time) => {
                        t.times.push(time);
                        t.late_exits += (time > t.late_after) as u64;
                    }
                }
            }
            (Tally::Scaled(t), Observation::Scaled(values)) => {
                for (slot, v) in t.moments.iter_mut().zip(values) {
                    if slot.is_empty() {
                        slot.resize(v.len(), Moments::default());
                    }
                    for (m, x) in slot.iter_mut().zip(v) {
                        m.push(x);
                    }
                }
            }
            (tally, obs) => panic!("observation {obs:?} does not match tally {tally:?}"),
        }
    }

    /// Merges `other` (the aggregate of later paths) into `self`.
    pub fn merge(&mut self, other: Tally) {
        match (self, other) {
            (Tally::Flux(a), Tally::Flux(b)) => a.merge(b),
            (Tally::Indicator(a), Tally::Indicator(b)) => a.merge(&b),
            (Tally::LastExit(a), Tally::LastExit(b)) => {
                a.n += b.n;
                a.never_inside += b.never_inside;
                a.late_exits += b.late_exits;
                a.times.merge(&b.times);
            }
            (Tally::Scaled(a), Tally::Scaled(b)) => {
                for (sa, sb) in a.moments.iter_mut().zip(b.moments) {
                    if sa.is_empty() {
                        *sa = sb;
                    } else {
                        for (ma, mb) in sa.iter_mut().zip(&sb) {
                            ma.merge(mb);
                        }
                    }
                }
            }
            (a, b) => panic!("cannot merge {b:?} into {a:?}"),
        }
    }

    pub fn as_flux(&self) -> Option<&FluxTally> {
        match self {
            Tally::Flux(t) => Some(t),
            _ => None,
        }
    }

    pub fn as_indicator(&self) -> Option<&IntegerTally> {
        match self {
            Tally::Indicator(t) => Some(t),
            _ => None,
        }
    }

    pub fn as_last_exit(&self) -> Option<&LastExitTally> {
        match self {
            Tally::LastExit(t) => Some(t),
            _ => None,
        }
    }

    pub fn as_scaled(&self) -> Option<&ScaledTally> {
        match self {
            Tally::Scaled(t) => Some(t),
            _ => None,
        }
    }
}

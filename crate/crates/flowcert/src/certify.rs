//! Certificate search and validation.
//!
//! The search grows an interval reach set from the initial raster in
//! steps of `delta` until one of three things happens: the set touches
//! the unsafe raster or leaves the box (suspected unsafe, confirmed only
//! by an actual sampled trajectory), the set absorbs its own `delta`-step
//! image at half margin (a certificate exists), or the horizon budget
//! runs out. The certificate emitted is the half-margin interval reach of
//! the stabilized set, which buys wiggle room: proving invariance at
//! margin eps/2 leaves the other eps/2 to pay for discretization.

use crate::flow::{sample_disturbed_trajectory, IntegratorConfig, TrajectorySample};
use crate::grid::{rasterize_set, GridError, GridShape, OccupancyGrid};
use crate::problem::SafetyProblem;
use crate::reach::{step_reach_composed, ReachAccumulator, ReachParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CertifyError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CertStatus {
    Found,
    UnsafeSuspect,
    Inconclusive,
}

#[derive(Debug, Clone)]
pub struct CertificateResult {
    pub status: CertStatus,
    /// The certificate set; present when status is Found.
    pub v: Option<OccupancyGrid>,
    pub t_found: Option<f64>,
    /// Margin the search ran at (the certificate is good for eps/2).
    pub eps: f64,
    /// Confirming disturbed trajectory; present when status is
    /// UnsafeSuspect. Ends at its first unsafe state, or at the last
    /// in-box state when it escaped.
    pub witness: Option<TrajectorySample>,
}

#[derive(Debug, Clone)]
pub struct SearchOptions {
    /// Reach sub-step; defaults to delta/8.
    pub dt_sub: Option<f64>,
    /// Lipschitz bound; estimated from the field when absent.
    pub lip: Option<f64>,
    pub seed: u64,
    /// Sampled trajectories spent trying to confirm a suspected unsafe
    /// contact before settling for inconclusive.
    pub falsification_trials: usize,
}

impl Default for SearchOptions {
    fn default() -> SearchOptions {
        SearchOptions {
            dt_sub: None,
            lip: None,
            seed: 0,
            falsification_trials: 256,
        }
    }
}

pub fn search_certificate(
    p: &SafetyProblem,
    eps: f64,
    delta: f64,
    t_max: f64,
    shape: &GridShape,
) -> Result<CertificateResult, CertifyError> {
    search_certificate_with(p, eps, delta, t_max, shape, &SearchOptions::default())
}

pub fn search_certificate_with(
    p: &SafetyProblem,
    eps: f64,
    delta: f64,
    t_max: f64,
    shape: &GridShape,
    opts: &SearchOptions,
) -> Result<CertificateResult, CertifyError> {
    if !(eps > 0.0) {
        return Err(CertifyError::Parameter(format!(
            "margin must be positive, got {eps}"
        )));
    }
    if !(delta > 0.0) {
        return Err(CertifyError::Parameter(format!(
            "step must be positive, got {delta}"
        )));
    }
    if !(t_max >= delta) {
        return Err(CertifyError::Parameter(format!(
            "search horizon {t_max} is shorter than one step {delta}"
        )));
    }
    let (rp, rp_half, m) = resolve_params(p, eps, delta, opts);

    let raster_i = rasterize_set(&p.init, shape);
    if raster_i.is_empty() {
        return Err(CertifyError::Parameter(
            "initial set rasterizes to no cells".into(),
        ));
    }
    let raster_u = rasterize_set(&p.unsafe_set, shape);

    let mut acc = ReachAccumulator::new(&raster_i);
    let steps = (t_max / delta + 1e-9).floor() as usize;
    for k in 0..=steps {
        let t = k as f64 * delta;
        let w = &acc.w;
        if acc.escaped() || !w.is_disjoint(&raster_u)? {
            return Ok(finish_suspect(p, &raster_i, eps, t, delta, opts));
        }
        let composed = step_reach_composed(w, p, &rp_half, delta / m as f64, m);
        if !composed.escaped && composed.subset(w)? {
            let v = crate::reach::reach_interval(w, p, &rp_half, delta);
            return Ok(CertificateResult {
                status: CertStatus::Found,
                v: Some(v),
                t_found: Some(t),
                eps,
                witness: None,
            });
        }
        if k < steps {
            acc.advance(p, &rp, m);
        }
    }
    Ok(CertificateResult {
        status: CertStatus::Inconclusive,
        v: None,
        t_found: None,
        eps,
        witness: None,
    })
}

fn resolve_params(
    p: &SafetyProblem,
    eps: f64,
    delta: f64,
    opts: &SearchOptions,
) -> (ReachParams, ReachParams, usize) {
    let dt_sub = opts.dt_sub.unwrap_or(delta / 8.0);
    let lip = opts
        .lip
        .unwrap_or_else(|| crate::flow::lipschitz_estimate(p, 2048));
    let m = ((delta / dt_sub) - 1e-9).ceil().max(1.0) as usize;
    (
        ReachParams::new(eps, dt_sub, lip),
        ReachParams::new(eps * 0.5, dt_sub, lip),
        m,
    )
}

/// The grid flagged an unsafe contact at time `t`; hunt for a sampled
/// trajectory that actually misbehaves. Without one the verdict stays
/// inconclusive, since the over-approximation may be crying wolf.
fn finish_suspect(
    p: &SafetyProblem,
    raster_i: &OccupancyGrid,
    eps: f64,
    t: f64,
    delta: f64,
    opts: &SearchOptions,
) -> CertificateResult {
    let horizon = t + 2.0 * delta;
    let cfg = IntegratorConfig::default();
    let starts: Vec<usize> = raster_i.iter_occupied().collect();
    for trial in 0..opts.falsification_trials as u64 {
        let mut rng = trial_rng(opts.seed, trial);
        let Some(x0) = draw_init_point(p, raster_i, &starts, &mut rng) else {
            continue;
        };
        let sample = sample_disturbed_trajectory(p, &x0, horizon, eps, rng.gen(), &cfg);
        if let Some(witness) = confirm_witness(p, sample) {
            return CertificateResult {
                status: CertStatus::UnsafeSuspect,
                v: None,
                t_found: None,
                eps,
                witness: Some(witness),
            };
        }
    }
    CertificateResult {
        status: CertStatus::Inconclusive,
        v: None,
        t_found: None,
        eps,
        witness: None,
    }
}

fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x100_0000_01b3).wrapping_add(trial))
}

/// Uniform point in a random initial-raster cell, rejected until it
/// actually satisfies the initial predicate (rasters sample corners, so
/// a cell can overhang the set).
fn draw_init_point(
    p: &SafetyProblem,
    raster_i: &OccupancyGrid,
    starts: &[usize],
    rng: &mut ChaCha8Rng,
) -> Option<Vec<f64>> {
    for _ in 0..64 {
        let flat = starts[rng.gen_range(0..starts.len())];
        let (lo, hi) = raster_i.shape.cell_bounds(flat);
        let x: Vec<f64> = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| rng.gen_range(*l..=*h))
            .collect();
        if p.init.eval(&x) {
            return Some(x);
        }
    }
    None
}

/// Truncate a sampled trajectory at its first unsafe state; a sample
/// that left the box counts whole.
fn confirm_witness(p: &SafetyProblem, sample: TrajectorySample) -> Option<TrajectorySample> {
    if let Some(hit) = sample.states.iter().position(|s| p.unsafe_set.eval(s)) {
        return Some(TrajectorySample {
            times: sample.times[..=hit].to_vec(),
            states: sample.states[..=hit].to_vec(),
            epsilon: sample.epsilon,
            truncated: false,
            seed: sample.seed,
        });
    }
    if sample.truncated {
        return Some(sample);
    }
    None
}

/// The three certificate conditions, checked independently of how V was
/// produced.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    /// raster(I) is contained in V.
    pub init_subset: bool,
    /// The delta-step image of V at the given margin stays in V, both as
    /// a composed grid bound and on sampled disturbed trajectories.
    pub delta_invariant: bool,
    /// V avoids raster(U).
    pub unsafe_disjoint: bool,
    #[serde(skip)]
    pub sampled_violations: usize,
}

impl ValidationReport {
    pub fn all_pass(&self) -> bool {
        self.init_subset && self.delta_invariant && self.unsafe_disjoint
    }
}

pub fn validate_certificate(
    v: &OccupancyGrid,
    p: &SafetyProblem,
    eps: f64,
    delta: f64,
    trials: usize,
) -> Result<ValidationReport, CertifyError> {
    validate_certificate_with(v, p, eps, delta, trials, &SearchOptions::default())
}

pub fn validate_certificate_with(
    v: &OccupancyGrid,
    p: &SafetyProblem,
    eps: f64,
    delta: f64,
    trials: usize,
    opts: &SearchOptions,
) -> Result<ValidationReport, CertifyError> {
    if v.shape.lo != p.domain.lo || v.shape.hi != p.domain.hi {
        return Err(CertifyError::Parameter(
            "certificate grid does not cover the problem domain box".into(),
        ));
    }
    if !(eps > 0.0) || !(delta > 0.0) {
        return Err(CertifyError::Parameter(
            "margin and step must be positive".into(),
        ));
    }
    let (rp, _, m) = resolve_params(p, eps, delta, opts);

    let init_subset = rasterize_set(&p.init, &v.shape).subset(v)?;
    let unsafe_disjoint = v.is_disjoint(&rasterize_set(&p.unsafe_set, &v.shape))?;

    let composed = step_reach_composed(v, p, &rp, delta / m as f64, m);
    let grid_invariant = !composed.escaped && composed.subset(v)?;

    let cfg = IntegratorConfig::default();
    let cells: Vec<usize> = v.iter_occupied().collect();
    let mut sampled_violations = 0;
    if !cells.is_empty() {
        for trial in 0..trials as u64 {
            let mut rng = trial_rng(opts.seed, trial);
            let flat = cells[rng.gen_range(0..cells.len())];
            let (lo, hi) = v.shape.cell_bounds(flat);
            let x0: Vec<f64> = lo
                .iter()
                .zip(&hi)
                .map(|(l, h)| rng.gen_range(*l..=*h))
                .collect();
            let sample = sample_disturbed_trajectory(p, &x0, delta, eps, rng.gen(), &cfg);
            if sample.truncated || !crate::reach::covers_state(v, sample.states.last().unwrap()) {
                sampled_violations += 1;
            }
        }
    }

    Ok(ValidationReport {
        init_subset,
        delta_invariant: grid_invariant && sampled_violations == 0,
        unsafe_disjoint,
        sampled_violations,
    })
}

/// Serializable summary of a search plus validation run.
#[derive(Debug, Clone, Serialize)]
pub struct CertifyReport {
    pub status: CertStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_found: Option<f64>,
    pub eps: f64,
    pub delta: f64,
    pub grid: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verdicts: Option<ValidationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness_csv_path: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::by_name;
    use crate::problem::parse_predicate;

    fn interval_hull(g: &OccupancyGrid) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for flat in g.iter_occupied() {
            let (l, h) = g.shape.cell_bounds(flat);
            lo = lo.min(l[0]);
            hi = hi.max(h[0]);
        }
        (lo, hi)
    }

    #[test]
    fn contracting_1d_finds_immediately() {
        let p = by_name("lin1d-stable").unwrap().problem();
        let shape = GridShape::uniform(&p.domain, 512);
        let r = search_certificate(&p, 0.1, 0.5, 5.0, &shape).unwrap();
        assert_eq!(r.status, CertStatus::Found);
        let t = r.t_found.unwrap();
        assert!(t <= 1.0, "t_found = {t}");
        assert_eq!(t, 0.0, "initial raster is already invariant here");
        let v = r.v.unwrap();
        let (lo, hi) = interval_hull(&v);
        assert!(lo >= -0.75 && hi <= 0.75, "V hull [{lo}, {hi}]");
        assert!(rasterize_set(&p.init, &shape).subset(&v).unwrap());
    }

    #[test]
    fn found_implies_validation_at_half_margin() {
        let p = by_name("lin1d-stable").unwrap().problem();
        let shape = GridShape::uniform(&p.domain, 512);
        let r = search_certificate(&p, 0.1, 0.5, 5.0, &shape).unwrap();
        let v = r.v.unwrap();
        let report = validate_certificate(&v, &p, 0.05, 0.5, 10_000).unwrap();
        assert!(report.init_subset);
        assert!(report.delta_invariant);
        assert!(report.unsafe_disjoint);
        assert_eq!(report.sampled_violations, 0);
    }

    #[test]
    fn unstable_1d_is_suspect_with_a_real_witness() {
        let p = by_name("lin1d-unstable").unwrap().problem();
        let shape = GridShape::uniform(&p.domain, 512);
        let r = search_certificate(&p, 0.1, 0.5, 10.0, &shape).unwrap();
        assert_eq!(r.status, CertStatus::UnsafeSuspect);
        let w = r.witness.unwrap();
        assert!(p.init.eval(&w.states[0]), "witness starts in the initial set");
        let last = w.states.last().unwrap();
        assert!(
            p.unsafe_set.eval(last) || w.truncated,
            "witness ends unsafe or out of the box, got {last:?}"
        );
    }

    #[test]
    fn raising_the_margin_keeps_the_suspicion() {
        let p = by_name("lin1d-unstable").unwrap().problem();
        let shape = GridShape::uniform(&p.domain, 256);
        let a = search_certificate(&p, 0.1, 0.5, 10.0, &shape).unwrap();
        let b = search_certificate(&p, 0.2, 0.5, 10.0, &shape).unwrap();
        assert_eq!(a.status, CertStatus::UnsafeSuspect);
        assert_eq!(b.status, CertStatus::UnsafeSuspect);
    }

    #[test]
    fn parameter_errors() {
        let p = by_name("lin1d-stable").unwrap().problem();
        let shape = GridShape::uniform(&p.domain, 64);
        for (eps, delta, t_max) in [(0.1, 0.5, 0.0), (0.0, 0.5, 5.0), (0.1, 0.0, 5.0)] {
            let r = search_certificate(&p, eps, delta, t_max, &shape);
            assert!(matches!(r, Err(CertifyError::Parameter(_))), "{eps} {delta} {t_max}");
        }
        let v = OccupancyGrid::full(shape);
        let q = by_name("spiral2d").unwrap().problem();
        assert!(matches!(
            validate_certificate(&v, &q, 0.1, 0.5, 10),
            Err(CertifyError::Parameter(_))
        ));
    }

    #[test]
    fn the_initial_raster_is_itself_a_certificate_here() {
        // The disturbed dynamics point inward everywhere on [-0.507, 0.507],
        // so the raster of I alone passes all three checks. A checker that
        // bloats per sub-step would reject it; this one is sharp enough not to.
        let p = by_name("lin1d-stable").unwrap().problem();
        let shape = GridShape::uniform(&p.domain, 512);
        let v = rasterize_set(&p.init, &shape);
        let report = validate_certificate(&v, &p, 0.1, 0.5, 2000).unwrap();
        assert!(report.init_subset);
        assert!(report.delta_invariant, "violations: {}", report.sampled_violations);
        assert!(report.unsafe_disjoint);
    }

    #[test]
    fn off_center_interval_is_not_invariant() {
        // cells of roughly [0.3, 0.5]; disturbed flow drains toward the
        // origin and out the bottom
        let p = by_name("lin1d-stable").unwrap().problem();
        let shape = GridShape::uniform(&p.domain, 512);
        let v = rasterize_set(&parse_predicate("(x1 - 0.4)^2 <= 0.01", 1).unwrap(), &shape);
        let report = validate_certificate(&v, &p, 0.1, 0.5, 2000).unwrap();
        assert!(!report.delta_invariant);
        assert!(report.sampled_violations > 0, "samples exit below 0.3 too");
    }

    #[test]
    fn full_grid_touches_the_unsafe_set() {
        let p = by_name("lin1d-stable").unwrap().problem();
        let shape = GridShape::uniform(&p.domain, 512);
        let v = OccupancyGrid::full(shape);
        let report = validate_certificate(&v, &p, 0.1, 0.5, 100).unwrap();
        assert!(!report.unsafe_disjoint);
    }

    #[test]
    fn step_invariance_survives_the_interval_closure() {
        // once the composed step image of W fits in W, the same holds for
        // the interval reach V built from W
        let p = by_name("lin1d-stable").unwrap().problem();
        let shape = GridShape::uniform(&p.domain, 512);
        let w = rasterize_set(&p.init, &shape);
        let rp_half = ReachParams::new(0.05, 0.0625, 1.2);
        let composed = step_reach_composed(&w, &p, &rp_half, 0.0625, 8);
        assert!(composed.subset(&w).unwrap(), "precondition of the property");
        let v = crate::reach::reach_interval(&w, &p, &rp_half, 0.5);
        let composed_v = step_reach_composed(&v, &p, &rp_half, 0.0625, 8);
        assert!(composed_v.subset(&v).unwrap());
    }

    #[test]
    fn spiral_finds_and_validates() {
        let b = by_name("spiral2d").unwrap();
        let p = b.problem();
        let shape = GridShape::uniform(&p.domain, 256);
        let r = search_certificate(&p, 0.05, 0.5, 10.0, &shape).unwrap();
        assert_eq!(r.status, CertStatus::Found, "t_found {:?}", r.t_found);
        let v = r.v.unwrap();
        assert!(v.is_disjoint(&rasterize_set(&p.unsafe_set, &shape)).unwrap());
        let report = validate_certificate(&v, &p, 0.025, 0.5, 2000).unwrap();
        assert!(report.all_pass(), "verdicts {report:?}");
    }

    #[test]
    fn coarse_spiral_grid_cries_wolf_but_cannot_confirm() {
        // at 64 cells per axis the per-step cell bloat outruns the
        // contraction, the reach set creeps into the unsafe raster, and
        // no sampled trajectory backs the alarm up
        let b = by_name("spiral2d").unwrap();
        let p = b.problem();
        let shape = GridShape::uniform(&p.domain, 64);
        let r = search_certificate(&p, 0.05, 0.5, 10.0, &shape).unwrap();
        assert_eq!(r.status, CertStatus::Inconclusive);
        assert!(r.witness.is_none());
    }

    #[test]
    fn report_serialization_shape() {
        let report = CertifyReport {
            status: CertStatus::UnsafeSuspect,
            t_found: None,
            eps: 0.1,
            delta: 0.5,
            grid: vec![512],
            verdicts: None,
            witness_csv_path: Some("w.csv".into()),
        };
        let json = serde_json::to_string(&report).unwrap();
        assert_eq!(
            json,
            r#"{"status":"unsafe-suspect","eps":0.1,"delta":0.5,"grid":[512],"witness_csv_path":"w.csv"}"#
        );
        let found = CertifyReport {
            status: CertStatus::Found,
            t_found: Some(0.0),
            eps: 0.1,
            delta: 0.5,
            grid: vec![512],
            verdicts: Some(ValidationReport {
                init_subset: true,
                delta_invariant: true,
                unsafe_disjoint: true,
                sampled_violations: 0,
            }),
            witness_csv_path: None,
        };
        let json = serde_json::to_string(&found).unwrap();
        assert_eq!(
            json,
            r#"{"status":"found","t_found":0.0,"eps":0.1,"delta":0.5,"grid":[512],"verdicts":{"init_subset":true,"delta_invariant":true,"unsafe_disjoint":true}}"#
        );
    }
}

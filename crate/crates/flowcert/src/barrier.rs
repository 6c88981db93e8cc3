//! From exit times to a barrier function.
//!
//! The exit-time field is only known at band cell centers and only up to
//! scan noise, so it is first smoothed by normalized convolution with a
//! compactly supported bump kernel. A smooth odd saturation then clamps
//! the smoothed field into `[-delta, +delta]`, and constant extension
//! fills the rest of the box: `+delta` strictly inside the invariant
//! set, `-delta` strictly outside. The result is a globally defined
//! scalar field with an analytic gradient, and a sweep-based validator
//! checks the three barrier conditions together with a ratcheted
//! robustness radius.

use std::collections::HashMap;
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::exit_time::{BoundaryBand, ExitTimeField};
use crate::expr::{parse_expression, Expr, ParseError};
use crate::flow::{integrate_flow, IntegratorConfig};
use crate::grid::{rasterize_set, GridShape, OccupancyGrid};
use crate::problem::{DomainBox, SafetyProblem, SetPredicate};
use crate::vecn;

/// Floor on the step length for the discrete growth probe in
/// `mollify_field`; the probe uses at least a few cells so the secant
/// averages over the interpolation texture and the raw data's
/// cell-quantization jitter instead of sampling them pointwise.
pub const LIE_PROBE_STEP: f64 = 1e-2;

#[derive(Debug, Error)]
pub enum BarrierError {
    /// Smoothing moved the field more than the clamp construction can
    /// absorb, or flattened its growth along the flow.
    #[error(
        "smoothing out of budget: sup |nu' - nu| = {sup_error:.3e} (allowed < {sup_allowed:.3e}), \
         min growth rate = {min_lie:.4} (needs > {lie_floor:.4}); try a smaller kernel width or a finer grid"
    )]
    BoundsViolated {
        sup_error: f64,
        sup_allowed: f64,
        min_lie: f64,
        lie_floor: f64,
    },
    /// The smoothed field does not reach the clamp level at a band edge,
    /// so constant extension would tear the barrier there.
    #[error(
        "band too thin to clamp at delta = {delta}: nu' = {nu_prime:.4} at the band-edge cell {at:?}; \
         widen the band or lower delta"
    )]
    BandTooThin {
        delta: f64,
        nu_prime: f64,
        at: Vec<f64>,
    },
    #[error("{0}")]
    Degenerate(String),
}

/// Smoothed exit-time field: a Shepard-normalized blend of the defined
/// band cell values against a bump kernel of radius `width`. Smooth
/// wherever any defined cell center is in kernel range.
#[derive(Debug, Clone)]
pub struct MollifiedField {
    shape: GridShape,
    values: HashMap<usize, f64>,
    pub width: f64,
    /// sup |nu' - nu| over the defined band cell centers
    pub sup_error: f64,
    /// smallest observed growth rate of nu' along the flow, measured
    /// over the cells the clamp will actually consult
    pub min_lie: f64,
}

impl MollifiedField {
    /// Value at `x`, or None when no defined cell center is within the
    /// kernel radius.
    pub fn eval(&self, x: &[f64]) -> Option<f64> {
        let (num, den, _, _) = self.accumulate(x);
        if den > 0.0 {
            Some(num / den)
        } else {
            None
        }
    }

    /// Value and exact spatial gradient of the blend at `x`.
    pub fn eval_with_gradient(&self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        let (num, den, dnum, dden) = self.accumulate(x);
        if den <= 0.0 {
            return None;
        }
        let val = num / den;
        let grad = (0..self.shape.dim())
            .map(|a| (dnum[a] - val * dden[a]) / den)
            .collect();
        Some((val, grad))
    }

    /// Kernel sums and their gradients. The kernel is
    /// `exp(1 - 1/(1 - s^2))` for `s = |x - c| / width < 1`, zero
    /// beyond; its gradient has no singularity at `s = 0` because the
    /// radial factor cancels.
    fn accumulate(&self, x: &[f64]) -> (f64, f64, Vec<f64>, Vec<f64>) {
        let n = self.shape.dim();
        let w2 = self.width * self.width;
        let mut num = 0.0;
        let mut den = 0.0;
        let mut dnum = vec![0.0; n];
        let mut dden = vec![0.0; n];
        let values = &self.values;
        let shape = &self.shape;
        shape.ball_cells(x, self.width, |flat| {
            let Some(&v) = values.get(&flat) else { return };
            let c = shape.center(flat);
            let mut dist_sq = 0.0;
            for a in 0..n {
                let d = x[a] - c[a];
                dist_sq += d * d;
            }
            let s2 = dist_sq / w2;
            if s2 >= 1.0 {
                return;
            }
            let rem = 1.0 - s2;
            let k = (1.0 - 1.0 / rem).exp();
            num += k * v;
            den += k;
            let coeff = -2.0 * k / (w2 * rem * rem);
            for a in 0..n {
                dnum[a] += coeff * (x[a] - c[a]) * v;
                dden[a] += coeff * (x[a] - c[a]);
            }
        });
        (num, den, dnum, dden)
    }
}

/// Smooth a band field by normalized convolution with a bump kernel of
/// radius `width`. Undefined cells drop out and the kernel renormalizes
/// over what remains.
///
/// Two bounds are verified before the field is released, because the
/// clamp construction consumes exactly these: the smoothed values stay
/// within `delta/2` of the raw ones, and the growth rate along the flow
/// stays above `1 - delta/2`. Both are measured over the cells with raw
/// `|nu| <= delta` -- the region where the saturation actually consults
/// the smoothed field. The outer band only feeds the clamped plateaus:
/// its one-sided kernel stencils carry a truncation bias that would
/// poison either bound without telling us anything the band-edge level
/// check does not. The growth probe steps far enough to average across
/// the interpolation texture between cell centers.
pub fn mollify_field(
    p: &SafetyProblem,
    field: &ExitTimeField,
    width: f64,
    delta: f64,
) -> Result<MollifiedField, BarrierError> {
    let shape = field.band.v.shape.clone();
    assert!(delta > 0.0 && delta < 0.5, "clamp level must be in (0, 1/2)");
    assert!(
        width >= shape.min_cell_width(),
        "kernel must span at least one cell"
    );

    let mut values = HashMap::new();
    for &flat in &field.band.band {
        if let Some(nu) = field.nu_at_cell(flat) {
            values.insert(flat, nu);
        }
    }
    let mut out = MollifiedField {
        shape: shape.clone(),
        values,
        width,
        sup_error: 0.0,
        min_lie: f64::INFINITY,
    };

    let step = LIE_PROBE_STEP.max(4.0 * shape.max_cell_width());
    let cfg = IntegratorConfig::fixed(step);
    let mut sup_error: f64 = 0.0;
    let mut min_lie = f64::INFINITY;
    let mut probed = 0usize;
    for (&flat, &nu) in &out.values {
        if nu.abs() > delta {
            continue;
        }
        let c = shape.center(flat);
        let smoothed = out.eval(&c).expect("a cell center is inside its own kernel");
        sup_error = sup_error.max((smoothed - nu).abs());
        let Ok(y) = integrate_flow(p, &c, step, &cfg) else {
            continue;
        };
        let Some(there) = out.eval(&y) else {
            continue;
        };
        min_lie = min_lie.min((there - smoothed) / step);
        probed += 1;
    }
    if probed == 0 {
        return Err(BarrierError::Degenerate(
            "no defined band cell lies in the clamp's active range".into(),
        ));
    }

    if sup_error >= 0.5 * delta || min_lie <= 1.0 - 0.5 * delta {
        return Err(BarrierError::BoundsViolated {
            sup_error,
            sup_allowed: 0.5 * delta,
            min_lie,
            lie_floor: 1.0 - 0.5 * delta,
        });
    }
    out.sup_error = sup_error;
    out.min_lie = min_lie;
    Ok(out)
}

/// Smooth odd saturation: identity on `[-delta/2, delta/2]`, exactly
/// `+-delta` outside `(-delta, delta)`, and a quintic bridge between
/// with matching value, slope, and curvature at both seams. The bridge
/// `u + 4u^3 - 7u^4 + 3u^5` keeps the derivative positive strictly
/// inside the clamp.
pub fn saturate(delta: f64, s: f64) -> f64 {
    debug_assert!(delta > 0.0);
    let a = s.abs();
    let v = if a <= 0.5 * delta {
        a
    } else if a >= delta {
        delta
    } else {
        let u = (a - 0.5 * delta) / (0.5 * delta);
        let q = u + 4.0 * u.powi(3) - 7.0 * u.powi(4) + 3.0 * u.powi(5);
        // the polynomial can overshoot delta by a few ulps at the seam
        (0.5 * delta * (1.0 + q)).min(delta)
    };
    v.copysign(s)
}

/// Derivative of `saturate` in its second argument: one on the identity
/// region, zero on the plateaus, even in `s`.
pub fn saturate_deriv(delta: f64, s: f64) -> f64 {
    let a = s.abs();
    if a <= 0.5 * delta {
        1.0
    } else if a >= delta {
        0.0
    } else {
        let u = (a - 0.5 * delta) / (0.5 * delta);
        // factored form of 1 + 12u^2 - 28u^3 + 15u^4: stays positive under
        // rounding right up to the plateau seam, where the expanded sum
        // cancels to a stray negative ulp
        (1.0 - u).powi(2) * (15.0 * u.powi(2) + 2.0 * u + 1.0)
    }
}

/// A candidate barrier: a scalar field over the box with an exact
/// spatial gradient. Everything the validator and the Lie derivative
/// need.
pub trait Barrier {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
}

/// A barrier in closed form. The gradient comes from symbolic
/// differentiation, so it is exact wherever the formula is.
#[derive(Debug, Clone)]
pub struct ExprBarrier {
    expr: Expr,
    grad: Vec<Expr>,
}

impl ExprBarrier {
    pub fn parse(src: &str, dim: usize) -> Result<ExprBarrier, ParseError> {
        let expr = parse_expression(src, dim)?;
        let grad = (0..dim).map(|a| expr.diff(a)).collect();
        Ok(ExprBarrier { expr, grad })
    }
}

impl Barrier for ExprBarrier {
    fn value(&self, x: &[f64]) -> f64 {
        self.expr.eval(x)
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.grad.iter().map(|g| g.eval(x)).collect()
    }
}

/// The assembled barrier: the saturated smoothed exit time on the band,
/// `+delta` on the rest of the invariant set, `-delta` everywhere else,
/// outside the box included. Immutable after assembly.
#[derive(Debug, Clone)]
pub struct BarrierFunction {
    pub nu_prime: MollifiedField,
    pub delta: f64,
    in_band: Vec<bool>,
    v: OccupancyGrid,
}

/// Clamp-and-extend the smoothed field into a barrier.
///
/// Continuity across the band edges is what makes the piecewise rule a
/// single continuous function, so every band-edge cell is checked up
/// front: an edge bordering the inside plateau must already read
/// `>= +delta`, one bordering the outside plateau `<= -delta`.
pub fn assemble_barrier(
    nu_prime: MollifiedField,
    band: &BoundaryBand,
    delta: f64,
) -> Result<BarrierFunction, BarrierError> {
    assert!(delta > 0.0 && delta < 0.5, "clamp level must be in (0, 1/2)");
    assert!(
        nu_prime.shape == band.v.shape,
        "smoothed field and band live on different grids"
    );
    let shape = &band.v.shape;
    let n = shape.dim();

    let mut in_band = vec![false; shape.cells()];
    for &flat in &band.band {
        in_band[flat] = true;
    }

    for &flat in &band.band {
        let multi = shape.multi(flat);
        // which plateaus this cell touches: +delta side, -delta side
        let mut inner_edge = false;
        let mut outer_edge = false;
        for a in 0..n {
            for step in [-1isize, 1] {
                let i = multi[a] as isize + step;
                if i < 0 || i >= shape.res[a] as isize {
                    outer_edge = true; // beyond the box counts as outside
                    continue;
                }
                let mut m = multi.clone();
                m[a] = i as usize;
                let neighbor = shape.flat(&m);
                if !in_band[neighbor] {
                    if band.v.is_occupied(neighbor) {
                        inner_edge = true;
                    } else {
                        outer_edge = true;
                    }
                }
            }
        }
        if !(inner_edge || outer_edge) {
            continue;
        }
        let c = shape.center(flat);
        let np = nu_prime.eval(&c).unwrap_or(0.0);
        if (inner_edge && np < delta) || (outer_edge && np > -delta) {
            return Err(BarrierError::BandTooThin {
                delta,
                nu_prime: np,
                at: c,
            });
        }
    }

    Ok(BarrierFunction {
        nu_prime,
        delta,
        in_band,
        v: band.v.clone(),
    })
}

impl BarrierFunction {
    /// Barrier value; total over all of state space.
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self.v.shape.locate(x) {
            None => -self.delta,
            Some(flat) if self.in_band[flat] => match self.nu_prime.eval(x) {
                Some(np) => saturate(self.delta, np),
                // kernel gap inside the band: fall back to the side the
                // cell is on
                None => {
                    if self.v.is_occupied(flat) {
                        self.delta
                    } else {
                        -self.delta
                    }
                }
            },
            Some(flat) => {
                if self.v.is_occupied(flat) {
                    self.delta
                } else {
                    -self.delta
                }
            }
        }
    }

    /// Analytic spatial gradient; identically zero on the plateaus.
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        if let Some(flat) = self.v.shape.locate(x) {
            if self.in_band[flat] {
                if let Some((np, grad)) = self.nu_prime.eval_with_gradient(x) {
                    let slope = saturate_deriv(self.delta, np);
                    return grad.into_iter().map(|g| slope * g).collect();
                }
            }
        }
        vec![0.0; self.v.shape.dim()]
    }

    /// One row per sweep cell: center coordinates, barrier value, Lie
    /// derivative.
    pub fn write_csv<W: Write>(
        &self,
        p: &SafetyProblem,
        sweep: &GridShape,
        out: &mut W,
    ) -> io::Result<()> {
        for flat in 0..sweep.cells() {
            let c = sweep.center(flat);
            for v in &c {
                write!(out, "{v},")?;
            }
            writeln!(out, "{},{}", self.eval(&c), lie_derivative(self, p, &c))?;
        }
        Ok(())
    }
}

impl Barrier for BarrierFunction {
    fn value(&self, x: &[f64]) -> f64 {
        self.eval(x)
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.gradient(x)
    }
}

/// Rate of change of the barrier along the field: grad beta . f.
pub fn lie_derivative<B: Barrier + ?Sized>(beta: &B, p: &SafetyProblem, x: &[f64]) -> f64 {
    vecn::dot(&beta.gradient(x), &p.field_at(x))
}

/// One barrier condition's outcome: the raw extreme backing the
/// verdict, where it was attained, and how many points were inspected.
#[derive(Debug, Clone, Serialize)]
pub struct ConditionReport {
    pub margin: f64,
    pub worst: Vec<f64>,
    pub points: usize,
}

/// Validation outcome. `passed` holds exactly when all three margins
/// are strictly positive; `eps_b` is the additional robustness radius
/// the ratchet certified on top of that.
#[derive(Debug, Clone, Serialize)]
pub struct BarrierReport {
    pub passed: bool,
    /// Largest eps such that beta > eps on the initial points, beta <
    /// -eps on the unsafe points and box faces, and the growth rate
    /// exceeds eps wherever |beta| <= eps. Zero when only the
    /// unrobustified conditions hold.
    pub eps_b: f64,
    /// min beta over the rasterized initial set and its samples
    pub init_floor: ConditionReport,
    /// min growth rate on the located zero set of beta
    pub zero_growth: ConditionReport,
    /// -(max beta) over the rasterized unsafe set and the box faces
    pub unsafe_ceiling: ConditionReport,
}

/// Check the three barrier conditions by sweep, rasterization, and
/// rejection sampling, then ratchet the robustness radius.
///
/// The zero set is located by bisecting every sign change of beta
/// between adjacent sweep centers; its worst growth rate is the
/// condition-2 margin. The ratchet then finds the largest eps that the
/// initial floor, the unsafe ceiling, the zero set, and every swept or
/// sampled point with |beta| <= eps can all absorb.
pub fn validate_barrier<B: Barrier + ?Sized>(
    beta: &B,
    p: &SafetyProblem,
    samples: usize,
    sweep: &GridShape,
) -> BarrierReport {
    assert!(samples >= 1, "need at least one sample");
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    // condition 1: beta positive on the initial set
    let init = rasterize_set(&p.init, sweep);
    let mut init_pts = cell_probe_points(&init);
    init_pts.extend(rejection_sample(&p.init, &p.domain, samples, &mut rng));
    let (min_init, worst_init) = extreme(beta, &init_pts, false);

    // condition 3: beta negative on the unsafe cells and the box walls
    let uns = rasterize_set(&p.unsafe_set, sweep);
    let mut uns_pts = cell_probe_points(&uns);
    uns_pts.extend(face_points(sweep));
    let (max_uns, worst_uns) = extreme(beta, &uns_pts, true);

    // condition 2: growth on the located zero set
    let zeros = locate_zeros(beta, sweep);
    let mut min_zero_lie = f64::INFINITY;
    let mut worst_zero = Vec::new();
    for z in &zeros {
        let lie = lie_derivative(beta, p, z);
        if lie < min_zero_lie {
            min_zero_lie = lie;
            worst_zero = z.clone();
        }
    }

    let passed =
        min_init > 0.0 && max_uns < 0.0 && (zeros.is_empty() || min_zero_lie > 0.0);

    let mut eps_b = 0.0;
    let cap = min_init.min(-max_uns);
    if passed && cap > 0.0 {
        // every swept or sampled point that could fall inside some
        // candidate band, with its growth rate
        let mut banded: Vec<(f64, f64)> = Vec::new();
        {
            let mut consider = |x: &[f64]| {
                let b = beta.value(x);
                if b.abs() < cap {
                    banded.push((b.abs(), lie_derivative(beta, p, x)));
                }
            };
            for flat in 0..sweep.cells() {
                consider(&sweep.center(flat));
            }
            for _ in 0..samples {
                consider(&uniform_in_box(&p.domain, &mut rng));
            }
        }
        // a point blocks eps only when it is inside the band and its
        // growth is too small; both relax as eps shrinks, so the pass
        // predicate is monotone and bisection applies
        let admissible = |eps: f64| -> bool {
            min_init > eps
                && -max_uns > eps
                && min_zero_lie > eps
                && banded.iter().all(|&(b, lie)| b > eps || lie > eps)
        };
        let (mut lo, mut hi) = (0.0, cap);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if admissible(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        eps_b = lo;
    }

    BarrierReport {
        passed,
        eps_b,
        init_floor: ConditionReport {
            margin: min_init,
            worst: worst_init,
            points: init_pts.len(),
        },
        zero_growth: ConditionReport {
            margin: min_zero_lie,
            worst: worst_zero,
            points: zeros.len(),
        },
        unsafe_ceiling: ConditionReport {
            margin: -max_uns,
            worst: worst_uns,
            points: uns_pts.len(),
        },
    }
}

/// Centers and corners of every occupied cell.
fn cell_probe_points(g: &OccupancyGrid) -> Vec<Vec<f64>> {
    let shape = &g.shape;
    let n = shape.dim();
    let mut pts = Vec::new();
    for flat in g.iter_occupied() {
        pts.push(shape.center(flat));
        let (lo, hi) = shape.cell_bounds(flat);
        for code in 0..(1usize << n) {
            pts.push(
                (0..n)
                    .map(|a| if code >> a & 1 == 1 { hi[a] } else { lo[a] })
                    .collect(),
            );
        }
    }
    pts
}

/// Sweep-resolution lattice on each wall of the domain box.
fn face_points(sweep: &GridShape) -> Vec<Vec<f64>> {
    let n = sweep.dim();
    let mut pts = Vec::new();
    for a in 0..n {
        for (layer, wall) in [(0usize, sweep.lo[a]), (sweep.res[a] - 1, sweep.hi[a])] {
            for flat in 0..sweep.cells() {
                let multi = sweep.multi(flat);
                if multi[a] != layer {
                    continue;
                }
                let mut c = sweep.center(flat);
                c[a] = wall;
                pts.push(c);
            }
        }
    }
    pts
}

fn uniform_in_box(domain: &DomainBox, rng: &mut ChaCha8Rng) -> Vec<f64> {
    domain
        .lo
        .iter()
        .zip(&domain.hi)
        .map(|(lo, hi)| lo + rng.gen::<f64>() * (hi - lo))
        .collect()
}

/// Up to `want` uniform points of the predicate, by rejection from the
/// box; gives up after 64 misses per requested point.
fn rejection_sample(
    pred: &SetPredicate,
    domain: &DomainBox,
    want: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let mut pts = Vec::new();
    for _ in 0..want.saturating_mul(64) {
        if pts.len() >= want {
            break;
        }
        let x = uniform_in_box(domain, rng);
        if pred.eval(&x) {
            pts.push(x);
        }
    }
    pts
}

fn extreme<B: Barrier + ?Sized>(beta: &B, pts: &[Vec<f64>], want_max: bool) -> (f64, Vec<f64>) {
    let mut best = if want_max {
        f64::NEG_INFINITY
    } else {
        f64::INFINITY
    };
    let mut at = Vec::new();
    for x in pts {
        let v = beta.value(x);
        if (want_max && v > best) || (!want_max && v < best) {
            best = v;
            at = x.clone();
        }
    }
    (best, at)
}

/// Zero crossings of beta along the sweep lattice lines, pinned down by
/// bisection on each sign-changing segment. Exact zeros at centers are
/// kept as they are.
fn locate_zeros<B: Barrier + ?Sized>(beta: &B, sweep: &GridShape) -> Vec<Vec<f64>> {
    let n = sweep.dim();
    let vals: Vec<f64> = (0..sweep.cells())
        .map(|flat| beta.value(&sweep.center(flat)))
        .collect();
    let mut zeros = Vec::new();
    for flat in 0..sweep.cells() {
        if vals[flat] == 0.0 {
            zeros.push(sweep.center(flat));
        }
        let multi = sweep.multi(flat);
        for a in 0..n {
            if multi[a] + 1 >= sweep.res[a] {
                continue;
            }
            let mut m = multi.clone();
            m[a] += 1;
            let next = sweep.flat(&m);
            if vals[flat] * vals[next] < 0.0 {
                zeros.push(bisect_zero(beta, &sweep.center(flat), &sweep.center(next)));
            }
        }
    }
    zeros
}

fn bisect_zero<B: Barrier + ?Sized>(beta: &B, a: &[f64], b: &[f64]) -> Vec<f64> {
    let at = |t: f64| -> Vec<f64> {
        a.iter().zip(b).map(|(p, q)| p + t * (q - p)).collect()
    };
    let positive_at_lo = beta.value(a) > 0.0;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let v = beta.value(&at(mid));
        if v == 0.0 {
            return at(mid);
        }
        if (v > 0.0) == positive_at_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(0.5 * (lo + hi))
}

//! Over-approximating reach computations on occupancy grids.
//!
//! The disturbance model matches the flow sampler: any measurable input
//! bounded by `eps` in the Euclidean norm. Everything here errs on the
//! side of marking too much. The one sharpness-critical spot is the
//! per-substep "head" (small times, where a trajectory has not yet left
//! its start cell): covering it with bloated balls would dilate every
//! boundary cell by one ring per substep and no invariant set would ever
//! close. Instead the head is covered by a velocity test: a neighbor cell
//! is marked only if the field plus worst-case disturbance can actually
//! cross the shared face. Later times are covered by balls along the
//! nominal center trajectory whose radii add the chord length, the
//! Grönwall disturbance/offset growth, and a measured curvature sagitta.

use crate::flow::rk4_step;
use crate::grid::OccupancyGrid;
use crate::problem::SafetyProblem;
use crate::vecn;

/// Absolute slack added to every marking radius; absorbs integration
/// error and arc-length bookkeeping error of the nominal trajectories.
pub const ITOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReachParams {
    /// Disturbance bound (Euclidean norm).
    pub eps: f64,
    /// Sub-step duration for interval reach accumulation.
    pub dt_sub: f64,
    /// Lipschitz bound of the field on the domain box.
    pub lip: f64,
}

impl ReachParams {
    pub fn new(eps: f64, dt_sub: f64, lip: f64) -> ReachParams {
        assert!(eps >= 0.0, "disturbance bound must be nonnegative");
        assert!(dt_sub > 0.0, "sub-step must be positive");
        assert!(lip > 0.0, "Lipschitz bound must be positive");
        ReachParams { eps, dt_sub, lip }
    }

    /// Distance bound between any eps-disturbed solution started anywhere
    /// within `start_offset` of a point and the nominal flow of that
    /// point, after time `tau`.
    pub fn gronwall(&self, start_offset: f64, tau: f64) -> f64 {
        let g = (self.lip * tau).exp_m1();
        self.eps / self.lip * g + start_offset * (g + 1.0)
    }
}

/// Single-time reach: nominal flow of every occupied cell center for
/// duration `h`, bloated to swallow every disturbed solution from
/// anywhere in the cell. Escape (nominal exit or a ball poking out of
/// the box) sets the `escaped` flag on the result.
pub fn step_reach(
    x: &OccupancyGrid,
    p: &SafetyProblem,
    rp: &ReachParams,
    h: f64,
) -> OccupancyGrid {
    assert!(h > 0.0, "step duration must be positive");
    let shape = &x.shape;
    let halfdiag = shape.half_diagonal();
    let r = rp.gronwall(halfdiag, h) + ITOL;
    let mut out = OccupancyGrid::empty(shape.clone());
    out.escaped = x.escaped;
    let field = |y: &[f64], o: &mut [f64]| p.eval_field(y, o);
    for flat in x.iter_occupied() {
        let c = shape.center(flat);
        match integrate_inside(p, &field, &c, h) {
            Some(y) => {
                if !out.mark_ball(&y, r) {
                    out.escaped = true;
                }
            }
            None => out.escaped = true,
        }
    }
    out
}

/// `m`-fold composition of [`step_reach`] with step `h`.
pub fn step_reach_composed(
    x: &OccupancyGrid,
    p: &SafetyProblem,
    rp: &ReachParams,
    h: f64,
    m: usize,
) -> OccupancyGrid {
    let mut cur = x.clone();
    for _ in 0..m {
        cur = step_reach(&cur, p, rp, h);
    }
    cur
}

/// Fixed-step RK4 over `[0, h]`, returning None if the trajectory leaves
/// the domain box.
fn integrate_inside<F: Fn(&[f64], &mut [f64])>(
    p: &SafetyProblem,
    field: &F,
    x0: &[f64],
    h: f64,
) -> Option<Vec<f64>> {
    let steps = 4;
    let dt = h / steps as f64;
    let mut x = x0.to_vec();
    for _ in 0..steps {
        x = rk4_step(field, &x, dt);
        if !p.domain.contains(&x) {
            return None;
        }
    }
    Some(x)
}

/// Interval reach with state. `w` accumulates everything ever covered.
/// `slice` over-approximates where trajectories can be right now, at the
/// current whole number of sub-steps; it advances through endpoint balls
/// only, so wherever the flow contracts faster than the per-step bloat
/// the slice shrinks and `w` freezes. The cells the tube sweeps through
/// in between join `w` but never drive further tube work themselves: a
/// state passing through such a cell mid-step is tracked by the slice it
/// came from. They do owe `w` their one-step endpoint image, or the
/// frozen `w` would not absorb its own per-cell step map; the `pending`
/// queue pays that debt, one generation per sub-step so the closure
/// frontier advances no faster than real time.
#[derive(Debug, Clone)]
pub struct ReachAccumulator {
    pub w: OccupancyGrid,
    slice: OccupancyGrid,
    processed: Vec<bool>,
    pending: Vec<usize>,
}

impl ReachAccumulator {
    pub fn new(x: &OccupancyGrid) -> ReachAccumulator {
        ReachAccumulator {
            w: x.clone(),
            slice: x.clone(),
            processed: vec![false; x.shape.cells()],
            pending: Vec::new(),
        }
    }

    pub fn escaped(&self) -> bool {
        self.w.escaped
    }

    /// Advance by `substeps` sub-steps of length `rp.dt_sub`.
    pub fn advance(&mut self, p: &SafetyProblem, rp: &ReachParams, substeps: usize) {
        for _ in 0..substeps {
            self.substep(p, rp);
        }
    }

    fn substep(&mut self, p: &SafetyProblem, rp: &ReachParams) {
        if self.slice.is_empty() && self.pending.is_empty() {
            return;
        }
        let h = rp.dt_sub;
        let shape = self.w.shape.clone();
        let halfdiag = shape.half_diagonal();
        let cw_min = shape.min_cell_width();
        // arc-length scale for the tube chords
        let s_arc = 0.5 * cw_min;
        let r_end = rp.gronwall(halfdiag, h) + ITOL;
        let mut marks = OccupancyGrid::empty(shape.clone());
        let mut next = OccupancyGrid::empty(shape.clone());
        let mut escaped = false;

        let field = |y: &[f64], o: &mut [f64]| p.eval_field(y, o);
        let mut fc = vec![0.0; p.dim];

        for flat in self.slice.iter_occupied() {
            self.processed[flat] = true;
            let c = shape.center(flat);
            p.eval_field(&c, &mut fc);
            let speed = vecn::norm(&fc);

            // Head phase: as long as every state that started in the cell
            // has moved less than a cell width, everything reachable sits
            // in the start cell or a neighbor the dynamics can actually
            // enter. Stretching this window as far as the motion bound
            // allows matters: the first tube ball carries a half-diagonal
            // of bloat, and the flow needs time to pull it clear of the
            // cell faces.
            let reach_bound = rp.lip * (halfdiag + HEAD_TRAVEL * cw_min) + rp.eps;
            let tau_head = (HEAD_TRAVEL * cw_min / (speed + reach_bound + 1e-12)).min(h);
            if mark_crossable_neighbors(&mut marks, flat, &fc, reach_bound) {
                escaped = true;
            }

            // Body phase: balls along the nominal trajectory. The final
            // ball sits at the nominal endpoint with radius at least
            // r_end, so the slice recruitment below never outruns `w`.
            let (ok, end) = mark_tube(&mut marks, p, &field, &c, tau_head, h, rp, halfdiag, s_arc);
            if !ok {
                escaped = true;
            }
            if let Some(end) = end {
                if !next.mark_ball(&end, r_end) {
                    escaped = true;
                }
            }
        }

        // one generation of closure debt from earlier sub-steps
        let due = std::mem::take(&mut self.pending);
        for flat in due {
            if self.processed[flat] {
                continue;
            }
            self.processed[flat] = true;
            let c = shape.center(flat);
            match integrate_inside(p, &field, &c, h) {
                None => escaped = true,
                Some(y) => {
                    let w = &mut self.w;
                    let mut newly: Vec<usize> = Vec::new();
                    let inside = shape.ball_cells(&y, r_end, |cell| {
                        if !w.is_occupied(cell) {
                            w.occupy(cell);
                            newly.push(cell);
                        }
                    });
                    if !inside {
                        escaped = true;
                    }
                    self.pending.extend(newly);
                }
            }
        }

        // absorb the sub-step marks, queueing cells w sees for the first time
        for flat in marks.iter_occupied() {
            if !self.w.is_occupied(flat) {
                self.w.occupy(flat);
                self.pending.push(flat);
            }
        }

        if escaped {
            self.w.escaped = true;
        }
        self.slice = next;
    }
}

/// Fraction of a cell width a head-phase state may travel.
const HEAD_TRAVEL: f64 = 0.9;

/// Mark neighbors of `flat` that a disturbed trajectory can enter within
/// the head phase. A face is crossable when the field component toward
/// it, plus the worst-case drift `allowance` anywhere a head state can
/// be, points outward. Returns true if a crossable face is a domain-box
/// face.
fn mark_crossable_neighbors(
    marks: &mut OccupancyGrid,
    flat: usize,
    fc: &[f64],
    allowance: f64,
) -> bool {
    let shape = marks.shape.clone();
    let n = shape.dim();
    let base = shape.multi(flat);
    let mut escaped = false;
    let mut multi = vec![0usize; n];
    'offsets: for code in 0..3usize.pow(n as u32) {
        let mut rem = code;
        let mut off_grid = false;
        let mut any = false;
        for a in 0..n {
            let off = (rem % 3) as isize - 1;
            rem /= 3;
            if off != 0 {
                any = true;
                if fc[a] * off as f64 + allowance <= 0.0 {
                    continue 'offsets; // face not crossable
                }
            }
            let i = base[a] as isize + off;
            if i < 0 || i >= shape.res[a] as isize {
                off_grid = true;
            } else {
                multi[a] = i as usize;
            }
        }
        if !any {
            continue;
        }
        if off_grid {
            escaped = true;
        } else {
            marks.occupy(shape.flat(&multi));
        }
    }
    escaped
}

/// Cover `[tau1, h]` of the reach tube of one cell with balls along the
/// nominal center trajectory. Returns whether the whole tube stayed in
/// the domain box, and the nominal endpoint at time `h` when the
/// trajectory got that far. The ball marked at the endpoint has radius
/// at least `gronwall(halfdiag, h) + ITOL`.
#[allow(clippy::too_many_arguments)]
fn mark_tube<F: Fn(&[f64], &mut [f64])>(
    marks: &mut OccupancyGrid,
    p: &SafetyProblem,
    field: &F,
    c: &[f64],
    tau1: f64,
    h: f64,
    rp: &ReachParams,
    halfdiag: f64,
    s_arc: f64,
) -> (bool, Option<Vec<f64>>) {
    let n = c.len();
    if tau1 >= h {
        // whole sub-step is head; only the endpoint ball remains
        let Some(end) = integrate_inside(p, field, c, h) else {
            return (false, None);
        };
        let r = rp.gronwall(halfdiag, h) + ITOL;
        let ok = marks.mark_ball(&end, r);
        return (ok, Some(end));
    }
    // Collect nominal points starting at the head boundary. Forcing at
    // least two body segments guarantees every segment has a neighboring
    // triple for the curvature estimate.
    let mut pts: Vec<(f64, Vec<f64>)> = Vec::with_capacity(16);
    let mut x = match integrate_inside(p, field, c, tau1) {
        Some(y) => y,
        None => return (false, None),
    };
    let mut tau = tau1;
    pts.push((tau, x.clone()));
    let mut fx = vec![0.0; n];
    let dt_floor = h / 1024.0;
    let max_dt_first = (h - tau1) / 2.0;
    let mut left = false;
    while tau < h {
        field(&x, &mut fx);
        let speed = vecn::norm(&fx);
        // short chords right after the head, full length further out:
        // early balls sit closest to the start cell's faces and need to
        // be lean for the flow to have pulled them inside by then
        let ramp = match pts.len() {
            1 => 0.3,
            2 => 0.5,
            _ => 0.8,
        };
        let mut dt = (ramp * s_arc / speed.max(1e-9)).max(dt_floor);
        if pts.len() == 1 {
            dt = dt.min(max_dt_first);
        }
        dt = dt.min(h - tau);
        x = rk4_step(field, &x, dt);
        tau += dt;
        if !p.domain.contains(&x) {
            left = true;
            break;
        }
        pts.push((tau, x.clone()));
        if pts.len() > 100_000 {
            // runaway field; give up on this cell conservatively
            return (false, None);
        }
    }

    // curvature per interior point, from circumradius of triples
    let kappa: Vec<f64> = (0..pts.len())
        .map(|i| {
            if i == 0 || i + 1 >= pts.len() {
                0.0
            } else {
                menger_curvature(&pts[i - 1].1, &pts[i].1, &pts[i + 1].1)
            }
        })
        .collect();

    let mut inside = true;
    for i in 0..pts.len() - 1 {
        let (_, ref a) = pts[i];
        let (tb, ref b) = pts[i + 1];
        let chord = vecn::dist(a, b);
        let k = kappa[i].max(kappa[i + 1]);
        let sag = 2.0 * k * chord * chord / 8.0;
        let r = chord + sag + rp.gronwall(halfdiag, tb) + ITOL;
        if !marks.mark_ball(b, r) {
            inside = false;
        }
    }
    if left {
        (false, None)
    } else {
        (inside, Some(pts.last().unwrap().1.clone()))
    }
}

/// Inverse circumradius of the triangle abc; zero for degenerate ones.
fn menger_curvature(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    let ab = vecn::dist(a, b);
    let bc = vecn::dist(b, c);
    let ca = vecn::dist(c, a);
    if ab < 1e-300 || bc < 1e-300 || ca < 1e-300 {
        return 0.0;
    }
    // 4 * area via Gram determinant of (b-a, c-a)
    let u: Vec<f64> = b.iter().zip(a).map(|(x, y)| x - y).collect();
    let v: Vec<f64> = c.iter().zip(a).map(|(x, y)| x - y).collect();
    let uu = vecn::dot(&u, &u);
    let vv = vecn::dot(&v, &v);
    let uv = vecn::dot(&u, &v);
    let area_sq = (uu * vv - uv * uv).max(0.0);
    4.0 * area_sq.sqrt() / (2.0 * ab * bc * ca)
}

/// Everything reachable within `[0, horizon]` from the occupied cells of
/// `x` under eps-disturbed dynamics, over-approximated on the grid. The
/// horizon rounds up to a whole number of sub-steps, which keeps the
/// result monotone in the horizon.
pub fn reach_interval(
    x: &OccupancyGrid,
    p: &SafetyProblem,
    rp: &ReachParams,
    horizon: f64,
) -> OccupancyGrid {
    assert!(horizon >= 0.0, "horizon must be nonnegative");
    let n = ((horizon / rp.dt_sub) - 1e-9).ceil().max(0.0) as usize;
    let mut acc = ReachAccumulator::new(x);
    acc.advance(p, rp, n);
    acc.w
}

/// True iff the state lies in an occupied closed cell. States exactly on
/// a cell face belong to every touching cell, so the located cell plus
/// its ring are consulted.
pub fn covers_state(grid: &OccupancyGrid, x: &[f64]) -> bool {
    let shape = &grid.shape;
    match shape.locate(x) {
        None => false,
        Some(flat) => {
            if grid.is_occupied(flat) {
                return true;
            }
            let n = shape.dim();
            let base = shape.multi(flat);
            let mut multi = vec![0usize; n];
            'offsets: for code in 0..3usize.pow(n as u32) {
                let mut rem = code;
                for a in 0..n {
                    let off = (rem % 3) as isize - 1;
                    rem /= 3;
                    let i = base[a] as isize + off;
                    if i < 0 || i >= shape.res[a] as isize {
                        continue 'offsets;
                    }
                    multi[a] = i as usize;
                }
                let idx = shape.flat(&multi);
                if grid.is_occupied(idx) && shape.dist_sq_to_cell(idx, x) <= 1e-24 {
                    return true;
                }
            }
            false
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::by_name;
    use crate::flow::{sample_disturbed_trajectory, IntegratorConfig};
    use crate::grid::{rasterize_set, GridShape};
    use crate::problem::parse_problem_unchecked;

    fn lin1d_shape(cells: usize) -> (SafetyProblem, GridShape) {
        let p = by_name("lin1d-stable").unwrap().problem();
        let shape = GridShape::uniform(&p.domain, cells);
        (p, shape)
    }

    fn occupied_interval(g: &OccupancyGrid) -> (f64, f64) {
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
    fn stationary_field_step_is_the_one_ring_dilation() {
        let p = parse_problem_unchecked(
            "dim = 2\nfield = [ \"0\", \"0\" ]\ndomain = [ [-1, 1], [-1, 1] ]\ninit = \"x1 <= 0\"\nunsafe = \"x1 >= 2\"",
        )
        .unwrap();
        let shape = GridShape::uniform(&p.domain, 16);
        let mut x = OccupancyGrid::empty(shape.clone());
        x.occupy(shape.flat(&[7, 8]));
        x.occupy(shape.flat(&[3, 3]));
        let rp = ReachParams::new(0.0, 0.1, 1e-3);
        let r = step_reach(&x, &p, &rp, 1e-3);
        assert_eq!(r, x.dilate());
        assert!(x.subset(&r).unwrap());
        assert!(!r.escaped);
    }

    #[test]
    fn linear_step_lands_where_the_closed_form_says() {
        let (p, shape) = lin1d_shape(512);
        let pred = crate::problem::parse_predicate("(x1 - 0.5)^2 <= 0.0001", 1).unwrap();
        let x = rasterize_set(&pred, &shape);
        let (xlo, xhi) = occupied_interval(&x);
        assert!(xlo <= 0.49 && xhi >= 0.51);
        let rp = ReachParams::new(0.1, 0.1, 1.2);
        let h = 0.1;
        let out = step_reach(&x, &p, &rp, h);
        assert!(!out.escaped);
        let hd = shape.half_diagonal();
        let r = 0.1 / 1.2 * (0.12f64.exp_m1()) + hd * 0.12f64.exp();
        let (lo, hi) = occupied_interval(&out);
        let cw = shape.cell_width(0);
        // marked cells cover the image interval, modulo cell granularity
        let decay = (-0.1f64).exp();
        assert!(lo <= 0.49 * decay - r + cw, "lo = {lo}");
        assert!(hi >= 0.51 * decay + r - cw, "hi = {hi}");
        // and the true disturbed reach is inside the marking
        assert!(lo <= 0.49 * decay - 0.1 / 1.2 * 0.12f64.exp_m1());
        assert!(hi >= 0.51 * decay + 0.1 / 1.2 * 0.12f64.exp_m1());
    }

    #[test]
    fn sampled_endpoints_land_in_the_step_image() {
        let (p, shape) = lin1d_shape(512);
        let pred = crate::problem::parse_predicate("(x1 - 0.5)^2 <= 0.0001", 1).unwrap();
        let x = rasterize_set(&pred, &shape);
        let rp = ReachParams::new(0.1, 0.1, 1.2);
        let h = 0.1;
        let out = step_reach(&x, &p, &rp, h);
        let cfg = IntegratorConfig::default();
        let mut violations = 0;
        for seed in 0..10_000u64 {
            // start uniformly across the occupied source interval
            let frac = seed as f64 / 9_999.0;
            let (xlo, xhi) = occupied_interval(&x);
            let x0 = [xlo + frac * (xhi - xlo)];
            let sample = sample_disturbed_trajectory(&p, &x0, h, 0.1, seed, &cfg);
            if sample.truncated {
                continue;
            }
            let last = sample.states.last().unwrap();
            if !covers_state(&out, last) {
                violations += 1;
            }
        }
        assert_eq!(violations, 0);
    }

    #[test]
    fn outward_flow_at_the_face_escapes() {
        let p = parse_problem_unchecked(
            "dim = 1\nfield = [ \"x1\" ]\ndomain = [ [-2.2, 2.2] ]\ninit = \"x1^2 <= 0.25\"\nunsafe = \"x1^2 >= 4\"",
        )
        .unwrap();
        let shape = GridShape::uniform(&p.domain, 512);
        let mut x = OccupancyGrid::empty(shape.clone());
        x.occupy(shape.cells() - 1);
        let rp = ReachParams::new(0.1, 0.1, 1.2);
        let out = step_reach(&x, &p, &rp, 0.1);
        assert!(out.escaped);
    }

    #[test]
    fn zero_horizon_is_identity() {
        let (p, shape) = lin1d_shape(128);
        let x = rasterize_set(&p.init.clone(), &shape);
        let rp = ReachParams::new(0.1, 0.0625, 1.2);
        let w = reach_interval(&x, &p, &rp, 0.0);
        assert_eq!(w, x);
    }

    #[test]
    fn contracting_interval_reach_stays_put() {
        let (p, shape) = lin1d_shape(512);
        let x = rasterize_set(&p.init.clone(), &shape);
        let rp = ReachParams::new(0.1, 0.0625, 1.2);
        let w = reach_interval(&x, &p, &rp, 5.0);
        assert!(!w.escaped);
        let (lo, hi) = occupied_interval(&w);
        assert!(lo >= -0.62 && hi <= 0.62, "got [{lo}, {hi}]");
        // sharper: the initial raster grows by at most one ring
        let (xlo, xhi) = occupied_interval(&x);
        let cw = shape.cell_width(0);
        assert!(hi <= xhi + cw + 1e-12, "hi = {hi} vs raster {xhi}");
        assert!(lo >= xlo - cw - 1e-12, "lo = {lo} vs raster {xlo}");
    }

    #[test]
    fn unstable_interval_reach_escapes() {
        let p = by_name("lin1d-unstable").unwrap().problem();
        let shape = GridShape::uniform(&p.domain, 512);
        let x = rasterize_set(&p.init.clone(), &shape);
        let rp = ReachParams::new(0.1, 0.0625, 1.2);
        let w = reach_interval(&x, &p, &rp, 3.0);
        assert!(w.escaped);
    }

    #[test]
    fn reach_is_monotone_in_start_set_and_horizon() {
        let (p, shape) = lin1d_shape(128);
        let small = rasterize_set(
            &crate::problem::parse_predicate("x1^2 <= 0.04", 1).unwrap(),
            &shape,
        );
        let large = rasterize_set(&p.init.clone(), &shape);
        assert!(small.subset(&large).unwrap());
        let rp = ReachParams::new(0.1, 0.0625, 1.2);
        let ws = reach_interval(&small, &p, &rp, 1.0);
        let wl = reach_interval(&large, &p, &rp, 1.0);
        assert!(ws.subset(&wl).unwrap());
        let w1 = reach_interval(&large, &p, &rp, 0.5);
        let w2 = reach_interval(&large, &p, &rp, 1.5);
        assert!(w1.subset(&w2).unwrap());
    }

    #[test]
    fn composing_horizons_over_approximates() {
        let (p, _) = lin1d_shape(128);
        let shape = GridShape::uniform(&p.domain, 128);
        let x = rasterize_set(&p.init.clone(), &shape);
        let rp = ReachParams::new(0.1, 0.0625, 1.2);
        let t = 0.5;
        let s = 0.75;
        let direct = reach_interval(&x, &p, &rp, t + s);
        let wt = reach_interval(&x, &p, &rp, t);
        let composed = reach_interval(&wt, &p, &rp, s).union(&wt).unwrap();
        assert!(direct.subset(&composed).unwrap());
    }

    #[test]
    fn spiral_interval_reach_covers_sampled_trajectories() {
        let b = by_name("spiral2d").unwrap();
        let p = b.problem();
        let shape = GridShape::uniform(&p.domain, 64);
        let x = rasterize_set(&p.init.clone(), &shape);
        let rp = ReachParams::new(0.1, 0.0625, 1.7);
        let horizon = 1.0;
        let w = reach_interval(&x, &p, &rp, horizon);
        assert!(!w.escaped);
        let cfg = IntegratorConfig::default();
        let starts: Vec<usize> = x.iter_occupied().collect();
        let mut violations = 0;
        for seed in 0..500u64 {
            let flat = starts[seed as usize % starts.len()];
            let c = shape.center(flat);
            let sample = sample_disturbed_trajectory(&p, &c, horizon, 0.1, seed, &cfg);
            for state in &sample.states {
                if !covers_state(&w, state) {
                    violations += 1;
                }
            }
        }
        assert_eq!(violations, 0);
    }
}

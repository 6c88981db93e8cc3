//! Exit-time fields around the boundary of an invariant grid set.
//!
//! For a point x near the boundary of V, the exit time nu(x) is -t where
//! t is the unique time at which the nominal flow through x meets the
//! boundary. It is positive inside V, negative outside, and grows at
//! unit rate along trajectories, which is what the barrier construction
//! later feeds on. Everything here is scan-then-bisect on the membership
//! indicator of V: the indicator is a step function along a trajectory,
//! so derivative-based root finding has nothing to grab onto.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::io::{self, Write};
use std::thread;

use thiserror::Error;

use crate::flow::rk4_step;
use crate::grid::OccupancyGrid;
use crate::problem::SafetyProblem;
use crate::vecn;

/// Scan points per direction; the membership indicator is sampled at
/// `t_search / SCAN_STEPS` spacing before bisection takes over.
pub const SCAN_STEPS: usize = 256;

/// Speed floor below which the band is treated as containing an
/// equilibrium and the construction aborts.
pub const SPEED_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanDirection {
    Forward,
    Backward,
    Both,
}

impl fmt::Display for ScanDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScanDirection::Forward => "forward",
            ScanDirection::Backward => "backward",
            ScanDirection::Both => "both directions",
        })
    }
}

#[derive(Debug, Error)]
pub enum ExitTimeError {
    #[error("trajectory left the domain box scanning {direction} before any boundary crossing")]
    LeftDomain { direction: ScanDirection },
    #[error("field is singular on the band: speed {min_speed:.3e} at cell center {at:?}")]
    Singular { min_speed: f64, at: Vec<f64> },
    #[error("{undefined} of {band} band cells have no boundary crossing within the scan range")]
    TooManyUndefined { undefined: usize, band: usize },
    #[error("exit times need a set with both inside and outside: {0}")]
    DegenerateSet(String),
}

/// One located boundary crossing along a scanned trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Crossing {
    /// Boundary-hit time along the nominal flow; the exit time is `-t`.
    pub t: f64,
    /// Later membership changes seen in the scan window. Nonempty means
    /// the trajectory re-crossed the boundary, numerically contradicting
    /// the uniqueness the construction relies on.
    pub extra: Vec<f64>,
    pub truncated_backward: bool,
    pub truncated_forward: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CrossingOutcome {
    Crossing(Crossing),
    /// The scan covered the whole window without meeting the boundary.
    Undefined,
}

/// Scan the membership indicator of `v` along the nominal trajectory
/// through `x` over `[-t_search, t_search]`, locate the first change,
/// and refine it by bisection to `tol`. A scan leg that runs out of the
/// domain box is truncated there; that only becomes the error when no
/// crossing is found at all, since then "no crossing in range" cannot be
/// honestly claimed.
pub fn crossing_time(
    p: &SafetyProblem,
    v: &OccupancyGrid,
    x: &[f64],
    t_search: f64,
    tol: f64,
) -> Result<CrossingOutcome, ExitTimeError> {
    assert!(t_search > 0.0, "scan range must be positive");
    assert!(tol > 0.0, "tolerance must be positive");
    assert!(p.domain.contains(x), "start point outside the domain box");
    check_two_sided(v)?;

    let dt = t_search / SCAN_STEPS as f64;
    let field = |y: &[f64], o: &mut [f64]| p.eval_field(y, o);
    let inside = |s: &[f64]| v.shape.locate(s).map(|f| v.is_occupied(f)).unwrap_or(false);

    // states at i*dt for i = 0..=n_fwd, and at -i*dt for i = 1..=n_bwd
    let mut fwd: Vec<Vec<f64>> = vec![x.to_vec()];
    let mut truncated_forward = false;
    let mut y = x.to_vec();
    for _ in 0..SCAN_STEPS {
        y = rk4_step(&field, &y, dt);
        if !p.domain.contains(&y) {
            truncated_forward = true;
            break;
        }
        fwd.push(y.clone());
    }
    let mut bwd: Vec<Vec<f64>> = Vec::new();
    let mut truncated_backward = false;
    y = x.to_vec();
    for _ in 0..SCAN_STEPS {
        y = rk4_step(&field, &y, -dt);
        if !p.domain.contains(&y) {
            truncated_backward = true;
            break;
        }
        bwd.push(y.clone());
    }

    let state = |i: isize| -> &[f64] {
        if i >= 0 {
            &fwd[i as usize]
        } else {
            &bwd[(-i - 1) as usize]
        }
    };
    let lo_i = -(bwd.len() as isize);
    let hi_i = fwd.len() as isize - 1;

    let mut crossings: Vec<f64> = Vec::new();
    let mut prev_in = inside(state(lo_i));
    for i in lo_i..hi_i {
        let next_in = inside(state(i + 1));
        if next_in != prev_in {
            crossings.push(bisect_crossing(
                &field,
                state(i),
                i as f64 * dt,
                dt,
                tol,
                prev_in,
                &inside,
            ));
        }
        prev_in = next_in;
    }

    match crossings.split_first() {
        None => {
            if truncated_backward || truncated_forward {
                let direction = match (truncated_backward, truncated_forward) {
                    (true, true) => ScanDirection::Both,
                    (true, false) => ScanDirection::Backward,
                    (false, _) => ScanDirection::Forward,
                };
                Err(ExitTimeError::LeftDomain { direction })
            } else {
                Ok(CrossingOutcome::Undefined)
            }
        }
        Some((&t, rest)) => Ok(CrossingOutcome::Crossing(Crossing {
            t,
            extra: rest.to_vec(),
            truncated_backward,
            truncated_forward,
        })),
    }
}

fn check_two_sided(v: &OccupancyGrid) -> Result<(), ExitTimeError> {
    if v.is_empty() {
        return Err(ExitTimeError::DegenerateSet("the set is empty".into()));
    }
    if v.occupied_count() == v.shape.cells() {
        return Err(ExitTimeError::DegenerateSet(
            "the set covers the whole grid".into(),
        ));
    }
    Ok(())
}

/// Membership flips somewhere in `(t0, t0 + dt)` along the trajectory
/// through `s` (the state at `t0`, on side `side_lo`). Returns the flip
/// time located to within `tol`.
fn bisect_crossing<F, G>(
    field: &F,
    s: &[f64],
    t0: f64,
    dt: f64,
    tol: f64,
    side_lo: bool,
    inside: &G,
) -> f64
where
    F: Fn(&[f64], &mut [f64]),
    G: Fn(&[f64]) -> bool,
{
    let mut lo = 0.0;
    let mut hi = dt;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let probe = rk4_step(field, s, mid);
        if inside(&probe) == side_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    t0 + 0.5 * (lo + hi)
}

/// The cells flanking the boundary of V: `boundary` holds the occupied
/// cells with an unoccupied (or off-grid) face-neighbor, `band` every
/// cell within face-graph distance `k` of one, on both sides.
#[derive(Debug, Clone)]
pub struct BoundaryBand {
    pub v: OccupancyGrid,
    pub boundary: Vec<usize>,
    pub band: Vec<usize>,
    pub t_search: f64,
}

impl BoundaryBand {
    pub fn build(v: &OccupancyGrid, k: usize, t_search: f64) -> Result<BoundaryBand, ExitTimeError> {
        assert!(k >= 1, "band width must be at least one cell");
        assert!(t_search > 0.0, "scan range must be positive");
        check_two_sided(v)?;
        let shape = &v.shape;
        let n = shape.dim();

        let mut boundary = Vec::new();
        for flat in v.iter_occupied() {
            let base = shape.multi(flat);
            let mut exposed = false;
            'axes: for a in 0..n {
                for step in [-1isize, 1] {
                    let i = base[a] as isize + step;
                    if i < 0 || i >= shape.res[a] as isize {
                        exposed = true;
                        break 'axes;
                    }
                    let mut m = base.clone();
                    m[a] = i as usize;
                    if !v.is_occupied(shape.flat(&m)) {
                        exposed = true;
                        break 'axes;
                    }
                }
            }
            if exposed {
                boundary.push(flat);
            }
        }

        let mut dist: Vec<u32> = vec![u32::MAX; shape.cells()];
        let mut queue: VecDeque<usize> = VecDeque::new();
        for &b in &boundary {
            dist[b] = 0;
            queue.push_back(b);
        }
        while let Some(flat) = queue.pop_front() {
            let d = dist[flat];
            if d as usize >= k {
                continue;
            }
            let base = shape.multi(flat);
            for a in 0..n {
                for step in [-1isize, 1] {
                    let i = base[a] as isize + step;
                    if i < 0 || i >= shape.res[a] as isize {
                        continue;
                    }
                    let mut m = base.clone();
                    m[a] = i as usize;
                    let nf = shape.flat(&m);
                    if dist[nf] == u32::MAX {
                        dist[nf] = d + 1;
                        queue.push_back(nf);
                    }
                }
            }
        }
        let band: Vec<usize> = (0..shape.cells()).filter(|&f| dist[f] != u32::MAX).collect();

        Ok(BoundaryBand {
            v: v.clone(),
            boundary,
            band,
            t_search,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct BandDiagnostics {
    pub defined: usize,
    pub undefined: usize,
    /// Cells whose exit-time sign contradicts which side of the boundary
    /// they sit on. Reported, never silently repaired.
    pub sign_violations: Vec<usize>,
    /// Cells whose scan saw more than one boundary crossing.
    pub multiple_crossings: Vec<(usize, Vec<f64>)>,
    pub min_speed: f64,
    pub max_adjacent_jump: f64,
    /// Continuity budget: cell diagonal / min speed, with slack 5. A
    /// larger adjacent jump suggests the field is discontinuous closer
    /// to the boundary than the band assumes.
    pub jump_bound: f64,
    pub continuity_suspect: bool,
}

/// Exit times at band cell centers, with multilinear interpolation
/// between them. Immutable once assembled.
#[derive(Debug, Clone)]
pub struct ExitTimeField {
    pub band: BoundaryBand,
    values: HashMap<usize, f64>,
    pub diagnostics: BandDiagnostics,
}

/// Evaluate the exit time at every band cell center. Cells are
/// independent, so they are fanned out over the available cores; the
/// result is assembled in band order and does not depend on scheduling.
pub fn build_band_field(
    p: &SafetyProblem,
    v: &OccupancyGrid,
    k: usize,
    t_search: f64,
    tol: f64,
) -> Result<ExitTimeField, ExitTimeError> {
    let band = BoundaryBand::build(v, k, t_search)?;
    let shape = v.shape.clone();

    let mut min_speed = f64::INFINITY;
    let mut min_at = Vec::new();
    let mut f = vec![0.0; p.dim];
    for &flat in &band.band {
        let c = shape.center(flat);
        p.eval_field(&c, &mut f);
        let s = vecn::norm(&f);
        if s < min_speed {
            min_speed = s;
            min_at = c;
        }
    }
    if min_speed < SPEED_FLOOR {
        return Err(ExitTimeError::Singular {
            min_speed,
            at: min_at,
        });
    }

    // per-cell scan results, band order
    type CellResult = Option<(f64, Vec<f64>)>;
    let eval = |flat: usize| -> CellResult {
        let c = shape.center(flat);
        match crossing_time(p, v, &c, t_search, tol) {
            Ok(CrossingOutcome::Crossing(cr)) => Some((-cr.t, cr.extra)),
            // a cell the flow carries out of the box without ever meeting
            // the boundary has no exit time; counted as undefined below
            Ok(CrossingOutcome::Undefined) | Err(_) => None,
        }
    };
    let workers = thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(band.band.len())
        .max(1);
    let chunk = band.band.len().div_ceil(workers);
    let mut results: Vec<CellResult> = vec![None; band.band.len()];
    thread::scope(|scope| {
        for (cells, out) in band.band.chunks(chunk).zip(results.chunks_mut(chunk)) {
            scope.spawn(move || {
                for (&flat, slot) in cells.iter().zip(out.iter_mut()) {
                    *slot = eval(flat);
                }
            });
        }
    });

    let mut values = HashMap::new();
    let mut diag = BandDiagnostics {
        min_speed,
        ..BandDiagnostics::default()
    };
    for (i, &flat) in band.band.iter().enumerate() {
        match results[i].take() {
            None => diag.undefined += 1,
            Some((nu, extra)) => {
                diag.defined += 1;
                if !extra.is_empty() {
                    diag.multiple_crossings.push((flat, extra));
                }
                let interior = v.is_occupied(flat);
                if (interior && nu <= 0.0) || (!interior && nu >= 0.0) {
                    diag.sign_violations.push(flat);
                }
                values.insert(flat, nu);
            }
        }
    }
    if diag.undefined as f64 >= 0.01 * band.band.len() as f64 {
        return Err(ExitTimeError::TooManyUndefined {
            undefined: diag.undefined,
            band: band.band.len(),
        });
    }

    diag.jump_bound = 2.0 * shape.half_diagonal() / min_speed * 5.0;
    for &flat in &band.band {
        let Some(&nu) = values.get(&flat) else { continue };
        let base = shape.multi(flat);
        for a in 0..shape.dim() {
            if base[a] + 1 >= shape.res[a] {
                continue;
            }
            let mut m = base.clone();
            m[a] += 1;
            if let Some(&nu2) = values.get(&shape.flat(&m)) {
                diag.max_adjacent_jump = diag.max_adjacent_jump.max((nu - nu2).abs());
            }
        }
    }
    diag.continuity_suspect = diag.max_adjacent_jump > diag.jump_bound;

    Ok(ExitTimeField {
        band,
        values,
        diagnostics: diag,
    })
}

impl ExitTimeField {
    /// Wrap externally computed cell values (closed forms, tooling).
    /// Entries at cells outside the band are dropped; diagnostics only
    /// carry the defined/undefined counts.
    pub fn from_values(band: BoundaryBand, values: HashMap<usize, f64>) -> ExitTimeField {
        let values: HashMap<usize, f64> = band
            .band
            .iter()
            .filter_map(|flat| values.get(flat).map(|v| (*flat, *v)))
            .collect();
        let diagnostics = BandDiagnostics {
            defined: values.len(),
            undefined: band.band.len() - values.len(),
            ..BandDiagnostics::default()
        };
        ExitTimeField {
            band,
            values,
            diagnostics,
        }
    }

    pub fn nu_at_cell(&self, flat: usize) -> Option<f64> {
        self.values.get(&flat).copied()
    }

    /// Multilinear blend of the defined cell-center values around `x`.
    /// Corners that are undefined or outside the band drop out and the
    /// remaining weights renormalize; None when nothing is in reach.
    pub fn nu(&self, x: &[f64]) -> Option<f64> {
        let shape = &self.band.v.shape;
        let n = shape.dim();
        let mut base = vec![0isize; n];
        let mut frac = vec![0.0; n];
        for a in 0..n {
            let u = (x[a] - shape.lo[a]) / shape.cell_width(a) - 0.5;
            let b = u.floor();
            base[a] = b as isize;
            frac[a] = u - b;
        }
        let mut num = 0.0;
        let mut den = 0.0;
        let mut multi = vec![0usize; n];
        'corners: for code in 0..(1usize << n) {
            let mut wgt = 1.0;
            for a in 0..n {
                let bit = (code >> a) & 1;
                wgt *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                let i = base[a] + bit as isize;
                if i < 0 || i >= shape.res[a] as isize {
                    continue 'corners;
                }
                multi[a] = i as usize;
            }
            if wgt == 0.0 {
                continue;
            }
            if let Some(val) = self.values.get(&shape.flat(&multi)) {
                num += wgt * val;
                den += wgt;
            }
        }
        if den > 0.0 {
            Some(num / den)
        } else {
            None
        }
    }

    /// One row per band cell: center coordinates, then the exit time or
    /// `undef`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        for &flat in &self.band.band {
            for c in self.band.v.shape.center(flat) {
                write!(w, "{c},")?;
            }
            match self.values.get(&flat) {
                Some(nu) => writeln!(w, "{nu}")?,
                None => writeln!(w, "undef")?,
            }
        }
        Ok(())
    }
}

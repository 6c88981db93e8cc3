//! Occupancy grids over the domain box.
//!
//! A state set is the union of the closed cells whose bit is set. All
//! reach and certificate operations work on this representation. An
//! `escaped` flag rides along with each grid: it records that some part
//! of a computed reach set left the domain box and is therefore not
//! represented by any cell.

use crate::problem::{DomainBox, SetPredicate};
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid shapes differ: {0} vs {1} cells")]
    ShapeMismatch(usize, usize),
}

/// Axis-aligned uniform grid over a box: per-axis resolution plus the
/// derived strides for flat indexing (axis 0 slowest).
#[derive(Debug, Clone, PartialEq)]
pub struct GridShape {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub res: Vec<usize>,
    strides: Vec<usize>,
}

impl GridShape {
    pub fn new(domain: &DomainBox, res: &[usize]) -> GridShape {
        assert_eq!(domain.dim(), res.len(), "resolution per axis");
        assert!(res.iter().all(|r| *r >= 2), "need at least 2 cells per axis");
        let mut strides = vec![1usize; res.len()];
        for a in (0..res.len().saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * res[a + 1];
        }
        GridShape {
            lo: domain.lo.clone(),
            hi: domain.hi.clone(),
            res: res.to_vec(),
            strides,
        }
    }

    pub fn uniform(domain: &DomainBox, per_axis: usize) -> GridShape {
        GridShape::new(domain, &vec![per_axis; domain.dim()])
    }

    pub fn dim(&self) -> usize {
        self.res.len()
    }

    pub fn cells(&self) -> usize {
        self.res.iter().product()
    }

    pub fn cell_width(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / self.res[axis] as f64
    }

    pub fn min_cell_width(&self) -> f64 {
        (0..self.dim())
            .map(|a| self.cell_width(a))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_cell_width(&self) -> f64 {
        (0..self.dim()).map(|a| self.cell_width(a)).fold(0.0, f64::max)
    }

    pub fn half_diagonal(&self) -> f64 {
        (0..self.dim())
            .map(|a| {
                let w = self.cell_width(a);
                w * w
            })
            .sum::<f64>()
            .sqrt()
            * 0.5
    }

    /// Flat index of the cell containing `x`, None outside the box.
    /// Points exactly on the upper face belong to the last cell.
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        let mut flat = 0;
        for a in 0..self.dim() {
            if x[a] < self.lo[a] || x[a] > self.hi[a] {
                return None;
            }
            let w = self.cell_width(a);
            let i = (((x[a] - self.lo[a]) / w) as usize).min(self.res[a] - 1);
            flat += i * self.strides[a];
        }
        Some(flat)
    }

    pub fn multi(&self, flat: usize) -> Vec<usize> {
        let mut rem = flat;
        self.strides
            .iter()
            .map(|s| {
                let i = rem / s;
                rem %= s;
                i
            })
            .collect()
    }

    pub fn flat(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn center(&self, flat: usize) -> Vec<f64> {
        self.multi(flat)
            .iter()
            .enumerate()
            .map(|(a, i)| self.lo[a] + (*i as f64 + 0.5) * self.cell_width(a))
            .collect()
    }

    pub fn cell_bounds(&self, flat: usize) -> (Vec<f64>, Vec<f64>) {
        let multi = self.multi(flat);
        let lo = multi
            .iter()
            .enumerate()
            .map(|(a, i)| self.lo[a] + *i as f64 * self.cell_width(a))
            .collect();
        let hi = multi
            .iter()
            .enumerate()
            .map(|(a, i)| self.lo[a] + (*i as f64 + 1.0) * self.cell_width(a))
            .collect();
        (lo, hi)
    }

    /// Squared distance from a point to the closed cell.
    pub fn dist_sq_to_cell(&self, flat: usize, x: &[f64]) -> f64 {
        let (lo, hi) = self.cell_bounds(flat);
        let mut d = 0.0;
        for a in 0..self.dim() {
            let gap = (lo[a] - x[a]).max(x[a] - hi[a]).max(0.0);
            d += gap * gap;
        }
        d
    }

    /// Visit every cell intersecting the closed ball around `center`.
    /// Returns false when the ball pokes out of the domain box; the
    /// in-box cells are still visited.
    pub fn ball_cells<F: FnMut(usize)>(&self, center: &[f64], r: f64, mut visit: F) -> bool {
        let n = self.dim();
        let mut inside = true;
        let mut lo_idx = vec![0usize; n];
        let mut hi_idx = vec![0usize; n];
        for a in 0..n {
            if center[a] - r < self.lo[a] || center[a] + r > self.hi[a] {
                inside = false;
            }
            let w = self.cell_width(a);
            let lo = ((center[a] - r - self.lo[a]) / w).floor();
            let hi = ((center[a] + r - self.lo[a]) / w).floor();
            lo_idx[a] = lo.max(0.0) as usize;
            hi_idx[a] = (hi.max(0.0) as usize).min(self.res[a] - 1);
            if lo_idx[a] > hi_idx[a] {
                return inside; // ball entirely off-grid on this axis
            }
        }
        let r_sq = r * r;
        let mut multi = lo_idx.clone();
        loop {
            let flat = self.flat(&multi);
            if self.dist_sq_to_cell(flat, center) <= r_sq {
                visit(flat);
            }
            // advance mixed-radix counter over [lo_idx, hi_idx]
            let mut a = n;
            loop {
                if a == 0 {
                    return inside;
                }
                a -= 1;
                if multi[a] < hi_idx[a] {
                    multi[a] += 1;
                    break;
                }
                multi[a] = lo_idx[a];
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub shape: GridShape,
    bits: Vec<bool>,
    pub escaped: bool,
}

impl OccupancyGrid {
    pub fn empty(shape: GridShape) -> OccupancyGrid {
        let cells = shape.cells();
        OccupancyGrid {
            shape,
            bits: vec![false; cells],
            escaped: false,
        }
    }

    pub fn full(shape: GridShape) -> OccupancyGrid {
        let cells = shape.cells();
        OccupancyGrid {
            shape,
            bits: vec![true; cells],
            escaped: false,
        }
    }

    pub fn occupy(&mut self, flat: usize) {
        self.bits[flat] = true;
    }

    pub fn is_occupied(&self, flat: usize) -> bool {
        self.bits[flat]
    }

    pub fn occupied_count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn iter_occupied(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.then_some(i))
    }

    fn check_shape(&self, other: &OccupancyGrid) -> Result<(), GridError> {
        if self.shape != other.shape {
            return Err(GridError::ShapeMismatch(
                self.shape.cells(),
                other.shape.cells(),
            ));
        }
        Ok(())
    }

    pub fn union(&self, other: &OccupancyGrid) -> Result<OccupancyGrid, GridError> {
        self.check_shape(other)?;
        let mut out = self.clone();
        out.union_in_place(other)?;
        Ok(out)
    }

    pub fn union_in_place(&mut self, other: &OccupancyGrid) -> Result<(), GridError> {
        self.check_shape(other)?;
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
        self.escaped |= other.escaped;
        Ok(())
    }

    pub fn intersection(&self, other: &OccupancyGrid) -> Result<OccupancyGrid, GridError> {
        self.check_shape(other)?;
        let mut out = self.clone();
        for (a, b) in out.bits.iter_mut().zip(&other.bits) {
            *a &= *b;
        }
        out.escaped = self.escaped || other.escaped;
        Ok(out)
    }

    pub fn is_disjoint(&self, other: &OccupancyGrid) -> Result<bool, GridError> {
        self.check_shape(other)?;
        Ok(!self.bits.iter().zip(&other.bits).any(|(a, b)| *a && *b))
    }

    /// True iff every occupied cell of self is occupied in `other`.
    pub fn subset(&self, other: &OccupancyGrid) -> Result<bool, GridError> {
        self.check_shape(other)?;
        Ok(!self.bits.iter().zip(&other.bits).any(|(a, b)| *a && !*b))
    }

    /// One-cell dilation: every neighbor (including diagonals) of an
    /// occupied cell becomes occupied.
    pub fn dilate(&self) -> OccupancyGrid {
        let n = self.shape.dim();
        let mut out = self.clone();
        let mut multi = vec![0usize; n];
        for flat in self.iter_occupied() {
            let base = self.shape.multi(flat);
            // Walk the 3^n neighbor offsets in mixed radix.
            for code in 0..3usize.pow(n as u32) {
                let mut rem = code;
                let mut ok = true;
                for a in 0..n {
                    let off = (rem % 3) as isize - 1;
                    rem /= 3;
                    let i = base[a] as isize + off;
                    if i < 0 || i >= self.shape.res[a] as isize {
                        ok = false;
                        break;
                    }
                    multi[a] = i as usize;
                }
                if ok {
                    let idx = self.shape.flat(&multi);
                    out.bits[idx] = true;
                }
            }
        }
        out
    }

    /// Mark every cell intersecting the closed ball around `center`.
    /// Returns false when the ball pokes out of the domain box.
    pub fn mark_ball(&mut self, center: &[f64], r: f64) -> bool {
        let bits = &mut self.bits;
        self.shape.ball_cells(center, r, |flat| bits[flat] = true)
    }

    /// CSV dump: `# domain` / `# resolution` headers, then one row per
    /// cell with its per-axis indices and occupancy.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        write!(w, "# domain")?;
        for a in 0..self.shape.dim() {
            write!(w, " [{},{}]", self.shape.lo[a], self.shape.hi[a])?;
        }
        writeln!(w)?;
        write!(w, "# resolution")?;
        for r in &self.shape.res {
            write!(w, " {r}")?;
        }
        writeln!(w)?;
        for flat in 0..self.shape.cells() {
            for i in self.shape.multi(flat) {
                write!(w, "{i},")?;
            }
            writeln!(w, "{}", u8::from(self.bits[flat]))?;
        }
        Ok(())
    }
}

/// Occupy every cell where the predicate holds at the center or any of
/// the 2^n corners. Sampling, not exact: a set can slip between samples,
/// which callers needing a cover mitigate with [`OccupancyGrid::dilate`].
pub fn rasterize_set(pred: &SetPredicate, shape: &GridShape) -> OccupancyGrid {
    let n = shape.dim();
    let mut grid = OccupancyGrid::empty(shape.clone());
    let mut point = vec![0.0; n];
    for flat in 0..shape.cells() {
        let (lo, hi) = shape.cell_bounds(flat);
        let mut hit = false;
        for a in 0..n {
            point[a] = 0.5 * (lo[a] + hi[a]);
        }
        if pred.eval(&point) {
            hit = true;
        }
        if !hit {
            for corner in 0..1usize << n {
                for a in 0..n {
                    point[a] = if corner >> a & 1 == 1 { hi[a] } else { lo[a] };
                }
                if pred.eval(&point) {
                    hit = true;
                    break;
                }
            }
        }
        if hit {
            grid.occupy(flat);
        }
    }
    grid
}

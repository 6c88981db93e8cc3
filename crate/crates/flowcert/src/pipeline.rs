//! End-to-end synthesis: search an invariant grid set, measure exit
//! times around its boundary, smooth them, clamp the result into a
//! barrier, and re-validate that barrier on its own terms.
//!
//! Construction stages that refuse (a near-equilibrium inside the band,
//! smoothing bounds blown, a band too thin to clamp) surface as
//! [`StageFailure`] values naming the stage, distinct from the search
//! verdicts and from input errors. The final validation is the only
//! authority on the result: nothing upstream is trusted beyond its own
//! stated bounds.

use std::collections::HashSet;

use serde::Serialize;

use crate::barrier::{
    assemble_barrier, mollify_field, validate_barrier, BarrierError, BarrierFunction,
    BarrierReport,
};
use crate::certify::{
    search_certificate_with, CertStatus, CertificateResult, CertifyError, SearchOptions,
};
use crate::exit_time::{build_band_field, ExitTimeError, ExitTimeField};
use crate::grid::{rasterize_set, GridShape, OccupancyGrid};
use crate::problem::SafetyProblem;
use crate::vecn;

/// Crossing-time bisection tolerance used by the band stage.
const CROSSING_TOL: f64 = 1e-9;

/// Every knob `synthesize` reads. `for_problem` fills in the defaults
/// the command line advertises.
#[derive(Debug, Clone)]
pub struct SynthesisConfig {
    /// Disturbance margin the invariant search runs at.
    pub eps: f64,
    /// Invariance step.
    pub delta: f64,
    /// Search horizon.
    pub t_max: f64,
    /// Cells per axis.
    pub grid: Vec<usize>,
    /// Saturation level of the assembled barrier.
    pub clamp: f64,
    /// Smoothing kernel width; `None` scales one from the grid.
    pub kernel_width: Option<f64>,
    pub seed: u64,
    /// Sample budget for the final validation.
    pub trials: usize,
}

impl SynthesisConfig {
    pub fn for_problem(p: &SafetyProblem) -> SynthesisConfig {
        SynthesisConfig {
            eps: 0.1,
            delta: 0.5,
            t_max: 20.0,
            grid: vec![default_resolution(p.dim); p.dim],
            clamp: 0.2,
            kernel_width: None,
            seed: 0,
            trials: 10_000,
        }
    }
}

/// Cells per axis that keep desk-scale runtimes: fine in one dimension,
/// coarser once the cell count square-laws.
pub fn default_resolution(dim: usize) -> usize {
    if dim <= 1 {
        512
    } else {
        256
    }
}

/// A construction stage refused; names the stage so callers can route
/// the failure without string-matching the message.
#[derive(Debug, Clone, Serialize)]
pub struct StageFailure {
    pub stage: &'static str,
    pub message: String,
    /// Present when the barrier was built but failed its validation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<BarrierReport>,
}

/// Everything a successful run produced, in construction order.
#[derive(Debug)]
pub struct SynthesisRun {
    /// The found invariant set and the time it was found at.
    pub certificate: CertificateResult,
    /// Exit times on the boundary band.
    pub field: ExitTimeField,
    /// Band half-width in cells.
    pub band_halfwidth: usize,
    pub kernel_width: f64,
    pub clamp: f64,
    pub barrier: BarrierFunction,
    pub report: BarrierReport,
    /// Non-fatal observations; the report stands either way.
    pub warnings: Vec<String>,
}

#[derive(Debug)]
pub enum SynthesisOutcome {
    /// Barrier built and validated.
    Synthesized(Box<SynthesisRun>),
    /// The search found a disturbed trajectory reaching the unsafe set.
    UnsafeSuspect(CertificateResult),
    /// The search ran out of horizon or resolution.
    Inconclusive(CertificateResult),
    /// A construction stage refused.
    Failed(StageFailure),
}

/// Flat, serializable view of an outcome for reports.
#[derive(Debug, Clone, Serialize)]
pub struct SynthesisSummary {
    pub status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_found: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub band_cells: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub band_halfwidth: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel_width: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sup_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_lie: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<BarrierReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl SynthesisOutcome {
    pub fn summary(&self) -> SynthesisSummary {
        let mut s = SynthesisSummary {
            status: match self {
                SynthesisOutcome::Synthesized(_) => "synthesized",
                SynthesisOutcome::UnsafeSuspect(_) => "unsafe-suspect",
                SynthesisOutcome::Inconclusive(_) => "inconclusive",
                SynthesisOutcome::Failed(_) => "failed",
            },
            stage: None,
            message: None,
            t_found: None,
            band_cells: None,
            band_halfwidth: None,
            kernel_width: None,
            sup_error: None,
            min_lie: None,
            report: None,
            warnings: Vec::new(),
        };
        match self {
            SynthesisOutcome::Synthesized(run) => {
                s.t_found = run.certificate.t_found;
                s.band_cells = Some(run.field.band.band.len());
                s.band_halfwidth = Some(run.band_halfwidth);
                s.kernel_width = Some(run.kernel_width);
                s.sup_error = Some(run.barrier.nu_prime.sup_error);
                s.min_lie = Some(run.barrier.nu_prime.min_lie);
                s.report = Some(run.report.clone());
                s.warnings = run.warnings.clone();
            }
            SynthesisOutcome::UnsafeSuspect(r) | SynthesisOutcome::Inconclusive(r) => {
                s.t_found = r.t_found;
            }
            SynthesisOutcome::Failed(f) => {
                s.stage = Some(f.stage);
                s.message = Some(f.message.clone());
                s.report = f.report.clone();
            }
        }
        s
    }
}

/// Run the whole construction. `Err` means the inputs were unusable;
/// every verdict about the problem itself comes back as an outcome.
pub fn synthesize(
    p: &SafetyProblem,
    cfg: &SynthesisConfig,
) -> Result<SynthesisOutcome, CertifyError> {
    if cfg.grid.len() != p.dim {
        return Err(CertifyError::Parameter(format!(
            "grid lists {} axes for a {}-dimensional problem",
            cfg.grid.len(),
            p.dim
        )));
    }
    if !(cfg.clamp > 0.0 && cfg.clamp < 0.5) {
        return Err(CertifyError::Parameter(format!(
            "saturation level must lie in (0, 1/2), got {}",
            cfg.clamp
        )));
    }
    if cfg.trials == 0 {
        return Err(CertifyError::Parameter(
            "validation needs at least one trial".into(),
        ));
    }
    let shape = GridShape::new(&p.domain, &cfg.grid);
    let width = cfg.kernel_width.unwrap_or(4.0 * shape.max_cell_width());
    if !(width >= shape.min_cell_width()) {
        return Err(CertifyError::Parameter(format!(
            "kernel width {width} is below one cell ({})",
            shape.min_cell_width()
        )));
    }

    let opts = SearchOptions {
        seed: cfg.seed,
        ..SearchOptions::default()
    };
    let cert = search_certificate_with(p, cfg.eps, cfg.delta, cfg.t_max, &shape, &opts)?;
    let v = match cert.status {
        CertStatus::UnsafeSuspect => return Ok(SynthesisOutcome::UnsafeSuspect(cert)),
        CertStatus::Inconclusive => return Ok(SynthesisOutcome::Inconclusive(cert)),
        CertStatus::Found => cert.v.clone().expect("found result carries its set"),
    };
    // the search freezes the tightest invariant set it can, which may
    // press the initial cells right against its own boundary, where the
    // clamped construction pins the barrier to zero; two rings of
    // dilation give everything the set must contain strict clearance at
    // grid scale, and the final validation re-checks every condition on
    // the set we actually build against
    let v = v.dilate().dilate();

    let k = band_halfwidth(p, &v, cfg.clamp, width);
    let field = match build_band_field(p, &v, k, 4.0 * cfg.delta, CROSSING_TOL) {
        Ok(f) => f,
        Err(e) => {
            let stage = match &e {
                ExitTimeError::Singular { .. } => "exit-time non-singularity",
                _ => "exit-time band",
            };
            return Ok(SynthesisOutcome::Failed(StageFailure {
                stage,
                message: e.to_string(),
                report: None,
            }));
        }
    };

    let nu_prime = match mollify_field(p, &field, width, cfg.clamp) {
        Ok(f) => f,
        Err(e) => {
            return Ok(SynthesisOutcome::Failed(StageFailure {
                stage: "mollify",
                message: e.to_string(),
                report: None,
            }));
        }
    };

    let barrier = match assemble_barrier(nu_prime, &field.band, cfg.clamp) {
        Ok(b) => b,
        Err(e) => {
            let stage = match &e {
                BarrierError::BandTooThin { .. } => "assemble",
                _ => "mollify",
            };
            return Ok(SynthesisOutcome::Failed(StageFailure {
                stage,
                message: e.to_string(),
                report: None,
            }));
        }
    };

    let warnings = band_overlap_warnings(p, &field, &shape);
    let report = validate_barrier(&barrier, p, cfg.trials, &shape);
    if !report.passed {
        return Ok(SynthesisOutcome::Failed(StageFailure {
            stage: "validate",
            message: format!(
                "barrier conditions not met: floor {:.6}, growth {:.6}, ceiling {:.6}",
                report.init_floor.margin, report.zero_growth.margin, report.unsafe_ceiling.margin
            ),
            report: Some(report),
        }));
    }

    Ok(SynthesisOutcome::Synthesized(Box::new(SynthesisRun {
        certificate: cert,
        band_halfwidth: k,
        kernel_width: width,
        clamp: cfg.clamp,
        field,
        barrier,
        report,
        warnings,
    })))
}

/// Band half-width in cells: wide enough that the saturation's active
/// range (exit times up to the clamp level, which costs speed times
/// level in distance, padded for curvature) plus the kernel rim stays
/// inside the band.
fn band_halfwidth(p: &SafetyProblem, v: &OccupancyGrid, clamp: f64, width: f64) -> usize {
    let shape = &v.shape;
    let mut fmax = 0.0f64;
    for flat in v.iter_occupied() {
        let multi = shape.multi(flat);
        let mut edge = false;
        'axes: for a in 0..shape.dim() {
            for step in [-1i64, 1] {
                let m = multi[a] as i64 + step;
                if m < 0 || m >= shape.res[a] as i64 {
                    edge = true;
                    break 'axes;
                }
                let mut nb = multi.clone();
                nb[a] = m as usize;
                if !v.is_occupied(shape.flat(&nb)) {
                    edge = true;
                    break 'axes;
                }
            }
        }
        if edge {
            fmax = fmax.max(vecn::norm(&p.field_at(&shape.center(flat))));
        }
    }
    let span = 1.4 * clamp * fmax + 1.5 * width;
    ((span / shape.min_cell_width()).ceil() as usize).max(8)
}

fn band_overlap_warnings(
    p: &SafetyProblem,
    field: &ExitTimeField,
    shape: &GridShape,
) -> Vec<String> {
    let in_band: HashSet<usize> = field.band.band.iter().copied().collect();
    let mut warnings = Vec::new();
    for (pred, name) in [(&p.init, "initial"), (&p.unsafe_set, "unsafe")] {
        let raster = rasterize_set(pred, shape);
        if raster.iter_occupied().any(|c| in_band.contains(&c)) {
            warnings.push(format!(
                "the smoothing band touches the {name} set; the validation verdict is the authority there"
            ));
        }
    }
    warnings
}

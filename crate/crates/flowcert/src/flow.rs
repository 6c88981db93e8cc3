//! Numerical flow of a safety problem's vector field.
//!
//! Two integrators: classical fixed-step RK4 and adaptive Dormand-Prince
//! RK45. Reverse time integrates the negated field so there is a single
//! forward code path. Disturbed trajectories model bounded-disturbance
//! solutions: a piecewise-constant input drawn uniformly from the
//! Euclidean ball of radius `eps`, redrawn every step.

use crate::problem::SafetyProblem;
use crate::vecn;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Rk4 { h: f64 },
    Rk45 { atol: f64, rtol: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    pub method: Method,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            method: Method::Rk45 {
                atol: 1e-8,
                rtol: 1e-8,
            },
            max_steps: 100_000,
        }
    }
}

impl IntegratorConfig {
    pub fn fixed(h: f64) -> Self {
        IntegratorConfig {
            method: Method::Rk4 { h },
            max_steps: 100_000,
        }
    }

    fn validate(&self) -> Result<(), FlowError> {
        let ok = match self.method {
            Method::Rk4 { h } => h > 0.0 && h.is_finite(),
            Method::Rk45 { atol, rtol } => atol > 0.0 && rtol > 0.0,
        };
        if !ok {
            return Err(FlowError::InvalidConfig(format!("{:?}", self.method)));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("trajectory left the domain box at t = {t_exit}")]
    LeftDomain { t_exit: f64, point: Vec<f64> },
    #[error("step limit {max} exceeded")]
    StepLimit { max: usize },
    #[error("invalid integrator config: {0}")]
    InvalidConfig(String),
}

/// Trajectory recorded at integration step boundaries.
///
/// `times` is strictly increasing with `times[0] = 0`. Between samples the
/// finite-difference derivative stays within `epsilon` plus integration
/// error of the field, which is what makes these usable as bounded-rate
/// disturbance witnesses.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub epsilon: f64,
    pub truncated: bool,
    pub seed: u64,
}

/// One classical RK4 step of length `h` (any sign is fine, but callers
/// here always pass h > 0 and flip the field instead).
pub(crate) fn rk4_step<F: Fn(&[f64], &mut [f64])>(f: &F, x: &[f64], h: f64) -> Vec<f64> {
    let n = x.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];

    f(x, &mut k1);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k1[i];
    }
    f(&tmp, &mut k2);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k2[i];
    }
    f(&tmp, &mut k3);
    for i in 0..n {
        tmp[i] = x[i] + h * k3[i];
    }
    f(&tmp, &mut k4);

    (0..n)
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

// Dormand-Prince 5(4) tableau. The last stage is FSAL but we do not
// exploit that; these systems are tiny.
const DP_C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [&[f64]; 6] = [
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
    ],
    &[
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const DP_B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// One Dormand-Prince step; returns (5th-order state, scaled error norm).
fn dp45_step<F: Fn(&[f64], &mut [f64])>(
    f: &F,
    x: &[f64],
    h: f64,
    atol: f64,
    rtol: f64,
) -> (Vec<f64>, f64) {
    let n = x.len();
    let mut k = vec![vec![0.0; n]; 7];
    f(x, &mut k[0]);
    let mut tmp = vec![0.0; n];
    for s in 0..6 {
        for i in 0..n {
            let mut acc = 0.0;
            for (j, a) in DP_A[s].iter().enumerate() {
                acc += a * k[j][i];
            }
            tmp[i] = x[i] + h * acc;
        }
        let _ = DP_C; // stage times unused: the field is autonomous
        let (head, tail) = k.split_at_mut(s + 1);
        f(&tmp, &mut tail[0]);
        let _ = head;
    }
    let mut out = vec![0.0; n];
    let mut err_sq = 0.0;
    for i in 0..n {
        let mut y5 = 0.0;
        let mut y4 = 0.0;
        for s in 0..7 {
            y5 += DP_B5[s] * k[s][i];
            y4 += DP_B4[s] * k[s][i];
        }
        out[i] = x[i] + h * y5;
        let scale = atol + rtol * x[i].abs().max(out[i].abs());
        let e = h * (y5 - y4) / scale;
        err_sq += e * e;
    }
    (out, (err_sq / n as f64).sqrt())
}

/// Approximate the state reached after time `t` from `x0`, following the
/// field for `t > 0` and the negated field for `t < 0`.
pub fn integrate_flow(
    p: &SafetyProblem,
    x0: &[f64],
    t: f64,
    cfg: &IntegratorConfig,
) -> Result<Vec<f64>, FlowError> {
    cfg.validate()?;
    debug_assert!(p.domain.contains(x0), "start point outside the domain box");
    let reverse = t < 0.0;
    let field = |x: &[f64], out: &mut [f64]| {
        p.eval_field(x, out);
        if reverse {
            for v in out.iter_mut() {
                *v = -*v;
            }
        }
    };
    let horizon = t.abs();
    if horizon == 0.0 {
        return Ok(x0.to_vec());
    }
    let sign = if reverse { -1.0 } else { 1.0 };

    let mut x = x0.to_vec();
    let mut done = 0.0;
    let mut steps = 0usize;

    match cfg.method {
        Method::Rk4 { h } => {
            let n_steps = (horizon / h).ceil().max(1.0) as usize;
            let step = horizon / n_steps as f64;
            for _ in 0..n_steps {
                if steps >= cfg.max_steps {
                    return Err(FlowError::StepLimit { max: cfg.max_steps });
                }
                steps += 1;
                let next = rk4_step(&field, &x, step);
                if !p.domain.contains(&next) {
                    return Err(exit_error(p, &field, &x, step, done, sign));
                }
                x = next;
                done += step;
            }
        }
        Method::Rk45 { atol, rtol } => {
            let mut h = (horizon / 100.0).min(0.1).max(1e-8);
            while done < horizon {
                if steps >= cfg.max_steps {
                    return Err(FlowError::StepLimit { max: cfg.max_steps });
                }
                steps += 1;
                let h_try = h.min(horizon - done);
                let (next, err) = dp45_step(&field, &x, h_try, atol, rtol);
                if err <= 1.0 {
                    if !p.domain.contains(&next) {
                        return Err(exit_error(p, &field, &x, h_try, done, sign));
                    }
                    x = next;
                    done += h_try;
                }
                let factor = if err > 0.0 {
                    (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
                } else {
                    5.0
                };
                h = (h_try * factor).max(1e-12);
            }
        }
    }
    Ok(x)
}

/// Bisect within a step known to cross the domain boundary.
fn exit_error<F: Fn(&[f64], &mut [f64])>(
    p: &SafetyProblem,
    field: &F,
    from: &[f64],
    step: f64,
    done: f64,
    sign: f64,
) -> FlowError {
    let mut lo = 0.0;
    let mut hi = step;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        let probe = rk4_step(field, from, mid);
        if p.domain.contains(&probe) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t_exit = sign * (done + hi);
    let point = rk4_step(field, from, hi);
    FlowError::LeftDomain { t_exit, point }
}

/// Step length used when the caller's config is adaptive; disturbance
/// draws need a fixed step grid.
const SAMPLE_STEP: f64 = 1.0 / 128.0;

/// Integrate `ẋ = f(x) + u` with `u` redrawn uniformly from the Euclidean
/// `eps`-ball at every step, fixed RK4. Deterministic in `seed`. If the
/// trajectory leaves the domain box, recording stops at the last inside
/// state and the sample is flagged truncated.
pub fn sample_disturbed_trajectory(
    p: &SafetyProblem,
    x0: &[f64],
    horizon: f64,
    eps: f64,
    seed: u64,
    cfg: &IntegratorConfig,
) -> TrajectorySample {
    assert!(eps >= 0.0, "disturbance bound must be nonnegative");
    assert!(horizon > 0.0, "horizon must be positive");
    let h = match cfg.method {
        Method::Rk4 { h } => h,
        Method::Rk45 { .. } => SAMPLE_STEP,
    };
    let n_steps = (horizon / h).ceil().max(1.0) as usize;
    let step = horizon / n_steps as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    times.push(0.0);
    states.push(x0.to_vec());
    let mut truncated = false;

    let mut x = x0.to_vec();
    let mut u = vec![0.0; p.dim];
    for k in 0..n_steps {
        if eps > 0.0 {
            draw_ball(&mut rng, eps, &mut u);
        }
        let disturbed = |y: &[f64], out: &mut [f64]| {
            p.eval_field(y, out);
            for (o, ui) in out.iter_mut().zip(&u) {
                *o += *ui;
            }
        };
        let next = rk4_step(&disturbed, &x, step);
        if !p.domain.contains(&next) {
            truncated = true;
            break;
        }
        x = next;
        times.push((k + 1) as f64 * step);
        states.push(x.clone());
    }

    TrajectorySample {
        times,
        states,
        epsilon: eps,
        truncated,
        seed,
    }
}

/// Uniform draw from the Euclidean ball of radius `r` by rejection from
/// the enclosing cube; acceptance is fine for the low dimensions here.
fn draw_ball(rng: &mut ChaCha8Rng, r: f64, out: &mut [f64]) {
    loop {
        for v in out.iter_mut() {
            *v = rng.gen_range(-r..=r);
        }
        if vecn::norm(out) <= r {
            return;
        }
    }
}

const PRIMES: [usize; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

fn halton(mut index: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while index > 0 {
        f /= base as f64;
        r += f * (index % base) as f64;
        index /= base;
    }
    r
}

/// Upper estimate of the Lipschitz constant of the field on the domain
/// box: maximum Jacobian operator norm over a Halton sample, times a 1.2
/// safety factor. Jacobians by central differences, operator norms by
/// power iteration on JᵀJ.
pub fn lipschitz_estimate(p: &SafetyProblem, samples: usize) -> f64 {
    assert!(samples >= 2, "need at least two sample points");
    assert!(p.dim <= PRIMES.len(), "dimension too large for Halton bases");
    let n = p.dim;
    let mut x = vec![0.0; n];
    let mut jac = vec![vec![0.0; n]; n];
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    let mut max_norm: f64 = 0.0;

    for s in 1..=samples {
        for axis in 0..n {
            let u = halton(s, PRIMES[axis]);
            x[axis] = p.domain.lo[axis] + u * p.domain.width(axis);
        }
        for j in 0..n {
            let delta = 1e-5 * (1.0 + x[j].abs());
            let keep = x[j];
            x[j] = keep + delta;
            p.eval_field(&x, &mut fp);
            x[j] = keep - delta;
            p.eval_field(&x, &mut fm);
            x[j] = keep;
            for i in 0..n {
                jac[i][j] = (fp[i] - fm[i]) / (2.0 * delta);
            }
        }
        max_norm = max_norm.max(operator_norm(&jac));
    }
    max_norm * 1.2
}

/// Spectral norm via power iteration on JᵀJ.
fn operator_norm(jac: &[Vec<f64>]) -> f64 {
    let n = jac.len();
    if n == 1 {
        return jac[0][0].abs();
    }
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut jv = vec![0.0; n];
    for _ in 0..80 {
        for i in 0..n {
            jv[i] = vecn::dot(&jac[i], &v);
        }
        // w = Jᵀ (J v)
        let mut w = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                w[j] += jac[i][j] * jv[i];
            }
        }
        let len = vecn::norm(&w);
        if len < 1e-300 {
            return 0.0;
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / len;
        }
    }
    for i in 0..n {
        jv[i] = vecn::dot(&jac[i], &v);
    }
    vecn::norm(&jv)
}

/// Dump a trajectory as CSV with header `t,x1,...,xn`.
pub fn write_trajectory_csv<W: Write>(
    w: &mut W,
    times: &[f64],
    states: &[Vec<f64>],
) -> io::Result<()> {
    let dim = states.first().map_or(0, Vec::len);
    write!(w, "t")?;
    for i in 1..=dim {
        write!(w, ",x{i}")?;
    }
    writeln!(w)?;
    for (t, x) in times.iter().zip(states) {
        write!(w, "{t}")?;
        for v in x {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

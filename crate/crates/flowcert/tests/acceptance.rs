//! Desk-scale acceptance checks, library side: integrator accuracy
//! against closed forms, reach-grid soundness under sampled
//! disturbances, and the exit-time clock's algebra. Each test prints
//! one `criterion N: pass/fail` line; criteria 3, 4, 7, 8 and 9 drive
//! the compiled binary and live next to it.

use std::time::Instant;

use flowcert::benchmarks::by_name;
use flowcert::certify::search_certificate;
use flowcert::exit_time::{build_band_field, ExitTimeField};
use flowcert::flow::{
    integrate_flow, lipschitz_estimate, sample_disturbed_trajectory, IntegratorConfig,
};
use flowcert::grid::{rasterize_set, GridShape};
use flowcert::problem::SafetyProblem;
use flowcert::reach::{covers_state, reach_interval, ReachParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, ok: bool) {
    println!("criterion {n}: {}", if ok { "pass" } else { "fail" });
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn criterion_1_flow_matches_the_closed_form() {
    let start = Instant::now();
    let cfg = IntegratorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for name in ["lin1d-stable", "spiral2d"] {
        let b = by_name(name).unwrap();
        let p = b.problem();
        let oracle = b.flow_oracle.unwrap();
        // keep starts small enough that three time units of backward
        // growth still fit inside the analysis box
        let amp = if p.dim == 1 { 0.1 } else { 0.25 };
        for _ in 0..200 {
            let x0: Vec<f64> = (0..p.dim).map(|_| rng.gen_range(-amp..amp)).collect();
            let t = rng.gen_range(-3.0..3.0);
            let numeric = integrate_flow(&p, &x0, t, &cfg).unwrap();
            worst = worst.max(dist(&numeric, &oracle(&x0, t)));
        }
    }
    let elapsed = start.elapsed();
    let ok = worst < 1e-6 && elapsed.as_secs_f64() < 5.0;
    report(1, ok);
    assert!(ok, "worst deviation {worst:.3e} in {elapsed:?}");
}

fn sample_init(p: &SafetyProblem, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let x: Vec<f64> = (0..p.dim)
            .map(|a| rng.gen_range(p.domain.lo[a]..p.domain.hi[a]))
            .collect();
        if p.init.eval(&x) {
            return x;
        }
    }
}

#[test]
fn criterion_2_sampled_disturbances_stay_inside_the_reach_grid() {
    let start = Instant::now();
    let cfg = IntegratorConfig::default();
    let mut ok = true;
    for name in ["lin1d-stable", "spiral2d"] {
        let p = by_name(name).unwrap().problem();
        let res = if p.dim == 1 { vec![512] } else { vec![256, 256] };
        let shape = GridShape::new(&p.domain, &res);
        let seeds = rasterize_set(&p.init, &shape);
        let rp = ReachParams::new(0.1, 0.5 / 8.0, lipschitz_estimate(&p, 2048));
        let w = reach_interval(&seeds, &p, &rp, 5.0);

        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut outside = 0usize;
        for trial in 0..10_000u64 {
            let x0 = sample_init(&p, &mut rng);
            let traj = sample_disturbed_trajectory(&p, &x0, 5.0, 0.1, trial, &cfg);
            if traj.truncated || traj.states.iter().any(|s| !covers_state(&w, s)) {
                outside += 1;
            }
        }
        if outside != 0 {
            eprintln!("{name}: {outside} of 10000 trajectories left the grid");
            ok = false;
        }
    }
    let elapsed = start.elapsed();
    let ok = ok && elapsed.as_secs_f64() < 120.0;
    report(2, ok);
    assert!(ok, "finished in {elapsed:?}");
}

/// Certificate band for the stable line, plus cell centers well inside
/// it where a short flight in either direction stays interpolable.
fn stable_band() -> (SafetyProblem, ExitTimeField, Vec<Vec<f64>>) {
    let p = by_name("lin1d-stable").unwrap().problem();
    let shape = GridShape::new(&p.domain, &[512]);
    let cert = search_certificate(&p, 0.1, 0.5, 20.0, &shape).expect("search runs");
    let v = cert.v.expect("the stable line certifies");
    let field = build_band_field(&p, &v, 20, 2.0, 1e-9).expect("band builds");
    let centers: Vec<Vec<f64>> = field
        .band
        .band
        .iter()
        .map(|&flat| field.band.v.shape.center(flat))
        .filter(|c| field.nu(c).is_some_and(|n| n.abs() <= 0.1))
        .collect();
    assert!(centers.len() >= 10, "band too thin to sample");
    (p, field, centers)
}

#[test]
fn criterion_5_exit_time_obeys_the_cocycle_law() {
    let (p, field, centers) = stable_band();
    let cfg = IntegratorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x = &centers[rng.gen_range(0..centers.len())];
        let s = rng.gen_range(-0.2..0.2);
        let y = integrate_flow(&p, x, s, &cfg).unwrap();
        let (nu_x, nu_y) = (field.nu(x).unwrap(), field.nu(&y).expect("step stays in band"));
        worst = worst.max((nu_y - nu_x - s).abs());
    }
    let ok = worst <= 1e-3;
    report(5, ok);
    assert!(ok, "worst cocycle defect {worst:.3e}");
}

#[test]
fn criterion_6_exit_time_advances_at_unit_rate() {
    let (p, field, centers) = stable_band();
    let cfg = IntegratorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let h = 1e-2;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..100 {
        let x = &centers[rng.gen_range(0..centers.len())];
        let y = integrate_flow(&p, x, h, &cfg).unwrap();
        let rate = (field.nu(&y).expect("step stays in band") - field.nu(x).unwrap()) / h;
        lo = lo.min(rate);
        hi = hi.max(rate);
    }
    let ok = lo >= 0.95 && hi <= 1.05;
    report(6, ok);
    assert!(ok, "secant rates spanned [{lo:.4}, {hi:.4}]");
}

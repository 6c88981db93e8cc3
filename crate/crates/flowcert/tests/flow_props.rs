//! Flow-map laws checked on every benchmark: composing in time equals a
//! single longer integration, and reverse time undoes forward time.

use flowcert::benchmarks::list_benchmarks;
use flowcert::flow::{integrate_flow, sample_disturbed_trajectory, IntegratorConfig};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Start points from the init region, time spans short enough that both
/// trajectory legs stay inside the domain box (the unstable benchmark
/// escapes quickly).
fn start_and_span(name: &str, rng: &mut ChaCha8Rng) -> (Vec<f64>, f64) {
    match name {
        "lin1d-stable" => (vec![rng.gen_range(-0.5..=0.5)], 3.0),
        "lin1d-unstable" => (vec![rng.gen_range(-0.5..=0.5)], 1.4),
        _ => {
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = rng.gen_range(0.0..0.2);
            (vec![1.0 + r * a.cos(), r * a.sin()], 3.0)
        }
    }
}

#[test]
fn flow_composes_over_time() {
    let cfg = IntegratorConfig::default();
    let tol = 10.0 * 1e-8;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for b in list_benchmarks() {
        let p = b.problem();
        for case in 0..100 {
            let (x0, span) = start_and_span(b.name, &mut rng);
            let s = rng.gen_range(0.0..span / 2.0);
            let t = rng.gen_range(0.0..span / 2.0);
            let direct = integrate_flow(&p, &x0, s + t, &cfg).unwrap();
            let mid = integrate_flow(&p, &x0, s, &cfg).unwrap();
            let composed = integrate_flow(&p, &mid, t, &cfg).unwrap();
            let d = dist(&direct, &composed);
            assert!(d <= tol, "{} case {case}: defect {d}", b.name);
        }
    }
}

#[test]
fn reverse_time_undoes_forward_time() {
    let cfg = IntegratorConfig::default();
    let tol = 10.0 * 1e-8;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for b in list_benchmarks() {
        let p = b.problem();
        for case in 0..100 {
            let (x0, span) = start_and_span(b.name, &mut rng);
            let t = rng.gen_range(0.0..span / 2.0);
            let fwd = integrate_flow(&p, &x0, t, &cfg).unwrap();
            let back = integrate_flow(&p, &fwd, -t, &cfg).unwrap();
            let d = dist(&back, &x0);
            assert!(d <= tol, "{} case {case}: defect {d}", b.name);
        }
    }
}

#[test]
fn numeric_flow_tracks_closed_forms() {
    let cfg = IntegratorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for b in list_benchmarks() {
        let p = b.problem();
        let oracle = b.flow_oracle.expect("all built-ins carry an oracle");
        for _ in 0..50 {
            let (x0, span) = start_and_span(b.name, &mut rng);
            let t = rng.gen_range(0.0..span);
            let numeric = integrate_flow(&p, &x0, t, &cfg).unwrap();
            let exact = oracle(&x0, t);
            assert!(
                dist(&numeric, &exact) < 1e-7,
                "{}: {numeric:?} vs {exact:?}",
                b.name
            );
        }
    }
}

#[test]
fn disturbed_samples_respect_the_derivative_bound() {
    let cfg = IntegratorConfig::default();
    for b in list_benchmarks() {
        let p = b.problem();
        let x0 = if p.dim == 1 { vec![0.4] } else { vec![1.0, 0.0] };
        for seed in 0..5 {
            let sample = sample_disturbed_trajectory(&p, &x0, 4.0, 0.1, seed, &cfg);
            let n = sample.times.len();
            assert!(sample.times.windows(2).all(|w| w[1] > w[0]));
            let mut mid = vec![0.0; p.dim];
            let mut fmid = vec![0.0; p.dim];
            for k in 0..n - 1 {
                let dt = sample.times[k + 1] - sample.times[k];
                for i in 0..p.dim {
                    mid[i] = 0.5 * (sample.states[k][i] + sample.states[k + 1][i]);
                }
                p.eval_field(&mid, &mut fmid);
                let defect = (0..p.dim)
                    .map(|i| {
                        let d = (sample.states[k + 1][i] - sample.states[k][i]) / dt - fmid[i];
                        d * d
                    })
                    .sum::<f64>()
                    .sqrt();
                assert!(
                    defect <= 0.1 + 1e-3,
                    "{} seed {seed} step {k}: defect {defect}",
                    b.name
                );
            }
        }
    }
}

//! Built-in benchmark problems with closed-form oracles.
//!
//! Linear fields on purpose: `e^{At}` in closed form makes flow, reach-set
//! and exit-time assertions independently checkable throughout the test
//! suite without trusting the integrator under test.

use crate::problem::{parse_problem, SafetyProblem};

#[derive(Clone, Copy)]
pub struct Benchmark {
    pub name: &'static str,
    /// Problem description in the on-disk format.
    pub text: &'static str,
    /// Whether safety actually holds for this instance.
    pub known_safe: bool,
    /// A hand-written barrier expression valid for this problem, if one
    /// is available.
    pub analytic_barrier: Option<&'static str>,
    /// Closed-form flow `φ(x, t)` where available.
    pub flow_oracle: Option<fn(&[f64], f64) -> Vec<f64>>,
}

impl Benchmark {
    pub fn problem(&self) -> SafetyProblem {
        parse_problem(self.text).expect("built-in benchmark must parse")
    }
}

const LIN1D_STABLE: &str = "\
dim    = 1
field  = [ \"-x1\" ]
domain = [ [-2.2, 2.2] ]
init   = \"x1^2 <= 0.25\"
unsafe = \"x1^2 >= 4\"
";

const LIN1D_UNSTABLE: &str = "\
dim    = 1
field  = [ \"x1\" ]
domain = [ [-2.2, 2.2] ]
init   = \"x1^2 <= 0.25\"
unsafe = \"x1^2 >= 4\"
";

const SPIRAL2D: &str = "\
dim    = 2
field  = [ \"-x2 - 0.5*x1\", \"x1 - 0.5*x2\" ]
domain = [ [-3.3, 3.3], [-3.3, 3.3] ]
init   = \"(x1 - 1)^2 + x2^2 <= 0.04\"
unsafe = \"x1^2 + x2^2 >= 9\"
";

fn decay_flow(x: &[f64], t: f64) -> Vec<f64> {
    vec![x[0] * (-t).exp()]
}

fn growth_flow(x: &[f64], t: f64) -> Vec<f64> {
    vec![x[0] * t.exp()]
}

// A = [[-0.5, -1], [1, -0.5]] = -0.5 I + rotation generator, so
// e^{At} = e^{-t/2} R(t).
fn spiral_flow(x: &[f64], t: f64) -> Vec<f64> {
    let decay = (-0.5 * t).exp();
    let (s, c) = t.sin_cos();
    vec![
        decay * (c * x[0] - s * x[1]),
        decay * (s * x[0] + c * x[1]),
    ]
}

pub fn list_benchmarks() -> Vec<Benchmark> {
    vec![
        Benchmark {
            name: "lin1d-stable",
            text: LIN1D_STABLE,
            known_safe: true,
            analytic_barrier: Some("1 - x1^2"),
            flow_oracle: Some(decay_flow),
        },
        Benchmark {
            name: "lin1d-unstable",
            text: LIN1D_UNSTABLE,
            known_safe: false,
            analytic_barrier: None,
            flow_oracle: Some(growth_flow),
        },
        Benchmark {
            name: "spiral2d",
            text: SPIRAL2D,
            known_safe: true,
            analytic_barrier: Some("1 - (x1^2 + x2^2)/4"),
            flow_oracle: Some(spiral_flow),
        },
    ]
}

pub fn by_name(name: &str) -> Option<Benchmark> {
    list_benchmarks().into_iter().find(|b| b.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{integrate_flow, IntegratorConfig};
    use crate::vecn;

    #[test]
    fn all_benchmarks_parse() {
        for b in list_benchmarks() {
            let p = b.problem();
            assert_eq!(p.dim, if b.name == "spiral2d" { 2 } else { 1 }, "{}", b.name);
        }
    }

    #[test]
    fn lookup_by_name() {
        assert!(by_name("spiral2d").is_some());
        assert!(by_name("nonesuch").is_none());
    }

    #[test]
    fn stable_flow_oracle_is_exponential_decay() {
        let b = by_name("lin1d-stable").unwrap();
        let oracle = b.flow_oracle.unwrap();
        let got = oracle(&[1.0], 1.0);
        assert!((got[0] - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn flow_oracles_agree_with_the_integrator() {
        let cfg = IntegratorConfig::default();
        for b in list_benchmarks() {
            let p = b.problem();
            let oracle = b.flow_oracle.unwrap();
            let (x0, t): (Vec<f64>, f64) = match b.name {
                "lin1d-stable" => (vec![0.5], 2.0),
                "lin1d-unstable" => (vec![0.5], 1.0),
                _ => (vec![1.0, 0.2], 3.0),
            };
            let numeric = integrate_flow(&p, &x0, t, &cfg).unwrap();
            let exact = oracle(&x0, t);
            assert!(
                vecn::dist(&numeric, &exact) < 1e-6,
                "{}: {numeric:?} vs {exact:?}",
                b.name
            );
        }
    }

    #[test]
    fn init_and_unsafe_sets_match_their_construction() {
        let spiral = by_name("spiral2d").unwrap().problem();
        assert!(spiral.init.eval(&[1.0, 0.0]));
        assert!(spiral.init.eval(&[1.19, 0.0]));
        assert!(!spiral.init.eval(&[1.3, 0.0]));
        assert!(spiral.unsafe_set.eval(&[3.0, 0.5]));
        assert!(!spiral.unsafe_set.eval(&[2.9, 0.0]));
    }
}

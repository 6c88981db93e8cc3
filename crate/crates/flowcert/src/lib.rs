//! Safety verification for continuous dynamical systems on box domains.
//!
//! The pipeline goes: parse a problem description ([`problem`]), integrate
//! its vector field ([`flow`]), over-approximate reachable sets on an
//! occupancy grid ([`grid`], [`reach`]), search for an invariant certificate
//! ([`certify`]), extract a boundary exit-time field ([`exit_time`]), and
//! smooth + clamp it into a validated barrier function ([`barrier`]).
//! [`pipeline`] wires the stages together and [`benchmarks`] ships small
//! systems with closed-form solutions used throughout the test suite.

pub mod barrier;
pub mod benchmarks;
pub mod certify;
pub mod exit_time;
pub mod expr;
pub mod flow;
pub mod grid;
pub mod pipeline;
pub mod problem;
pub mod reach;

pub(crate) mod vecn {
    //! Tiny helpers for `&[f64]` state vectors; dimensions stay small.

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    pub fn norm(a: &[f64]) -> f64 {
        dot(a, a).sqrt()
    }

    pub fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }
}

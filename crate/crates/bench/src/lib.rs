//! Fixtures shared by the benchmarks.

use elastodg::config::ProblemConfig;
use elastodg::dg::{Discretization, Solution};
use elastodg::driver::Problem;

/// The circular-cavity plane-wave problem on an `n × n` grid at degree `p`,
/// with its initial state.
pub fn circle(n: usize, p: usize) -> (Problem, Discretization, Solution) {
    let cfg = ProblemConfig::preset("circle_convergence")
        .expect("shipped preset")
        .expect("valid preset");
    let problem = Problem::new(cfg).expect("valid problem");
    let disc = problem.discretization([n, n], p).expect("mesh builds");
    let ex = problem.exact.clone().expect("plane wave");
    let sol = disc.project(|x, _| ex.state(x, 0.0));
    (problem, disc, sol)
}

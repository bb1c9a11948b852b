//! Randomized property suites behind `gridtrack verify`.
//!
//! Each case draws from its own `ChaCha8Rng` seeded with `seed + case`, so
//! cases run in parallel and results do not depend on scheduling.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::coop::run_coop_projection;
use crate::engine::{select_rho, TotalEngine, TrackingEngine};
use crate::error::{Error, Result};
use crate::metrics::g_norm;
use crate::model::{
    curvature_bounds, eval_gradient, eval_objective, DispatchInstance, Matrix, NodeObjective,
    ObjectiveKind, Vector,
};
use crate::netsim::Network;
use crate::oracle::{delta_max, kkt_residual, solve_instance};
use crate::projection::{project_polyhedron, ProjectionTask};
use crate::reference;
use crate::scenario::{build_scenario, ScenarioConfig};

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_CASES: usize = 1000;

pub const PROJECTION_TOL: f64 = 1e-8;
pub const GRADIENT_TOL: f64 = 1e-6;
pub const GRADIENT_STEP: f64 = 1e-5;
pub const KKT_TOL: f64 = 1e-10;
pub const CONTRACTION_SLACK: f64 = 1e-9;
/// Contraction is checked while `||u - u*||_G` exceeds this.
pub const CONTRACTION_FLOOR: f64 = 1e-8;
pub const CONVERGENCE_TOL: f64 = 1e-6;
pub const CONVERGENCE_BUDGET: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Projection,
    Protocol,
    Contraction,
    Gradient,
    Oracle,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Projection,
        Suite::Protocol,
        Suite::Contraction,
        Suite::Gradient,
        Suite::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Projection => "projection",
            Suite::Protocol => "protocol",
            Suite::Contraction => "contraction",
            Suite::Gradient => "gradient",
            Suite::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == s)
            .ok_or_else(|| Error::Config {
                key: "suite".into(),
                reason: format!("unknown suite `{s}`"),
            })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteOutcome {
    pub suite: Suite,
    pub cases: usize,
    pub failures: usize,
    /// Largest observed error measure.
    pub worst: f64,
    pub tolerance: f64,
    pub detail: String,
    pub pass: bool,
    pub elapsed: Duration,
}

pub fn case_rng(seed: u64, case: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(case as u64))
}

fn random_bounds(rng: &mut ChaCha8Rng, n: usize, r: usize) -> (Matrix, Matrix, Vector) {
    let lower = Array2::from_shape_fn((n, r), |_| rng.random_range(-3.0..1.0));
    let upper = Array2::from_shape_fn((n, r), |(i, j)| lower[[i, j]] + rng.random_range(0.05..4.0));
    let target = Vector::from_shape_fn(r, |j| {
        let lo = lower.column(j).sum();
        let hi = upper.column(j).sum();
        lo + rng.random_range(0.02..0.98) * (hi - lo)
    });
    (lower, upper, target)
}

/// Random feasible task with `N <= 8`, `R <= 3`.
pub fn random_projection_task(rng: &mut ChaCha8Rng) -> ProjectionTask {
    let n = rng.random_range(1..=8);
    let r = rng.random_range(1..=3);
    let (lower, upper, target) = random_bounds(rng, n, r);
    let scale = rng.random_range(0.5..8.0);
    let point = Array2::from_shape_fn((n, r), |_| rng.random_range(-scale..scale));
    ProjectionTask {
        point,
        lower,
        upper,
        target,
    }
}

/// Random instance with quadratic objectives and strict interior.
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    max_nodes: usize,
    max_resources: usize,
) -> DispatchInstance {
    let n = rng.random_range(1..=max_nodes);
    let r = rng.random_range(1..=max_resources);
    let (lower, upper, supply) = random_bounds(rng, n, r);
    let producers = rng.random_range(0..=n);
    let objectives = (0..n)
        .map(|i| {
            let kind = if i < producers {
                ObjectiveKind::ProducerCost
            } else {
                ObjectiveKind::ConsumerUtility
            };
            let a: Vec<f64> = (0..r).map(|_| rng.random_range(0.2..3.0)).collect();
            let d: Vec<f64> = (0..r).map(|_| rng.random_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..r).map(|_| rng.random_range(-1.0..1.0)).collect();
            NodeObjective::new(kind, a, d, b).expect("valid objective")
        })
        .collect();
    DispatchInstance::new(0, producers, objectives, lower, upper, supply)
        .expect("strict interior by construction")
}

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Largest deviation of `project_polyhedron` from the enumeration oracle.
pub fn projection_case(task: &ProjectionTask) -> Result<f64> {
    let got = project_polyhedron(task)?;
    let mut worst: f64 = 0.0;
    for j in 0..task.target.len() {
        let col = |m: &Matrix| m.column(j).to_vec();
        let expected = reference::project_column(
            &col(&task.point),
            &col(&task.lower),
            &col(&task.upper),
            task.target[j],
        );
        for (i, e) in expected.iter().enumerate() {
            worst = worst.max((got.q[[i, j]] - e).abs());
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug)]
pub struct ProtocolCase {
    pub max_err: f64,
    pub accounting_exact: bool,
    pub within_worst_case: bool,
}

/// Runs the cooperative projection for random `p`, `lambda`, `rho` on the
/// instance and compares it with the kernel.
pub fn protocol_case(instance: &DispatchInstance, rng: &mut ChaCha8Rng) -> Result<ProtocolCase> {
    let (n, r) = (instance.n_nodes(), instance.n_resources());
    let rho = rng.random_range(0.1..20.0);
    let p = Array2::from_shape_fn((n, r), |_| rng.random_range(-6.0..6.0));
    let lambda = Array2::from_shape_fn((n, r), |_| rng.random_range(-10.0..10.0));
    let mut net = Network::star(n);
    let (q, tr) = run_coop_projection(&p, &lambda, rho, instance, &mut net)?;
    let kernel = project_polyhedron(&ProjectionTask {
        point: &p + &(&lambda / rho),
        lower: instance.lower().clone(),
        upper: instance.upper().clone(),
        target: instance.supply().clone(),
    })?;
    Ok(ProtocolCase {
        max_err: max_abs_diff(&q, &kernel.q),
        accounting_exact: tr.reals_up == tr.expected_uplink(n) && tr.bits == 2 * r as u64,
        within_worst_case: tr.total_reals() <= 4 * (r * n) as u64,
    })
}

/// Relative error `||grad - fd|| / max(1, ||grad||)` at a random probe.
pub fn gradient_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let r = rng.random_range(1..=4);
    let a: Vec<f64> = (0..r).map(|_| rng.random_range(0.1..5.0)).collect();
    let d: Vec<f64> = (0..r).map(|_| rng.random_range(-5.0..5.0)).collect();
    let b: Vec<f64> = (0..r).map(|_| rng.random_range(-2.0..2.0)).collect();
    let kind = if rng.random_bool(0.5) {
        ObjectiveKind::ProducerCost
    } else {
        ObjectiveKind::ConsumerUtility
    };
    let obj = NodeObjective::new(kind, a, d, b)?;
    let x: Vec<f64> = (0..r).map(|_| rng.random_range(-10.0..10.0)).collect();
    let grad = eval_gradient(&obj, Vector::from(x.clone()).view())?;
    let fd = reference::central_difference(
        |y| eval_objective(&obj, Vector::from(y.to_vec()).view()).expect("matching dimension"),
        &x,
        GRADIENT_STEP,
    );
    let diff = grad
        .iter()
        .zip(&fd)
        .map(|(g, f)| (g - f).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = grad.dot(&grad).sqrt();
    Ok(diff / norm.max(1.0))
}

/// Largest deviation from the enumeration oracle and the KKT residual.
pub fn oracle_case(instance: &DispatchInstance) -> Result<(f64, f64)> {
    let sol = solve_instance(instance)?;
    let mut worst: f64 = 0.0;
    for j in 0..instance.n_resources() {
        let a: Vec<f64> = instance
            .objectives()
            .iter()
            .map(|o| o.curvature()[j])
            .collect();
        let c: Vec<f64> = instance
            .objectives()
            .iter()
            .map(|o| o.target()[j])
            .collect();
        let expected = reference::weighted_column(
            &a,
            &c,
            &instance.lower().column(j).to_vec(),
            &instance.upper().column(j).to_vec(),
            instance.supply()[j],
        )
        .ok_or_else(|| Error::Protocol("reference found no feasible point".into()))?;
        for (i, e) in expected.iter().enumerate() {
            worst = worst.max((sol.p_star[[i, j]] - e).abs());
        }
    }
    Ok((worst, kkt_residual(instance, &sol)))
}

#[derive(Clone, Debug, Serialize)]
pub struct ContractionTrace {
    pub rho: f64,
    pub delta_max: f64,
    /// `||u(k) - u*||_G^2`, index 0 is the initialization.
    pub g_err_sq: Vec<f64>,
    /// `max(|p - p*|, |q - p*|)` entrywise per iteration.
    pub max_err: Vec<f64>,
    pub converged_at: Option<usize>,
}

impl ContractionTrace {
    /// `||u(k+1) - u*||^2 / ||u(k) - u*||^2` while `||u(k) - u*||_G > floor`.
    pub fn ratios(&self, floor: f64) -> Vec<f64> {
        self.g_err_sq
            .windows(2)
            .take_while(|w| w[0].sqrt() > floor)
            .map(|w| w[1] / w[0])
            .collect()
    }

    /// Steps violating `e(k+1) <= factor e(k) + slack` while above `floor`.
    pub fn violations(&self, factor: f64, slack: f64, floor: f64) -> Vec<usize> {
        self.g_err_sq
            .windows(2)
            .enumerate()
            .take_while(|(_, w)| w[0].sqrt() > floor)
            .filter(|(_, w)| w[1] > factor * w[0] + slack)
            .map(|(k, _)| k)
            .collect()
    }
}

/// Runs the feasible engine on a fixed instance for `iterations` steps.
pub fn contraction_trace(
    instance: &DispatchInstance,
    rho: f64,
    iterations: usize,
) -> Result<ContractionTrace> {
    let sol = solve_instance(instance)?;
    let (sigma, l) = curvature_bounds(instance);
    let mut engine = TotalEngine::new(instance, rho)?;
    let mut net = Network::star(instance.n_nodes());
    let measure = |engine: &TotalEngine| {
        let s = engine.snapshot();
        let e = g_norm(&(&s.p - &sol.p_star), &(&s.lambda - &sol.lambda_star), rho).powi(2);
        let q = s.q.as_ref().expect("feasible engine has q");
        (
            e,
            max_abs_diff(&s.p, &sol.p_star).max(max_abs_diff(q, &sol.p_star)),
        )
    };
    let (e0, m0) = measure(&engine);
    let mut trace = ContractionTrace {
        rho,
        delta_max: delta_max(sigma, l),
        g_err_sq: vec![e0],
        max_err: vec![m0],
        converged_at: (m0 <= CONVERGENCE_TOL).then_some(0),
    };
    for k in 1..=iterations {
        engine.step(&instance.with_k(k), &mut net)?;
        let (e, m) = measure(&engine);
        trace.g_err_sq.push(e);
        trace.max_err.push(m);
        if trace.converged_at.is_none() && m <= CONVERGENCE_TOL {
            trace.converged_at = Some(k);
        }
    }
    Ok(trace)
}

/// First instance of the default scenario under `seed`: ten nodes with
/// `(p - d)^2` objectives, so `sigma = L = 2`.
pub fn reference_static_instance(seed: u64) -> Result<DispatchInstance> {
    let cfg = ScenarioConfig {
        seed,
        steps: Some(2),
        ..Default::default()
    };
    Ok(build_scenario(&cfg)?.instances()[0].clone())
}

fn parallel_cases<T: Send>(
    seed: u64,
    cases: usize,
    f: impl Fn(&mut ChaCha8Rng) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    (0..cases)
        .into_par_iter()
        .map(|c| f(&mut case_rng(seed, c)))
        .collect()
}

pub fn run_suite(suite: Suite, seed: u64, cases: usize) -> Result<SuiteOutcome> {
    let start = Instant::now();
    let mut outcome = SuiteOutcome {
        suite,
        cases,
        failures: 0,
        worst: 0.0,
        tolerance: 0.0,
        detail: String::new(),
        pass: false,
        elapsed: Duration::ZERO,
    };
    match suite {
        Suite::Projection => {
            let errs = parallel_cases(seed, cases, |rng| {
                projection_case(&random_projection_task(rng))
            })?;
            outcome.tolerance = PROJECTION_TOL;
            outcome.worst = errs.iter().copied().fold(0.0, f64::max);
            outcome.failures = errs.iter().filter(|&&e| !(e <= PROJECTION_TOL)).count();
            outcome.detail = "max |q - q_ref| vs enumeration".into();
        }
        Suite::Protocol => {
            let results = parallel_cases(seed, cases, |rng| {
                let inst = random_instance(rng, 8, 3);
                protocol_case(&inst, rng)
            })?;
            outcome.tolerance = PROJECTION_TOL;
            outcome.worst = results.iter().map(|c| c.max_err).fold(0.0, f64::max);
            outcome.failures = results
                .iter()
                .filter(|c| {
                    !(c.max_err <= PROJECTION_TOL && c.accounting_exact && c.within_worst_case)
                })
                .count();
            outcome.detail = "max |q_coop - q_kernel|, exact uplink count, total <= 4RN".into();
        }
        Suite::Contraction => {
            let inst = reference_static_instance(seed)?;
            let (sigma, l) = curvature_bounds(&inst);
            let rho = select_rho(sigma, l, inst.n_nodes(), inst.n_resources())?;
            let trace = contraction_trace(&inst, rho, CONVERGENCE_BUDGET)?;
            let factor = 1.0 / (1.0 + trace.delta_max);
            let bad = trace.violations(factor, CONTRACTION_SLACK, CONTRACTION_FLOOR);
            let worst_ratio = trace
                .ratios(CONTRACTION_FLOOR)
                .into_iter()
                .fold(0.0, f64::max);
            outcome.cases = trace.ratios(CONTRACTION_FLOOR).len();
            outcome.tolerance = factor;
            outcome.worst = worst_ratio;
            outcome.failures = bad.len() + usize::from(trace.converged_at.is_none());
            outcome.detail = format!(
                "rho={rho:.4}, squared G-ratio vs 1/(1+delta_max), converged at {}",
                trace
                    .converged_at
                    .map_or("never".to_string(), |k| k.to_string())
            );
        }
        Suite::Gradient => {
            let errs = parallel_cases(seed, cases, gradient_case)?;
            outcome.tolerance = GRADIENT_TOL;
            outcome.worst = errs.iter().copied().fold(0.0, f64::max);
            outcome.failures = errs.iter().filter(|&&e| !(e <= GRADIENT_TOL)).count();
            outcome.detail = format!("relative error vs central differences, h={GRADIENT_STEP}");
        }
        Suite::Oracle => {
            let results =
                parallel_cases(seed, cases, |rng| oracle_case(&random_instance(rng, 7, 2)))?;
            outcome.tolerance = PROJECTION_TOL;
            outcome.worst = results.iter().map(|c| c.0).fold(0.0, f64::max);
            let worst_kkt = results.iter().map(|c| c.1).fold(0.0, f64::max);
            outcome.failures = results
                .iter()
                .filter(|(e, kkt)| !(*e <= PROJECTION_TOL && *kkt <= KKT_TOL))
                .count();
            outcome.detail = format!("max |p* - p_ref|, max KKT residual {worst_kkt:.2e}");
        }
    }
    outcome.pass = outcome.failures == 0;
    outcome.elapsed = start.elapsed();
    Ok(outcome)
}

pub fn format_table(outcomes: &[SuiteOutcome]) -> String {
    let mut out = format!(
        "{:<12} {:>6} {:>8} {:>11} {:>11} {:>6} {:>8}  {}\n",
        "suite", "cases", "failures", "worst", "tolerance", "result", "time", "detail"
    );
    for o in outcomes {
        out.push_str(&format!(
            "{:<12} {:>6} {:>8} {:>11.3e} {:>11.3e} {:>6} {:>7.2}s  {}\n",
            o.suite.name(),
            o.cases,
            o.failures,
            o.worst,
            o.tolerance,
            if o.pass { "PASS" } else { "FAIL" },
            o.elapsed.as_secs_f64(),
            o.detail
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_roundtrip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("bogus".parse::<Suite>().is_err());
    }

    #[test]
    fn cases_are_reproducible() {
        let a = random_projection_task(&mut case_rng(7, 3));
        let b = random_projection_task(&mut case_rng(7, 3));
        assert_eq!(a, b);
    }

    #[test]
    fn small_suites_pass() {
        for suite in [
            Suite::Projection,
            Suite::Protocol,
            Suite::Gradient,
            Suite::Oracle,
        ] {
            let o = run_suite(suite, 1, 50).unwrap();
            assert!(o.pass, "{}", format_table(&[o]));
        }
    }

    #[test]
    fn contraction_trace_converges() {
        let inst = reference_static_instance(DEFAULT_SEED).unwrap();
        let rho = select_rho(2.0, 2.0, 10, 1).unwrap();
        let trace = contraction_trace(&inst, rho, CONVERGENCE_BUDGET).unwrap();
        assert!(trace.converged_at.is_some_and(|k| k <= CONVERGENCE_BUDGET));
        assert_eq!(trace.delta_max, 1.0);
    }

    #[test]
    fn table_has_one_row_per_suite() {
        let o = run_suite(Suite::Gradient, 3, 10).unwrap();
        let t = format_table(&[o.clone(), o]);
        assert_eq!(t.lines().count(), 3);
        assert!(t.contains("PASS"));
    }
}

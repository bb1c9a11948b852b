//! Exact centralized solution of each time slice, drift statistics and the
//! tracking constants built from them.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DispatchInstance, Matrix, Scenario, SeparableObjective, Vector};
use crate::projection::solve_shift;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub k: usize,
    pub p_star: Matrix,
    /// Multipliers of the consistency constraints `q_i = p_i`: `-grad f_i(p*_i)`.
    pub lambda_star: Matrix,
    /// Balance multiplier per resource.
    pub nu_star: Vector,
    pub objective: f64,
}

/// Per coordinate, finds the balance price `nu` with
/// `sum_i argmin_{box} (f_i + nu p) = P`. For quadratics each response is
/// `clamp(d - nu / (2a))`, which is the weighted clamp solved by the
/// projection machinery.
pub fn solve_instance(instance: &DispatchInstance) -> Result<OracleSolution> {
    let n = instance.n_nodes();
    let r = instance.n_resources();
    let mut p_star = Matrix::zeros((n, r));
    let mut nu_star = Vector::zeros(r);
    for j in 0..r {
        let center: Vec<f64> = instance
            .objectives()
            .iter()
            .map(|o| o.target()[j])
            .collect();
        let weight: Vec<f64> = instance
            .objectives()
            .iter()
            .map(|o| 1.0 / (2.0 * o.curvature()[j]))
            .collect();
        let sol = solve_shift(
            &center,
            &weight,
            &instance.lower().column(j).to_vec(),
            &instance.upper().column(j).to_vec(),
            instance.supply()[j],
            j,
        )?;
        for (i, x) in sol.x.into_iter().enumerate() {
            p_star[[i, j]] = x;
        }
        nu_star[j] = sol.shift;
    }
    let mut lambda_star = Matrix::zeros((n, r));
    for (i, obj) in instance.objectives().iter().enumerate() {
        lambda_star
            .row_mut(i)
            .assign(&(-obj.gradient(p_star.row(i))));
    }
    Ok(OracleSolution {
        k: instance.k(),
        objective: instance.total_objective(&p_star),
        p_star,
        lambda_star,
        nu_star,
    })
}

/// Solves every slice of a scenario; slices are independent.
pub fn solve_scenario(scenario: &Scenario) -> Result<Vec<OracleSolution>> {
    scenario
        .instances()
        .par_iter()
        .map(solve_instance)
        .collect()
}

/// Bound multipliers recovered from `nu*`: `(mu_lower, mu_upper)`, each
/// nonnegative at an optimum and zero off the active bound.
pub fn bound_multipliers(instance: &DispatchInstance, sol: &OracleSolution) -> (Matrix, Matrix) {
    let (n, r) = sol.p_star.dim();
    let mut mu_lo = Matrix::zeros((n, r));
    let mut mu_hi = Matrix::zeros((n, r));
    for (i, obj) in instance.objectives().iter().enumerate() {
        let grad = obj.gradient(sol.p_star.row(i));
        for j in 0..r {
            let x = sol.p_star[[i, j]];
            let slack = grad[j] + sol.nu_star[j];
            let (lo, hi) = (instance.lower()[[i, j]], instance.upper()[[i, j]]);
            if x <= lo && slack > 0.0 {
                mu_lo[[i, j]] = slack;
            } else if x >= hi && slack < 0.0 {
                mu_hi[[i, j]] = -slack;
            }
        }
    }
    (mu_lo, mu_hi)
}

/// Largest KKT violation: balance, box feasibility, stationarity
/// `grad f + nu - mu_lo + mu_hi = 0` and complementary sign conditions.
pub fn kkt_residual(instance: &DispatchInstance, sol: &OracleSolution) -> f64 {
    let r = sol.p_star.ncols();
    let mut worst: f64 = 0.0;
    for j in 0..r {
        let s: f64 = sol.p_star.column(j).sum();
        worst = worst.max((s - instance.supply()[j]).abs() / instance.supply()[j].abs().max(1.0));
    }
    for (i, obj) in instance.objectives().iter().enumerate() {
        let grad = obj.gradient(sol.p_star.row(i));
        for j in 0..r {
            let x = sol.p_star[[i, j]];
            let (lo, hi) = (instance.lower()[[i, j]], instance.upper()[[i, j]]);
            worst = worst.max(lo - x).max(x - hi);
            let slack = grad[j] + sol.nu_star[j];
            let scale = sol.nu_star[j].abs().max(1.0);
            // stationarity must hold exactly for interior points; at a bound
            // the slack has to point outward
            let violation = if x <= lo && x >= hi {
                0.0
            } else if x <= lo {
                (-slack).max(0.0)
            } else if x >= hi {
                slack.max(0.0)
            } else {
                slack.abs()
            };
            worst = worst.max(violation / scale);
        }
    }
    worst
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingConstants {
    pub g: f64,
    pub c1: f64,
    pub c2: f64,
}

/// `delta_max = 1 / sqrt(L / sigma)`.
pub fn delta_max(sigma: f64, lipschitz: f64) -> f64 {
    1.0 / (lipschitz / sigma).sqrt()
}

/// `g = sqrt(rho dp^2 + dl^2 / rho)`, `c1 = g / (sqrt(1 + delta) - 1)`,
/// `c2 = 3 c1^2 + g^2 / rho + 3 c1 g / sqrt(rho)`.
pub fn tracking_constants(dp: f64, dl: f64, rho: f64, delta: f64) -> TrackingConstants {
    let g = (rho * dp * dp + dl * dl / rho).sqrt();
    let c1 = g / ((1.0 + delta).sqrt() - 1.0);
    let c2 = 3.0 * c1 * c1 + g * g / rho + 3.0 * c1 * g / rho.sqrt();
    TrackingConstants { g, c1, c2 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftStats {
    /// `||p*(k+1) - p*(k)||` for consecutive slices.
    pub primal_drift: Vec<f64>,
    /// `||lambda*(k+1) - lambda*(k)||`.
    pub dual_drift: Vec<f64>,
    pub delta_p: f64,
    pub delta_lambda: f64,
    pub rho: f64,
    pub delta_max: f64,
    pub constants: TrackingConstants,
}

pub fn frobenius(m: &Matrix) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn drift_stats(solutions: &[OracleSolution], rho: f64, delta: f64) -> Result<DriftStats> {
    if solutions.len() < 2 {
        return Err(Error::InsufficientRecords {
            needed: 2,
            got: solutions.len(),
        });
    }
    if !(rho > 0.0) {
        return Err(Error::param("rho", "must be > 0"));
    }
    let pairs = solutions.windows(2);
    let primal_drift: Vec<f64> = pairs
        .clone()
        .map(|w| frobenius(&(&w[1].p_star - &w[0].p_star)))
        .collect();
    let dual_drift: Vec<f64> = pairs
        .map(|w| frobenius(&(&w[1].lambda_star - &w[0].lambda_star)))
        .collect();
    let delta_p = primal_drift.iter().copied().fold(0.0, f64::max);
    let delta_lambda = dual_drift.iter().copied().fold(0.0, f64::max);
    Ok(DriftStats {
        constants: tracking_constants(delta_p, delta_lambda, rho, delta),
        primal_drift,
        dual_drift,
        delta_p,
        delta_lambda,
        rho,
        delta_max: delta,
    })
}

/// `k,node,coordinate,p_star,lambda_star,nu_star`, one row per entry.
pub fn write_oracle_csv<W: Write>(solutions: &[OracleSolution], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "k",
        "node",
        "coordinate",
        "p_star",
        "lambda_star",
        "nu_star",
    ])?;
    for sol in solutions {
        for ((i, j), p) in sol.p_star.indexed_iter() {
            out.write_record([
                sol.k.to_string(),
                i.to_string(),
                j.to_string(),
                p.to_string(),
                sol.lambda_star[[i, j]].to_string(),
                sol.nu_star[j].to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

//! Euclidean projection onto `{q : lower <= q <= upper, sum_i q_i = P}`.
//!
//! The set decouples by resource coordinate. Each column is solved by a
//! monotone bisection on a scalar shift `mu`, with `q_i = clamp(v_i - mu)`;
//! the final shift is then recomputed exactly from the free coordinates.
//! The same machinery ([`solve_shift`]) also serves the oracle, whose
//! per-node responses are weighted clamps of the same form.

use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};
use crate::model::{Matrix, Vector};

/// Bisection stops once `|residual| <= BALANCE_TOL * max(1, |target|)`.
pub const BALANCE_TOL: f64 = 1e-12;
/// ... or once the bracket shrinks below this fraction of its initial width.
pub const BRACKET_TOL: f64 = 1e-15;
const MAX_BISECTIONS: usize = 400;

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionTask {
    /// Point to project (`p + lambda / rho` inside the feasible ADMM loop).
    pub point: Matrix,
    pub lower: Matrix,
    pub upper: Matrix,
    pub target: Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionResult {
    pub q: Matrix,
    /// Balance multiplier per resource coordinate.
    pub shift: Vector,
    pub iterations: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftSolution {
    pub x: Vec<f64>,
    pub shift: f64,
    pub iterations: usize,
}

/// Componentwise clamp of `v` into `[lower, upper]`.
pub fn project_box(
    v: ArrayView1<f64>,
    lower: ArrayView1<f64>,
    upper: ArrayView1<f64>,
) -> Result<Vector> {
    if lower.len() != v.len() || upper.len() != v.len() {
        return Err(Error::Dimension {
            expected: v.len(),
            got: lower.len().min(upper.len()),
        });
    }
    let mut out = Array1::zeros(v.len());
    for i in 0..v.len() {
        let (lo, hi) = (lower[i], upper[i]);
        if lo > hi {
            return Err(Error::BoundOrder {
                index: i,
                lower: lo,
                upper: hi,
            });
        }
        out[i] = v[i].clamp(lo, hi);
    }
    Ok(out)
}

/// Solves `sum_i clamp(center_i - weight_i * s, lo_i, hi_i) = target` for `s`.
///
/// `weight_i > 0`. The left-hand side is nonincreasing in `s`, so bisection
/// over `[min (c - hi) / w, max (c - lo) / w]` converges globally. The
/// returned `x` is clamped, so it lies in the box exactly.
pub fn solve_shift(
    center: &[f64],
    weight: &[f64],
    lo: &[f64],
    hi: &[f64],
    target: f64,
    resource: usize,
) -> Result<ShiftSolution> {
    let n = center.len();
    for len in [weight.len(), lo.len(), hi.len()] {
        if len != n {
            return Err(Error::Dimension {
                expected: n,
                got: len,
            });
        }
    }
    for i in 0..n {
        if lo[i] > hi[i] {
            return Err(Error::BoundOrder {
                index: i,
                lower: lo[i],
                upper: hi[i],
            });
        }
        if !(weight[i] > 0.0) {
            return Err(Error::param(
                "weight",
                format!("must be > 0, got {}", weight[i]),
            ));
        }
    }
    let lower_sum: f64 = lo.iter().sum();
    let upper_sum: f64 = hi.iter().sum();
    if !(lower_sum <= target && target <= upper_sum) {
        return Err(Error::Infeasible {
            resource,
            lower_sum,
            target,
            upper_sum,
        });
    }

    let response = |s: f64| -> f64 {
        (0..n)
            .map(|i| (center[i] - weight[i] * s).clamp(lo[i], hi[i]))
            .sum()
    };

    let mut left = (0..n)
        .map(|i| (center[i] - hi[i]) / weight[i])
        .fold(f64::INFINITY, f64::min);
    let mut right = (0..n)
        .map(|i| (center[i] - lo[i]) / weight[i])
        .fold(f64::NEG_INFINITY, f64::max);
    if n == 0 {
        // target == 0 here, so every shift balances an empty column
        return Ok(ShiftSolution {
            x: Vec::new(),
            shift: 0.0,
            iterations: 0,
        });
    }

    let tol = BALANCE_TOL * target.abs().max(1.0);
    let min_width = BRACKET_TOL * (right - left);
    let mut shift = 0.5 * (left + right);
    let mut iterations = 0;
    while iterations < MAX_BISECTIONS {
        shift = 0.5 * (left + right);
        iterations += 1;
        let residual = response(shift) - target;
        if residual.abs() <= tol {
            break;
        }
        if residual > 0.0 {
            left = shift;
        } else {
            right = shift;
        }
        if right - left <= min_width {
            shift = 0.5 * (left + right);
            break;
        }
    }

    // Exact shift from the free set at the bisection point. Kept only when it
    // balances at least as well as the bisection iterate.
    let free: Vec<usize> = (0..n)
        .filter(|&i| {
            let y = center[i] - weight[i] * shift;
            lo[i] < y && y < hi[i]
        })
        .collect();
    if !free.is_empty() {
        let fixed_sum: f64 = (0..n)
            .filter(|i| !free.contains(i))
            .map(|i| (center[i] - weight[i] * shift).clamp(lo[i], hi[i]))
            .sum();
        let free_center: f64 = free.iter().map(|&i| center[i]).sum();
        let free_weight: f64 = free.iter().map(|&i| weight[i]).sum();
        let exact = (free_center - (target - fixed_sum)) / free_weight;
        if (response(exact) - target).abs() <= (response(shift) - target).abs() {
            shift = exact;
        }
    }

    let x = (0..n)
        .map(|i| (center[i] - weight[i] * shift).clamp(lo[i], hi[i]))
        .collect();
    Ok(ShiftSolution {
        x,
        shift,
        iterations,
    })
}

/// Projection of `task.point` onto the box-plus-balance polyhedron.
pub fn project_polyhedron(task: &ProjectionTask) -> Result<ProjectionResult> {
    let (n, r) = task.point.dim();
    for m in [&task.lower, &task.upper] {
        if m.dim() != (n, r) {
            return Err(Error::Dimension {
                expected: n * r,
                got: m.len(),
            });
        }
    }
    if task.target.len() != r {
        return Err(Error::Dimension {
            expected: r,
            got: task.target.len(),
        });
    }
    let ones = vec![1.0; n];
    let mut q = Matrix::zeros((n, r));
    let mut shift = Vector::zeros(r);
    let mut iterations = Vec::with_capacity(r);
    for j in 0..r {
        let col = |m: &Matrix| m.column(j).to_vec();
        let sol = solve_shift(
            &col(&task.point),
            &ones,
            &col(&task.lower),
            &col(&task.upper),
            task.target[j],
            j,
        )?;
        q.column_mut(j).assign(&Array1::from(sol.x));
        shift[j] = sol.shift;
        iterations.push(sol.iterations);
    }
    Ok(ProjectionResult {
        q,
        shift,
        iterations,
    })
}

/// Operator-side redistribution: minimize `sum_i (dq_i + m_i)^2` subject to
/// `bounds_i.0 <= dq_i <= bounds_i.1` and `sum_i dq_i = d`.
pub fn solve_reduced_qp(m: &[f64], bounds: &[(f64, f64)], d: f64) -> Result<Vec<f64>> {
    if bounds.len() != m.len() {
        return Err(Error::Dimension {
            expected: m.len(),
            got: bounds.len(),
        });
    }
    let center: Vec<f64> = m.iter().map(|x| -x).collect();
    let lo: Vec<f64> = bounds.iter().map(|b| b.0).collect();
    let hi: Vec<f64> = bounds.iter().map(|b| b.1).collect();
    let weight = vec![1.0; m.len()];
    Ok(solve_shift(&center, &weight, &lo, &hi, d, 0)?.x)
}

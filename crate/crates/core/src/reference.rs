//! Brute-force reference solvers used as independent oracles by the verify
//! suites and the tests. Nothing here shares code with the bisection path.

/// Minimizes `sum_i a_i (x_i - c_i)^2` over `lo <= x <= hi`, `sum x = target`
/// by enumerating all `3^n` lower/free/upper patterns.
///
/// For a pattern, free coordinates satisfy `2 a_i (x_i - c_i) + nu = 0` and
/// `nu` is fixed by the balance. Every candidate that lands inside the box is
/// a feasible point, so the cheapest one is the global minimizer. Returns
/// `None` when the feasible set is empty.
pub fn weighted_column(
    a: &[f64],
    c: &[f64],
    lo: &[f64],
    hi: &[f64],
    target: f64,
) -> Option<Vec<f64>> {
    let n = c.len();
    assert!(n <= 16, "enumeration is exponential in n");
    let patterns = 3usize.pow(n as u32);
    let scale = target.abs().max(1.0);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut x = vec![0.0; n];
    for code in 0..patterns {
        let mut rest = code;
        let mut fixed_sum = 0.0;
        let mut free_c = 0.0;
        let mut free_w = 0.0;
        let mut state = [0u8; 16];
        for i in 0..n {
            state[i] = (rest % 3) as u8;
            rest /= 3;
            match state[i] {
                0 => fixed_sum += lo[i],
                1 => fixed_sum += hi[i],
                _ => {
                    free_c += c[i];
                    free_w += 1.0 / (2.0 * a[i]);
                }
            }
        }
        let nu = if free_w > 0.0 {
            (free_c - (target - fixed_sum)) / free_w
        } else if (fixed_sum - target).abs() <= 1e-12 * scale {
            0.0
        } else {
            continue;
        };
        let mut inside = true;
        for i in 0..n {
            x[i] = match state[i] {
                0 => lo[i],
                1 => hi[i],
                _ => c[i] - nu / (2.0 * a[i]),
            };
            if x[i] < lo[i] - 1e-12 || x[i] > hi[i] + 1e-12 {
                inside = false;
                break;
            }
        }
        if !inside {
            continue;
        }
        let obj: f64 = (0..n).map(|i| a[i] * (x[i] - c[i]).powi(2)).sum();
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, x.clone()));
        }
    }
    best.map(|(_, x)| x)
}

/// Euclidean projection of one column onto box-plus-sum, by enumeration.
pub fn project_column(v: &[f64], lo: &[f64], hi: &[f64], target: f64) -> Vec<f64> {
    let a = vec![1.0; v.len()];
    weighted_column(&a, v, lo, hi, target).expect("feasible column")
}

/// Minimizer of a convex scalar function on `[lo, hi]` given its derivative,
/// by bisection on the sign of the derivative.
pub fn minimize_scalar(derivative: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    if derivative(lo) >= 0.0 {
        return lo;
    }
    if derivative(hi) <= 0.0 {
        return hi;
    }
    let (mut a, mut b) = (lo, hi);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        if derivative(m) > 0.0 {
            b = m;
        } else {
            a = m;
        }
    }
    0.5 * (a + b)
}

/// Central difference `(f(x + h) - f(x - h)) / 2h` along every coordinate.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|j| {
            probe[j] = x[j] + h;
            let up = f(&probe);
            probe[j] = x[j] - h;
            let down = f(&probe);
            probe[j] = x[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

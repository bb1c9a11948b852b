//! One-iteration-per-step ADMM engines.
//!
//! [`PartialEngine`] keeps every iterate inside the node boxes and lets the
//! balance drift; the operator only broadcasts a price. [`TotalEngine`] keeps
//! an auxiliary iterate `q` feasible for boxes and balance at every step by
//! running the cooperative projection.
//!
//! Both engines are pull-based: `step` must be fed the instance for time
//! `k + 1`, and performs exactly one primal update per node for it.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::coop::{run_coop_projection, ProtocolTranscript};
use crate::error::{Error, Result};
use crate::model::{DispatchInstance, Matrix, SeparableObjective, Vector};
use crate::netsim::{Destination, Message, MessageKind, Network, Payload, OPERATOR};
use crate::projection::{project_polyhedron, ProjectionTask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Partial,
    Total,
}

/// `rho = sqrt(L sigma / (N R))`.
pub fn select_rho(sigma: f64, lipschitz: f64, n_nodes: usize, n_resources: usize) -> Result<f64> {
    if !(sigma > 0.0 && lipschitz > 0.0) {
        return Err(Error::param("sigma/L", "curvature bounds must be > 0"));
    }
    if n_nodes == 0 || n_resources == 0 {
        return Err(Error::param("N/R", "must be >= 1"));
    }
    Ok((lipschitz * sigma / (n_nodes * n_resources) as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RhoMode {
    /// Use [`select_rho`] on the first instance's curvature bounds.
    Formula,
    Fixed(f64),
}

impl RhoMode {
    pub fn resolve(self, instance: &DispatchInstance) -> Result<f64> {
        match self {
            RhoMode::Formula => {
                let (sigma, l) = crate::model::curvature_bounds(instance);
                select_rho(sigma, l, instance.n_nodes(), instance.n_resources())
            }
            RhoMode::Fixed(rho) if rho > 0.0 && rho.is_finite() => Ok(rho),
            RhoMode::Fixed(rho) => Err(Error::param("rho", format!("must be > 0, got {rho}"))),
        }
    }
}

/// Iterates after a step, in a form shared by both engines.
#[derive(Clone, Debug, PartialEq)]
pub struct IterateSnapshot {
    pub algorithm: Algorithm,
    pub k: usize,
    pub rho: f64,
    pub p: Matrix,
    /// Feasible auxiliary iterate; only for [`Algorithm::Total`].
    pub q: Option<Matrix>,
    /// Per-node multipliers. The partial engine repeats its broadcast price on every row.
    pub lambda: Matrix,
    /// Balance violation `sum_i x_i - P` of `p` (partial) or `q` (total).
    pub violation: Vector,
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub k: usize,
    pub violation: Vector,
    pub transcript: Option<ProtocolTranscript>,
    pub wall_time: Duration,
}

pub trait TrackingEngine {
    fn k(&self) -> usize;

    fn rho(&self) -> f64;

    fn step(&mut self, instance: &DispatchInstance, net: &mut Network) -> Result<StepReport>;

    fn snapshot(&self) -> IterateSnapshot;
}

fn balance_violation(x: &Matrix, instance: &DispatchInstance) -> Vector {
    x.sum_axis(ndarray::Axis(0)) - instance.supply()
}

fn box_midpoints(instance: &DispatchInstance) -> Matrix {
    (instance.lower() + instance.upper()) * 0.5
}

fn check_next(current: usize, instance: &DispatchInstance, shape: (usize, usize)) -> Result<()> {
    if instance.k() != current + 1 {
        return Err(Error::StepOrder {
            current,
            offered: instance.k(),
        });
    }
    let got = (instance.n_nodes(), instance.n_resources());
    if got != shape {
        return Err(Error::Dimension {
            expected: shape.0 * shape.1,
            got: got.0 * got.1,
        });
    }
    Ok(())
}

/// Box-constrained node update of the price-broadcast scheme:
/// `argmin_{box} f_i(p) + (2 lambda(k) - lambda(k-1))^T p + (rho / 2) ||p - p_i(k)||^2`.
pub fn partial_node_step(
    instance: &DispatchInstance,
    node: usize,
    p_prev: ndarray::ArrayView1<f64>,
    price: &Vector,
    price_prev: &Vector,
    rho: f64,
) -> Vector {
    let obj = &instance.objectives()[node];
    (0..instance.n_resources())
        .map(|j| {
            let linear = 2.0 * price[j] - price_prev[j];
            obj.coordinate_prox(
                j,
                linear,
                rho,
                p_prev[j],
                instance.lower()[[node, j]],
                instance.upper()[[node, j]],
            )
        })
        .collect()
}

/// `lambda(k+1) = lambda(k) + (rho / N) (sum_i p_i(k+1) - P(k+1))`.
pub fn partial_price_step(price: &Vector, violation: &Vector, rho: f64, n_nodes: usize) -> Vector {
    price + &(violation * (rho / n_nodes as f64))
}

#[derive(Clone, Debug)]
pub struct PartialEngine {
    k: usize,
    rho: f64,
    p: Matrix,
    price: Vector,
    price_prev: Vector,
    violation: Vector,
}

impl PartialEngine {
    /// `p(0)` at box midpoints of the first instance, zero prices.
    pub fn new(first: &DispatchInstance, rho: f64) -> Result<Self> {
        if !(rho > 0.0) {
            return Err(Error::param("rho", "must be > 0"));
        }
        let p = box_midpoints(first);
        let r = first.n_resources();
        Ok(Self {
            k: first.k(),
            rho,
            violation: balance_violation(&p, first),
            p,
            price: Vector::zeros(r),
            price_prev: Vector::zeros(r),
        })
    }

    pub fn price(&self) -> &Vector {
        &self.price
    }
}

impl TrackingEngine for PartialEngine {
    fn k(&self) -> usize {
        self.k
    }

    fn rho(&self) -> f64 {
        self.rho
    }

    fn step(&mut self, instance: &DispatchInstance, net: &mut Network) -> Result<StepReport> {
        check_next(self.k, instance, self.p.dim())?;
        net.begin_step(instance.k());
        let start = Instant::now();
        let n = instance.n_nodes();
        let mut next = Matrix::zeros(self.p.dim());
        for i in 0..n {
            let row = partial_node_step(
                instance,
                i,
                self.p.row(i),
                &self.price,
                &self.price_prev,
                self.rho,
            );
            next.row_mut(i).assign(&row);
        }
        let violation = balance_violation(&next, instance);
        let price = partial_price_step(&self.price, &violation, self.rho, n);
        net.broadcast(Message::new(
            1,
            OPERATOR,
            Destination::ALL,
            MessageKind::PriceBroadcast,
            Payload::Reals(price.to_vec()),
        )?)?;
        for ep in 1..=n as u32 {
            net.drain(ep)?;
        }
        self.price_prev = std::mem::replace(&mut self.price, price);
        self.p = next;
        self.violation = violation.clone();
        self.k = instance.k();
        Ok(StepReport {
            k: self.k,
            violation,
            transcript: None,
            wall_time: start.elapsed(),
        })
    }

    fn snapshot(&self) -> IterateSnapshot {
        let mut lambda = Matrix::zeros(self.p.dim());
        for mut row in lambda.rows_mut() {
            row.assign(&self.price);
        }
        IterateSnapshot {
            algorithm: Algorithm::Partial,
            k: self.k,
            rho: self.rho,
            p: self.p.clone(),
            q: None,
            lambda,
            violation: self.violation.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TotalEngine {
    k: usize,
    rho: f64,
    p: Matrix,
    q: Matrix,
    lambda: Matrix,
    violation: Vector,
}

impl TotalEngine {
    /// `p(0)` at box midpoints, `q(0)` its projection onto the first
    /// instance's feasible set, zero multipliers.
    pub fn new(first: &DispatchInstance, rho: f64) -> Result<Self> {
        if !(rho > 0.0) {
            return Err(Error::param("rho", "must be > 0"));
        }
        let p = box_midpoints(first);
        let q = project_polyhedron(&ProjectionTask {
            point: p.clone(),
            lower: first.lower().clone(),
            upper: first.upper().clone(),
            target: first.supply().clone(),
        })?
        .q;
        Ok(Self {
            k: first.k(),
            rho,
            violation: balance_violation(&q, first),
            lambda: Matrix::zeros(p.dim()),
            p,
            q,
        })
    }

    /// Starts from an arbitrary state; used by contraction checks.
    pub fn from_state(k: usize, rho: f64, p: Matrix, q: Matrix, lambda: Matrix) -> Result<Self> {
        if !(rho > 0.0) {
            return Err(Error::param("rho", "must be > 0"));
        }
        if q.dim() != p.dim() || lambda.dim() != p.dim() {
            return Err(Error::Dimension {
                expected: p.len(),
                got: q.len().min(lambda.len()),
            });
        }
        let violation = Vector::zeros(p.ncols());
        Ok(Self {
            k,
            rho,
            p,
            q,
            lambda,
            violation,
        })
    }
}

/// Unconstrained node update
/// `argmin f_i(p) + lambda_i^T p + (rho / 2) ||p - q_i||^2`.
pub fn total_node_step(
    instance: &DispatchInstance,
    node: usize,
    lambda: ndarray::ArrayView1<f64>,
    q: ndarray::ArrayView1<f64>,
    rho: f64,
) -> Vector {
    let obj = &instance.objectives()[node];
    (0..instance.n_resources())
        .map(|j| obj.coordinate_prox(j, lambda[j], rho, q[j], f64::NEG_INFINITY, f64::INFINITY))
        .collect()
}

impl TrackingEngine for TotalEngine {
    fn k(&self) -> usize {
        self.k
    }

    fn rho(&self) -> f64 {
        self.rho
    }

    fn step(&mut self, instance: &DispatchInstance, net: &mut Network) -> Result<StepReport> {
        check_next(self.k, instance, self.p.dim())?;
        net.begin_step(instance.k());
        let start = Instant::now();
        let (q, transcript) = run_coop_projection(&self.p, &self.lambda, self.rho, instance, net)?;
        let mut p = Matrix::zeros(q.dim());
        for i in 0..instance.n_nodes() {
            p.row_mut(i).assign(&total_node_step(
                instance,
                i,
                self.lambda.row(i),
                q.row(i),
                self.rho,
            ));
        }
        self.lambda = &self.lambda + &((&p - &q) * self.rho);
        self.violation = balance_violation(&q, instance);
        self.p = p;
        self.q = q;
        self.k = instance.k();
        Ok(StepReport {
            k: self.k,
            violation: self.violation.clone(),
            transcript: Some(transcript),
            wall_time: start.elapsed(),
        })
    }

    fn snapshot(&self) -> IterateSnapshot {
        IterateSnapshot {
            algorithm: Algorithm::Total,
            k: self.k,
            rho: self.rho,
            p: self.p.clone(),
            q: Some(self.q.clone()),
            lambda: self.lambda.clone(),
            violation: self.violation.clone(),
        }
    }
}

/// Builds the engine for `algorithm` from the first instance.
pub fn new_engine(
    algorithm: Algorithm,
    first: &DispatchInstance,
    rho: f64,
) -> Result<Box<dyn TrackingEngine>> {
    Ok(match algorithm {
        Algorithm::Partial => Box::new(PartialEngine::new(first, rho)?),
        Algorithm::Total => Box::new(TotalEngine::new(first, rho)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{NodeObjective, ObjectiveKind};
    use crate::oracle::solve_instance;
    use crate::reference::minimize_scalar;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn single(d: f64, lo: f64, hi: f64, p: f64) -> DispatchInstance {
        // a second node keeps the strict interior condition satisfiable
        let objs = vec![
            NodeObjective::tracking(ObjectiveKind::ProducerCost, 1.0, &[d]).unwrap(),
            NodeObjective::tracking(ObjectiveKind::ProducerCost, 1.0, &[d]).unwrap(),
        ];
        DispatchInstance::new(
            0,
            2,
            objs,
            Array2::from_elem((2, 1), lo),
            Array2::from_elem((2, 1), hi),
            array![p],
        )
        .unwrap()
    }

    #[test]
    fn partial_node_examples() {
        let inst = single(2.0, 0.0, 4.0, 1.0);
        let zero = array![0.0];
        let p = partial_node_step(&inst, 0, array![2.0].view(), &zero, &zero, 2.0);
        assert_eq!(p[0], 2.0);
        // price moved from -2 to 0: inertia term 2*0 - (-2) = 2
        let p = partial_node_step(&inst, 0, array![2.0].view(), &zero, &array![-2.0], 2.0);
        assert_eq!(p[0], 1.5);
        let boxed = single(2.0, 2.0, 4.0, 5.0);
        let p = partial_node_step(&boxed, 0, array![2.0].view(), &zero, &array![-2.0], 2.0);
        assert_eq!(p[0], 2.0);
    }

    #[test]
    fn price_examples() {
        assert_eq!(
            partial_price_step(&array![0.3], &array![0.0], 2.0, 4),
            array![0.3]
        );
        assert_eq!(
            partial_price_step(&array![0.0], &array![1.0], 10.0, 10),
            array![1.0]
        );
        assert_eq!(
            partial_price_step(&array![0.0], &array![-2.0], 2.0, 4),
            array![-1.0]
        );
    }

    #[test]
    fn rho_rule() {
        assert!((select_rho(2.0, 2.0, 10, 1).unwrap() - 0.4f64.sqrt()).abs() < 1e-15);
        assert!((select_rho(2.0, 2.0, 10, 1).unwrap() - 0.6325).abs() < 1e-4);
        assert_eq!(select_rho(1.0, 1.0, 1, 1).unwrap(), 1.0);
        assert!(select_rho(0.0, 1.0, 1, 1).is_err());
        let inst = single(2.0, 0.0, 4.0, 1.0);
        assert_eq!(RhoMode::Fixed(10.0).resolve(&inst).unwrap(), 10.0);
        assert!(RhoMode::Fixed(-1.0).resolve(&inst).is_err());
    }

    #[test]
    fn step_order_enforced() {
        let inst = single(2.0, 0.0, 4.0, 1.0);
        let mut eng = TotalEngine::new(&inst, 1.0).unwrap();
        let mut net = Network::star(2);
        assert!(matches!(
            eng.step(&inst, &mut net),
            Err(Error::StepOrder {
                current: 0,
                offered: 0
            })
        ));
        assert!(eng.step(&inst.with_k(2), &mut net).is_err());
        eng.step(&inst.with_k(1), &mut net).unwrap();
        assert_eq!(eng.k(), 1);
    }

    #[test]
    fn total_single_node_fixed_point() {
        // f = (p - 2)^2 on [0, 2] with balance P = 1
        let objs = vec![NodeObjective::tracking(ObjectiveKind::ProducerCost, 1.0, &[2.0]).unwrap()];
        let inst =
            DispatchInstance::new(0, 1, objs, array![[0.0]], array![[2.0]], array![1.0]).unwrap();
        let mut eng = TotalEngine::new(&inst, 1.0).unwrap();
        let mut net = Network::star(1);
        for k in 1..200 {
            eng.step(&inst.with_k(k), &mut net).unwrap();
        }
        let s = eng.snapshot();
        assert_eq!(s.q.as_ref().unwrap()[[0, 0]], 1.0);
        assert!((s.p[[0, 0]] - 1.0).abs() < 1e-10);
        assert!((s.lambda[[0, 0]] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn total_static_converges_to_oracle() {
        let objs: Vec<_> = (0..4)
            .map(|i| {
                NodeObjective::tracking(ObjectiveKind::ProducerCost, 0.5 + i as f64, &[i as f64])
                    .unwrap()
            })
            .collect();
        let inst = DispatchInstance::new(
            0,
            2,
            objs,
            Array2::zeros((4, 1)),
            Array2::from_elem((4, 1), 2.5),
            array![3.0],
        )
        .unwrap();
        let sol = solve_instance(&inst).unwrap();
        let mut eng = TotalEngine::new(&inst, 1.0).unwrap();
        let mut net = Network::star(4);
        for k in 1..400 {
            eng.step(&inst.with_k(k), &mut net).unwrap();
        }
        let s = eng.snapshot();
        for ((a, b), c) in s.p.iter().zip(sol.p_star.iter()).zip(s.q.unwrap().iter()) {
            assert!((a - b).abs() < 1e-9 && (c - b).abs() < 1e-9);
        }
        for (a, b) in s.lambda.iter().zip(sol.lambda_star.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn partial_static_converges_to_oracle() {
        let objs: Vec<_> = (0..5)
            .map(|i| {
                NodeObjective::tracking(ObjectiveKind::ProducerCost, 1.0, &[i as f64 * 0.7])
                    .unwrap()
            })
            .collect();
        let inst = DispatchInstance::new(
            0,
            5,
            objs,
            Array2::zeros((5, 1)),
            Array2::from_elem((5, 1), 1.5),
            array![4.0],
        )
        .unwrap();
        let sol = solve_instance(&inst).unwrap();
        let mut eng = PartialEngine::new(&inst, 1.0).unwrap();
        let mut net = Network::star(5);
        for k in 1..2000 {
            eng.step(&inst.with_k(k), &mut net).unwrap();
        }
        let s = eng.snapshot();
        for (a, b) in s.p.iter().zip(sol.p_star.iter()) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
        assert!(s.violation[0].abs() < 1e-9);
        assert!((eng.price()[0] - sol.nu_star[0]).abs() < 1e-8);
        // one price broadcast of R reals per step
        let c = net.step_counters(7).unwrap();
        assert_eq!((c.reals_down, c.reals_up, c.messages), (1, 0, 1));
    }

    proptest! {
        #[test]
        fn closed_form_matches_scalar_minimizer(
            a in 0.1f64..5.0, d in -3.0f64..3.0, price in -4.0f64..4.0,
            rho in 0.05f64..20.0, anchor in -3.0f64..3.0, lo in -2.0f64..0.0, width in 0.0f64..4.0,
        ) {
            let obj = NodeObjective::tracking(ObjectiveKind::ProducerCost, a, &[d]).unwrap();
            let hi = lo + width;
            let closed = obj.coordinate_prox(0, price, rho, anchor, lo, hi);
            let grad = |x: f64| obj.gradient(array![x].view())[0] + price + rho * (x - anchor);
            let numeric = minimize_scalar(grad, lo, hi);
            prop_assert!((closed - numeric).abs() <= 1e-9);
            let free = obj.coordinate_prox(0, price, rho, anchor, f64::NEG_INFINITY, f64::INFINITY);
            let numeric_free = minimize_scalar(grad, -1e3, 1e3);
            prop_assert!((free - numeric_free).abs() <= 1e-9);
        }
    }
}

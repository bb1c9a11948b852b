//! Time-varying dispatch problem: separable node objectives, per-step
//! instances with box limits and supply, and scenarios of instances.
//!
//! Every objective is stored in minimization form. A consumer's utility `U`
//! is represented by `f = -U`, so downstream code never branches on the
//! producer/consumer split; [`ObjectiveKind`] and the producer count are
//! carried as metadata only.

use std::fmt;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vector = Array1<f64>;
/// Rows are nodes, columns are resource coordinates.
pub type Matrix = Array2<f64>;

/// A strongly convex, coordinate-separable node objective.
///
/// This is the extension point for objectives other than the shipped
/// quadratic. Engines and the oracle only go through these methods.
pub trait SeparableObjective {
    fn dim(&self) -> usize;

    fn value(&self, p: ArrayView1<f64>) -> f64;

    fn gradient(&self, p: ArrayView1<f64>) -> Vector;

    /// Strong-convexity modulus of the whole objective.
    fn modulus(&self) -> f64;

    /// Lipschitz constant of the gradient.
    fn lipschitz(&self) -> f64;

    /// Minimizer over `[lo, hi]` of `f_j(x) + price * x + (rho / 2) (x - anchor)^2`
    /// for coordinate `j`. `rho` may be zero.
    fn coordinate_prox(&self, j: usize, price: f64, rho: f64, anchor: f64, lo: f64, hi: f64)
        -> f64;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    ProducerCost,
    ConsumerUtility,
}

/// `f(p) = sum_j a_j (p_j - d_j)^2 + b_j` with every `a_j > 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawObjective")]
pub struct NodeObjective {
    kind: ObjectiveKind,
    curvature: Vec<f64>,
    target: Vec<f64>,
    offset: Vec<f64>,
}

#[derive(Deserialize)]
struct RawObjective {
    kind: ObjectiveKind,
    curvature: Vec<f64>,
    target: Vec<f64>,
    offset: Vec<f64>,
}

impl TryFrom<RawObjective> for NodeObjective {
    type Error = Error;

    fn try_from(raw: RawObjective) -> Result<Self> {
        NodeObjective::new(raw.kind, raw.curvature, raw.target, raw.offset)
    }
}

impl NodeObjective {
    pub fn new(
        kind: ObjectiveKind,
        curvature: Vec<f64>,
        target: Vec<f64>,
        offset: Vec<f64>,
    ) -> Result<Self> {
        let r = curvature.len();
        if r == 0 {
            return Err(Error::param(
                "curvature",
                "objective needs at least one coordinate",
            ));
        }
        for len in [target.len(), offset.len()] {
            if len != r {
                return Err(Error::Dimension {
                    expected: r,
                    got: len,
                });
            }
        }
        if let Some(a) = curvature.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return Err(Error::param(
                "curvature",
                format!("must be finite and > 0, got {a}"),
            ));
        }
        if target.iter().chain(&offset).any(|x| !x.is_finite()) {
            return Err(Error::param("target", "coefficients must be finite"));
        }
        Ok(Self {
            kind,
            curvature,
            target,
            offset,
        })
    }

    /// Tracking cost `sum_j a (p_j - d_j)^2`, the form used by the demand-walk experiments.
    pub fn tracking(kind: ObjectiveKind, curvature: f64, target: &[f64]) -> Result<Self> {
        let r = target.len();
        Self::new(kind, vec![curvature; r], target.to_vec(), vec![0.0; r])
    }

    pub fn kind(&self) -> ObjectiveKind {
        self.kind
    }

    pub fn curvature(&self) -> &[f64] {
        &self.curvature
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    /// Utility `U = -f` for consumers; `None` for producers.
    pub fn utility(&self, p: ArrayView1<f64>) -> Option<f64> {
        match self.kind {
            ObjectiveKind::ConsumerUtility => Some(-self.value(p)),
            ObjectiveKind::ProducerCost => None,
        }
    }
}

impl SeparableObjective for NodeObjective {
    fn dim(&self) -> usize {
        self.curvature.len()
    }

    fn value(&self, p: ArrayView1<f64>) -> f64 {
        p.iter()
            .enumerate()
            .map(|(j, &x)| {
                let dx = x - self.target[j];
                self.curvature[j] * dx * dx + self.offset[j]
            })
            .sum()
    }

    fn gradient(&self, p: ArrayView1<f64>) -> Vector {
        p.iter()
            .enumerate()
            .map(|(j, &x)| 2.0 * self.curvature[j] * (x - self.target[j]))
            .collect()
    }

    fn modulus(&self) -> f64 {
        2.0 * self.curvature.iter().copied().fold(f64::INFINITY, f64::min)
    }

    fn lipschitz(&self) -> f64 {
        2.0 * self.curvature.iter().copied().fold(0.0, f64::max)
    }

    fn coordinate_prox(
        &self,
        j: usize,
        price: f64,
        rho: f64,
        anchor: f64,
        lo: f64,
        hi: f64,
    ) -> f64 {
        let a2 = 2.0 * self.curvature[j];
        let x = (a2 * self.target[j] - price + rho * anchor) / (a2 + rho);
        x.clamp(lo, hi)
    }
}

pub fn eval_objective(obj: &NodeObjective, p: ArrayView1<f64>) -> Result<f64> {
    check_dim(obj.dim(), p.len())?;
    Ok(obj.value(p))
}

pub fn eval_gradient(obj: &NodeObjective, p: ArrayView1<f64>) -> Result<Vector> {
    check_dim(obj.dim(), p.len())?;
    Ok(obj.gradient(p))
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}

/// `(sigma, L)`: the weakest strong-convexity modulus and the largest gradient
/// Lipschitz constant over all nodes.
pub fn curvature_bounds(instance: &DispatchInstance) -> (f64, f64) {
    instance
        .objectives
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(s, l), obj| {
            (s.min(obj.modulus()), l.max(obj.lipschitz()))
        })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Violation {
    Shape {
        what: String,
        expected: usize,
        got: usize,
    },
    BoundOrder {
        node: usize,
        resource: usize,
        lower: f64,
        upper: f64,
    },
    /// `sum_i lower_i(j) < P(j)` fails.
    LowerNotBelowSupply {
        resource: usize,
        lower_sum: f64,
        supply: f64,
    },
    /// `P(j) < sum_i upper_i(j)` fails.
    SupplyNotBelowUpper {
        resource: usize,
        upper_sum: f64,
        supply: f64,
    },
    NonFinite {
        what: String,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape {
                what,
                expected,
                got,
            } => {
                write!(f, "{what} has size {got}, expected {expected}")
            }
            Violation::BoundOrder {
                node,
                resource,
                lower,
                upper,
            } => {
                write!(
                    f,
                    "node {node} resource {resource}: lower {lower} > upper {upper}"
                )
            }
            Violation::LowerNotBelowSupply {
                resource,
                lower_sum,
                supply,
            } => write!(
                f,
                "resource {resource}: sum of lower bounds {lower_sum} is not < supply {supply}"
            ),
            Violation::SupplyNotBelowUpper {
                resource,
                upper_sum,
                supply,
            } => write!(
                f,
                "resource {resource}: supply {supply} is not < sum of upper bounds {upper_sum}"
            ),
            Violation::NonFinite { what } => write!(f, "{what} contains non-finite values"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// One time slice of the dispatch problem.
///
/// Construction enforces box ordering and strict interior feasibility
/// `sum lower < P < sum upper` for every resource, with no tolerance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawInstance")]
pub struct DispatchInstance {
    k: usize,
    n_producers: usize,
    objectives: Vec<NodeObjective>,
    lower: Matrix,
    upper: Matrix,
    supply: Vector,
}

#[derive(Deserialize)]
struct RawInstance {
    k: usize,
    n_producers: usize,
    objectives: Vec<NodeObjective>,
    lower: Matrix,
    upper: Matrix,
    supply: Vector,
}

impl TryFrom<RawInstance> for DispatchInstance {
    type Error = Error;

    fn try_from(raw: RawInstance) -> Result<Self> {
        DispatchInstance::new(
            raw.k,
            raw.n_producers,
            raw.objectives,
            raw.lower,
            raw.upper,
            raw.supply,
        )
    }
}

impl DispatchInstance {
    pub fn new(
        k: usize,
        n_producers: usize,
        objectives: Vec<NodeObjective>,
        lower: Matrix,
        upper: Matrix,
        supply: Vector,
    ) -> Result<Self> {
        let instance = Self {
            k,
            n_producers,
            objectives,
            lower,
            upper,
            supply,
        };
        let report = validate_instance(&instance);
        if report.is_ok() {
            Ok(instance)
        } else {
            Err(Error::InvalidInstance { k, report })
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Same problem data relabelled with time index `k`.
    pub fn with_k(&self, k: usize) -> Self {
        Self { k, ..self.clone() }
    }

    pub fn n_nodes(&self) -> usize {
        self.objectives.len()
    }

    pub fn n_producers(&self) -> usize {
        self.n_producers
    }

    pub fn n_resources(&self) -> usize {
        self.supply.len()
    }

    pub fn objectives(&self) -> &[NodeObjective] {
        &self.objectives
    }

    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    pub fn upper(&self) -> &Matrix {
        &self.upper
    }

    pub fn supply(&self) -> &Vector {
        &self.supply
    }

    /// Aggregate objective `sum_i f_i(p_i)`.
    pub fn total_objective(&self, p: &Matrix) -> f64 {
        self.objectives
            .iter()
            .zip(p.rows())
            .map(|(obj, row)| obj.value(row))
            .sum()
    }
}

/// Checks shapes, box ordering and strict interior feasibility. Collects
/// every violation instead of stopping at the first.
pub fn validate_instance(instance: &DispatchInstance) -> ValidationReport {
    let mut violations = Vec::new();
    let n = instance.objectives.len();
    let r = instance.supply.len();

    if n == 0 {
        violations.push(Violation::Shape {
            what: "objectives".into(),
            expected: 1,
            got: 0,
        });
    }
    if r == 0 {
        violations.push(Violation::Shape {
            what: "supply".into(),
            expected: 1,
            got: 0,
        });
    }
    if instance.n_producers > n {
        violations.push(Violation::Shape {
            what: "producer count".into(),
            expected: n,
            got: instance.n_producers,
        });
    }
    for (i, obj) in instance.objectives.iter().enumerate() {
        if obj.dim() != r {
            violations.push(Violation::Shape {
                what: format!("objective {i}"),
                expected: r,
                got: obj.dim(),
            });
        }
    }
    for (what, m) in [("lower", &instance.lower), ("upper", &instance.upper)] {
        if m.dim() != (n, r) {
            violations.push(Violation::Shape {
                what: format!("{what} rows x cols"),
                expected: n * r,
                got: m.len(),
            });
        }
        if m.iter().any(|x| !x.is_finite()) {
            violations.push(Violation::NonFinite { what: what.into() });
        }
    }
    if instance.supply.iter().any(|x| !x.is_finite()) {
        violations.push(Violation::NonFinite {
            what: "supply".into(),
        });
    }
    if !violations.is_empty() {
        return ValidationReport { violations };
    }

    for ((node, resource), &lo) in instance.lower.indexed_iter() {
        let hi = instance.upper[[node, resource]];
        if lo > hi {
            violations.push(Violation::BoundOrder {
                node,
                resource,
                lower: lo,
                upper: hi,
            });
        }
    }
    for j in 0..r {
        let supply = instance.supply[j];
        let lower_sum = instance.lower.column(j).sum();
        let upper_sum = instance.upper.column(j).sum();
        if !(lower_sum < supply) {
            violations.push(Violation::LowerNotBelowSupply {
                resource: j,
                lower_sum,
                supply,
            });
        }
        if !(supply < upper_sum) {
            violations.push(Violation::SupplyNotBelowUpper {
                resource: j,
                upper_sum,
                supply,
            });
        }
    }
    ValidationReport { violations }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMeta {
    pub source: String,
    pub seed: u64,
    pub step_minutes: f64,
}

/// Instances for `k = 0..K-1` sharing node, producer and resource counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawScenario")]
pub struct Scenario {
    meta: ScenarioMeta,
    instances: Vec<DispatchInstance>,
}

#[derive(Deserialize)]
struct RawScenario {
    meta: ScenarioMeta,
    instances: Vec<DispatchInstance>,
}

impl TryFrom<RawScenario> for Scenario {
    type Error = Error;

    fn try_from(raw: RawScenario) -> Result<Self> {
        Scenario::new(raw.meta, raw.instances)
    }
}

impl Scenario {
    pub fn new(meta: ScenarioMeta, instances: Vec<DispatchInstance>) -> Result<Self> {
        let first = instances
            .first()
            .ok_or_else(|| Error::param("instances", "scenario is empty"))?;
        let shape = (first.n_nodes(), first.n_producers(), first.n_resources());
        for (idx, inst) in instances.iter().enumerate() {
            if inst.k() != idx {
                return Err(Error::param(
                    "instances",
                    format!("instance at position {idx} carries k={}", inst.k()),
                ));
            }
            if (inst.n_nodes(), inst.n_producers(), inst.n_resources()) != shape {
                return Err(Error::param(
                    "instances",
                    format!("instance k={idx} changes N, M or R"),
                ));
            }
        }
        Ok(Self { meta, instances })
    }

    pub fn meta(&self) -> &ScenarioMeta {
        &self.meta
    }

    pub fn instances(&self) -> &[DispatchInstance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn n_nodes(&self) -> usize {
        self.instances[0].n_nodes()
    }

    pub fn n_resources(&self) -> usize {
        self.instances[0].n_resources()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn quad(a: &[f64], d: &[f64], b: &[f64]) -> NodeObjective {
        NodeObjective::new(
            ObjectiveKind::ProducerCost,
            a.to_vec(),
            d.to_vec(),
            b.to_vec(),
        )
        .unwrap()
    }

    fn two_node(p: f64) -> Result<DispatchInstance> {
        let objs = vec![
            NodeObjective::tracking(ObjectiveKind::ProducerCost, 1.0, &[1.0]).unwrap(),
            NodeObjective::tracking(ObjectiveKind::ConsumerUtility, 1.0, &[1.0]).unwrap(),
        ];
        DispatchInstance::new(
            0,
            1,
            objs,
            Array2::zeros((2, 1)),
            Array2::from_elem((2, 1), 2.0),
            array![p],
        )
    }

    #[test]
    fn objective_values() {
        let f = quad(&[1.0], &[2.0], &[0.0]);
        assert_eq!(eval_objective(&f, array![2.0].view()).unwrap(), 0.0);
        assert_eq!(eval_objective(&f, array![0.0].view()).unwrap(), 4.0);
        // 1*(2-0)^2 + 3*(2-1)^2 + 5 + 0
        let g = quad(&[1.0, 3.0], &[0.0, 1.0], &[5.0, 0.0]);
        assert_eq!(eval_objective(&g, array![2.0, 2.0].view()).unwrap(), 12.0);
    }

    #[test]
    fn gradient_values() {
        let f = quad(&[1.0], &[2.0], &[0.0]);
        assert_eq!(eval_gradient(&f, array![2.0].view()).unwrap(), array![0.0]);
        assert_eq!(eval_gradient(&f, array![0.0].view()).unwrap(), array![-4.0]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let f = quad(&[1.0], &[2.0], &[0.0]);
        assert!(matches!(
            eval_objective(&f, array![1.0, 2.0].view()),
            Err(Error::Dimension {
                expected: 1,
                got: 2
            })
        ));
        assert!(eval_gradient(&f, array![].view()).is_err());
    }

    #[test]
    fn utility_is_negated_objective() {
        let u = NodeObjective::tracking(ObjectiveKind::ConsumerUtility, 1.0, &[2.0]).unwrap();
        assert_eq!(u.utility(array![0.0].view()), Some(-4.0));
        let c = quad(&[1.0], &[2.0], &[0.0]);
        assert_eq!(c.utility(array![0.0].view()), None);
    }

    #[test]
    fn nonpositive_curvature_rejected() {
        assert!(
            NodeObjective::new(ObjectiveKind::ProducerCost, vec![0.0], vec![1.0], vec![0.0])
                .is_err()
        );
        assert!(NodeObjective::new(
            ObjectiveKind::ProducerCost,
            vec![1.0],
            vec![1.0, 2.0],
            vec![0.0]
        )
        .is_err());
    }

    #[test]
    fn curvature_bounds_min_max() {
        let mk = |a: f64| NodeObjective::tracking(ObjectiveKind::ProducerCost, a, &[0.0]).unwrap();
        let inst = |objs: Vec<NodeObjective>| {
            let n = objs.len();
            DispatchInstance::new(
                0,
                n,
                objs,
                Array2::zeros((n, 1)),
                Array2::from_elem((n, 1), 1.0),
                array![0.5],
            )
            .unwrap()
        };
        assert_eq!(curvature_bounds(&inst(vec![mk(1.0), mk(1.0)])), (2.0, 2.0));
        assert_eq!(curvature_bounds(&inst(vec![mk(0.5), mk(2.0)])), (1.0, 4.0));
        assert_eq!(
            curvature_bounds(&inst((0..10).map(|_| mk(1.0)).collect())),
            (2.0, 2.0)
        );
    }

    #[test]
    fn strict_interior_check() {
        assert!(two_node(3.0).is_ok());
        match two_node(4.0) {
            Err(Error::InvalidInstance { report, .. }) => {
                assert_eq!(report.violations.len(), 1);
                assert!(matches!(
                    report.violations[0],
                    Violation::SupplyNotBelowUpper { resource: 0, .. }
                ));
            }
            other => panic!("expected rejection, got {other:?}"),
        }
        assert!(two_node(0.0).is_err());
    }

    #[test]
    fn zero_to_supply_boxes_are_valid_for_ten_nodes() {
        for p in [0.5, 1.0, 37.0] {
            let objs = (0..10)
                .map(|_| NodeObjective::tracking(ObjectiveKind::ProducerCost, 1.0, &[2.0]).unwrap())
                .collect();
            let inst = DispatchInstance::new(
                0,
                10,
                objs,
                Array2::zeros((10, 1)),
                Array2::from_elem((10, 1), p),
                array![p],
            );
            assert!(inst.is_ok());
        }
    }

    #[test]
    fn bound_order_violation_listed_per_coordinate() {
        let objs = vec![
            NodeObjective::tracking(ObjectiveKind::ProducerCost, 1.0, &[0.0, 0.0]).unwrap(),
            NodeObjective::tracking(ObjectiveKind::ProducerCost, 1.0, &[0.0, 0.0]).unwrap(),
        ];
        let err = DispatchInstance::new(
            3,
            2,
            objs,
            array![[0.0, 3.0], [0.0, 0.0]],
            array![[2.0, 1.0], [2.0, 5.0]],
            array![1.0, 2.0],
        )
        .unwrap_err();
        match err {
            Error::InvalidInstance { k: 3, report } => {
                assert!(report.violations.contains(&Violation::BoundOrder {
                    node: 0,
                    resource: 1,
                    lower: 3.0,
                    upper: 1.0
                }));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn deserialization_revalidates() {
        let inst = two_node(3.0).unwrap();
        let mut json: serde_json::Value = serde_json::to_value(&inst).unwrap();
        let back: DispatchInstance = serde_json::from_value(json.clone()).unwrap();
        assert_eq!(back, inst);
        json["supply"]["data"] = serde_json::json!([4.0]);
        assert!(serde_json::from_value::<DispatchInstance>(json).is_err());
    }
}

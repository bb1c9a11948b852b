//! Distributed projection onto the box-plus-balance set, run as a four-round
//! protocol between the nodes and the operator over a [`Network`].
//!
//! 1. Each node clamps `v_i = p_i + lambda_i / rho` into its box, keeps the
//!    mismatch `m_i = clamp(v_i) - v_i`, and uploads the clamped vector.
//! 2. The operator forms `d = P - sum_i clamp(v_i)` and broadcasts `sign(d)`.
//! 3. For every coordinate with `sign(d) != 0`, a node whose mismatch has the
//!    same sign, or is zero, uploads `(m_i, headroom)`. The headroom is
//!    `upper - clamp(v_i)` when `d > 0` and `lower - clamp(v_i)` when `d < 0`.
//! 4. The operator solves the reduced QP per coordinate and sends each
//!    transmitting node its movement `dq`. Nodes set `q = clamp(v_i) + dq`.
//!
//! Message order inside a round follows node id.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DispatchInstance, Matrix, Vector};
use crate::netsim::{
    Destination, EndpointId, Message, MessageKind, MoveWire, Network, OfferWire, Payload, OPERATOR,
};
use crate::projection::{project_box, solve_reduced_qp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sign {
    Negative,
    Zero,
    Positive,
}

impl Sign {
    pub fn of(x: f64) -> Sign {
        if x > 0.0 {
            Sign::Positive
        } else if x < 0.0 {
            Sign::Negative
        } else {
            Sign::Zero
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Sign::Negative => -1,
            Sign::Zero => 0,
            Sign::Positive => 1,
        }
    }

    pub fn from_i8(s: i8) -> Result<Sign> {
        match s {
            -1 => Ok(Sign::Negative),
            0 => Ok(Sign::Zero),
            1 => Ok(Sign::Positive),
            other => Err(Error::Protocol(format!("invalid sign symbol {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodePrepared {
    pub projection: Vector,
    pub mismatch: Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeUpload {
    pub node: usize,
    pub partial: Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OperatorBroadcast {
    pub residual: Vector,
    pub signs: Vec<Sign>,
}

/// Per-round record of one cooperative projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolTranscript {
    pub step: usize,
    pub messages: Vec<Message>,
    /// Transmitting node indices (0-based) per resource coordinate.
    pub transmit_sets: Vec<Vec<usize>>,
    /// `(node, dq)` per resource coordinate.
    pub deltas: Vec<Vec<(usize, f64)>>,
    pub reals_up: u64,
    pub reals_down: u64,
    pub symbols: u64,
    pub bits: u64,
}

impl ProtocolTranscript {
    pub fn transmit_total(&self) -> u64 {
        self.transmit_sets.iter().map(|t| t.len() as u64).sum()
    }

    /// `R N + 2 sum_j |T(j)|`.
    pub fn expected_uplink(&self, n_nodes: usize) -> u64 {
        (self.transmit_sets.len() * n_nodes) as u64 + 2 * self.transmit_total()
    }

    pub fn total_reals(&self) -> u64 {
        self.reals_up + self.reals_down
    }
}

fn node_endpoint(i: usize) -> EndpointId {
    (i + 1) as EndpointId
}

/// Box projection of `p + lambda / rho` and the mismatch `projection - (p + lambda / rho)`.
pub fn node_prepare(
    p: ArrayView1<f64>,
    lambda: ArrayView1<f64>,
    rho: f64,
    lower: ArrayView1<f64>,
    upper: ArrayView1<f64>,
) -> Result<NodePrepared> {
    if lambda.len() != p.len() {
        return Err(Error::Dimension {
            expected: p.len(),
            got: lambda.len(),
        });
    }
    let v: Vector = &p + &(&lambda / rho);
    let projection = project_box(v.view(), lower, upper)?;
    let mismatch = &projection - &v;
    Ok(NodePrepared {
        projection,
        mismatch,
    })
}

pub fn operator_aggregate(
    uploads: &[NodeUpload],
    n_nodes: usize,
    supply: ArrayView1<f64>,
) -> Result<OperatorBroadcast> {
    let mut seen = vec![false; n_nodes];
    let mut total = Array1::<f64>::zeros(supply.len());
    for up in uploads {
        if up.node >= n_nodes || seen[up.node] {
            return Err(Error::Protocol(format!(
                "unexpected upload from node {}",
                up.node
            )));
        }
        if up.partial.len() != supply.len() {
            return Err(Error::Dimension {
                expected: supply.len(),
                got: up.partial.len(),
            });
        }
        seen[up.node] = true;
        total += &up.partial;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Protocol(format!(
            "missing upload from node {missing}"
        )));
    }
    let residual: Vector = &supply - &total;
    let signs = residual.iter().map(|&d| Sign::of(d)).collect();
    Ok(OperatorBroadcast { residual, signs })
}

/// Offers for every coordinate where this node belongs to the transmit set.
pub fn node_respond(
    mismatch: ArrayView1<f64>,
    signs: &[Sign],
    lower: ArrayView1<f64>,
    upper: ArrayView1<f64>,
    projection: ArrayView1<f64>,
) -> Vec<OfferWire> {
    let mut offers = Vec::new();
    for (j, &s) in signs.iter().enumerate() {
        let m = mismatch[j];
        if s == Sign::Zero || !(Sign::of(m) == s || m == 0.0) {
            continue;
        }
        let headroom = match s {
            Sign::Positive => upper[j] - projection[j],
            _ => lower[j] - projection[j],
        };
        offers.push(OfferWire {
            resource: j,
            mismatch: m,
            headroom,
        });
    }
    offers
}

/// Solves the reduced QP for every coordinate with nonzero residual.
/// `offers` holds `(node, offers)` pairs; returns `(node, dq)` per coordinate.
pub fn operator_redistribute(
    offers: &[(usize, Vec<OfferWire>)],
    broadcast: &OperatorBroadcast,
) -> Result<Vec<Vec<(usize, f64)>>> {
    let r = broadcast.residual.len();
    let mut per_coord: Vec<Vec<(usize, OfferWire)>> = vec![Vec::new(); r];
    for (node, list) in offers {
        for offer in list {
            if offer.resource >= r {
                return Err(Error::Protocol(format!(
                    "offer for resource {}",
                    offer.resource
                )));
            }
            per_coord[offer.resource].push((*node, *offer));
        }
    }
    let mut out = vec![Vec::new(); r];
    for j in 0..r {
        let d = broadcast.residual[j];
        if broadcast.signs[j] == Sign::Zero {
            continue;
        }
        let entries = &per_coord[j];
        let m: Vec<f64> = entries.iter().map(|(_, o)| o.mismatch).collect();
        let bounds: Vec<(f64, f64)> = entries
            .iter()
            .map(|(_, o)| {
                if d > 0.0 {
                    (0.0, o.headroom)
                } else {
                    (o.headroom, 0.0)
                }
            })
            .collect();
        let capacity: f64 = entries.iter().map(|(_, o)| o.headroom.abs()).sum();
        if capacity < d.abs() {
            return Err(Error::Protocol(format!(
                "resource {j}: transmitting nodes offer {capacity} but residual is {d}"
            )));
        }
        let dq = solve_reduced_qp(&m, &bounds, d)?;
        out[j] = entries.iter().map(|(i, _)| *i).zip(dq).collect();
    }
    Ok(out)
}

/// Runs the four protocol rounds for `v = p + lambda / rho` against
/// `instance`. The returned `q` lies in the instance boxes exactly.
pub fn run_coop_projection(
    p: &Matrix,
    lambda: &Matrix,
    rho: f64,
    instance: &DispatchInstance,
    net: &mut Network,
) -> Result<(Matrix, ProtocolTranscript)> {
    let n = instance.n_nodes();
    let r = instance.n_resources();
    if p.dim() != (n, r) || lambda.dim() != (n, r) {
        return Err(Error::Dimension {
            expected: n * r,
            got: p.len().min(lambda.len()),
        });
    }
    if net.n_nodes() != n {
        return Err(Error::Protocol(format!(
            "network has {} nodes, instance has {n}",
            net.n_nodes()
        )));
    }
    if !(rho > 0.0) {
        return Err(Error::param("rho", "must be > 0"));
    }
    let first_msg = net.transcript().len();
    let lower = instance.lower();
    let upper = instance.upper();

    // round 1: local box projections
    let prepared: Vec<NodePrepared> = (0..n)
        .map(|i| node_prepare(p.row(i), lambda.row(i), rho, lower.row(i), upper.row(i)))
        .collect::<Result<_>>()?;
    for (i, prep) in prepared.iter().enumerate() {
        net.send(Message::new(
            1,
            node_endpoint(i),
            Destination::Endpoint(OPERATOR),
            MessageKind::PartialSumUpload,
            Payload::Reals(prep.projection.to_vec()),
        )?)?;
    }
    let uploads = net
        .drain(OPERATOR)?
        .into_iter()
        .map(|msg| match msg.payload {
            Payload::Reals(v) => Ok(NodeUpload {
                node: msg.from as usize - 1,
                partial: Array1::from(v),
            }),
            _ => Err(Error::Protocol("expected partial-sum upload".into())),
        })
        .collect::<Result<Vec<_>>>()?;

    // round 2: residual sign broadcast
    let broadcast = operator_aggregate(&uploads, n, instance.supply().view())?;
    net.broadcast(Message::new(
        2,
        OPERATOR,
        Destination::ALL,
        MessageKind::SignBroadcast,
        Payload::Signs(broadcast.signs.iter().map(|s| s.as_i8()).collect()),
    )?)?;

    // round 3: conditional offers
    let mut offers = Vec::new();
    for (i, prep) in prepared.iter().enumerate() {
        let ep = node_endpoint(i);
        let heard = net.drain(ep)?;
        let signs = match heard.as_slice() {
            [Message {
                payload: Payload::Signs(s),
                ..
            }] => s
                .iter()
                .map(|&x| Sign::from_i8(x))
                .collect::<Result<Vec<_>>>()?,
            _ => {
                return Err(Error::Protocol(format!(
                    "node {i} missed the sign broadcast"
                )))
            }
        };
        let node_offers = node_respond(
            prep.mismatch.view(),
            &signs,
            lower.row(i),
            upper.row(i),
            prep.projection.view(),
        );
        if !node_offers.is_empty() {
            net.send(Message::new(
                3,
                ep,
                Destination::Endpoint(OPERATOR),
                MessageKind::PayloadUpload,
                Payload::Offers(node_offers),
            )?)?;
        }
    }
    for msg in net.drain(OPERATOR)? {
        match msg.payload {
            Payload::Offers(list) => offers.push((msg.from as usize - 1, list)),
            _ => return Err(Error::Protocol("expected offer upload".into())),
        }
    }
    let transmit_sets: Vec<Vec<usize>> = (0..r)
        .map(|j| {
            offers
                .iter()
                .filter(|(_, list)| list.iter().any(|o| o.resource == j))
                .map(|(i, _)| *i)
                .collect()
        })
        .collect();

    // round 4: movements back to the transmitting nodes
    let deltas = operator_redistribute(&offers, &broadcast)?;
    let mut per_node: Vec<Vec<MoveWire>> = vec![Vec::new(); n];
    for (j, assignments) in deltas.iter().enumerate() {
        for &(i, delta) in assignments {
            per_node[i].push(MoveWire { resource: j, delta });
        }
    }
    for (i, moves) in per_node.into_iter().enumerate() {
        if !moves.is_empty() {
            net.send(Message::new(
                4,
                OPERATOR,
                Destination::Endpoint(node_endpoint(i)),
                MessageKind::DeltaDownlink,
                Payload::Moves(moves),
            )?)?;
        }
    }
    let mut q = Matrix::zeros((n, r));
    for (i, prep) in prepared.iter().enumerate() {
        let mut row = prep.projection.clone();
        for msg in net.drain(node_endpoint(i))? {
            if let Payload::Moves(moves) = msg.payload {
                for mv in moves {
                    row[mv.resource] = (row[mv.resource] + mv.delta)
                        .clamp(lower[[i, mv.resource]], upper[[i, mv.resource]]);
                }
            }
        }
        q.row_mut(i).assign(&row);
    }

    let messages = net.transcript()[first_msg..].to_vec();
    let mut transcript = ProtocolTranscript {
        step: net.current_step(),
        messages,
        transmit_sets,
        deltas,
        reals_up: 0,
        reals_down: 0,
        symbols: 0,
        bits: 0,
    };
    for msg in &transcript.messages {
        if msg.is_uplink() {
            transcript.reals_up += msg.n_reals;
        } else {
            transcript.reals_down += msg.n_reals;
        }
        transcript.symbols += msg.n_symbols;
        transcript.bits += msg.n_bits;
    }
    Ok((q, transcript))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{NodeObjective, ObjectiveKind};
    use crate::projection::{project_polyhedron, ProjectionTask};
    use ndarray::{array, Array2};

    fn instance(lower: Matrix, upper: Matrix, supply: Vector) -> DispatchInstance {
        let (n, r) = lower.dim();
        let objs = (0..n)
            .map(|_| {
                NodeObjective::tracking(ObjectiveKind::ProducerCost, 1.0, &vec![0.0; r]).unwrap()
            })
            .collect();
        DispatchInstance::new(0, n, objs, lower, upper, supply).unwrap()
    }

    #[test]
    fn prepare_examples() {
        let b = (array![0.0], array![2.0]);
        let prep = node_prepare(
            array![1.0].view(),
            array![0.0].view(),
            1.0,
            b.0.view(),
            b.1.view(),
        )
        .unwrap();
        assert_eq!((prep.projection[0], prep.mismatch[0]), (1.0, 0.0));
        let prep = node_prepare(
            array![-1.0].view(),
            array![0.0].view(),
            1.0,
            b.0.view(),
            b.1.view(),
        )
        .unwrap();
        assert_eq!((prep.projection[0], prep.mismatch[0]), (0.0, 1.0));
        let prep = node_prepare(
            array![2.0].view(),
            array![2.0].view(),
            2.0,
            b.0.view(),
            b.1.view(),
        )
        .unwrap();
        assert_eq!((prep.projection[0], prep.mismatch[0]), (2.0, -1.0));
    }

    #[test]
    fn aggregate_examples() {
        let ups = |vals: [f64; 3]| -> Vec<NodeUpload> {
            vals.iter()
                .enumerate()
                .map(|(i, &v)| NodeUpload {
                    node: i,
                    partial: array![v],
                })
                .collect()
        };
        let b = operator_aggregate(&ups([2.0, 0.0, 2.0]), 3, array![5.0].view()).unwrap();
        assert_eq!((b.residual[0], b.signs[0]), (1.0, Sign::Positive));
        let b = operator_aggregate(&ups([2.0, 0.0, 2.0]), 3, array![3.0].view()).unwrap();
        assert_eq!((b.residual[0], b.signs[0]), (-1.0, Sign::Negative));
        let b = operator_aggregate(&ups([2.0, 1.0, 2.0]), 3, array![5.0].view()).unwrap();
        assert_eq!(b.signs[0], Sign::Zero);
        let missing = operator_aggregate(&ups([2.0, 0.0, 2.0])[..2], 3, array![5.0].view());
        assert!(matches!(missing, Err(Error::Protocol(_))));
    }

    #[test]
    fn respond_examples() {
        let lo = array![0.0];
        let hi = array![2.0];
        let o = node_respond(
            array![1.0].view(),
            &[Sign::Positive],
            lo.view(),
            hi.view(),
            array![0.0].view(),
        );
        assert_eq!(
            o,
            vec![OfferWire {
                resource: 0,
                mismatch: 1.0,
                headroom: 2.0
            }]
        );
        let o = node_respond(
            array![-1.0].view(),
            &[Sign::Positive],
            lo.view(),
            hi.view(),
            array![2.0].view(),
        );
        assert!(o.is_empty());
        let o = node_respond(
            array![0.0].view(),
            &[Sign::Positive],
            lo.view(),
            hi.view(),
            array![2.0].view(),
        );
        assert_eq!(
            o,
            vec![OfferWire {
                resource: 0,
                mismatch: 0.0,
                headroom: 0.0
            }]
        );
        let o = node_respond(
            array![0.0].view(),
            &[Sign::Zero],
            lo.view(),
            hi.view(),
            array![1.0].view(),
        );
        assert!(o.is_empty());
        let o = node_respond(
            array![-1.0].view(),
            &[Sign::Negative],
            lo.view(),
            hi.view(),
            array![2.0].view(),
        );
        assert_eq!(
            o,
            vec![OfferWire {
                resource: 0,
                mismatch: -1.0,
                headroom: -2.0
            }]
        );
    }

    #[test]
    fn redistribute_examples() {
        let b = OperatorBroadcast {
            residual: array![1.0],
            signs: vec![Sign::Positive],
        };
        let offers = vec![
            (
                1,
                vec![OfferWire {
                    resource: 0,
                    mismatch: 1.0,
                    headroom: 2.0,
                }],
            ),
            (
                2,
                vec![OfferWire {
                    resource: 0,
                    mismatch: 0.0,
                    headroom: 0.0,
                }],
            ),
        ];
        let dq = operator_redistribute(&offers, &b).unwrap();
        assert_eq!(dq[0], vec![(1, 1.0), (2, 0.0)]);

        let zero = OperatorBroadcast {
            residual: array![0.0],
            signs: vec![Sign::Zero],
        };
        assert!(operator_redistribute(&[], &zero).unwrap()[0].is_empty());

        let single = vec![(
            4,
            vec![OfferWire {
                resource: 0,
                mismatch: 0.0,
                headroom: 3.0,
            }],
        )];
        assert_eq!(
            operator_redistribute(&single, &b).unwrap()[0],
            vec![(4, 1.0)]
        );

        let short = vec![(
            4,
            vec![OfferWire {
                resource: 0,
                mismatch: 0.0,
                headroom: 0.5,
            }],
        )];
        assert!(matches!(
            operator_redistribute(&short, &b),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn walkthrough_matches_kernel() {
        let inst = instance(
            Array2::zeros((3, 1)),
            Array2::from_elem((3, 1), 2.0),
            array![5.0],
        );
        let p = array![[3.0], [-1.0], [2.0]];
        let lambda = Array2::zeros((3, 1));
        let mut net = Network::star(3);
        let (q, tr) = run_coop_projection(&p, &lambda, 1.0, &inst, &mut net).unwrap();
        assert_eq!(q.column(0).to_vec(), vec![2.0, 1.0, 2.0]);
        assert_eq!(tr.transmit_sets, vec![vec![1, 2]]);
        assert_eq!(tr.deltas[0], vec![(1, 1.0), (2, 0.0)]);
        assert_eq!(tr.reals_up, tr.expected_uplink(3));
        assert_eq!(tr.reals_up, 3 + 4);
        assert_eq!(tr.reals_down, 2);
        assert_eq!((tr.symbols, tr.bits), (1, 2));
        let kernel = project_polyhedron(&ProjectionTask {
            point: p,
            lower: inst.lower().clone(),
            upper: inst.upper().clone(),
            target: inst.supply().clone(),
        })
        .unwrap();
        assert_eq!(kernel.q, q);
    }

    #[test]
    fn feasible_start_has_no_payload_traffic() {
        let inst = instance(
            Array2::zeros((3, 1)),
            Array2::from_elem((3, 1), 2.0),
            array![3.0],
        );
        let p = array![[1.0], [0.5], [1.5]];
        let mut net = Network::star(3);
        let (q, tr) =
            run_coop_projection(&p, &Array2::zeros((3, 1)), 1.0, &inst, &mut net).unwrap();
        assert_eq!(q, p);
        assert_eq!(tr.transmit_total(), 0);
        assert_eq!((tr.reals_up, tr.reals_down, tr.symbols), (3, 0, 1));
    }

    #[test]
    fn ten_node_round_stays_below_worst_case() {
        let inst = instance(
            Array2::zeros((10, 1)),
            Array2::from_elem((10, 1), 7.0),
            array![7.0],
        );
        let p = Array2::from_shape_fn((10, 1), |(i, _)| i as f64 * 0.9 - 2.0);
        let lambda = Array2::from_shape_fn((10, 1), |(i, _)| (i % 3) as f64 - 1.0);
        let mut net = Network::star(10);
        let (_, tr) = run_coop_projection(&p, &lambda, 10.0, &inst, &mut net).unwrap();
        assert!(tr.total_reals() <= 40);
        assert_eq!(tr.reals_up, 10 + 2 * tr.transmit_total());
    }

    #[test]
    fn rejects_wrong_network_size() {
        let inst = instance(
            Array2::zeros((2, 1)),
            Array2::from_elem((2, 1), 2.0),
            array![1.0],
        );
        let mut net = Network::star(3);
        let z = Array2::zeros((2, 1));
        assert!(run_coop_projection(&z, &z, 1.0, &inst, &mut net).is_err());
    }
}

//! Deterministic star/bus message fabric between user nodes and the system
//! operator, with exact payload accounting.
//!
//! Endpoint 0 is the operator; nodes are `1..=N`. Delivery is synchronous
//! and FIFO per inbox. A broadcast is a single transmission on the bus and is
//! counted once, whatever the number of recipients.
//!
//! Sign vectors use the alphabet `{-1, 0, +1}`. Each symbol is counted once in
//! `symbols` (the length of the broadcast sign vector) and as
//! [`BITS_PER_SIGN`] bits in `bits`, because a ternary symbol does not fit in
//! one bit.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type EndpointId = u32;

pub const OPERATOR: EndpointId = 0;
pub const BITS_PER_SIGN: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Destination {
    Endpoint(EndpointId),
    Broadcast(BroadcastTag),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BroadcastTag {
    All,
}

impl Destination {
    pub const ALL: Destination = Destination::Broadcast(BroadcastTag::All);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MessageKind {
    PartialSumUpload,
    SignBroadcast,
    PayloadUpload,
    DeltaDownlink,
    PriceBroadcast,
}

/// `(resource, m, headroom)` offered by a node for one coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OfferWire {
    pub resource: usize,
    pub mismatch: f64,
    pub headroom: f64,
}

/// `(resource, delta)` assigned by the operator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoveWire {
    pub resource: usize,
    pub delta: f64,
}

/// Coordinate indices are addressing metadata and are not counted as reals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "data", rename_all = "kebab-case")]
pub enum Payload {
    Reals(Vec<f64>),
    Signs(Vec<i8>),
    Offers(Vec<OfferWire>),
    Moves(Vec<MoveWire>),
}

impl Payload {
    fn n_reals(&self) -> u64 {
        match self {
            Payload::Reals(v) => v.len() as u64,
            Payload::Signs(_) => 0,
            Payload::Offers(v) => 2 * v.len() as u64,
            Payload::Moves(v) => v.len() as u64,
        }
    }

    fn n_symbols(&self) -> u64 {
        match self {
            Payload::Signs(v) => v.len() as u64,
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub step: usize,
    pub round: u32,
    pub from: EndpointId,
    pub to: Destination,
    pub kind: MessageKind,
    pub n_reals: u64,
    pub n_symbols: u64,
    pub n_bits: u64,
    pub payload: Payload,
}

impl Message {
    /// Sizes are derived from the payload; the payload type must match the kind.
    pub fn new(
        round: u32,
        from: EndpointId,
        to: Destination,
        kind: MessageKind,
        payload: Payload,
    ) -> Result<Self> {
        let ok = matches!(
            (kind, &payload),
            (MessageKind::PartialSumUpload, Payload::Reals(_))
                | (MessageKind::PriceBroadcast, Payload::Reals(_))
                | (MessageKind::SignBroadcast, Payload::Signs(_))
                | (MessageKind::PayloadUpload, Payload::Offers(_))
                | (MessageKind::DeltaDownlink, Payload::Moves(_))
        );
        if !ok {
            return Err(Error::Protocol(format!(
                "payload does not match message kind {kind:?}"
            )));
        }
        if let Payload::Signs(s) = &payload {
            if s.iter().any(|x| !(-1..=1).contains(x)) {
                return Err(Error::Protocol("sign symbols must be -1, 0 or +1".into()));
            }
        }
        let n_symbols = payload.n_symbols();
        Ok(Self {
            step: 0,
            round,
            from,
            to,
            kind,
            n_reals: payload.n_reals(),
            n_symbols,
            n_bits: n_symbols * BITS_PER_SIGN,
            payload,
        })
    }

    pub fn is_uplink(&self) -> bool {
        self.to == Destination::Endpoint(OPERATOR)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub reals_up: u64,
    pub reals_down: u64,
    pub symbols: u64,
    pub bits: u64,
    pub messages: u64,
}

impl Counters {
    fn add(&mut self, msg: &Message) {
        if msg.is_uplink() {
            self.reals_up += msg.n_reals;
        } else {
            self.reals_down += msg.n_reals;
        }
        self.symbols += msg.n_symbols;
        self.bits += msg.n_bits;
        self.messages += 1;
    }

    pub fn reals(&self) -> u64 {
        self.reals_up + self.reals_down
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Receipt {
    pub seq: u64,
    pub delivered_to: Vec<EndpointId>,
}

/// Star network: every node has a link to the operator.
#[derive(Clone, Debug)]
pub struct Network {
    inboxes: Vec<VecDeque<Message>>,
    transcript: Vec<Message>,
    step: usize,
    totals: Counters,
    per_step: BTreeMap<usize, Counters>,
}

impl Network {
    pub fn star(n_nodes: usize) -> Self {
        Self {
            inboxes: vec![VecDeque::new(); n_nodes + 1],
            transcript: Vec::new(),
            step: 0,
            totals: Counters::default(),
            per_step: BTreeMap::new(),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.inboxes.len() - 1
    }

    pub fn begin_step(&mut self, k: usize) {
        self.step = k;
        self.per_step.entry(k).or_default();
    }

    pub fn current_step(&self) -> usize {
        self.step
    }

    fn check(&self, id: EndpointId) -> Result<()> {
        if (id as usize) < self.inboxes.len() {
            Ok(())
        } else {
            Err(Error::UnknownEndpoint(id))
        }
    }

    fn record(&mut self, mut msg: Message, recipients: &[EndpointId]) -> Receipt {
        msg.step = self.step;
        self.totals.add(&msg);
        self.per_step.entry(self.step).or_default().add(&msg);
        for &r in recipients {
            self.inboxes[r as usize].push_back(msg.clone());
        }
        let seq = self.transcript.len() as u64;
        self.transcript.push(msg);
        Receipt {
            seq,
            delivered_to: recipients.to_vec(),
        }
    }

    /// Point-to-point delivery. One endpoint must be the operator.
    pub fn send(&mut self, msg: Message) -> Result<Receipt> {
        self.check(msg.from)?;
        let to = match msg.to {
            Destination::Endpoint(to) => to,
            Destination::Broadcast(_) => return self.broadcast(msg),
        };
        self.check(to)?;
        if msg.from != OPERATOR && to != OPERATOR {
            return Err(Error::Protocol(format!(
                "star topology has no link {} -> {to}",
                msg.from
            )));
        }
        Ok(self.record(msg, &[to]))
    }

    /// Operator broadcast to every node, counted as one transmission.
    pub fn broadcast(&mut self, mut msg: Message) -> Result<Receipt> {
        self.check(msg.from)?;
        if msg.from != OPERATOR {
            return Err(Error::Protocol("only the operator broadcasts".into()));
        }
        msg.to = Destination::ALL;
        let recipients: Vec<EndpointId> = (1..self.inboxes.len() as EndpointId).collect();
        Ok(self.record(msg, &recipients))
    }

    pub fn recv(&mut self, endpoint: EndpointId) -> Result<Option<Message>> {
        self.check(endpoint)?;
        Ok(self.inboxes[endpoint as usize].pop_front())
    }

    pub fn drain(&mut self, endpoint: EndpointId) -> Result<Vec<Message>> {
        self.check(endpoint)?;
        Ok(self.inboxes[endpoint as usize].drain(..).collect())
    }

    pub fn pending(&self) -> usize {
        self.inboxes.iter().map(VecDeque::len).sum()
    }

    pub fn step_counters(&self, k: usize) -> Option<Counters> {
        self.per_step.get(&k).copied()
    }

    pub fn totals(&self) -> Counters {
        self.totals
    }

    pub fn transcript(&self) -> &[Message] {
        &self.transcript
    }

    /// One JSON object per message, in send order.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for msg in &self.transcript {
            serde_json::to_writer(&mut w, msg)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// `step,reals_up,reals_down,symbols,bits,messages` per step, then a `total` row.
    pub fn write_counters_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "step",
            "reals_up",
            "reals_down",
            "symbols",
            "bits",
            "messages",
        ])?;
        let row = |label: String, c: &Counters| {
            [
                label,
                c.reals_up.to_string(),
                c.reals_down.to_string(),
                c.symbols.to_string(),
                c.bits.to_string(),
                c.messages.to_string(),
            ]
        };
        for (k, c) in &self.per_step {
            out.write_record(row(k.to_string(), c))?;
        }
        out.write_record(row("total".into(), &self.totals))?;
        out.flush()?;
        Ok(())
    }
}

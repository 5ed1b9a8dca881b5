//! Omniscient checkers: relay graph extraction, validity of relays, relay
//! parameters and headers, legality, connectivity and departure legitimacy.
//!
//! Nothing here is reachable from protocol code; the oracle only reads a
//! [`WorldState`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::ids::{belongs_to, Key, RelayId, Rid};
use crate::message::{Header, Message, Payload, RelayParameter, Transmit};
use crate::relay::{Origin, Relay};
use crate::world::WorldState;

/// Properties of a valid relay. `P10` is the sink alternative and the
/// `P11*` variants the non-sink alternative.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum RelayProp {
    P1,
    P2,
    P3,
    P4,
    P5,
    P6,
    P7,
    P8,
    P9,
    P10,
    P11a,
    P11b,
    P11c,
    P11d,
    P11e,
    P11f,
}

impl fmt::Display for RelayProp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RelayVerdict {
    pub valid: bool,
    pub violated: Vec<RelayProp>,
}

/// Position of one relay parameter: message `msg` of `carrier.Buf`,
/// parameter slot `param` of its action.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct ParamLoc {
    pub carrier: RelayId,
    pub msg: usize,
    pub param: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamVerdict {
    pub valid: bool,
    /// Violated clause numbers, 1 through 11.
    pub violated: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Node {
    Proc(Rid),
    Relay(RelayId),
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Proc(r) => write!(f, "{r}"),
            Node::Relay(id) => write!(f, "{id}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RelayGraph {
    pub vertices: BTreeSet<Node>,
    pub explicit_edges: BTreeSet<(Node, Node)>,
    pub implicit_edges: BTreeSet<(Node, Node)>,
}

impl RelayGraph {
    pub fn edges(&self) -> impl Iterator<Item = &(Node, Node)> {
        self.explicit_edges.iter().chain(self.implicit_edges.iter())
    }
}

struct Probe<'a> {
    carrier: RelayId,
    seq: &'a [Key],
}

struct Irc<'a> {
    to: Rid,
    keys: &'a BTreeSet<Key>,
    sender: Rid,
}

/// Message-level lookups built once per judged state.
struct Index<'a> {
    pings: BTreeMap<RelayId, Vec<(u32, Rid, Key)>>,
    orc: BTreeSet<RelayId>,
    notauth: BTreeMap<(Key, RelayId), Vec<Rid>>,
    probefail_first: BTreeMap<Key, Vec<Key>>,
    probes_by_control: BTreeMap<Key, Vec<Probe<'a>>>,
    irc_by_target: BTreeMap<RelayId, Vec<Irc<'a>>>,
    param_count: BTreeMap<Key, usize>,
    header_keys: BTreeSet<Key>,
    out_key_owners: BTreeMap<Key, Vec<RelayId>>,
    in_key_count: BTreeMap<Key, usize>,
}

impl<'a> Index<'a> {
    fn build(w: &'a WorldState) -> Self {
        let mut ix = Index {
            pings: BTreeMap::new(),
            orc: BTreeSet::new(),
            notauth: BTreeMap::new(),
            probefail_first: BTreeMap::new(),
            probes_by_control: BTreeMap::new(),
            irc_by_target: BTreeMap::new(),
            param_count: BTreeMap::new(),
            header_keys: BTreeSet::new(),
            out_key_owners: BTreeMap::new(),
            in_key_count: BTreeMap::new(),
        };
        for r in w.relays() {
            for k in &r.out.keys {
                ix.out_key_owners.entry(*k).or_default().push(r.id);
            }
            for e in &r.in_set {
                *ix.in_key_count.entry(e.key).or_default() += 1;
            }
            for env in &r.buf {
                ix.add(&env.msg, Some(r.id), r.id.rid);
            }
        }
        for l in w.layers.values() {
            for (to, env) in &l.layer_buf {
                ix.add(&env.msg, None, *to);
            }
        }
        ix
    }

    fn add_transmit(&mut self, t: &'a Transmit, carrier: Option<RelayId>) {
        self.header_keys.insert(t.header.key);
        match &t.payload {
            Payload::App(a) => {
                for p in a.relay_params() {
                    *self.param_count.entry(p.key).or_default() += 1;
                }
            }
            Payload::Probe {
                control_keys,
                key_sequence,
            } => {
                if let Some(c) = carrier {
                    for k in control_keys {
                        self.probes_by_control.entry(*k).or_default().push(Probe {
                            carrier: c,
                            seq: key_sequence,
                        });
                    }
                }
            }
        }
    }

    fn add(&mut self, m: &'a Message, carrier: Option<RelayId>, to: Rid) {
        match m {
            Message::Transmit(t) => self.add_transmit(t, carrier),
            Message::NotAuthorized(t) => {
                self.add_transmit(t, None);
                self.notauth
                    .entry((t.header.key, t.header.out_id))
                    .or_default()
                    .push(t.header.in_id.rid);
            }
            Message::Local(_) => {}
            Message::ProbeFail { key, key_sequence } => {
                if let Some(k1) = key_sequence.first() {
                    self.probefail_first.entry(*key).or_default().push(*k1);
                }
            }
            Message::InRelayClosed {
                keys,
                sender_rid,
                target_id,
            } => self.irc_by_target.entry(*target_id).or_default().push(Irc {
                to,
                keys,
                sender: *sender_rid,
            }),
            Message::OutRelayClosed { id } => {
                self.orc.insert(*id);
            }
            Message::Ping {
                id,
                level,
                sink_rid,
                key,
            } => self.pings.entry(*id).or_default().push((*level, *sink_rid, *key)),
        }
    }
}

/// Header validity for `r` as seen by an omniscient observer.
pub fn valid_header(w: &WorldState, h: &Header, r: &Relay) -> bool {
    if r.id != h.out_id {
        return false;
    }
    let sender = h.in_id.rid;
    r.in_set.iter().any(|e| {
        e.key == h.key
            && match e.origin {
                Origin::ConfirmedFrom(x) => x == sender,
                Origin::UnconfirmedVia(v) => v.rid == r.id.rid && w.relay(v).is_some_and(|v| v.sink_rid == sender),
            }
    })
}

fn is_activation_probe(t: &Transmit, key: Key, from: RelayId, to: RelayId) -> bool {
    t.header.key == key
        && t.header.in_id == from
        && t.header.out_id == to
        && matches!(&t.payload, Payload::Probe { control_keys, key_sequence }
            if control_keys.is_empty() && key_sequence.as_slice() == [key])
}

/// Judges a whole state. Construction computes every relay verdict.
pub struct Oracle<'a> {
    w: &'a WorldState,
    ix: Index<'a>,
    /// Alive relays that are valid, plus dead relays that are still able to
    /// drain their buffers.
    good: BTreeSet<RelayId>,
    violations: BTreeMap<RelayId, Vec<RelayProp>>,
}

impl<'a> Oracle<'a> {
    pub fn new(w: &'a WorldState) -> Self {
        let ix = Index::build(w);
        let mut o = Oracle {
            w,
            ix,
            good: BTreeSet::new(),
            violations: BTreeMap::new(),
        };
        o.solve();
        o
    }

    fn solve(&mut self) {
        for r in self.w.relays() {
            let v = self.local_violations(r);
            // A dead relay has an empty In set, so the properties about
            // inbound traffic say nothing about whether it can still drain.
            let blocking = v
                .iter()
                .any(|p| r.is_alive() || !matches!(p, RelayProp::P6 | RelayProp::P7));
            if !blocking {
                self.good.insert(r.id);
            }
            self.violations.insert(r.id, v);
        }
        // Greatest fixpoint over the references to other relays.
        loop {
            let mut drop = Vec::new();
            for id in &self.good {
                let r = self.w.relay(*id).expect("indexed relay");
                if let Some(next) = r.out.id {
                    let ok = self.good.contains(&next) && self.w.relay(next).is_some_and(|n| n.is_alive());
                    if !ok {
                        drop.push((*id, RelayProp::P11b));
                        continue;
                    }
                }
                if r.in_set.iter().any(|e| e.via().is_some_and(|v| !self.good.contains(&v))) {
                    drop.push((*id, RelayProp::P4));
                }
            }
            if drop.is_empty() {
                break;
            }
            for (id, p) in drop {
                self.good.remove(&id);
                let v = self.violations.get_mut(&id).expect("indexed relay");
                if !v.contains(&p) {
                    v.push(p);
                    v.sort();
                }
            }
        }
    }

    fn local_violations(&self, r: &Relay) -> Vec<RelayProp> {
        let w = self.w;
        let ix = &self.ix;
        let me = r.id.rid;
        let mut v = Vec::new();
        if !w.layers.get(&me).is_some_and(|l| l.relays.contains_key(&r.id)) {
            v.push(RelayProp::P2);
        }
        // P4: unconfirmed entries must name a local relay; validity of that
        // relay is settled by the fixpoint.
        if r
            .in_set
            .iter()
            .any(|e| e.via().is_some_and(|via| via.rid != me || w.relay(via).is_none()))
        {
            v.push(RelayProp::P4);
        }
        if r
            .in_set
            .iter()
            .any(|e| !belongs_to(e.key, me) || ix.in_key_count.get(&e.key).copied().unwrap_or(0) != 1)
        {
            v.push(RelayProp::P5);
        }
        if let Some(ps) = ix.pings.get(&r.id) {
            let bad = ps.iter().any(|(lvl, sink, key)| {
                *lvl != r.level
                    || *sink != r.sink_rid
                    || r.in_set.iter().any(|e| e.key == *key && e.via().is_some())
            });
            if bad {
                v.push(RelayProp::P6);
            }
        }
        if ix.orc.contains(&r.id) {
            v.push(RelayProp::P7);
        }
        let p8 = r.in_set.iter().any(|e| {
            let Some(rids) = ix.notauth.get(&(e.key, r.id)) else {
                return false;
            };
            let expect = match e.origin {
                Origin::ConfirmedFrom(x) => Some(x),
                Origin::UnconfirmedVia(via) => w.relay(via).map(|x| x.sink_rid),
            };
            expect.is_some_and(|x| rids.contains(&x))
        });
        if p8 {
            v.push(RelayProp::P8);
        }
        let p9 = r.in_set.iter().all(|e| match e.origin {
            Origin::ConfirmedFrom(_) => true,
            Origin::UnconfirmedVia(via) => w.relay(via).is_some_and(|via| self.pending_ok(r, e.key, via)),
        });
        if !p9 {
            v.push(RelayProp::P9);
        }
        match r.out.id {
            None => {
                if !(r.out.keys.is_empty() && r.level == 0 && r.sink_rid == me) {
                    v.push(RelayProp::P10);
                }
            }
            Some(next_id) => match w.relay(next_id) {
                None => v.push(RelayProp::P11b),
                Some(next) => {
                    if r.level != next.level + 1 || r.sink_rid != next.sink_rid {
                        v.push(RelayProp::P11c);
                    }
                    let anchored = r.out.keys.iter().any(|k| {
                        next.in_set.iter().any(|e| {
                            e.key == *k
                                && match e.origin {
                                    Origin::ConfirmedFrom(x) => x == me,
                                    Origin::UnconfirmedVia(via) => {
                                        w.relay(via).is_some_and(|x| x.sink_rid == me)
                                            && r.buf.iter().any(|env| {
                                                matches!(&env.msg, Message::Transmit(t)
                                                    if is_activation_probe(t, *k, r.id, next_id))
                                            })
                                    }
                                }
                        })
                    });
                    if !anchored {
                        v.push(RelayProp::P11d);
                    }
                    let shared = r.out.keys.iter().any(|k| {
                        ix.out_key_owners
                            .get(k)
                            .is_some_and(|o| o.iter().any(|x| *x != r.id && x.rid == me))
                    });
                    if shared {
                        v.push(RelayProp::P11e);
                    }
                    let closed = ix.irc_by_target.get(&next_id).is_some_and(|ms| {
                        ms.iter().any(|m| {
                            m.to == next_id.rid && m.sender == me && m.keys.iter().any(|k| r.out.keys.contains(k))
                        })
                    });
                    if closed {
                        v.push(RelayProp::P11f);
                    }
                }
            },
        }
        v
    }

    /// Forwarding chain starting at `start` and ending at a sink. `None` if
    /// the chain dangles or loops.
    fn chain(&self, start: &'a Relay) -> Option<Vec<&'a Relay>> {
        let limit = self.w.relays().count() + 1;
        let mut out = vec![start];
        let mut cur = start;
        while let Some(next) = cur.out.id {
            if out.len() > limit {
                return None;
            }
            cur = self.w.relay(next)?;
            out.push(cur);
        }
        Some(out)
    }

    fn probe_outside(&self, key: Key, via: &Relay, allowed: &[&Relay]) -> bool {
        self.ix.probes_by_control.get(&key).is_some_and(|ps| {
            ps.iter().any(|p| {
                p.seq.first().is_some_and(|k1| via.out.keys.contains(k1))
                    && !allowed.iter().any(|a| a.id == p.carrier)
            })
        })
    }

    /// The in-transit disjunction for an unconfirmed entry `(key, ⊥, via)` of `r`.
    fn pending_ok(&self, r: &Relay, key: Key, via: &'a Relay) -> bool {
        let failed = self
            .ix
            .probefail_first
            .get(&key)
            .is_some_and(|f| f.iter().any(|k1| via.out.keys.contains(k1)));
        if failed {
            return false;
        }
        let Some(chain) = self.chain(via) else {
            return false;
        };
        let k = chain.len();
        let activated = self.ix.out_key_owners.get(&key).is_some_and(|owners| {
            owners.iter().any(|oid| {
                let Some(o) = self.w.relay(*oid) else {
                    return false;
                };
                o.id.rid == via.sink_rid
                    && o.out.id == Some(r.id)
                    && o.level == r.level + 1
                    && o
                        .buf
                        .iter()
                        .any(|e| matches!(&e.msg, Message::Transmit(t) if is_activation_probe(t, key, o.id, r.id)))
            })
        });
        if activated && !self.probe_outside(key, via, &chain[..k - 1]) {
            return true;
        }
        for j in 0..k.saturating_sub(1) {
            let carried = chain[j].buf.iter().any(|e| {
                matches!(&e.msg, Message::Transmit(t)
                    if t.carries_param_key(key) && valid_header(self.w, &t.header, chain[j + 1]))
            });
            if carried && !self.probe_outside(key, via, &chain[..=j]) {
                return true;
            }
        }
        false
    }

    pub fn relay_verdict(&self, id: RelayId) -> Option<RelayVerdict> {
        let r = self.w.relay(id)?;
        let mut violated = self.violations.get(&id).cloned().unwrap_or_default();
        if !r.is_alive() {
            violated.insert(0, RelayProp::P1);
        }
        Some(RelayVerdict {
            valid: violated.is_empty(),
            violated,
        })
    }

    pub fn is_valid(&self, id: RelayId) -> bool {
        self.good.contains(&id) && self.w.relay(id).is_some_and(|r| r.is_alive())
    }

    /// Valid, or dead but otherwise consistent (still draining).
    fn usable(&self, id: RelayId) -> bool {
        self.good.contains(&id)
    }

    pub fn param_verdict(&self, loc: ParamLoc) -> Option<ParamVerdict> {
        let carrier = self.w.relay(loc.carrier)?;
        let env = carrier.buf.get(loc.msg)?;
        let Message::Transmit(t) = &env.msg else {
            return None;
        };
        let Payload::App(a) = &t.payload else {
            return None;
        };
        let crate::message::Param::Relay(p) = a.params.get(loc.param)? else {
            return None;
        };
        Some(self.judge_param(carrier, loc.msg, t, *p))
    }

    fn judge_param(&self, carrier: &Relay, _msg: usize, m: &Transmit, p: RelayParameter) -> ParamVerdict {
        let w = self.w;
        let ix = &self.ix;
        let mut bad = Vec::new();
        if !self.is_valid(carrier.id) {
            bad.push(1);
        }
        if ix.param_count.get(&p.key).copied().unwrap_or(0) != 1 {
            bad.push(2);
        }
        let target = w.relay(p.id).filter(|_| self.is_valid(p.id));
        if target.is_none() {
            bad.push(3);
        }
        if let Some(t) = w.relay(p.id) {
            if p.level != t.level + 1 || p.sink_rid != t.sink_rid {
                bad.push(4);
            }
        }
        let via = w.relay(p.id).and_then(|t| {
            t.in_set
                .iter()
                .find(|e| e.key == p.key && e.via().is_some())
                .and_then(|e| w.relay(e.via().unwrap()))
        });
        let via_ok = via.is_some_and(|v| {
            v.id.rid == p.id.rid && self.usable(v.id) && v.sink_rid == carrier.sink_rid && belongs_to(p.key, p.id.rid)
        });
        if !via_ok {
            bad.push(5);
        }
        let owners: BTreeSet<Rid> = match &m.payload {
            Payload::App(a) => a.relay_params().map(|x| x.id.rid).collect(),
            Payload::Probe { .. } => BTreeSet::new(),
        };
        if owners.len() > 1 {
            bad.push(6);
        }
        if ix.out_key_owners.contains_key(&p.key) {
            bad.push(7);
        }
        if ix.header_keys.contains(&p.key) {
            bad.push(8);
        }
        if let Some(via) = via {
            let failed = ix
                .probefail_first
                .get(&p.key)
                .is_some_and(|f| f.iter().any(|k1| via.out.keys.contains(k1)));
            if failed {
                bad.push(9);
            }
            if !self.probes_consistent(p.key, via, carrier) {
                bad.push(10);
            }
        }
        let closed = ix
            .irc_by_target
            .get(&p.id)
            .is_some_and(|ms| ms.iter().any(|m| m.keys.contains(&p.key)));
        if closed {
            bad.push(11);
        }
        ParamVerdict {
            valid: bad.is_empty(),
            violated: bad,
        }
    }

    /// Every probe announcing `key` as missing must trail the carrier on the
    /// chain starting at `via`.
    fn probes_consistent(&self, key: Key, via: &'a Relay, carrier: &Relay) -> bool {
        let Some(ps) = self.ix.probes_by_control.get(&key) else {
            return true;
        };
        let relevant: Vec<&Probe> = ps
            .iter()
            .filter(|p| p.seq.first().is_some_and(|k1| via.out.keys.contains(k1)))
            .collect();
        if relevant.is_empty() {
            return true;
        }
        let Some(chain) = self.chain(via) else {
            return false;
        };
        let Some(pos_m) = chain.iter().position(|r| r.id == carrier.id) else {
            return false;
        };
        relevant.iter().all(|p| {
            let k = p.seq.len();
            k >= 1
                && k <= chain.len()
                && chain[k - 1].id == p.carrier
                && p.seq.iter().zip(&chain).all(|(key_j, r_j)| r_j.out.keys.contains(key_j))
                && pos_m > k - 1
                && pos_m + 1 < chain.len()
        })
    }

    /// Every relay parameter sitting in a relay buffer.
    pub fn params(&self) -> Vec<(ParamLoc, RelayParameter)> {
        let mut out = Vec::new();
        for r in self.w.relays() {
            for (mi, env) in r.buf.iter().enumerate() {
                if let Message::Transmit(Transmit {
                    payload: Payload::App(a),
                    ..
                }) = &env.msg
                {
                    for (pi, p) in a.params.iter().enumerate() {
                        if let crate::message::Param::Relay(rp) = p {
                            out.push((
                                ParamLoc {
                                    carrier: r.id,
                                    msg: mi,
                                    param: pi,
                                },
                                *rp,
                            ));
                        }
                    }
                }
            }
        }
        out
    }

    /// Legal iff the relay graph restricted to alive relays and active
    /// processes equals its valid subgraph.
    pub fn is_legal(&self) -> bool {
        for r in self.w.relays() {
            if r.is_alive() && !self.is_valid(r.id) {
                return false;
            }
        }
        for (loc, p) in self.params() {
            let carrier_alive = self.w.relay(loc.carrier).is_some_and(|r| r.is_alive());
            let target_alive = self.w.relay(p.id).is_some_and(|r| r.is_alive());
            if carrier_alive && target_alive {
                let v = self.param_verdict(loc).expect("listed parameter");
                if !v.valid {
                    return false;
                }
            }
        }
        true
    }

    /// Human-readable reasons the state is not legal.
    pub fn illegal_reasons(&self) -> Vec<String> {
        let mut out = Vec::new();
        for r in self.w.relays() {
            if r.is_alive() && !self.is_valid(r.id) {
                let v = self.relay_verdict(r.id).expect("exists");
                let names: Vec<String> = v.violated.iter().map(|p| p.to_string()).collect();
                out.push(format!("relay {} invalid: {}", r.id, names.join(",")));
            }
        }
        for (loc, p) in self.params() {
            let carrier_alive = self.w.relay(loc.carrier).is_some_and(|r| r.is_alive());
            let target_alive = self.w.relay(p.id).is_some_and(|r| r.is_alive());
            if carrier_alive && target_alive {
                let v = self.param_verdict(loc).expect("listed parameter");
                if !v.valid {
                    out.push(format!(
                        "parameter {} in {} invalid: {:?}",
                        p.key, loc.carrier, v.violated
                    ));
                }
            }
        }
        out
    }

    pub fn valid_sinks(&self) -> BTreeMap<RelayId, Rid> {
        self.w
            .relays()
            .filter(|r| self.is_valid(r.id))
            .map(|r| (r.id, r.sink_rid))
            .collect()
    }

    pub fn valid_relay_graph(&self) -> RelayGraph {
        let full = extract_relay_graph(self.w);
        let keep = |n: &Node| match n {
            Node::Proc(_) => true,
            Node::Relay(id) => self.is_valid(*id),
        };
        let mut g = RelayGraph {
            vertices: full.vertices.iter().filter(|n| keep(n)).copied().collect(),
            explicit_edges: full
                .explicit_edges
                .iter()
                .filter(|(a, b)| keep(a) && keep(b))
                .copied()
                .collect(),
            implicit_edges: BTreeSet::new(),
        };
        for (loc, p) in self.params() {
            let (a, b) = (Node::Relay(loc.carrier), Node::Relay(p.id));
            if keep(&a) && keep(&b) && self.param_verdict(loc).is_some_and(|v| v.valid) {
                g.implicit_edges.insert((a, b));
            }
        }
        g
    }
}

pub fn extract_relay_graph(w: &WorldState) -> RelayGraph {
    let mut g = RelayGraph::default();
    for p in w.active_processes() {
        g.vertices.insert(Node::Proc(p));
    }
    for r in w.relays() {
        let me = Node::Relay(r.id);
        g.vertices.insert(me);
        let owner = r.id.rid;
        if w.is_active(owner) {
            g.explicit_edges.insert((Node::Proc(owner), me));
        }
        match r.out.id {
            Some(next) => {
                if w.relay(next).is_some() {
                    g.explicit_edges.insert((me, Node::Relay(next)));
                }
            }
            None => {
                if w.is_active(owner) {
                    g.explicit_edges.insert((me, Node::Proc(owner)));
                }
            }
        }
        for env in &r.buf {
            if let Message::Transmit(t) = &env.msg {
                for p in t.payload.relay_params() {
                    if w.relay(p.id).is_some() {
                        g.implicit_edges.insert((me, Node::Relay(p.id)));
                    }
                }
            }
        }
    }
    g
}

pub fn valid_relay(w: &WorldState, id: RelayId) -> Option<RelayVerdict> {
    Oracle::new(w).relay_verdict(id)
}

pub fn valid_relay_parameter(w: &WorldState, loc: ParamLoc) -> Option<ParamVerdict> {
    Oracle::new(w).param_verdict(loc)
}

pub fn is_legal(w: &WorldState) -> bool {
    Oracle::new(w).is_legal()
}

pub fn valid_sinks(w: &WorldState) -> BTreeMap<RelayId, Rid> {
    Oracle::new(w).valid_sinks()
}

/// Process sets of the weakly connected components of `g`.
pub fn weakly_connected_components(g: &RelayGraph) -> Vec<BTreeSet<Rid>> {
    let nodes: Vec<Node> = g.vertices.iter().copied().collect();
    let pos: BTreeMap<Node, usize> = nodes.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    let mut parent: Vec<usize> = (0..nodes.len()).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for (a, b) in g.edges() {
        if let (Some(&i), Some(&j)) = (pos.get(a), pos.get(b)) {
            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
            if ri != rj {
                parent[ri.max(rj)] = ri.min(rj);
            }
        }
    }
    let mut comps: BTreeMap<usize, BTreeSet<Rid>> = BTreeMap::new();
    for (i, n) in nodes.iter().enumerate() {
        if let Node::Proc(p) = n {
            let root = find(&mut parent, i);
            comps.entry(root).or_default().insert(*p);
        }
    }
    comps.into_values().collect()
}

pub fn process_components(w: &WorldState) -> Vec<BTreeSet<Rid>> {
    weakly_connected_components(&extract_relay_graph(w))
}

/// Clause (iii) of departure legitimacy: stayers of every initial component
/// still share one component.
pub fn stayers_connected(w: &WorldState, initial: &[BTreeSet<Rid>]) -> bool {
    let comps = process_components(w);
    initial.iter().all(|c| {
        let stay: BTreeSet<Rid> = c
            .iter()
            .copied()
            .filter(|p| w.processes.get(p).is_some_and(|i| !i.leaving))
            .collect();
        stay.len() <= 1 || comps.iter().any(|k| stay.is_subset(k))
    })
}

pub fn fdp_legitimate(w: &WorldState, initial: &[BTreeSet<Rid>]) -> bool {
    let clauses_i_ii = w.processes.values().all(|p| p.active != p.leaving);
    clauses_i_ii && stayers_connected(w, initial)
}

/// True iff the relay-to-relay connections of the valid relay graph contain
/// a directed cycle.
pub fn valid_graph_has_cycle(w: &WorldState) -> bool {
    let o = Oracle::new(w);
    let g = o.valid_relay_graph();
    has_relay_cycle(&g)
}

pub fn has_relay_cycle(g: &RelayGraph) -> bool {
    let mut succ: BTreeMap<RelayId, RelayId> = BTreeMap::new();
    for (a, b) in &g.explicit_edges {
        if let (Node::Relay(x), Node::Relay(y)) = (a, b) {
            succ.insert(*x, *y);
        }
    }
    // Out-degree is at most one, so walking from each node suffices.
    let mut done: BTreeSet<RelayId> = BTreeSet::new();
    for start in succ.keys() {
        let mut path = BTreeSet::new();
        let mut cur = *start;
        while let Some(n) = succ.get(&cur) {
            if done.contains(&cur) {
                break;
            }
            if !path.insert(cur) {
                return true;
            }
            cur = *n;
        }
        done.extend(path);
    }
    false
}

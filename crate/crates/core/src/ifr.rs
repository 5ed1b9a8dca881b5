//! Relay Introduction, Fusion and Reversal as application macros, the
//! process-graph projection of simple relay graphs, emulation of the four
//! process rules, and a three-phase transformation planner.
//!
//! Plans are produced online: relays created by a step only get ids once the
//! step has been delivered, so the planner drives an [`Executor`] and records
//! every rule application with concrete ids.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::build::WorldBuilder;
use crate::ids::{RelayId, RelayRef, Rid};
use crate::message::{Action, Message, Param};
use crate::oracle::{is_legal, process_components};
use crate::sim::{SchedulerPolicy, Simulation};
use crate::world::WorldState;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IfrError {
    #[error("relay graph is not simple: {relay} {reason}")]
    NotSimple { relay: RelayId, reason: &'static str },
    #[error("relay graph is not weakly connected")]
    Disconnected,
    #[error("source and target process sets differ")]
    ProcessMismatch,
    #[error("at least three processes are needed to reshape the process graph")]
    TooFewProcesses,
    #[error("rule precondition violated: {0}")]
    Precondition(String),
    #[error("target relay {0} is not supported: {1}")]
    UnsupportedTarget(String, &'static str),
    #[error("state did not settle within {0} steps")]
    Unsettled(u64),
    #[error("weak connectivity lost after step {0}")]
    ConnectivityLost(usize),
}

/// Directed multigraph over processes.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessMultigraph {
    pub vertices: BTreeSet<Rid>,
    pub edges: BTreeMap<(Rid, Rid), usize>,
}

impl ProcessMultigraph {
    pub fn new(vertices: impl IntoIterator<Item = Rid>) -> Self {
        ProcessMultigraph {
            vertices: vertices.into_iter().collect(),
            edges: BTreeMap::new(),
        }
    }

    pub fn count(&self, u: Rid, v: Rid) -> usize {
        self.edges.get(&(u, v)).copied().unwrap_or(0)
    }

    pub fn add(&mut self, u: Rid, v: Rid) {
        *self.edges.entry((u, v)).or_default() += 1;
    }

    pub fn remove(&mut self, u: Rid, v: Rid) -> bool {
        match self.edges.get_mut(&(u, v)) {
            Some(n) if *n > 1 => {
                *n -= 1;
                true
            }
            Some(_) => {
                self.edges.remove(&(u, v));
                true
            }
            None => false,
        }
    }

    pub fn edge_count(&self) -> usize {
        self.edges.values().sum()
    }

    pub fn is_weakly_connected(&self) -> bool {
        let Some(&start) = self.vertices.iter().next() else {
            return true;
        };
        let mut seen = BTreeSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some(x) = queue.pop_front() {
            for (a, b) in self.edges.keys() {
                let other = if *a == x {
                    *b
                } else if *b == x {
                    *a
                } else {
                    continue;
                };
                if seen.insert(other) {
                    queue.push_back(other);
                }
            }
        }
        seen == self.vertices
    }

    /// Signed per-edge difference `other - self`.
    pub fn delta(&self, other: &ProcessMultigraph) -> BTreeMap<(Rid, Rid), i64> {
        let keys: BTreeSet<(Rid, Rid)> = self.edges.keys().chain(other.edges.keys()).copied().collect();
        keys.into_iter()
            .filter_map(|k| {
                let d = other.count(k.0, k.1) as i64 - self.count(k.0, k.1) as i64;
                (d != 0).then_some((k, d))
            })
            .collect()
    }
}

/// Alive relays pointing at each relay.
fn incoming_connections(w: &WorldState) -> BTreeMap<RelayId, usize> {
    let mut m = BTreeMap::new();
    for r in w.relays().filter(|r| r.is_alive()) {
        if let Some(t) = r.out.id {
            *m.entry(t).or_default() += 1;
        }
    }
    m
}

/// Corresponding process graph of a simple relay graph.
pub fn cpg(w: &WorldState) -> Result<ProcessMultigraph, IfrError> {
    let incoming = incoming_connections(w);
    let mut g = ProcessMultigraph::new(w.active_processes());
    for r in w.relays() {
        if !r.is_alive() {
            return Err(IfrError::NotSimple {
                relay: r.id,
                reason: "is dead",
            });
        }
        if r.level > 1 {
            return Err(IfrError::NotSimple {
                relay: r.id,
                reason: "is indirect",
            });
        }
        for env in &r.buf {
            if let Message::Transmit(t) = &env.msg {
                if !t.payload.relay_params().is_empty() {
                    return Err(IfrError::NotSimple {
                        relay: r.id,
                        reason: "carries a relay parameter",
                    });
                }
            }
        }
        match r.out.id {
            None => {
                if incoming.get(&r.id).copied().unwrap_or(0) != 1 {
                    return Err(IfrError::NotSimple {
                        relay: r.id,
                        reason: "is a sink without exactly one incoming connection",
                    });
                }
            }
            Some(t) => g.add(r.id.rid, t.rid),
        }
    }
    Ok(g)
}

/// The four process-level rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ProcessRule {
    /// `u` introduces `w` to `v`: adds `(v, w)`.
    Introduction { u: Rid, v: Rid, w: Rid },
    /// `u` hands its reference of `w` to `v`: `(u, w)` becomes `(v, w)`.
    Delegation { u: Rid, v: Rid, w: Rid },
    /// `u` drops one of two references of `v`.
    Fusion { u: Rid, v: Rid },
    /// `(u, v)` becomes `(v, u)`.
    Reversal { u: Rid, v: Rid },
}

impl ProcessRule {
    pub fn check(&self, g: &ProcessMultigraph) -> Result<(), IfrError> {
        let fail = |s: &str| Err(IfrError::Precondition(format!("{self:?}: {s}")));
        match *self {
            ProcessRule::Introduction { u, v, w } | ProcessRule::Delegation { u, v, w } => {
                if u == v || v == w || u == w {
                    return fail("processes must be distinct");
                }
                if g.count(u, v) == 0 || g.count(u, w) == 0 {
                    return fail("missing reference");
                }
            }
            ProcessRule::Fusion { u, v } => {
                if g.count(u, v) < 2 {
                    return fail("needs two references");
                }
            }
            ProcessRule::Reversal { u, v } => {
                if u == v || g.count(u, v) == 0 {
                    return fail("missing reference");
                }
            }
        }
        Ok(())
    }

    pub fn apply(&self, g: &mut ProcessMultigraph) -> Result<(), IfrError> {
        self.check(g)?;
        match *self {
            ProcessRule::Introduction { v, w, .. } => g.add(v, w),
            ProcessRule::Delegation { u, v, w } => {
                g.remove(u, w);
                g.add(v, w);
            }
            ProcessRule::Fusion { u, v } => {
                g.remove(u, v);
            }
            ProcessRule::Reversal { u, v } => {
                g.remove(u, v);
                g.add(v, u);
            }
        }
        Ok(())
    }
}

/// One relay rule application with concrete relay ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum IfrStep {
    Introduction { u: Rid, r: RelayId, s: RelayId },
    Fusion { u: Rid, r: RelayId, r2: RelayId, merged: RelayId },
    Reversal { u: Rid, r: RelayId, s: RelayId },
}

/// Subject of a Relay Reversal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subject {
    Existing(RelayId),
    /// A relay created by `new Relay` in the same action.
    Fresh,
}

/// A housekeeping close: an unreferenced sink, or a relay the receiver does
/// not keep. Neither changes the process graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Close {
    pub u: Rid,
    pub r: RelayId,
}

fn sink_of(w: &WorldState, r: RelayId) -> Option<Rid> {
    w.relay(r).map(|x| x.sink_rid)
}

fn settled(w: &WorldState) -> bool {
    let quiet_relays = w.relays().all(|r| {
        r.is_alive()
            && r.in_set.iter().all(|e| e.via().is_none())
            && r.buf.iter().all(|e| match &e.msg {
                Message::Transmit(t) => t.is_probe(),
                _ => false,
            })
    });
    let quiet_layers = w.layers.values().all(|l| {
        l.layer_buf.iter().all(|(_, e)| matches!(e.msg, Message::Ping { .. }))
    });
    quiet_relays && quiet_layers && is_legal(w)
}

/// Drives rule applications against a simulation, settling in between and
/// checking weak connectivity after every kernel step.
pub struct Executor {
    pub sim: Simulation,
    pub steps: Vec<IfrStep>,
    pub closes: Vec<Close>,
    pub settle_budget: u64,
    pub check_connectivity: bool,
    /// Process-graph components required at all times (1 for connected inputs).
    required_components: usize,
    connectivity_lost: Option<usize>,
}

impl Executor {
    pub fn new(world: WorldState, seed: u64) -> Self {
        let required_components = process_components(&world).len();
        Executor {
            sim: Simulation::new(world, seed, SchedulerPolicy::default()),
            steps: Vec::new(),
            closes: Vec::new(),
            settle_budget: 20_000,
            check_connectivity: true,
            required_components,
            connectivity_lost: None,
        }
    }

    pub fn world(&self) -> &WorldState {
        &self.sim.world
    }

    fn observe(&mut self) {
        if self.check_connectivity
            && self.connectivity_lost.is_none()
            && process_components(&self.sim.world).len() > self.required_components
        {
            self.connectivity_lost = Some(self.steps.len());
        }
    }

    pub fn connectivity_ok(&self) -> Result<(), IfrError> {
        match self.connectivity_lost {
            Some(i) => Err(IfrError::ConnectivityLost(i)),
            None => Ok(()),
        }
    }

    fn owned_alive(&self, u: Rid, r: RelayId) -> Result<(), IfrError> {
        match self.sim.world.relay(r) {
            Some(x) if r.rid == u && x.is_alive() => Ok(()),
            _ => Err(IfrError::Precondition(format!("{u} does not own alive relay {r}"))),
        }
    }

    /// `u` sends `s` via `r`.
    pub fn introduction(&mut self, u: Rid, r: RelayId, s: RelayId) -> Result<(), IfrError> {
        self.owned_alive(u, r)?;
        self.owned_alive(u, s)?;
        self.sim.act(u, |c| {
            c.send(RelayRef::from_id(r), Action::new("intro", vec![Param::Ref(RelayRef::from_id(s))]));
        });
        self.steps.push(IfrStep::Introduction { u, r, s });
        self.observe();
        Ok(())
    }

    /// `u` merges two relays with the same target.
    pub fn fusion(&mut self, u: Rid, r: RelayId, r2: RelayId) -> Result<RelayId, IfrError> {
        self.owned_alive(u, r)?;
        self.owned_alive(u, r2)?;
        let merged = self
            .sim
            .act(u, |c| c.merge(&[RelayRef::from_id(r), RelayRef::from_id(r2)]))
            .flatten()
            .ok_or_else(|| IfrError::Precondition(format!("merge of {r} and {r2} refused")))?;
        let merged = merged.peek_id();
        self.steps.push(IfrStep::Fusion { u, r, r2, merged });
        self.observe();
        Ok(merged)
    }

    /// `u` sends `s` via `r` and deletes `r`, in one action.
    pub fn reversal(&mut self, u: Rid, r: RelayId, s: Subject) -> Result<RelayId, IfrError> {
        self.owned_alive(u, r)?;
        if let Subject::Existing(s) = s {
            self.owned_alive(u, s)?;
            if s == r {
                return Err(IfrError::Precondition("reversal needs r != s".into()));
            }
        }
        let incoming = self.sim.world.relay(r).map_or(0, |x| x.in_set.len());
        if incoming > 0 {
            return Err(IfrError::Precondition(format!("incoming({r}) = {incoming}")));
        }
        let s = self
            .sim
            .act(u, |c| {
                let s = match s {
                    Subject::Existing(s) => RelayRef::from_id(s),
                    Subject::Fresh => c.new_relay()?,
                };
                let r = RelayRef::from_id(r);
                c.send(r, Action::new("intro", vec![Param::Ref(s)]));
                c.delete(r);
                Some(s.peek_id())
            })
            .flatten()
            .ok_or_else(|| IfrError::Precondition(format!("{u} cannot act")))?;
        self.steps.push(IfrStep::Reversal { u, r, s });
        self.observe();
        Ok(s)
    }

    pub fn close(&mut self, u: Rid, r: RelayId) -> Result<(), IfrError> {
        self.owned_alive(u, r)?;
        if self.sim.world.relay(r).is_some_and(|x| !x.in_set.is_empty()) {
            return Err(IfrError::Precondition(format!("{r} still has incoming entries")));
        }
        self.sim.act(u, |c| c.delete(RelayRef::from_id(r)));
        self.closes.push(Close { u, r });
        self.observe();
        Ok(())
    }

    /// Runs the kernel until no application traffic is in flight, then
    /// closes unreferenced sinks; repeats until nothing changes.
    pub fn settle(&mut self) -> Result<(), IfrError> {
        loop {
            let mut n = 0;
            while !settled(&self.sim.world) {
                if n >= self.settle_budget || !self.sim.step() {
                    return Err(IfrError::Unsettled(self.settle_budget));
                }
                n += 1;
                self.observe();
            }
            let incoming = incoming_connections(&self.sim.world);
            let orphans: Vec<RelayId> = self
                .sim
                .world
                .relays()
                .filter(|r| r.out.id.is_none() && r.in_set.is_empty() && !incoming.contains_key(&r.id))
                .map(|r| r.id)
                .collect();
            if orphans.is_empty() {
                return Ok(());
            }
            for r in orphans {
                self.close(r.rid, r)?;
            }
        }
    }

    /// Minimum-id alive direct relay of `u` whose sink process is `v`.
    pub fn relay_to(&self, u: Rid, v: Rid) -> Option<RelayId> {
        self.relays_to(u, v).into_iter().next()
    }

    pub fn relays_to(&self, u: Rid, v: Rid) -> Vec<RelayId> {
        self.sim
            .world
            .layers
            .get(&u)
            .map(|l| {
                l.relays
                    .values()
                    .filter(|r| r.is_alive() && r.out.id.is_some() && r.level == 1 && r.sink_rid == v)
                    .map(|r| r.id)
                    .collect()
            })
            .unwrap_or_default()
    }

    /// The alive relay at `at` pointing to `target` that is not yet in `taken`.
    fn received(&self, at: Rid, target: RelayId, taken: &BTreeSet<RelayId>) -> Result<RelayId, IfrError> {
        self.sim
            .world
            .layers
            .get(&at)
            .and_then(|l| {
                l.relays
                    .values()
                    .find(|r| r.is_alive() && r.out.id == Some(target) && !taken.contains(&r.id))
                    .map(|r| r.id)
            })
            .ok_or_else(|| IfrError::Precondition(format!("{at} holds no relay to {target}")))
    }

    fn need(&self, u: Rid, v: Rid) -> Result<RelayId, IfrError> {
        self.relay_to(u, v)
            .ok_or_else(|| IfrError::Precondition(format!("{u} has no relay to {v}")))
    }

    /// Executes the relay-rule recipe for one process rule on a settled,
    /// simple relay graph and settles again.
    pub fn emulate(&mut self, rule: ProcessRule) -> Result<(), IfrError> {
        rule.check(&cpg(self.world())?)?;
        match rule {
            ProcessRule::Introduction { u, v, w } => {
                // u sends its relay to v to w; w answers with a fresh relay
                // through the received one and closes it.
                let rv = self.need(u, v)?;
                let rw = self.need(u, w)?;
                self.introduction(u, rw, rv)?;
                self.settle()?;
                let x = self.received(w, rv, &BTreeSet::new())?;
                self.reversal(w, x, Subject::Fresh)?;
            }
            ProcessRule::Delegation { u, v, w } => {
                let rv = self.need(u, v)?;
                let rw = self.need(u, w)?;
                self.reversal(u, rw, Subject::Existing(rv))?;
                self.settle()?;
                let x = self.received(w, rv, &BTreeSet::new())?;
                self.reversal(w, x, Subject::Fresh)?;
            }
            ProcessRule::Fusion { u, v } => {
                let rs = self.relays_to(u, v);
                let (r, r2) = (rs[0], rs[1]);
                self.reversal(u, r2, Subject::Existing(r))?;
                self.settle()?;
                let x = self.received(v, r, &BTreeSet::new())?;
                self.close(v, x)?;
            }
            ProcessRule::Reversal { u, v } => {
                let rv = self.need(u, v)?;
                self.reversal(u, rv, Subject::Fresh)?;
            }
        }
        self.settle()
    }

}

/// Process-level moves that turn `g` into `target`, both weakly connected
/// over the same processes.
pub fn process_plan(g: &ProcessMultigraph, target: &ProcessMultigraph) -> Result<Vec<ProcessRule>, IfrError> {
    if g.vertices != target.vertices {
        return Err(IfrError::ProcessMismatch);
    }
    if !g.is_weakly_connected() || !target.is_weakly_connected() {
        return Err(IfrError::Disconnected);
    }
    if g.edges.keys().chain(target.edges.keys()).any(|(a, b)| a == b) {
        return Err(IfrError::Precondition("self-loops are not supported".into()));
    }
    if g == target {
        return Ok(Vec::new());
    }
    if g.vertices.len() < 3 {
        return Err(IfrError::TooFewProcesses);
    }
    let c = *g.vertices.iter().next().expect("non-empty");
    let mut cur = g.clone();
    let mut plan = Vec::new();
    let mut push = |cur: &mut ProcessMultigraph, r: ProcessRule| -> Result<(), IfrError> {
        r.apply(cur)?;
        plan.push(r);
        Ok(())
    };

    // Gather into a star whose center c has one edge to every other process.
    loop {
        if let Some(&(p, _)) = cur.edges.keys().find(|(a, b)| *b == c && *a != c) {
            push(&mut cur, ProcessRule::Reversal { u: p, v: c })?;
            continue;
        }
        if let Some(&(_, p)) = cur.edges.iter().find(|((a, _), n)| *a == c && **n > 1).map(|(k, _)| k) {
            push(&mut cur, ProcessRule::Fusion { u: c, v: p })?;
            continue;
        }
        let Some(&(x, y)) = cur
            .edges
            .keys()
            .find(|(a, b)| *a != c && *b != c && (cur.count(c, *a) > 0 || cur.count(c, *b) > 0))
        else {
            break;
        };
        let (x, y) = if cur.count(c, x) > 0 {
            (x, y)
        } else {
            push(&mut cur, ProcessRule::Reversal { u: x, v: y })?;
            (y, x)
        };
        // Now c -> x and x -> y: move x's edge onto the center.
        push(&mut cur, ProcessRule::Reversal { u: c, v: x })?;
        push(&mut cur, ProcessRule::Delegation { u: x, v: c, w: y })?;
        push(&mut cur, ProcessRule::Reversal { u: x, v: c })?;
    }

    // Grow every target edge as an extra copy while the star stays intact.
    let others: Vec<Rid> = cur.vertices.iter().copied().filter(|p| *p != c).collect();
    let extra_center_edge = |cur: &mut ProcessMultigraph,
                             push: &mut dyn FnMut(&mut ProcessMultigraph, ProcessRule) -> Result<(), IfrError>,
                             b: Rid|
     -> Result<(), IfrError> {
        let x = *others.iter().find(|x| **x != b).expect("three processes");
        push(cur, ProcessRule::Introduction { u: c, v: x, w: b })?;
        push(cur, ProcessRule::Reversal { u: c, v: x })?;
        push(cur, ProcessRule::Delegation { u: x, v: c, w: b })?;
        push(cur, ProcessRule::Reversal { u: x, v: c })
    };
    for (&(a, b), &n) in &target.edges {
        for _ in 0..n {
            if a == c {
                extra_center_edge(&mut cur, &mut push, b)?;
            } else if b == c {
                extra_center_edge(&mut cur, &mut push, a)?;
                push(&mut cur, ProcessRule::Reversal { u: c, v: a })?;
            } else {
                push(&mut cur, ProcessRule::Introduction { u: c, v: a, w: b })?;
            }
        }
    }

    // Drop the star edges, deepest target-tree vertices first.
    let mut parent: BTreeMap<Rid, (Rid, bool)> = BTreeMap::new();
    let mut order = Vec::new();
    let mut queue = VecDeque::from([c]);
    let mut seen = BTreeSet::from([c]);
    while let Some(x) = queue.pop_front() {
        for (&(a, b), _) in &target.edges {
            let (other, forward) = if a == x {
                (b, false)
            } else if b == x {
                (a, true)
            } else {
                continue;
            };
            if seen.insert(other) {
                // forward: the target edge is (other -> x)
                parent.insert(other, (x, forward));
                order.push(other);
                queue.push_back(other);
            }
        }
    }
    for &p in order.iter().rev() {
        let (q, p_to_q) = parent[&p];
        if q == c {
            if p_to_q {
                push(&mut cur, ProcessRule::Reversal { u: c, v: p })?;
                push(&mut cur, ProcessRule::Fusion { u: p, v: c })?;
            } else {
                push(&mut cur, ProcessRule::Fusion { u: c, v: p })?;
            }
        } else {
            push(&mut cur, ProcessRule::Delegation { u: c, v: q, w: p })?;
            if p_to_q {
                push(&mut cur, ProcessRule::Reversal { u: q, v: p })?;
                push(&mut cur, ProcessRule::Fusion { u: p, v: q })?;
            } else {
                push(&mut cur, ProcessRule::Fusion { u: q, v: p })?;
            }
        }
    }
    debug_assert_eq!(&cur, target);
    Ok(plan)
}

/// Target relay graph: relays named by string, each owned by a process and
/// optionally pointing at another relay.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetGraph {
    pub processes: BTreeSet<Rid>,
    pub relays: BTreeMap<String, TargetRelay>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetRelay {
    pub owner: Rid,
    pub out: Option<String>,
}

impl TargetGraph {
    pub fn from_world(w: &WorldState) -> Self {
        TargetGraph {
            processes: w.active_processes().collect(),
            relays: w
                .relays()
                .filter(|r| r.is_alive())
                .map(|r| {
                    (
                        r.id.to_string(),
                        TargetRelay {
                            owner: r.id.rid,
                            out: r.out.id.map(|o| o.to_string()),
                        },
                    )
                })
                .collect(),
        }
    }

    fn children(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut m: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (name, r) in &self.relays {
            if let Some(o) = &r.out {
                m.entry(o.as_str()).or_default().push(name.as_str());
            }
        }
        m
    }

    fn validate(&self) -> Result<(), IfrError> {
        for (name, r) in &self.relays {
            if !self.processes.contains(&r.owner) {
                return Err(IfrError::UnsupportedTarget(name.clone(), "has an unknown owner"));
            }
            if let Some(o) = &r.out {
                let Some(t) = self.relays.get(o) else {
                    return Err(IfrError::UnsupportedTarget(name.clone(), "points to a missing relay"));
                };
                if t.owner == r.owner {
                    return Err(IfrError::UnsupportedTarget(name.clone(), "points into its own process"));
                }
            }
            // Every chain must end in a sink.
            let mut cur = name.as_str();
            for _ in 0..=self.relays.len() {
                match &self.relays[cur].out {
                    Some(o) => cur = o,
                    None => break,
                }
            }
            if self.relays[cur].out.is_some() {
                return Err(IfrError::UnsupportedTarget(name.clone(), "lies on a cycle"));
            }
        }
        Ok(())
    }

    /// `(owner(s), owner(r))` for every connection `r -> s`.
    pub fn reversed_process_graph(&self) -> ProcessMultigraph {
        let mut g = ProcessMultigraph::new(self.processes.iter().copied());
        for r in self.relays.values() {
            if let Some(o) = &r.out {
                g.add(self.relays[o].owner, r.owner);
            }
        }
        g
    }

    /// Every connection goes to a sink and every sink has at most one.
    pub fn is_simple(&self) -> bool {
        let ch = self.children();
        self.relays.iter().all(|(n, r)| match &r.out {
            Some(o) => self.relays[o].out.is_none(),
            None => ch.get(n.as_str()).map_or(0, Vec::len) <= 1,
        })
    }

    /// Process graph when the target is simple (all connections go to sinks).
    pub fn process_graph(&self) -> ProcessMultigraph {
        let mut g = ProcessMultigraph::new(self.processes.iter().copied());
        for r in self.relays.values() {
            if let Some(o) = &r.out {
                g.add(r.owner, self.relays[o].owner);
            }
        }
        g
    }

    /// Canonical form of every tree with at least one connection.
    pub fn canonical_trees(&self) -> Vec<String> {
        let ch = self.children();
        fn canon(t: &TargetGraph, ch: &BTreeMap<&str, Vec<&str>>, n: &str) -> String {
            let mut kids: Vec<String> = ch.get(n).map_or(Vec::new(), |v| v.iter().map(|c| canon(t, ch, c)).collect());
            kids.sort();
            format!("{}({})", t.relays[n].owner, kids.join(","))
        }
        let mut out: Vec<String> = self
            .relays
            .iter()
            .filter(|(n, r)| r.out.is_none() && ch.contains_key(n.as_str()))
            .map(|(n, _)| canon(self, &ch, n))
            .collect();
        out.sort();
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformPlan {
    /// Process rules of the middle phase.
    pub process_rules: Vec<ProcessRule>,
    /// Every relay rule application in execution order.
    pub steps: Vec<IfrStep>,
    pub closes: Vec<Close>,
    /// Number of relay steps per phase.
    pub phase_steps: [usize; 3],
    /// Per target sink: the relays of each tree level, root first.
    pub trees: Vec<Vec<Vec<String>>>,
}

#[derive(Debug)]
pub struct Transformed {
    pub plan: TransformPlan,
    pub world: WorldState,
}

/// Turns `world` into a graph simple enough to have a process graph.
pub fn simplify(ex: &mut Executor) -> Result<(), IfrError> {
    ex.settle()?;
    loop {
        let w = ex.world();
        let incoming = incoming_connections(w);
        let indirect = w
            .relays()
            .find(|r| r.is_alive() && r.level > 1 && r.in_set.is_empty())
            .map(|r| r.id);
        if let Some(r) = indirect {
            ex.reversal(r.rid, r, Subject::Fresh)?;
            ex.settle()?;
            continue;
        }
        let self_loop = w
            .relays()
            .find(|r| r.is_alive() && r.in_set.is_empty() && r.out.id.is_some_and(|o| o.rid == r.id.rid))
            .map(|r| r.id);
        if let Some(r) = self_loop {
            ex.close(r.rid, r)?;
            ex.settle()?;
            continue;
        }
        let shared = w.relays().find(|s| s.out.id.is_none() && incoming.get(&s.id).copied().unwrap_or(0) > 1);
        if let Some(s) = shared {
            let sid = s.id;
            let feeders: Vec<RelayId> = w
                .relays()
                .filter(|r| r.is_alive() && r.out.id == Some(sid))
                .map(|r| r.id)
                .collect();
            let same_owner = feeders
                .iter()
                .flat_map(|a| feeders.iter().map(move |b| (*a, *b)))
                .find(|(a, b)| a < b && a.rid == b.rid);
            if let Some((a, b)) = same_owner {
                ex.fusion(a.rid, a, b)?;
            } else {
                let r = feeders[1];
                ex.reversal(r.rid, r, Subject::Fresh)?;
            }
            ex.settle()?;
            continue;
        }
        return Ok(());
    }
}

/// Runs all three phases against `world` and returns the executed plan with
/// the final state.
pub fn plan_transform(world: WorldState, target: &TargetGraph, seed: u64) -> Result<Transformed, IfrError> {
    let procs: BTreeSet<Rid> = world.active_processes().collect();
    if procs != target.processes {
        return Err(IfrError::ProcessMismatch);
    }
    target.validate()?;
    if process_components(&world).len() != 1 {
        return Err(IfrError::Disconnected);
    }
    let e2 = target.reversed_process_graph();
    if !e2.is_weakly_connected() {
        return Err(IfrError::Disconnected);
    }
    let mut ex = Executor::new(world, seed);
    let mut plan = TransformPlan::default();

    simplify(&mut ex)?;
    plan.phase_steps[0] = ex.steps.len();

    let g1 = cpg(ex.world())?;
    plan.process_rules = process_plan(&g1, &e2)?;
    for rule in plan.process_rules.clone() {
        ex.emulate(rule)?;
    }
    debug_assert_eq!(cpg(ex.world()).as_ref(), Ok(&e2));
    plan.phase_steps[1] = ex.steps.len() - plan.phase_steps[0];

    // Rebuild every target tree top-down out of the reversed edges.
    let pool: BTreeSet<RelayId> = ex.world().relays().filter(|r| r.out.id.is_some()).map(|r| r.id).collect();
    let mut pool = pool;
    let children = target.children();
    for (root, r) in &target.relays {
        if r.out.is_some() || !children.contains_key(root.as_str()) {
            continue;
        }
        let mut levels: Vec<Vec<String>> = vec![vec![root.clone()]];
        let mut equiv: BTreeMap<&str, RelayId> = BTreeMap::new();
        let mut frontier = vec![root.as_str()];
        while !frontier.is_empty() {
            let mut taken: BTreeSet<RelayId> = BTreeSet::new();
            let mut sent = Vec::new();
            for &t in &frontier {
                let owner = target.relays[t].owner;
                for &c in children.get(t).map_or(&[][..], |v| v.as_slice()) {
                    let to = target.relays[c].owner;
                    let via = *pool
                        .iter()
                        .find(|x| x.rid == owner && sink_of(ex.world(), **x) == Some(to))
                        .ok_or_else(|| IfrError::Precondition(format!("{owner} has no spare relay to {to}")))?;
                    pool.remove(&via);
                    let subject = equiv.get(t).map_or(Subject::Fresh, |e| Subject::Existing(*e));
                    let s = ex.reversal(owner, via, subject)?;
                    equiv.insert(t, s);
                    sent.push((c, to, s));
                }
            }
            ex.settle()?;
            let mut next = Vec::new();
            for (c, to, s) in sent {
                let x = ex.received(to, s, &taken)?;
                taken.insert(x);
                equiv.insert(c, x);
                next.push(c);
            }
            if !next.is_empty() {
                levels.push(next.iter().map(|s| s.to_string()).collect());
            }
            frontier = next;
        }
        plan.trees.push(levels);
    }
    plan.phase_steps[2] = ex.steps.len() - plan.phase_steps[0] - plan.phase_steps[1];
    ex.connectivity_ok()?;
    plan.steps = ex.steps.clone();
    plan.closes = ex.closes.clone();
    Ok(Transformed {
        plan,
        world: ex.sim.world,
    })
}

/// Random weakly connected simple relay graph over `n` processes with
/// `edges` relay pairs.
pub fn random_simple_world(rng: &mut impl Rng, n: u32, edges: usize) -> WorldState {
    let rids: Vec<u32> = (0..n).collect();
    let mut b = WorldBuilder::new(&rids);
    for (a, c) in random_connected_pairs(rng, n, edges) {
        b.edge(Rid(a), Rid(c));
    }
    b.build()
}

/// A random spanning tree with random orientation plus extra random pairs;
/// no self-loops.
pub fn random_connected_pairs(rng: &mut impl Rng, n: u32, edges: usize) -> Vec<(u32, u32)> {
    let mut order: Vec<u32> = (0..n).collect();
    order.shuffle(rng);
    let mut out = Vec::new();
    for i in 1..order.len() {
        let a = order[i];
        let b = order[rng.gen_range(0..i)];
        out.push(if rng.gen_bool(0.5) { (a, b) } else { (b, a) });
    }
    while out.len() < edges.max(n.saturating_sub(1) as usize) {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a != b {
            out.push((a, b));
        }
    }
    out
}

/// Random weakly connected relay graph with some indirect relays.
pub fn random_connected_world(rng: &mut impl Rng, n: u32, pairs: usize, indirect: usize) -> WorldState {
    let rids: Vec<u32> = (0..n).collect();
    let mut b = WorldBuilder::new(&rids);
    let mut direct = Vec::new();
    for (a, c) in random_connected_pairs(rng, n, pairs) {
        direct.push(b.edge(Rid(a), Rid(c)).0);
    }
    let mut all = direct.clone();
    for _ in 0..indirect {
        let target = *all.choose(rng).expect("at least one relay");
        let u = Rid(rng.gen_range(0..n));
        all.push(b.chain(u, target));
    }
    b.build()
}

/// Applies one random applicable relay rule and settles. Returns the step.
pub fn apply_random_rule(ex: &mut Executor, rng: &mut impl Rng) -> Result<Option<IfrStep>, IfrError> {
    let w = ex.world();
    let mut candidates: Vec<IfrStep> = Vec::new();
    for l in w.layers.values() {
        let u = l.rid;
        let alive: Vec<&crate::relay::Relay> = l.relays.values().filter(|r| r.is_alive()).collect();
        for r in &alive {
            for s in &alive {
                if r.out.id.is_some() {
                    candidates.push(IfrStep::Introduction { u, r: r.id, s: s.id });
                }
                if r.id != s.id && r.in_set.is_empty() && r.out.id.is_some() {
                    candidates.push(IfrStep::Reversal { u, r: r.id, s: s.id });
                }
                if r.id < s.id
                    && r.out.id.is_some()
                    && r.out.id == s.out.id
                    && r.in_set.is_empty()
                    && s.in_set.is_empty()
                    && r.level == s.level
                    && r.sink_rid == s.sink_rid
                {
                    candidates.push(IfrStep::Fusion {
                        u,
                        r: r.id,
                        r2: s.id,
                        merged: r.id,
                    });
                }
            }
        }
    }
    let Some(step) = candidates.choose(rng).copied() else {
        return Ok(None);
    };
    let before = ex.steps.len();
    match step {
        IfrStep::Introduction { u, r, s } => ex.introduction(u, r, s)?,
        IfrStep::Reversal { u, r, s } => {
            ex.reversal(u, r, Subject::Existing(s))?;
        }
        IfrStep::Fusion { u, r, r2, .. } => {
            ex.fusion(u, r, r2)?;
        }
    }
    ex.settle()?;
    Ok(ex.steps.get(before).copied())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pairs_world(n: u32, pairs: &[(u32, u32)]) -> WorldState {
        let rids: Vec<u32> = (0..n).collect();
        let mut b = WorldBuilder::new(&rids);
        for (a, c) in pairs {
            b.edge(Rid(*a), Rid(*c));
        }
        b.build()
    }

    fn multigraph(n: u32, pairs: &[(u32, u32)]) -> ProcessMultigraph {
        let mut g = ProcessMultigraph::new((0..n).map(Rid));
        for (a, b) in pairs {
            g.add(Rid(*a), Rid(*b));
        }
        g
    }

    #[test]
    fn cpg_of_single_pair() {
        let g = cpg(&pairs_world(2, &[(0, 1)])).unwrap();
        assert_eq!(g.edges, BTreeMap::from([((Rid(0), Rid(1)), 1)]));
    }

    #[test]
    fn cpg_counts_parallel_pairs() {
        let g = cpg(&pairs_world(2, &[(0, 1), (0, 1)])).unwrap();
        assert_eq!(g.count(Rid(0), Rid(1)), 2);
    }

    #[test]
    fn cpg_rejects_indirect_relay() {
        let mut b = WorldBuilder::new(&[0, 1, 2]);
        let (r, _) = b.edge(Rid(1), Rid(2));
        let q = b.chain(Rid(0), r);
        let e = cpg(&b.build()).unwrap_err();
        assert_eq!(
            e,
            IfrError::NotSimple {
                relay: q,
                reason: "is indirect"
            }
        );
    }

    #[test]
    fn example_without_indirect_relay_projects_to_one_edge() {
        // v owns r, w owns the sink p; no q.
        let g = cpg(&pairs_world(3, &[(1, 2)])).unwrap();
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.count(Rid(1), Rid(2)), 1);
    }

    #[test]
    fn process_rules_change_the_multigraph_as_defined() {
        let mut g = multigraph(3, &[(0, 1), (0, 2)]);
        ProcessRule::Introduction {
            u: Rid(0),
            v: Rid(1),
            w: Rid(2),
        }
        .apply(&mut g)
        .unwrap();
        assert_eq!(g, multigraph(3, &[(0, 1), (0, 2), (1, 2)]));
        ProcessRule::Delegation {
            u: Rid(0),
            v: Rid(1),
            w: Rid(2),
        }
        .apply(&mut g)
        .unwrap();
        assert_eq!(g, multigraph(3, &[(0, 1), (1, 2), (1, 2)]));
        ProcessRule::Fusion { u: Rid(1), v: Rid(2) }.apply(&mut g).unwrap();
        ProcessRule::Reversal { u: Rid(0), v: Rid(1) }.apply(&mut g).unwrap();
        assert_eq!(g, multigraph(3, &[(1, 0), (1, 2)]));
        assert!(ProcessRule::Fusion { u: Rid(1), v: Rid(2) }.apply(&mut g).is_err());
    }

    #[test]
    fn process_plan_reaches_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.gen_range(3..=6);
            let e1 = rng.gen_range(0..8);
            let e2 = rng.gen_range(0..8);
            let a = multigraph(n, &random_connected_pairs(&mut rng, n, e1));
            let b = multigraph(n, &random_connected_pairs(&mut rng, n, e2));
            let plan = process_plan(&a, &b).unwrap();
            let mut cur = a.clone();
            for r in &plan {
                r.apply(&mut cur).unwrap();
                assert!(cur.is_weakly_connected());
            }
            assert_eq!(cur, b);
        }
    }

    #[test]
    fn reversal_with_incoming_is_rejected() {
        let mut b = WorldBuilder::new(&[0, 1, 2]);
        let (r, _) = b.edge(Rid(1), Rid(2));
        b.chain(Rid(0), r);
        let mut ex = Executor::new(b.build(), 0);
        let before = ex.world().digest();
        let e = ex.reversal(Rid(1), r, Subject::Fresh).unwrap_err();
        assert!(matches!(e, IfrError::Precondition(_)));
        assert_eq!(ex.world().digest(), before);
    }

    #[test]
    fn fusion_of_parallel_relays_has_union_keys() {
        let mut b = WorldBuilder::new(&[0, 1]);
        let (r, s) = b.edge(Rid(0), Rid(1));
        let r2 = b.chain(Rid(0), s);
        let mut ex = Executor::new(b.build(), 0);
        let m = ex.fusion(Rid(0), r, r2).unwrap();
        assert_eq!(ex.world().relay(m).unwrap().out.keys.len(), 2);
        ex.settle().unwrap();
        assert_eq!(ex.world().relay(s).unwrap().in_set.len(), 2);
    }

    #[test]
    fn emulated_rules_match_their_delta() {
        let w = pairs_world(3, &[(0, 1), (0, 2), (1, 2), (1, 2)]);
        let cases = [
            ProcessRule::Introduction {
                u: Rid(0),
                v: Rid(1),
                w: Rid(2),
            },
            ProcessRule::Delegation {
                u: Rid(0),
                v: Rid(1),
                w: Rid(2),
            },
            ProcessRule::Fusion { u: Rid(1), v: Rid(2) },
            ProcessRule::Reversal { u: Rid(0), v: Rid(1) },
        ];
        for rule in cases {
            let mut ex = Executor::new(w.clone(), 1);
            let before = cpg(ex.world()).unwrap();
            let mut expect = before.clone();
            rule.apply(&mut expect).unwrap();
            ex.emulate(rule).unwrap();
            assert_eq!(cpg(ex.world()).unwrap(), expect, "{rule:?}");
            ex.connectivity_ok().unwrap();
        }
    }

    #[test]
    fn path_to_star() {
        let path = pairs_world(3, &[(0, 1), (1, 2)]);
        let star = TargetGraph::from_world(&pairs_world(3, &[(0, 1), (0, 2)]));
        let t = plan_transform(path, &star, 5).unwrap();
        assert_eq!(cpg(&t.world).unwrap(), star.process_graph());
        assert_eq!(TargetGraph::from_world(&t.world).canonical_trees(), star.canonical_trees());
    }

    #[test]
    fn identity_target_keeps_process_graph() {
        let w = pairs_world(3, &[(0, 1), (2, 1)]);
        let tg = TargetGraph::from_world(&w);
        let t = plan_transform(w, &tg, 2).unwrap();
        assert_eq!(cpg(&t.world).unwrap(), tg.process_graph());
    }

    #[test]
    fn indirect_target_tree_is_rebuilt() {
        // Target: p2 -> p1 -> sink at p0, plus p1 -> sink at p2 for connectivity.
        let mut b = WorldBuilder::new(&[0, 1, 2]);
        let (r, _) = b.edge(Rid(1), Rid(0));
        b.chain(Rid(2), r);
        let target = TargetGraph::from_world(&b.build());
        let src = pairs_world(3, &[(0, 1), (0, 2)]);
        let t = plan_transform(src, &target, 9).unwrap();
        assert_eq!(TargetGraph::from_world(&t.world).canonical_trees(), target.canonical_trees());
        assert_eq!(t.plan.trees[0].len(), 3);
    }

    #[test]
    fn simplify_removes_indirect_relays() {
        let mut b = WorldBuilder::new(&[0, 1, 2]);
        let (r, _) = b.edge(Rid(1), Rid(2));
        b.chain(Rid(0), r);
        let mut ex = Executor::new(b.build(), 4);
        simplify(&mut ex).unwrap();
        assert!(cpg(ex.world()).is_ok());
        assert_eq!(ex.steps.len(), 1);
        ex.connectivity_ok().unwrap();
    }

    #[test]
    fn disconnected_source_is_rejected() {
        let w = pairs_world(4, &[(0, 1), (2, 3)]);
        let tg = TargetGraph::from_world(&pairs_world(4, &[(0, 1), (1, 2), (2, 3)]));
        assert_eq!(plan_transform(w, &tg, 0).unwrap_err(), IfrError::Disconnected);
    }
}

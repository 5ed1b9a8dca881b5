//! A departure application for the relay layer. Leaving processes hand their
//! connections to neighbors with Relay Reversal and stop once no relay of
//! theirs is referenced.
//!
//! Every process runs the same application:
//!
//! * an indirect relay with no incoming entries is flattened: a fresh sink
//!   is sent through it and the relay is deleted;
//! * a direct relay whose peer is unknown is probed with a `knock` carrying a
//!   fresh reply sink. The answer names the peer and says which side keeps the
//!   connection. Stayers never keep connections to leavers, and between two
//!   leavers the lower id keeps its relay to the higher one;
//! * a leaving process with two relays to different peers sends one through
//!   the other and deletes the carrier. With one relay left and nothing
//!   referencing it, it deletes that relay and stops.
//!
//! Only direct relays are ever sent and no relay with incoming entries is
//! deleted.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::ids::{RelayId, RelayRef, Rid};
use crate::message::{Action, Param};
use crate::oracle::{fdp_legitimate, process_components, stayers_connected};
use crate::sim::{Application, ProcessCtx, SchedulerPolicy, Simulation};
use crate::world::{fnv1a, WorldState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    HandingOff,
    Draining,
    Stopped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Peer {
    pub rid: Rid,
    pub leaving: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepartureState {
    pub leaving: bool,
    pub phase: Phase,
}

/// All owned relays unreferenced and no forwarding relay left.
pub fn safe_to_stop(ctx: &ProcessCtx<'_>) -> bool {
    ctx.get_relays()
        .into_iter()
        .all(|r| ctx.incoming(r) == 0 && ctx.is_sink(r))
}

#[derive(Debug)]
pub struct DepartureApp {
    rid: Rid,
    leaving: bool,
    phase: Phase,
    /// Learned peer of every probed forwarding relay.
    peers: BTreeMap<RelayId, Peer>,
    /// Outstanding knocks: token to (probed relay, reply sink).
    pending: BTreeMap<u64, (RelayId, RelayId)>,
    next_token: u64,
    /// Relays this application knows about: initial ones and those handed
    /// over by delivered actions. A relay adopted on arrival of its
    /// transmission but whose action is still queued is left alone.
    adopted: BTreeSet<RelayId>,
}

impl DepartureApp {
    pub fn new(rid: Rid, leaving: bool, initial: BTreeSet<RelayId>) -> Self {
        DepartureApp {
            rid,
            leaving,
            phase: Phase::HandingOff,
            peers: BTreeMap::new(),
            pending: BTreeMap::new(),
            next_token: 0,
            adopted: initial,
        }
    }

    pub fn state(&self) -> DepartureState {
        DepartureState {
            leaving: self.leaving,
            phase: self.phase,
        }
    }

    fn reply_sinks(&self) -> BTreeSet<RelayId> {
        self.pending.values().map(|(_, s)| *s).collect()
    }

    fn knocked(&self, r: RelayId) -> bool {
        self.pending.values().any(|(k, _)| *k == r)
    }

    /// Sends a fresh sink through `r` and deletes `r`.
    fn reverse_fresh(ctx: &mut ProcessCtx<'_>, r: RelayRef) {
        if let Some(s) = ctx.new_relay() {
            ctx.send(r, Action::new("intro", vec![Param::Ref(s)]));
            ctx.delete(r);
        }
    }

    fn knock(&mut self, ctx: &mut ProcessCtx<'_>, r: RelayRef) {
        let Some(sink) = ctx.new_relay() else {
            return;
        };
        let token = self.next_token;
        self.next_token += 1;
        self.pending.insert(token, (r.peek_id(), sink.peek_id()));
        self.adopted.insert(sink.peek_id());
        ctx.send(
            r,
            Action::new(
                "knock",
                vec![
                    Param::Ref(sink),
                    Param::Value(token),
                    Param::Value(u64::from(self.leaving)),
                    Param::Value(u64::from(self.rid.0)),
                ],
            ),
        );
    }

    /// One housekeeping or hand-off move; returns true if it acted.
    fn step(&mut self, ctx: &mut ProcessCtx<'_>) -> bool {
        let relays = ctx.get_relays();
        let fwd: Vec<RelayRef> = relays.iter().copied().filter(|r| !ctx.is_sink(*r)).collect();
        self.peers.retain(|id, _| fwd.iter().any(|r| r.peek_id() == *id));
        self.adopted.retain(|id| relays.iter().any(|r| r.peek_id() == *id));
        let adopted: Vec<RelayRef> = fwd.iter().copied().filter(|r| self.adopted.contains(&r.peek_id())).collect();

        for &r in &adopted {
            if !ctx.direct(r) && ctx.incoming(r) == 0 && !self.knocked(r.peek_id()) {
                Self::reverse_fresh(ctx, r);
                return true;
            }
        }
        // Relays back to this process, or a second relay to a known peer.
        let mut seen: BTreeSet<Rid> = BTreeSet::new();
        for &r in &fwd {
            if let Some(p) = self.peers.get(&r.peek_id()) {
                let redundant = p.rid == self.rid || !seen.insert(p.rid);
                if redundant && ctx.incoming(r) == 0 {
                    ctx.delete(r);
                    return true;
                }
            }
        }
        let unknown: Vec<RelayRef> = adopted
            .iter()
            .copied()
            .filter(|r| ctx.direct(*r) && !self.peers.contains_key(&r.peek_id()) && !self.knocked(r.peek_id()))
            .collect();
        if let Some(&r) = unknown.choose(ctx.rng()) {
            self.knock(ctx, r);
            return true;
        }
        let replies = self.reply_sinks();
        let spent: Vec<RelayRef> = relays
            .iter()
            .copied()
            .filter(|r| ctx.is_sink(*r) && ctx.incoming(*r) == 0 && !replies.contains(&r.peek_id()))
            .collect();
        if relays.len() > 1 {
            if let Some(&s) = spent.first() {
                ctx.delete(s);
                return true;
            }
        }
        if self.leaving {
            return self.hand_off(ctx, &fwd);
        }
        false
    }

    fn hand_off(&mut self, ctx: &mut ProcessCtx<'_>, fwd: &[RelayRef]) -> bool {
        if !self.pending.is_empty() {
            return false;
        }
        let known: Vec<(RelayRef, Peer)> = fwd
            .iter()
            .filter_map(|r| self.peers.get(&r.peek_id()).map(|p| (*r, *p)))
            .collect();
        if known.len() != fwd.len() {
            return false;
        }
        if known.len() >= 2 {
            // Prefer carrying through a stayer; a leaver peer is always higher.
            let mut carriers: Vec<&(RelayRef, Peer)> =
                known.iter().filter(|(r, _)| ctx.incoming(*r) == 0).collect();
            carriers.sort_by_key(|(_, p)| (p.leaving, p.rid));
            for (r, p) in carriers {
                if let Some((s, _)) = known.iter().find(|(s, q)| s != r && q.rid != p.rid && ctx.direct(*s)) {
                    ctx.send(*r, Action::new("intro", vec![Param::Ref(*s)]));
                    ctx.delete(*r);
                    return true;
                }
            }
            return false;
        }
        self.phase = Phase::Draining;
        let relays = ctx.get_relays();
        let sinks_free = relays.iter().all(|r| !ctx.is_sink(*r) || ctx.incoming(*r) == 0);
        if let [r] = fwd {
            if sinks_free && ctx.incoming(*r) == 0 {
                ctx.delete(*r);
                return true;
            }
            return false;
        }
        if safe_to_stop(ctx) {
            self.phase = Phase::Stopped;
            ctx.stop();
            return true;
        }
        false
    }
}

impl Application for DepartureApp {
    fn on_tick(&mut self, ctx: &mut ProcessCtx<'_>) {
        if self.phase != Phase::Stopped {
            self.step(ctx);
        }
    }

    fn on_deliver(&mut self, ctx: &mut ProcessCtx<'_>, action: Action) {
        match action.label.as_str() {
            "knock" => {
                let (Some(y), Some(token), Some(their_leaving), Some(their_rid)) =
                    (action.relay_ref(0), action.value(1), action.value(2), action.value(3))
                else {
                    return;
                };
                let them = Rid(their_rid as u32);
                let i_keep = self.leaving && (their_leaving == 0 || self.rid < them);
                ctx.send(
                    y,
                    Action::new(
                        "ack",
                        vec![
                            Param::Value(token),
                            Param::Value(u64::from(self.leaving)),
                            Param::Value(u64::from(self.rid.0)),
                            Param::Value(u64::from(i_keep)),
                        ],
                    ),
                );
                if i_keep {
                    self.adopted.insert(y.peek_id());
                    self.peers.insert(
                        y.peek_id(),
                        Peer {
                            rid: them,
                            leaving: their_leaving != 0,
                        },
                    );
                } else {
                    ctx.delete(y);
                }
            }
            "ack" => {
                let (Some(token), Some(leaving), Some(rid), Some(they_keep)) =
                    (action.value(0), action.value(1), action.value(2), action.value(3))
                else {
                    return;
                };
                let Some((r, _)) = self.pending.remove(&token) else {
                    return;
                };
                let rr = RelayRef::from_id(r);
                if they_keep == 1 {
                    if ctx.get_relays().contains(&rr) && ctx.incoming(rr) == 0 {
                        ctx.delete(rr);
                    }
                } else {
                    self.peers.insert(
                        r,
                        Peer {
                            rid: Rid(rid as u32),
                            leaving: leaving != 0,
                        },
                    );
                }
            }
            "intro" => {
                self.adopted.extend(action.refs().map(|r| r.peek_id()));
            }
            _ => {}
        }
    }

    fn digest(&self) -> u64 {
        fnv1a(format!("{:?}{:?}{:?}{}{:?}", self.phase, self.peers, self.pending, self.next_token, self.adopted).as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepartureReport {
    pub reached: bool,
    pub steps: u64,
    /// Steps at which the stayers of some initial component were split.
    pub clause_iii_violations: u64,
    pub stopped: BTreeSet<Rid>,
}

/// Installs a [`DepartureApp`] on every process.
pub fn departure_sim(world: WorldState, seed: u64, policy: SchedulerPolicy) -> Simulation {
    let procs: Vec<(Rid, bool)> = world.processes.iter().map(|(r, i)| (*r, i.leaving)).collect();
    let mut sim = Simulation::new(world, seed, policy);
    for (rid, leaving) in procs {
        let initial = sim.world.layers.get(&rid).map(|l| l.relays.keys().copied().collect()).unwrap_or_default();
        sim.set_app(rid, Box::new(DepartureApp::new(rid, leaving, initial)));
    }
    sim
}

/// Runs the departure application until the state is FDP-legitimate,
/// checking stayer connectivity after every step.
pub fn run_departure(world: WorldState, seed: u64, budget: u64) -> DepartureReport {
    let initial = process_components(&world);
    let mut sim = departure_sim(world, seed, SchedulerPolicy::default());
    let mut violations = 0;
    let mut steps = 0;
    let mut reached = fdp_legitimate(&sim.world, &initial);
    while !reached && steps < budget && sim.step() {
        steps += 1;
        if !stayers_connected(&sim.world, &initial) {
            violations += 1;
        }
        reached = fdp_legitimate(&sim.world, &initial);
    }
    DepartureReport {
        reached,
        steps,
        clause_iii_violations: violations,
        stopped: sim
            .world
            .processes
            .iter()
            .filter(|(_, i)| !i.active)
            .map(|(r, _)| *r)
            .collect(),
    }
}

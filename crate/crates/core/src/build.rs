//! Initial-state construction: hand-built legal topologies and seeded
//! adversarial states.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ids::{Key, RelayId, Rid};
use crate::message::{Action, Envelope, Header, Message, Param, Payload, RelayParameter, Transmit};
use crate::relay::{InEntry, Origin, Out, Relay, RelayState};
use crate::world::WorldState;

/// Builds legal states by wiring relays directly, as if every handshake had
/// already completed.
#[derive(Clone, Debug)]
pub struct WorldBuilder {
    world: WorldState,
}

impl WorldBuilder {
    pub fn new(rids: &[u32]) -> Self {
        let mut world = WorldState::new();
        for r in rids {
            world.add_process(Rid(*r), false);
        }
        WorldBuilder { world }
    }

    pub fn leaving(&mut self, rid: Rid) -> &mut Self {
        if let Some(p) = self.world.processes.get_mut(&rid) {
            p.leaving = true;
        }
        self
    }

    pub fn world_mut(&mut self) -> &mut WorldState {
        &mut self.world
    }

    pub fn sink(&mut self, u: Rid) -> RelayId {
        let l = self.world.layers.get_mut(&u).expect("unknown process");
        let id = l.fresh_id();
        l.relays.insert(id, Relay::sink(id));
        id
    }

    /// Relay at `u` forwarding to the existing relay `target`, with a fresh
    /// confirmed key.
    pub fn chain(&mut self, u: Rid, target: RelayId) -> RelayId {
        let t = target.rid;
        let key = self.world.layers.get_mut(&t).expect("unknown target").fresh_key();
        let tr = self.world.relay_mut(target).expect("unknown target relay");
        tr.in_set.insert(InEntry::confirmed(key, u));
        let (level, sink_rid) = (tr.level + 1, tr.sink_rid);
        let l = self.world.layers.get_mut(&u).expect("unknown process");
        let id = l.fresh_id();
        l.relays
            .insert(id, Relay::forwarding(id, BTreeSet::from([key]), target, level, sink_rid));
        id
    }

    /// Fresh sink at `v` plus a direct relay at `u` pointing to it.
    pub fn edge(&mut self, u: Rid, v: Rid) -> (RelayId, RelayId) {
        let s = self.sink(v);
        (self.chain(u, s), s)
    }

    pub fn build(self) -> WorldState {
        self.world
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    /// A random legal topology with empty buffers.
    #[default]
    None,
    /// Arbitrary field values, dangling ids, and arbitrary buffered messages.
    Full,
}

/// Random initial state over processes `p0..p{n_proc-1}`. RIDs are always
/// drawn from that set; relay ids and keys may dangle. Layer counters start
/// beyond every generated serial.
pub fn adversarial_init(seed: u64, n_proc: u32, n_relays: usize, n_msgs: usize, profile: Corruption) -> WorldState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rids: Vec<u32> = (0..n_proc.max(1)).collect();
    match profile {
        Corruption::None => random_legal(&mut rng, &rids, n_relays),
        Corruption::Full => random_garbage(&mut rng, &rids, n_relays, n_msgs),
    }
}

fn random_legal(rng: &mut ChaCha8Rng, rids: &[u32], n_relays: usize) -> WorldState {
    let mut b = WorldBuilder::new(rids);
    let mut made: Vec<RelayId> = rids.iter().map(|r| b.sink(Rid(*r))).collect();
    while made.len() < n_relays {
        let u = Rid(*rids.choose(rng).unwrap());
        let target = *made.choose(rng).unwrap();
        if target.rid == u && b.world.relay(target).is_some_and(|r| r.out.id.is_none()) {
            // A relay to one's own sink is legal but uninteresting.
            made.push(b.sink(u));
            continue;
        }
        made.push(b.chain(u, target));
    }
    b.build()
}

const SERIALS: u64 = 8;

fn random_garbage(rng: &mut ChaCha8Rng, rids: &[u32], n_relays: usize, n_msgs: usize) -> WorldState {
    let mut w = WorldState::new();
    for r in rids {
        w.add_process(Rid(*r), false);
    }
    let rid = |rng: &mut ChaCha8Rng| Rid(*rids.choose(rng).unwrap());
    let key = |rng: &mut ChaCha8Rng| Key::new(Rid(*rids.choose(rng).unwrap()), rng.gen_range(0..SERIALS));
    // Serial space wider than the number of relays so some ids dangle.
    let relay_id = |rng: &mut ChaCha8Rng| RelayId::new(Rid(*rids.choose(rng).unwrap()), rng.gen_range(0..SERIALS));

    let mut ids: BTreeSet<RelayId> = BTreeSet::new();
    while ids.len() < n_relays.min(rids.len() * SERIALS as usize) {
        ids.insert(relay_id(rng));
    }
    let all: Vec<RelayId> = ids.iter().copied().collect();
    for id in &all {
        let mut r = Relay::sink(*id);
        if rng.gen_bool(0.15) {
            r.state = RelayState::Dead;
        }
        if rng.gen_bool(0.7) {
            let target = if rng.gen_bool(0.85) {
                *all.choose(rng).unwrap()
            } else {
                relay_id(rng)
            };
            let mut keys = BTreeSet::new();
            for _ in 0..rng.gen_range(0..=2) {
                keys.insert(if rng.gen_bool(0.8) {
                    Key::new(target.rid, rng.gen_range(0..SERIALS))
                } else {
                    key(rng)
                });
            }
            r.out = Out {
                keys,
                id: Some(target),
            };
        } else if rng.gen_bool(0.1) {
            r.out.keys.insert(key(rng));
        }
        r.level = rng.gen_range(0..5);
        r.sink_rid = rid(rng);
        for _ in 0..rng.gen_range(0..=3) {
            let k = if rng.gen_bool(0.85) {
                Key::new(id.rid, rng.gen_range(0..SERIALS))
            } else {
                key(rng)
            };
            let origin = if rng.gen_bool(0.6) {
                Origin::ConfirmedFrom(rid(rng))
            } else {
                Origin::UnconfirmedVia(RelayId::new(id.rid, rng.gen_range(0..SERIALS)))
            };
            r.in_set.insert(InEntry { key: k, origin });
        }
        w.layers.get_mut(&id.rid).unwrap().relays.insert(*id, r);
    }
    for l in w.layers.values_mut() {
        l.next_relay = SERIALS;
        l.next_key = SERIALS;
    }

    let random_param = |rng: &mut ChaCha8Rng| match rng.gen_range(0..4) {
        0 => Param::Value(rng.gen_range(0..100)),
        1 => Param::Null,
        _ => Param::Relay(RelayParameter {
            key: key(rng),
            id: if rng.gen_bool(0.8) && !all.is_empty() {
                *all.choose(rng).unwrap()
            } else {
                relay_id(rng)
            },
            level: rng.gen_range(0..5),
            sink_rid: rid(rng),
        }),
    };
    let random_transmit = |rng: &mut ChaCha8Rng, carrier: Option<&Relay>| {
        let in_id = carrier.map_or_else(|| relay_id(rng), |c| c.id);
        let out_id = carrier
            .and_then(|c| c.out.id)
            .filter(|_| rng.gen_bool(0.8))
            .unwrap_or_else(|| relay_id(rng));
        let hkey = carrier
            .and_then(|c| c.pick_key())
            .filter(|_| rng.gen_bool(0.7))
            .unwrap_or_else(|| key(rng));
        let payload = if rng.gen_bool(0.3) {
            let seq: Vec<Key> = (0..rng.gen_range(1..=3)).map(|_| key(rng)).collect();
            Payload::Probe {
                control_keys: (0..rng.gen_range(0..=2)).map(|_| key(rng)).collect(),
                key_sequence: seq,
            }
        } else {
            let n = rng.gen_range(0..=2);
            Payload::App(Action::new("junk", (0..n).map(|_| random_param(rng)).collect()))
        };
        Transmit {
            header: Header {
                key: hkey,
                in_id,
                out_id,
                level: rng.gen_range(0..5),
            },
            payload,
        }
    };
    let control = |rng: &mut ChaCha8Rng| match rng.gen_range(0..6) {
        0 => Message::ProbeFail {
            key: key(rng),
            key_sequence: (0..rng.gen_range(1..=3)).map(|_| key(rng)).collect(),
        },
        1 => Message::NotAuthorized(random_transmit(rng, None)),
        2 => Message::InRelayClosed {
            keys: (0..rng.gen_range(1..=2)).map(|_| key(rng)).collect(),
            sender_rid: rid(rng),
            target_id: relay_id(rng),
        },
        3 => Message::OutRelayClosed { id: relay_id(rng) },
        4 => Message::Ping {
            id: relay_id(rng),
            level: rng.gen_range(0..5),
            sink_rid: rid(rng),
            key: key(rng),
        },
        _ => Message::Transmit(random_transmit(rng, None)),
    };

    for _ in 0..n_msgs {
        let to_relay = !all.is_empty() && rng.gen_bool(0.6);
        if to_relay {
            let id = *all.choose(rng).unwrap();
            let carrier = w.relay(id).unwrap().clone();
            let msg = if carrier.out.id.is_none() {
                Message::Local(Action::new("junk", vec![Param::Value(rng.gen_range(0..100))]))
            } else {
                Message::Transmit(random_transmit(rng, Some(&carrier)))
            };
            w.relay_mut(id).unwrap().buf.push(Envelope::new(0, msg));
        } else {
            let from = rid(rng);
            let to = rid(rng);
            let msg = control(rng);
            w.layers.get_mut(&from).unwrap().layer_buf.push((to, Envelope::new(0, msg)));
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_is_confirmed_both_ways() {
        let mut b = WorldBuilder::new(&[0, 1]);
        let (x, s) = b.edge(Rid(0), Rid(1));
        let w = b.build();
        let xr = w.relay(x).unwrap();
        let k = xr.pick_key().unwrap();
        assert_eq!(xr.out.id, Some(s));
        assert_eq!((xr.level, xr.sink_rid), (1, Rid(1)));
        assert!(w.relay(s).unwrap().in_set.contains(&InEntry::confirmed(k, Rid(0))));
    }

    #[test]
    fn counters_follow_builder_allocation() {
        let mut b = WorldBuilder::new(&[0, 1]);
        b.edge(Rid(0), Rid(1));
        b.edge(Rid(0), Rid(1));
        let w = b.build();
        assert_eq!(w.layers[&Rid(1)].next_relay, 2);
        assert_eq!(w.layers[&Rid(1)].next_key, 2);
        assert_eq!(w.layers[&Rid(0)].next_relay, 2);
    }

    #[test]
    fn adversarial_state_is_seed_deterministic() {
        let a = adversarial_init(7, 4, 12, 20, Corruption::Full);
        let b = adversarial_init(7, 4, 12, 20, Corruption::Full);
        assert_eq!(a, b);
        assert_ne!(a, adversarial_init(8, 4, 12, 20, Corruption::Full));
    }

    #[test]
    fn adversarial_rids_are_known_and_counters_fresh() {
        for seed in 0..20 {
            let w = adversarial_init(seed, 5, 16, 30, Corruption::Full);
            assert_eq!(w.relays().count(), 16);
            assert_eq!(w.message_count(), 30);
            for r in w.relays() {
                assert!(w.processes.contains_key(&r.sink_rid));
                for e in &r.in_set {
                    if let Some(x) = e.confirmed_rid() {
                        assert!(w.processes.contains_key(&x));
                    }
                }
            }
            for l in w.layers.values() {
                assert!(l.relays.keys().all(|id| id.serial < l.next_relay));
                for (to, _) in &l.layer_buf {
                    assert!(w.processes.contains_key(to));
                }
            }
        }
    }

    #[test]
    fn uncorrupted_profile_is_legal() {
        for seed in 0..10 {
            let w = adversarial_init(seed, 4, 10, 0, Corruption::None);
            assert!(crate::oracle::is_legal(&w), "seed {seed}");
        }
    }
}

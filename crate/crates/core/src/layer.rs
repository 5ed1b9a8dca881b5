//! The per-process relay layer: process-facing primitives and the handlers
//! for every message kind, each executed atomically against one layer.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::ids::{belongs_to, Key, RelayId, RelayRef, Rid};
use crate::message::{Action, Envelope, Header, Message, Param, Payload, RelayParameter, Transmit};
use crate::relay::{InEntry, Origin, Relay, RelayState};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelayLayer {
    pub rid: Rid,
    pub relays: BTreeMap<RelayId, Relay>,
    /// Internal control messages as `(targetRID, message)` pairs.
    pub layer_buf: Vec<(Rid, Envelope)>,
    pub owner_alive: bool,
    pub next_relay: u64,
    pub next_key: u64,
    /// Step stamp applied to every envelope created by this layer.
    pub clock: u64,
    pub shut_down: bool,
}

impl RelayLayer {
    pub fn new(rid: Rid) -> Self {
        RelayLayer {
            rid,
            relays: BTreeMap::new(),
            layer_buf: Vec::new(),
            owner_alive: true,
            next_relay: 0,
            next_key: 0,
            clock: 0,
            shut_down: false,
        }
    }

    pub(crate) fn fresh_id(&mut self) -> RelayId {
        let id = RelayId::new(self.rid, self.next_relay);
        self.next_relay += 1;
        id
    }

    pub(crate) fn fresh_key(&mut self) -> Key {
        let k = Key::new(self.rid, self.next_key);
        self.next_key += 1;
        k
    }

    fn emit(&mut self, to: Rid, msg: Message) {
        self.layer_buf.push((to, Envelope::new(self.clock, msg)));
    }

    fn buffer(&mut self, id: RelayId, msg: Message) {
        let clock = self.clock;
        if let Some(r) = self.relays.get_mut(&id) {
            r.buf.push(Envelope::new(clock, msg));
        }
    }

    /// Relay named by a handle, if this layer owns it.
    fn owned(&self, r: RelayRef) -> Option<&Relay> {
        let id = r.id();
        if id.rid != self.rid {
            return None;
        }
        self.relays.get(&id)
    }

    pub fn owns(&self, r: RelayRef) -> bool {
        self.owned(r).is_some()
    }

    fn has_pending_children(&self, id: RelayId) -> bool {
        self.relays
            .values()
            .any(|x| x.in_set.iter().any(|e| e.origin == Origin::UnconfirmedVia(id)))
    }

    fn purge_unconfirmed_via(&mut self, id: RelayId) {
        for x in self.relays.values_mut() {
            x.in_set.retain(|e| e.origin != Origin::UnconfirmedVia(id));
        }
    }

    fn out_key_in_use(&self, key: Key) -> bool {
        self.relays.values().any(|x| x.out.keys.contains(&key))
    }

    // ---- process-facing primitives ----

    /// Creates a fresh sink relay. No-op for an inactive owner.
    pub fn new_relay(&mut self) -> Option<RelayRef> {
        if !self.owner_alive {
            return None;
        }
        let id = self.fresh_id();
        self.relays.insert(id, Relay::sink(id));
        Some(RelayRef::new(id))
    }

    pub fn delete(&mut self, r: RelayRef) {
        if self.owner_alive && self.owns(r) {
            self.delete_relay(r.id());
        }
    }

    /// Marks a relay dead and notifies every confirmed sender.
    pub(crate) fn delete_relay(&mut self, id: RelayId) {
        let Some(r) = self.relays.get_mut(&id) else {
            return;
        };
        r.state = RelayState::Dead;
        let senders: BTreeSet<Rid> = r.in_set.iter().filter_map(|e| e.confirmed_rid()).collect();
        r.in_set.clear();
        for rid in senders {
            self.emit(rid, Message::OutRelayClosed { id });
        }
    }

    /// Fuses relays sharing one target, level and sink into a fresh relay.
    pub fn merge(&mut self, refs: &[RelayRef]) -> Option<RelayRef> {
        if !self.owner_alive || refs.is_empty() {
            return None;
        }
        let ids: BTreeSet<RelayId> = refs.iter().map(|r| r.id()).collect();
        let mut members = Vec::with_capacity(ids.len());
        for id in &ids {
            members.push(self.owned(RelayRef::new(*id))?);
        }
        let first = members[0];
        let out_id = first.out.id?;
        let ok = members.iter().all(|m| {
            m.is_alive()
                && m.out.id == Some(out_id)
                && m.level == first.level
                && m.sink_rid == first.sink_rid
                && m.in_set.is_empty()
        });
        if !ok {
            return None;
        }
        let (level, sink_rid) = (first.level, first.sink_rid);
        let new_id = self.fresh_id();
        let mut keys = BTreeSet::new();
        let mut buf = Vec::new();
        for id in &ids {
            let old = self.relays.remove(id).expect("member checked above");
            keys.extend(old.out.keys);
            for mut env in old.buf {
                if let Message::Transmit(t) = &mut env.msg {
                    if ids.contains(&t.header.in_id) {
                        t.header.in_id = new_id;
                    }
                }
                buf.push(env);
            }
        }
        let mut merged = Relay::forwarding(new_id, keys, out_id, level, sink_rid);
        merged.buf = buf;
        for x in self.relays.values_mut() {
            let moved: Vec<InEntry> = x
                .in_set
                .iter()
                .filter(|e| matches!(e.origin, Origin::UnconfirmedVia(v) if ids.contains(&v)))
                .copied()
                .collect();
            for e in moved {
                x.in_set.remove(&e);
                x.in_set.insert(InEntry::unconfirmed(e.key, new_id));
            }
        }
        self.relays.insert(new_id, merged);
        Some(RelayRef::new(new_id))
    }

    pub fn get_relays(&self) -> Vec<RelayRef> {
        self.relays
            .values()
            .filter(|r| r.is_alive())
            .map(|r| RelayRef::new(r.id))
            .collect()
    }

    pub fn incoming(&self, r: RelayRef) -> usize {
        self.owned(r).map_or(0, |x| x.in_set.len())
    }

    pub fn direct(&self, r: RelayRef) -> bool {
        self.owned(r).is_some_and(|x| x.level <= 1)
    }

    pub fn is_sink(&self, r: RelayRef) -> bool {
        self.owned(r).is_some_and(|x| x.level == 0)
    }

    pub fn dead(&self, r: RelayRef) -> bool {
        self.owned(r).is_none_or(|x| !x.is_alive())
    }

    pub fn same_target(&self, a: RelayRef, b: RelayRef) -> bool {
        match (self.owned(a), self.owned(b)) {
            (Some(x), Some(y)) => x.out.id == y.out.id,
            _ => false,
        }
    }

    pub fn send(&mut self, r: RelayRef, action: Action) {
        if !self.owner_alive {
            return;
        }
        let Some(relay) = self.owned(r) else {
            return;
        };
        if !relay.is_alive() {
            return;
        }
        let rid = relay.id;
        let Some(out_id) = relay.out.id else {
            self.buffer(rid, Message::Local(action));
            return;
        };
        let Some(key) = relay.pick_key() else {
            return;
        };
        let level = relay.level;
        let mut params = Vec::with_capacity(action.params.len());
        for p in action.params {
            params.push(match p {
                Param::Ref(s) => self.serialize_ref(s, rid),
                other => other,
            });
        }
        let t = Transmit {
            header: Header {
                key,
                in_id: rid,
                out_id,
                level,
            },
            payload: Payload::App(Action {
                label: action.label,
                params,
            }),
        };
        self.buffer(rid, Message::Transmit(t));
    }

    fn serialize_ref(&mut self, s: RelayRef, via: RelayId) -> Param {
        match self.owned(s) {
            Some(x) if x.is_alive() => {}
            _ => return Param::Null,
        }
        let key = self.fresh_key();
        let x = self.relays.get_mut(&s.id()).expect("checked above");
        x.in_set.insert(InEntry::unconfirmed(key, via));
        Param::Relay(RelayParameter {
            key,
            id: x.id,
            level: x.level + 1,
            sink_rid: x.sink_rid,
        })
    }

    /// Makes the owner inactive and deletes all of its sink relays.
    pub fn stop_process(&mut self) {
        if !self.owner_alive {
            return;
        }
        self.owner_alive = false;
        let sinks: Vec<RelayId> = self
            .relays
            .values()
            .filter(|r| r.is_alive() && r.out.id.is_none())
            .map(|r| r.id)
            .collect();
        for id in sinks {
            self.delete_relay(id);
        }
    }

    // ---- message handlers ----

    /// Entry point for every message the link layer hands to this layer.
    pub fn receive(&mut self, msg: Message) {
        match msg {
            Message::Transmit(t) => self.handle_transmit(t),
            Message::ProbeFail { key, key_sequence } => self.handle_probefail(key, &key_sequence),
            Message::NotAuthorized(t) => self.handle_notauthorized(t),
            Message::InRelayClosed { keys, sender_rid, target_id } => {
                self.handle_inrelayclosed(&keys, sender_rid, target_id)
            }
            Message::OutRelayClosed { id } => self.handle_outrelayclosed(id),
            Message::Ping { id, level, sink_rid, key } => self.handle_ping(id, level, sink_rid, key),
            Message::Local(_) => {}
        }
    }

    /// Local header check; mirrors the omniscient oracle for one layer.
    pub fn header_valid_for(&self, h: &Header, r: &Relay) -> bool {
        if r.id != h.out_id {
            return false;
        }
        let sender = h.in_id.rid;
        r.in_set.iter().any(|e| {
            e.key == h.key
                && match e.origin {
                    Origin::ConfirmedFrom(x) => x == sender,
                    Origin::UnconfirmedVia(v) => self.relays.get(&v).is_some_and(|v| v.sink_rid == sender),
                }
        })
    }

    pub fn handle_transmit(&mut self, m: Transmit) {
        let h = m.header;
        let target = self.relays.get(&h.out_id).filter(|r| r.is_alive());
        let Some(target) = target else {
            if h.out_id.rid == self.rid {
                self.emit(h.in_id.rid, Message::OutRelayClosed { id: h.out_id });
            }
            return;
        };
        if !self.header_valid_for(&h, target) {
            self.emit(h.in_id.rid, Message::NotAuthorized(m));
            return;
        }
        let sender = h.in_id.rid;
        let promote = target.in_set.iter().find(|e| {
            e.key == h.key
                && matches!(e.origin, Origin::UnconfirmedVia(v)
                    if self.relays.get(&v).is_some_and(|v| v.sink_rid == sender))
        });
        if let Some(e) = promote.copied() {
            let t = self.relays.get_mut(&h.out_id).expect("target exists");
            t.in_set.remove(&e);
            t.in_set.insert(InEntry::confirmed(e.key, sender));
        }
        let target = &self.relays[&h.out_id];
        match target.out.id {
            None => self.deliver_at_sink(h, m.payload),
            Some(next) => self.forward(h.out_id, next, m.payload),
        }
    }

    fn deliver_at_sink(&mut self, h: Header, payload: Payload) {
        let sink_id = h.out_id;
        match payload {
            Payload::Probe {
                control_keys,
                key_sequence,
            } => {
                let Some(&last) = key_sequence.last() else {
                    return;
                };
                let back = self.relays[&sink_id]
                    .in_set
                    .iter()
                    .find(|e| e.key == last)
                    .and_then(|e| e.confirmed_rid());
                for k in control_keys {
                    if self.out_key_in_use(k) {
                        continue;
                    }
                    if let Some(rid) = back {
                        self.emit(
                            rid,
                            Message::ProbeFail {
                                key: k,
                                key_sequence: key_sequence.clone(),
                            },
                        );
                    }
                }
            }
            Payload::App(action) => {
                let owners: BTreeSet<Rid> = action.relay_params().map(|p| p.id.rid).collect();
                if owners.len() > 1 {
                    return;
                }
                let mut params = Vec::with_capacity(action.params.len());
                for p in action.params {
                    params.push(match p {
                        Param::Relay(rp) => self.adopt_parameter(rp),
                        other => other,
                    });
                }
                let delivered = Action {
                    label: action.label,
                    params,
                };
                self.buffer(sink_id, Message::Local(delivered));
            }
        }
    }

    /// Turns a received relay parameter into a local relay, or `⊥` if its
    /// key is already used by one of this layer's relays.
    fn adopt_parameter(&mut self, rp: RelayParameter) -> Param {
        if self.out_key_in_use(rp.key) {
            return Param::Null;
        }
        let id = self.fresh_id();
        let mut s = Relay::forwarding(id, [rp.key].into_iter().collect(), rp.id, rp.level, rp.sink_rid);
        s.buf.push(Envelope::new(
            self.clock,
            Message::Transmit(Transmit {
                header: Header {
                    key: rp.key,
                    in_id: id,
                    out_id: rp.id,
                    level: rp.level,
                },
                payload: Payload::Probe {
                    control_keys: BTreeSet::new(),
                    key_sequence: vec![rp.key],
                },
            }),
        ));
        self.relays.insert(id, s);
        Param::Ref(RelayRef::new(id))
    }

    fn forward(&mut self, via: RelayId, next: RelayId, payload: Payload) {
        let r = &self.relays[&via];
        let Some(key) = r.pick_key() else {
            return;
        };
        let level = r.level;
        let payload = match payload {
            Payload::Probe {
                mut control_keys,
                mut key_sequence,
            } => {
                key_sequence.push(key);
                control_keys.retain(|k| {
                    !r.buf
                        .iter()
                        .any(|e| matches!(&e.msg, Message::Transmit(t) if t.carries_param_key(*k)))
                });
                Payload::Probe {
                    control_keys,
                    key_sequence,
                }
            }
            app => app,
        };
        let t = Transmit {
            header: Header {
                key,
                in_id: via,
                out_id: next,
                level,
            },
            payload,
        };
        self.buffer(via, Message::Transmit(t));
    }

    fn relay_with_out_key(&self, key: Key) -> Option<RelayId> {
        self.relays.values().find(|r| r.out.keys.contains(&key)).map(|r| r.id)
    }

    pub fn handle_probefail(&mut self, key: Key, key_sequence: &[Key]) {
        let Some((&last, rest)) = key_sequence.split_last() else {
            return;
        };
        let Some(rid) = self.relay_with_out_key(last) else {
            return;
        };
        if let Some(&prev) = rest.last() {
            let back = self.relays[&rid]
                .in_set
                .iter()
                .find(|e| e.key == prev)
                .and_then(|e| e.confirmed_rid());
            if let Some(to) = back {
                self.emit(
                    to,
                    Message::ProbeFail {
                        key,
                        key_sequence: rest.to_vec(),
                    },
                );
            }
        } else {
            let e = InEntry::unconfirmed(key, rid);
            if let Some(holder) = self.relays.values_mut().find(|x| x.in_set.contains(&e)) {
                holder.in_set.remove(&e);
            }
        }
    }

    pub fn handle_notauthorized(&mut self, mut m: Transmit) {
        let h = m.header;
        let Some(r) = self.relays.get_mut(&h.in_id) else {
            return;
        };
        if r.out.id != Some(h.out_id) || r.level != h.level || !r.out.keys.contains(&h.key) {
            return;
        }
        r.out.keys.remove(&h.key);
        if let Some(k) = r.pick_key() {
            m.header.key = k;
            self.buffer(h.in_id, Message::Transmit(m));
        } else {
            self.purge_unconfirmed_via(h.in_id);
            self.delete_relay(h.in_id);
        }
    }

    pub fn handle_ping(&mut self, id: RelayId, level: u32, sink_rid: Rid, key: Key) {
        let found = self
            .relays
            .values()
            .find(|r| r.out.id == Some(id) && r.out.keys.contains(&key))
            .map(|r| r.id);
        match found {
            Some(rid) => {
                let r = self.relays.get_mut(&rid).expect("found above");
                r.sink_rid = sink_rid;
                if r.level > level + 1 {
                    r.level = level + 1;
                }
                if r.level < level + 1 {
                    self.delete_relay(rid);
                }
            }
            None => {
                let keys = [key].into_iter().collect();
                self.emit(
                    id.rid,
                    Message::InRelayClosed {
                        keys,
                        sender_rid: self.rid,
                        target_id: id,
                    },
                );
            }
        }
    }

    pub fn handle_inrelayclosed(&mut self, keys: &BTreeSet<Key>, _sender: Rid, _id: RelayId) {
        for r in self.relays.values_mut() {
            r.in_set
                .retain(|e| !(keys.contains(&e.key) && matches!(e.origin, Origin::ConfirmedFrom(_))));
        }
    }

    pub fn handle_outrelayclosed(&mut self, id: RelayId) {
        let hits: Vec<RelayId> = self
            .relays
            .values()
            .filter(|r| r.out.id == Some(id))
            .map(|r| r.id)
            .collect();
        for rid in hits {
            self.purge_unconfirmed_via(rid);
            let r = self.relays.get_mut(&rid).expect("listed above");
            r.out.keys.clear();
            r.out.id = None;
            self.delete_relay(rid);
        }
    }

    /// The periodic repair action.
    pub fn timeout(&mut self) {
        let ids: Vec<RelayId> = self.relays.keys().copied().collect();
        for id in ids {
            if self.relays.contains_key(&id) {
                self.timeout_relay(id);
            }
        }
        if !self.owner_alive && self.relays.is_empty() && self.layer_buf.is_empty() {
            self.shut_down = true;
        }
    }

    fn timeout_relay(&mut self, id: RelayId) {
        let me = self.rid;
        {
            let r = self.relays.get_mut(&id).expect("caller checked");
            if r.out.id.is_none() {
                r.level = 0;
                r.sink_rid = me;
                r.out.keys.clear();
            } else if r.level < 1 {
                r.level = 1;
            }
        }
        let r = &self.relays[&id];
        if r.out.id.is_some() && r.out.keys.is_empty() {
            self.delete_relay(id);
        }

        // In-set hygiene: duplicated keys, keys held by another relay, foreign
        // keys, and unconfirmed entries naming a relay this layer lacks. Only a
        // keyed forwarder can carry a parameter, so entries naming anything
        // else are stale.
        let elsewhere: BTreeSet<Key> = self
            .relays
            .values()
            .filter(|x| x.id != id)
            .flat_map(|x| x.in_set.iter().map(|e| e.key))
            .collect();
        let forwarders: BTreeSet<RelayId> = self
            .relays
            .values()
            .filter(|x| x.out.id.is_some() && !x.out.keys.is_empty())
            .map(|x| x.id)
            .collect();
        let r = self.relays.get_mut(&id).expect("still present");
        let snapshot = r.in_set.clone();
        r.in_set.retain(|e| {
            let dup = snapshot.iter().any(|o| o.key == e.key && o != e);
            !(dup || elsewhere.contains(&e.key) || !belongs_to(e.key, me))
        });
        let clock = self.clock;
        for e in r.in_set.iter() {
            if let Some(to) = e.confirmed_rid() {
                self.layer_buf.push((
                    to,
                    Envelope::new(
                        clock,
                        Message::Ping {
                            id,
                            level: r.level,
                            sink_rid: r.sink_rid,
                            key: e.key,
                        },
                    ),
                ));
            }
        }
        r.in_set
            .retain(|e| e.via().is_none_or(|v| forwarders.contains(&v)));

        let pending = self.has_pending_children(id);
        let r = &self.relays[&id];
        if r.state == RelayState::Dead && !pending {
            match r.out.id {
                None if r.buf.is_empty() => {
                    self.relays.remove(&id);
                    return;
                }
                Some(o) if r.buf.is_empty() => {
                    let keys = r.out.keys.clone();
                    self.emit(
                        o.rid,
                        Message::InRelayClosed {
                            keys,
                            sender_rid: me,
                            target_id: o,
                        },
                    );
                    self.relays.remove(&id);
                    return;
                }
                _ => {}
            }
        }
        if !self.owner_alive && r.in_set.is_empty() && r.buf.is_empty() && !pending {
            self.delete_relay(id);
        }

        let r = &self.relays[&id];
        if r.is_alive() {
            let larger_twin = self.relays.values().any(|x| {
                x.id != id && x.is_alive() && x.id > id && x.out.keys.iter().any(|k| r.out.keys.contains(k))
            });
            if larger_twin {
                self.delete_relay(id);
            }
        }

        let r = &self.relays[&id];
        let probing = (self.owner_alive || !r.in_set.is_empty()) && (r.is_alive() || pending);
        if let (true, Some(out_id)) = (probing, r.out.id) {
            let carried: BTreeSet<Key> = r
                .buf
                .iter()
                .filter_map(|e| match &e.msg {
                    Message::Transmit(t) => Some(t.payload.relay_params()),
                    _ => None,
                })
                .flatten()
                .map(|p| p.key)
                .collect();
            let control: BTreeSet<Key> = self
                .relays
                .values()
                .flat_map(|x| x.unconfirmed_via(id))
                .filter(|k| !carried.contains(k))
                .collect();
            let (level, keys) = (r.level, r.out.keys.clone());
            for key in keys {
                let t = Transmit {
                    header: Header {
                        key,
                        in_id: id,
                        out_id,
                        level,
                    },
                    payload: Payload::Probe {
                        control_keys: control.clone(),
                        key_sequence: vec![key],
                    },
                };
                self.buffer(id, Message::Transmit(t));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(n: u32) -> RelayLayer {
        RelayLayer::new(Rid(n))
    }

    /// Wires `a`'s new relay to a fresh sink of `b`, already confirmed.
    fn connect(a: &mut RelayLayer, b: &mut RelayLayer) -> (RelayRef, RelayRef) {
        let sink = b.new_relay().unwrap();
        let key = b.fresh_key();
        let id = a.fresh_id();
        b.relays
            .get_mut(&sink.id())
            .unwrap()
            .in_set
            .insert(InEntry::confirmed(key, a.rid));
        a.relays.insert(
            id,
            Relay::forwarding(id, [key].into_iter().collect(), sink.id(), 1, b.rid),
        );
        (RelayRef::new(id), sink)
    }

    fn take_relay_buf(l: &mut RelayLayer, r: RelayRef) -> Vec<Message> {
        std::mem::take(&mut l.relays.get_mut(&r.id()).unwrap().buf)
            .into_iter()
            .map(|e| e.msg)
            .collect()
    }

    fn take_layer_buf(l: &mut RelayLayer) -> Vec<(Rid, Message)> {
        std::mem::take(&mut l.layer_buf).into_iter().map(|(t, e)| (t, e.msg)).collect()
    }

    #[test]
    fn new_relay_is_a_fresh_sink() {
        let mut a = layer(1);
        let r = a.new_relay().unwrap();
        let s = a.new_relay().unwrap();
        assert_ne!(r, s);
        assert!(a.is_sink(r) && a.direct(r));
        assert_eq!(a.incoming(r), 0);
        assert_eq!(r.id().rid, Rid(1));
    }

    #[test]
    fn new_relay_after_stop_is_noop() {
        let mut a = layer(1);
        a.stop_process();
        assert!(a.new_relay().is_none());
        assert!(a.relays.is_empty());
    }

    #[test]
    fn delete_notifies_each_confirmed_sender_once() {
        let mut a = layer(1);
        let r = a.new_relay().unwrap();
        let x = a.relays.get_mut(&r.id()).unwrap();
        x.in_set.insert(InEntry::confirmed(Key::new(Rid(1), 100), Rid(2)));
        x.in_set.insert(InEntry::confirmed(Key::new(Rid(1), 101), Rid(2)));
        a.delete(r);
        let out = take_layer_buf(&mut a);
        assert_eq!(out, vec![(Rid(2), Message::OutRelayClosed { id: r.id() })]);
        assert!(a.dead(r));
        assert_eq!(a.incoming(r), 0);
    }

    #[test]
    fn delete_of_relay_without_senders_queues_nothing() {
        let mut a = layer(1);
        let r = a.new_relay().unwrap();
        a.delete(r);
        assert!(a.layer_buf.is_empty());
        assert!(a.dead(r));
    }

    #[test]
    fn merge_unions_keys_of_parallel_relays() {
        let mut a = layer(1);
        let mut b = layer(2);
        let (r1, sink) = connect(&mut a, &mut b);
        let k2 = b.fresh_key();
        let id2 = a.fresh_id();
        a.relays.insert(
            id2,
            Relay::forwarding(id2, [k2].into_iter().collect(), sink.id(), 1, Rid(2)),
        );
        let r2 = RelayRef::new(id2);
        assert!(a.same_target(r1, r2));
        let m = a.merge(&[r1, r2]).unwrap();
        let merged = &a.relays[&m.id()];
        assert_eq!(merged.out.keys.len(), 2);
        assert!(a.relays.len() == 1);
    }

    #[test]
    fn merge_with_different_targets_does_nothing() {
        let mut a = layer(1);
        let mut b = layer(2);
        let (r1, _) = connect(&mut a, &mut b);
        let (r2, _) = connect(&mut a, &mut b);
        let before = a.clone();
        assert!(a.merge(&[r1, r2]).is_none());
        assert_eq!(a, before);
    }

    #[test]
    fn send_via_sink_buffers_raw_action() {
        let mut a = layer(1);
        let r = a.new_relay().unwrap();
        let act = Action::new("hello", vec![Param::Value(3)]);
        a.send(r, act.clone());
        assert_eq!(take_relay_buf(&mut a, r), vec![Message::Local(act)]);
    }

    #[test]
    fn send_serializes_local_refs_into_relay_parameters() {
        let mut a = layer(1);
        let mut b = layer(2);
        let (r, _) = connect(&mut a, &mut b);
        let s = a.new_relay().unwrap();
        a.send(r, Action::new("intro", vec![Param::Ref(s)]));
        let sx = &a.relays[&s.id()];
        assert_eq!(sx.in_set.len(), 1);
        let e = *sx.in_set.iter().next().unwrap();
        assert_eq!(e.via(), Some(r.id()));
        let msgs = take_relay_buf(&mut a, r);
        let Message::Transmit(t) = &msgs[0] else { panic!() };
        assert_eq!(
            t.payload,
            Payload::App(Action::new(
                "intro",
                vec![Param::Relay(RelayParameter {
                    key: e.key,
                    id: s.id(),
                    level: 1,
                    sink_rid: Rid(1)
                })]
            ))
        );
        assert_eq!(t.header.level, 1);
    }

    #[test]
    fn send_without_refs_touches_no_in_set() {
        let mut a = layer(1);
        let mut b = layer(2);
        let (r, _) = connect(&mut a, &mut b);
        let s = a.new_relay().unwrap();
        a.send(r, Action::new("data", vec![Param::Value(1)]));
        assert!(a.relays[&s.id()].in_set.is_empty());
    }

    #[test]
    fn activation_probe_confirms_pending_entry() {
        let mut a = layer(1);
        let mut b = layer(2);
        let (r, _) = connect(&mut a, &mut b);
        let s = a.new_relay().unwrap();
        a.send(r, Action::new("intro", vec![Param::Ref(s)]));
        let Message::Transmit(t) = take_relay_buf(&mut a, r).remove(0) else { panic!() };
        b.handle_transmit(t);
        let local: Vec<RelayRef> = b.get_relays().into_iter().filter(|x| !b.is_sink(*x)).collect();
        assert_eq!(local.len(), 1);
        let Message::Transmit(probe) = take_relay_buf(&mut b, local[0]).remove(0) else { panic!() };
        assert!(probe.is_probe());
        a.handle_transmit(probe);
        let e = *a.relays[&s.id()].in_set.iter().next().unwrap();
        assert_eq!(e.confirmed_rid(), Some(Rid(2)));
    }

    #[test]
    fn transmit_to_missing_local_relay_replies_outrelayclosed() {
        let mut a = layer(1);
        let t = Transmit {
            header: Header {
                key: Key::new(Rid(1), 0),
                in_id: RelayId::new(Rid(2), 5),
                out_id: RelayId::new(Rid(1), 9),
                level: 1,
            },
            payload: Payload::App(Action::new("x", vec![])),
        };
        a.handle_transmit(t);
        assert_eq!(
            take_layer_buf(&mut a),
            vec![(Rid(2), Message::OutRelayClosed { id: RelayId::new(Rid(1), 9) })]
        );
    }

    #[test]
    fn transmit_with_unknown_key_replies_notauthorized() {
        let mut a = layer(1);
        let r = a.new_relay().unwrap();
        let t = Transmit {
            header: Header {
                key: Key::new(Rid(1), 77),
                in_id: RelayId::new(Rid(2), 5),
                out_id: r.id(),
                level: 1,
            },
            payload: Payload::App(Action::new("x", vec![])),
        };
        a.handle_transmit(t.clone());
        assert_eq!(take_layer_buf(&mut a), vec![(Rid(2), Message::NotAuthorized(t))]);
    }

    #[test]
    fn probefail_with_single_key_removes_pending_entry() {
        let mut a = layer(1);
        let mut b = layer(2);
        let (r, _) = connect(&mut a, &mut b);
        let s = a.new_relay().unwrap();
        a.send(r, Action::new("intro", vec![Param::Ref(s)]));
        let key = a.relays[&s.id()].in_set.iter().next().unwrap().key;
        let out_key = a.relays[&r.id()].pick_key().unwrap();
        a.handle_probefail(key, &[out_key]);
        assert!(a.relays[&s.id()].in_set.is_empty());
    }

    #[test]
    fn probefail_with_longer_sequence_is_forwarded_shorter() {
        let mut a = layer(1);
        let mut b = layer(2);
        let (r, sink) = connect(&mut a, &mut b);
        let back_key = b.relays[&sink.id()].in_set.iter().next().unwrap().key;
        let _ = r;
        // b owns a relay with out key `k3`, whose own In holds `back_key` from p1.
        let k3 = Key::new(Rid(3), 0);
        let id = b.fresh_id();
        b.relays.insert(id, Relay::forwarding(id, [k3].into_iter().collect(), RelayId::new(Rid(3), 0), 1, Rid(3)));
        let moved = b.relays.get_mut(&sink.id()).unwrap().in_set.pop_first().unwrap();
        b.relays.get_mut(&id).unwrap().in_set.insert(moved);
        let k0 = Key::new(Rid(9), 9);
        b.handle_probefail(k0, &[Key::new(Rid(1), 50), back_key, k3]);
        assert_eq!(
            take_layer_buf(&mut b),
            vec![(
                Rid(1),
                Message::ProbeFail {
                    key: k0,
                    key_sequence: vec![Key::new(Rid(1), 50), back_key]
                }
            )]
        );
    }

    #[test]
    fn probefail_with_unmatched_last_key_is_ignored() {
        let mut a = layer(1);
        let before = a.clone();
        a.handle_probefail(Key::new(Rid(1), 0), &[Key::new(Rid(5), 5)]);
        assert_eq!(a, before);
    }

    fn notauthorized_for(a: &RelayLayer, r: RelayRef, key: Key) -> Transmit {
        let x = &a.relays[&r.id()];
        Transmit {
            header: Header {
                key,
                in_id: x.id,
                out_id: x.out.id.unwrap(),
                level: x.level,
            },
            payload: Payload::App(Action::new("x", vec![])),
        }
    }

    #[test]
    fn notauthorized_switches_to_remaining_key() {
        let mut a = layer(1);
        let mut b = layer(2);
        let (r, _) = connect(&mut a, &mut b);
        let k1 = a.relays[&r.id()].pick_key().unwrap();
        let k2 = Key::new(Rid(2), 99);
        a.relays.get_mut(&r.id()).unwrap().out.keys.insert(k2);
        let m = notauthorized_for(&a, r, k1);
        a.handle_notauthorized(m);
        let x = &a.relays[&r.id()];
        assert_eq!(x.out.keys, [k2].into_iter().collect());
        let Message::Transmit(t) = &x.buf[0].msg else { panic!() };
        assert_eq!(t.header.key, k2);
    }

    #[test]
    fn notauthorized_on_last_key_deletes_and_purges() {
        let mut a = layer(1);
        let mut b = layer(2);
        let (r, _) = connect(&mut a, &mut b);
        let s = a.new_relay().unwrap();
        a.send(r, Action::new("intro", vec![Param::Ref(s)]));
        let k1 = a.relays[&r.id()].pick_key().unwrap();
        let m = notauthorized_for(&a, r, k1);
        a.handle_notauthorized(m);
        assert!(a.dead(r));
        assert!(a.relays[&s.id()].in_set.is_empty());
    }

    #[test]
    fn stale_notauthorized_with_wrong_level_is_ignored() {
        let mut a = layer(1);
        let mut b = layer(2);
        let (r, _) = connect(&mut a, &mut b);
        let k1 = a.relays[&r.id()].pick_key().unwrap();
        let mut m = notauthorized_for(&a, r, k1);
        m.header.level = 7;
        let before = a.clone();
        a.handle_notauthorized(m);
        assert_eq!(a, before);
    }

    #[test]
    fn ping_lowers_level() {
        let mut a = layer(1);
        let mut b = layer(2);
        let (r, sink) = connect(&mut a, &mut b);
        a.relays.get_mut(&r.id()).unwrap().level = 5;
        let k = a.relays[&r.id()].pick_key().unwrap();
        a.handle_ping(sink.id(), 1, Rid(2), k);
        assert_eq!(a.relays[&r.id()].level, 2);
    }

    #[test]
    fn ping_with_higher_level_deletes() {
        let mut a = layer(1);
        let mut b = layer(2);
        let (r, sink) = connect(&mut a, &mut b);
        let k = a.relays[&r.id()].pick_key().unwrap();
        a.handle_ping(sink.id(), 3, Rid(2), k);
        assert!(a.dead(r));
    }

    #[test]
    fn ping_without_matching_relay_replies_inrelayclosed() {
        let mut a = layer(1);
        let k = Key::new(Rid(2), 3);
        let id = RelayId::new(Rid(2), 0);
        a.handle_ping(id, 0, Rid(2), k);
        assert_eq!(
            take_layer_buf(&mut a),
            vec![(
                Rid(2),
                Message::InRelayClosed {
                    keys: [k].into_iter().collect(),
                    sender_rid: Rid(1),
                    target_id: id
                }
            )]
        );
    }

    #[test]
    fn inrelayclosed_removes_only_confirmed_entries() {
        let mut a = layer(1);
        let r = a.new_relay().unwrap();
        let kc = Key::new(Rid(1), 10);
        let ku = Key::new(Rid(1), 11);
        let x = a.relays.get_mut(&r.id()).unwrap();
        x.in_set.insert(InEntry::confirmed(kc, Rid(2)));
        x.in_set.insert(InEntry::unconfirmed(ku, r.id()));
        a.handle_inrelayclosed(&[kc, ku].into_iter().collect(), Rid(2), r.id());
        let left: Vec<InEntry> = a.relays[&r.id()].in_set.iter().copied().collect();
        assert_eq!(left, vec![InEntry::unconfirmed(ku, r.id())]);
        let before = a.clone();
        a.handle_inrelayclosed(&BTreeSet::new(), Rid(2), r.id());
        assert_eq!(a, before);
    }

    #[test]
    fn outrelayclosed_kills_relay_and_pending_children() {
        let mut a = layer(1);
        let mut b = layer(2);
        let (r, sink) = connect(&mut a, &mut b);
        let s = a.new_relay().unwrap();
        a.send(r, Action::new("intro", vec![Param::Ref(s)]));
        a.handle_outrelayclosed(sink.id());
        assert!(a.dead(r));
        assert_eq!(a.incoming(r), 0);
        assert!(a.relays[&s.id()].in_set.is_empty());
        let before = a.clone();
        a.handle_outrelayclosed(RelayId::new(Rid(7), 7));
        assert_eq!(a, before);
    }

    #[test]
    fn timeout_resets_sink_level() {
        let mut a = layer(1);
        let r = a.new_relay().unwrap();
        a.relays.get_mut(&r.id()).unwrap().level = 4;
        a.timeout();
        assert_eq!(a.relays[&r.id()].level, 0);
    }

    #[test]
    fn timeout_deletes_keyless_forwarder() {
        let mut a = layer(1);
        let id = a.fresh_id();
        a.relays.insert(
            id,
            Relay::forwarding(id, BTreeSet::new(), RelayId::new(Rid(2), 0), 1, Rid(2)),
        );
        a.timeout();
        assert!(a.dead(RelayRef::new(id)));
    }

    #[test]
    fn stopped_layer_drains_and_shuts_down() {
        let mut a = layer(1);
        let mut b = layer(2);
        let (r, _) = connect(&mut a, &mut b);
        let s = a.new_relay().unwrap();
        a.stop_process();
        assert!(a.dead(s));
        assert!(!a.dead(r));
        for _ in 0..4 {
            a.timeout();
            a.layer_buf.clear();
        }
        assert!(a.relays.is_empty());
        assert!(a.shut_down);
    }

    #[test]
    fn idle_stopped_layer_shuts_down_on_next_timeout() {
        let mut a = layer(1);
        a.stop_process();
        a.timeout();
        assert!(a.shut_down);
    }

    #[test]
    fn primitives_after_stop_change_nothing() {
        let mut a = layer(1);
        let mut b = layer(2);
        let (r, _) = connect(&mut a, &mut b);
        a.stop_process();
        let before = a.clone();
        a.send(r, Action::new("x", vec![]));
        a.delete(r);
        assert!(a.merge(&[r]).is_none());
        assert!(a.new_relay().is_none());
        assert_eq!(a, before);
    }

    #[test]
    fn foreign_refs_are_ignored() {
        let mut a = layer(1);
        let mut b = layer(2);
        let rb = b.new_relay().unwrap();
        let before = a.clone();
        a.delete(rb);
        a.send(rb, Action::new("x", vec![]));
        assert_eq!(a, before);
        assert!(a.dead(rb));
        assert_eq!(a.incoming(rb), 0);
    }

    #[test]
    fn timeout_emits_probe_per_out_key() {
        let mut a = layer(1);
        let mut b = layer(2);
        let (r, _) = connect(&mut a, &mut b);
        a.timeout();
        let msgs = take_relay_buf(&mut a, r);
        assert_eq!(msgs.len(), 1);
        assert_eq!(msgs[0].kind(), "probe");
    }

    #[test]
    fn timeout_pings_confirmed_senders() {
        let mut a = layer(1);
        let mut b = layer(2);
        let (_, sink) = connect(&mut a, &mut b);
        b.timeout();
        let out = take_layer_buf(&mut b);
        assert_eq!(out.len(), 1);
        let (to, Message::Ping { id, level, .. }) = &out[0] else { panic!() };
        assert_eq!((*to, *id, *level), (Rid(1), sink.id(), 0));
    }
}

//! Global system state: processes and their relay layers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ids::{RelayId, Rid};
use crate::layer::RelayLayer;
use crate::message::Envelope;
use crate::relay::Relay;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessInfo {
    pub leaving: bool,
    pub active: bool,
}

/// Where a buffered message currently sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Locator {
    Relay(RelayId, usize),
    Layer(Rid, usize),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldState {
    pub processes: BTreeMap<Rid, ProcessInfo>,
    pub layers: BTreeMap<Rid, RelayLayer>,
    pub step_count: u64,
}

impl WorldState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers an active process with an empty relay layer.
    pub fn add_process(&mut self, rid: Rid, leaving: bool) -> &mut RelayLayer {
        self.processes.insert(rid, ProcessInfo { leaving, active: true });
        self.layers.entry(rid).or_insert_with(|| RelayLayer::new(rid))
    }

    pub fn relay(&self, id: RelayId) -> Option<&Relay> {
        self.layers.get(&id.rid)?.relays.get(&id)
    }

    pub fn relay_mut(&mut self, id: RelayId) -> Option<&mut Relay> {
        self.layers.get_mut(&id.rid)?.relays.get_mut(&id)
    }

    pub fn relays(&self) -> impl Iterator<Item = &Relay> {
        self.layers.values().flat_map(|l| l.relays.values())
    }

    pub fn is_active(&self, rid: Rid) -> bool {
        self.processes.get(&rid).is_some_and(|p| p.active)
    }

    pub fn active_processes(&self) -> impl Iterator<Item = Rid> + '_ {
        self.processes.iter().filter(|(_, p)| p.active).map(|(r, _)| *r)
    }

    /// Every buffered message in the system, relay buffers first.
    pub fn in_flight(&self) -> impl Iterator<Item = (Locator, &Envelope)> {
        let relay_msgs = self
            .relays()
            .flat_map(|r| r.buf.iter().enumerate().map(move |(i, e)| (Locator::Relay(r.id, i), e)));
        let layer_msgs = self.layers.values().flat_map(|l| {
            l.layer_buf
                .iter()
                .enumerate()
                .map(move |(i, (_, e))| (Locator::Layer(l.rid, i), e))
        });
        relay_msgs.chain(layer_msgs)
    }

    pub fn message_count(&self) -> usize {
        self.relays().map(|r| r.buf.len()).sum::<usize>()
            + self.layers.values().map(|l| l.layer_buf.len()).sum::<usize>()
    }

    /// Stable 64-bit digest of the full state.
    pub fn digest(&self) -> u64 {
        fnv1a(format!("{self:?}").as_bytes())
    }
}

/// FNV-1a; stable across runs and platforms.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_of_empty_is_offset_basis() {
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_ne!(fnv1a(b"a"), fnv1a(b"b"));
    }

    #[test]
    fn add_process_creates_layer() {
        let mut w = WorldState::new();
        w.add_process(Rid(3), true);
        assert!(w.is_active(Rid(3)));
        assert!(w.processes[&Rid(3)].leaving);
        assert_eq!(w.layers[&Rid(3)].rid, Rid(3));
        assert_eq!(w.message_count(), 0);
    }

    #[test]
    fn digest_tracks_changes() {
        let mut w = WorldState::new();
        w.add_process(Rid(1), false);
        let d = w.digest();
        w.layers.get_mut(&Rid(1)).unwrap().new_relay();
        assert_ne!(d, w.digest());
    }
}

//! The relay record and its incoming-permission entries.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::ids::{Key, RelayId, Rid};
use crate::message::Envelope;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RelayState {
    Alive,
    Dead,
}

/// Second and third component of an `In` triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Origin {
    /// `(key, RID, ⊥)`
    ConfirmedFrom(Rid),
    /// `(key, ⊥, r')` where `r'` is the local relay the key was sent through.
    UnconfirmedVia(RelayId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InEntry {
    pub key: Key,
    pub origin: Origin,
}

impl InEntry {
    pub fn confirmed(key: Key, rid: Rid) -> Self {
        InEntry {
            key,
            origin: Origin::ConfirmedFrom(rid),
        }
    }

    pub fn unconfirmed(key: Key, via: RelayId) -> Self {
        InEntry {
            key,
            origin: Origin::UnconfirmedVia(via),
        }
    }

    pub fn confirmed_rid(&self) -> Option<Rid> {
        match self.origin {
            Origin::ConfirmedFrom(r) => Some(r),
            Origin::UnconfirmedVia(_) => None,
        }
    }

    pub fn via(&self) -> Option<RelayId> {
        match self.origin {
            Origin::UnconfirmedVia(r) => Some(r),
            Origin::ConfirmedFrom(_) => None,
        }
    }
}

/// `r.out = (Key, ID)`; `id == None` marks a sink.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Out {
    #[serde(rename = "Key")]
    pub keys: BTreeSet<Key>,
    #[serde(rename = "ID")]
    pub id: Option<RelayId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relay {
    pub id: RelayId,
    pub state: RelayState,
    pub out: Out,
    pub level: u32,
    #[serde(rename = "sinkRID")]
    pub sink_rid: Rid,
    #[serde(rename = "In")]
    pub in_set: BTreeSet<InEntry>,
    #[serde(rename = "Buf")]
    pub buf: Vec<Envelope>,
}

impl Relay {
    /// Fresh sink relay owned by `id.rid`.
    pub fn sink(id: RelayId) -> Self {
        Relay {
            id,
            state: RelayState::Alive,
            out: Out::default(),
            level: 0,
            sink_rid: id.rid,
            in_set: BTreeSet::new(),
            buf: Vec::new(),
        }
    }

    /// Relay whose outgoing connection is `(keys, out_id)`.
    pub fn forwarding(id: RelayId, keys: BTreeSet<Key>, out_id: RelayId, level: u32, sink_rid: Rid) -> Self {
        Relay {
            id,
            state: RelayState::Alive,
            out: Out {
                keys,
                id: Some(out_id),
            },
            level,
            sink_rid,
            in_set: BTreeSet::new(),
            buf: Vec::new(),
        }
    }

    pub fn is_alive(&self) -> bool {
        self.state == RelayState::Alive
    }

    pub fn is_sink_shape(&self) -> bool {
        self.out.id.is_none()
    }

    /// Keys of `In` entries that were sent via `via` and are still unconfirmed.
    pub fn unconfirmed_via(&self, via: RelayId) -> impl Iterator<Item = Key> + '_ {
        self.in_set
            .iter()
            .filter(move |e| e.origin == Origin::UnconfirmedVia(via))
            .map(|e| e.key)
    }

    /// Minimum out key; the deterministic choice for "an arbitrary key".
    pub fn pick_key(&self) -> Option<Key> {
        self.out.keys.iter().next().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sink_constructor_matches_fresh_relay_shape() {
        let r = Relay::sink(RelayId::new(Rid(2), 0));
        assert!(r.is_alive());
        assert!(r.is_sink_shape());
        assert_eq!(r.level, 0);
        assert_eq!(r.sink_rid, Rid(2));
        assert!(r.in_set.is_empty() && r.out.keys.is_empty() && r.buf.is_empty());
    }

    #[test]
    fn serialized_field_names_follow_relay_symbols() {
        let r = Relay::sink(RelayId::new(Rid(2), 0));
        let v = serde_json::to_value(&r).unwrap();
        for f in ["id", "state", "out", "level", "sinkRID", "In", "Buf"] {
            assert!(v.get(f).is_some(), "missing {f}");
        }
    }

    #[test]
    fn entry_forms_are_exclusive() {
        let k = Key::new(Rid(1), 0);
        let c = InEntry::confirmed(k, Rid(4));
        let u = InEntry::unconfirmed(k, RelayId::new(Rid(1), 3));
        assert_eq!((c.confirmed_rid(), c.via()), (Some(Rid(4)), None));
        assert_eq!((u.confirmed_rid(), u.via()), (None, Some(RelayId::new(Rid(1), 3))));
    }

    #[test]
    fn pick_key_is_minimum() {
        let keys: BTreeSet<Key> = [Key::new(Rid(2), 5), Key::new(Rid(2), 1)].into_iter().collect();
        let r = Relay::forwarding(RelayId::new(Rid(1), 0), keys, RelayId::new(Rid(2), 0), 1, Rid(2));
        assert_eq!(r.pick_key(), Some(Key::new(Rid(2), 1)));
    }
}

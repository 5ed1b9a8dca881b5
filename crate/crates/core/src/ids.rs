//! Identifiers: relay-layer addresses, relay ids, keys and relay handles.
//!
//! Relay ids and keys are `(creator, serial)` pairs. Every relay layer owns a
//! monotonic counter for each, so uniqueness follows from address uniqueness.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Globally unique address of a relay layer. One process per layer, so this
/// doubles as the process identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Rid(pub u32);

impl fmt::Display for Rid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

/// Globally unique relay identifier; embeds the owner's [`Rid`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelayId {
    pub rid: Rid,
    pub serial: u64,
}

impl RelayId {
    pub fn new(rid: Rid, serial: u64) -> Self {
        RelayId { rid, serial }
    }
}

impl fmt::Display for RelayId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}.{}", self.rid.0, self.serial)
    }
}

/// Unforgeable access token. The creator part lets a layer decide whether it
/// generated a key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Key {
    pub creator: Rid,
    pub serial: u64,
}

impl Key {
    pub fn new(creator: Rid, serial: u64) -> Self {
        Key { creator, serial }
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "k{}.{}", self.creator.0, self.serial)
    }
}

/// The address embedded in a relay id.
pub fn rid_of(id: RelayId) -> Rid {
    id.rid
}

/// True iff `key` was generated by the layer at `rid`.
pub fn belongs_to(key: Key, rid: Rid) -> bool {
    key.creator == rid
}

/// Dark handle to a relay, usable only through the owning layer's primitives.
///
/// The wrapped id is private; processes cannot read relay state through it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelayRef(RelayId);

impl RelayRef {
    pub(crate) fn new(id: RelayId) -> Self {
        RelayRef(id)
    }

    pub(crate) fn id(self) -> RelayId {
        self.0
    }

    /// Handles are plain values; harness code that already has omniscient
    /// access (oracles, builders) may rebuild one from an id.
    pub fn from_id(id: RelayId) -> Self {
        RelayRef(id)
    }

    /// Omniscient view of the referenced id, for tests and the harness.
    pub fn peek_id(self) -> RelayId {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rid_of_projects_owner() {
        let a = Rid(1);
        assert_eq!(rid_of(RelayId::new(a, 7)), a);
        assert_eq!(rid_of(RelayId::new(a, 7)), rid_of(RelayId::new(a, 8)));
    }

    #[test]
    fn belongs_to_checks_creator() {
        let k = Key::new(Rid(1), 3);
        assert!(belongs_to(k, Rid(1)));
        assert!(!belongs_to(k, Rid(2)));
    }

    #[test]
    fn keys_order_by_creator_then_serial() {
        assert!(Key::new(Rid(1), 9) < Key::new(Rid(2), 0));
        assert!(Key::new(Rid(1), 1) < Key::new(Rid(1), 2));
    }
}

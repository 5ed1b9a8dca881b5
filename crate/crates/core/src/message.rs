//! Message shapes: application actions, transmit headers, and the relay-layer
//! control messages.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::ids::{Key, RelayId, RelayRef, Rid};

/// Serialized relay reference: `(key, id, level, sinkRID)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelayParameter {
    pub key: Key,
    pub id: RelayId,
    pub level: u32,
    #[serde(rename = "sinkRID")]
    pub sink_rid: Rid,
}

/// One action parameter. `Ref` is the local (process-side) form of a relay
/// reference and `Relay` its serialized form while in transit.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Param {
    Value(u64),
    Ref(RelayRef),
    Relay(RelayParameter),
    Null,
}

/// Remote method invocation `label(params)`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Action {
    pub label: String,
    pub params: Vec<Param>,
}

impl Action {
    pub fn new(label: impl Into<String>, params: Vec<Param>) -> Self {
        Action {
            label: label.into(),
            params,
        }
    }

    pub fn relay_params(&self) -> impl Iterator<Item = &RelayParameter> {
        self.params.iter().filter_map(|p| match p {
            Param::Relay(rp) => Some(rp),
            _ => None,
        })
    }

    pub fn refs(&self) -> impl Iterator<Item = RelayRef> + '_ {
        self.params.iter().filter_map(|p| match p {
            Param::Ref(r) => Some(*r),
            _ => None,
        })
    }

    /// The `i`-th parameter as a value, if it is one.
    pub fn value(&self, i: usize) -> Option<u64> {
        match self.params.get(i) {
            Some(Param::Value(v)) => Some(*v),
            _ => None,
        }
    }

    /// The `i`-th parameter as a local relay reference, if it is one.
    pub fn relay_ref(&self, i: usize) -> Option<RelayRef> {
        match self.params.get(i) {
            Some(Param::Ref(r)) => Some(*r),
            _ => None,
        }
    }
}

/// `(key, inID, outID, level)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Header {
    pub key: Key,
    pub in_id: RelayId,
    pub out_id: RelayId,
    pub level: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Payload {
    App(Action),
    Probe {
        control_keys: BTreeSet<Key>,
        key_sequence: Vec<Key>,
    },
}

impl Payload {
    pub fn relay_params(&self) -> Vec<RelayParameter> {
        match self {
            Payload::App(a) => a.relay_params().copied().collect(),
            Payload::Probe { .. } => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Transmit {
    pub header: Header,
    pub payload: Payload,
}

impl Transmit {
    pub fn is_probe(&self) -> bool {
        matches!(self.payload, Payload::Probe { .. })
    }

    pub fn carries_param_key(&self, key: Key) -> bool {
        match &self.payload {
            Payload::App(a) => a.relay_params().any(|p| p.key == key),
            Payload::Probe { .. } => false,
        }
    }
}

/// Everything that can sit in a buffer.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Message {
    Transmit(Transmit),
    /// Action handed to the owning process by a sink relay.
    Local(Action),
    ProbeFail {
        key: Key,
        key_sequence: Vec<Key>,
    },
    NotAuthorized(Transmit),
    InRelayClosed {
        keys: BTreeSet<Key>,
        sender_rid: Rid,
        target_id: RelayId,
    },
    OutRelayClosed {
        id: RelayId,
    },
    Ping {
        id: RelayId,
        level: u32,
        sink_rid: Rid,
        key: Key,
    },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Transmit(t) if t.is_probe() => "probe",
            Message::Transmit(_) => "transmit",
            Message::Local(_) => "local",
            Message::ProbeFail { .. } => "probefail",
            Message::NotAuthorized(_) => "notauthorized",
            Message::InRelayClosed { .. } => "inrelayclosed",
            Message::OutRelayClosed { .. } => "outrelayclosed",
            Message::Ping { .. } => "ping",
        }
    }
}

/// A buffered message with the step at which it was inserted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub born: u64,
    pub msg: Message,
}

impl Envelope {
    pub fn new(born: u64, msg: Message) -> Self {
        Envelope { born, msg }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relay_parameter_roundtrip() {
        let p = RelayParameter {
            key: Key::new(Rid(3), 11),
            id: RelayId::new(Rid(3), 4),
            level: 2,
            sink_rid: Rid(5),
        };
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("sinkRID"));
        let back: RelayParameter = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn probe_kind_is_distinguished() {
        let h = Header {
            key: Key::new(Rid(1), 1),
            in_id: RelayId::new(Rid(1), 1),
            out_id: RelayId::new(Rid(2), 1),
            level: 1,
        };
        let probe = Message::Transmit(Transmit {
            header: h,
            payload: Payload::Probe {
                control_keys: BTreeSet::new(),
                key_sequence: vec![h.key],
            },
        });
        let app = Message::Transmit(Transmit {
            header: h,
            payload: Payload::App(Action::new("x", vec![])),
        });
        assert_eq!(probe.kind(), "probe");
        assert_eq!(app.kind(), "transmit");
    }
}

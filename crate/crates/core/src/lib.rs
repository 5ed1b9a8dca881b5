//! Self-stabilizing relay layer simulated over an asynchronous, weakly fair
//! network, with omniscient validity oracles, topology rewriting rules and a
//! departure protocol built on top.

pub mod apps;
pub mod build;
pub mod dot;
pub mod fdp;
pub mod ifr;
pub mod ids;
pub mod layer;
pub mod message;
pub mod oracle;
pub mod relay;
pub mod scenario;
pub mod sim;
pub mod suites;
pub mod world;

pub use ids::{belongs_to, rid_of, Key, RelayId, RelayRef, Rid};
pub use layer::RelayLayer;
pub use message::{Action, Envelope, Header, Message, Param, Payload, RelayParameter, Transmit};
pub use relay::{InEntry, Origin, Out, Relay, RelayState};

//! Aggregation-capable publish/subscribe over a key-based routing overlay,
//! with tiered event storage, packaged as a deterministic simulated deployment.
//!
//! The crate is organised around a single-threaded discrete-event kernel
//! ([`simnet`]): every node action runs as a callback on the kernel's virtual
//! clock, so a `(config, seed)` pair fully determines a run. On top of the
//! kernel sit:
//!
//! * [`vocabulary`] — hierarchical concept registration with prefix-structured
//!   numeric identifiers and wildcard patterns,
//! * [`events`] — typed attribute values, template descriptors and the
//!   bit-exact wire codec for template/data messages,
//! * [`aggregation`] — filters, attribute discards and per-operator
//!   accumulators with re-aggregation support,
//! * [`overlay`] — ring routing to the numerically closest node id,
//! * [`pubsub`] — multicast trees with per-child filtering/aggregation state,
//! * [`reply`] — Bloom-superposed reverse paths and the per-node short-term
//!   buffer that replies match against,
//! * [`store`] — the partitioned working store with multi-attribute range
//!   lookup, retention management and legacy indirections,
//! * [`sim`] — the node runtime gluing the above into message handlers,
//! * [`scenario`] — the DDoS validation harness driving sensor/detector/
//!   remediator agents and collecting metrics.
//!
//! The crate is `no_std` + `alloc`; all IO (config files, metrics documents,
//! trace files, the CLI) lives in the companion `disco` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod aggregation;
pub mod events;
pub mod overlay;
pub mod pubsub;
pub mod reply;
pub mod rng;
pub mod scenario;
pub mod sim;
pub mod simnet;
pub mod store;
pub mod vocabulary;
pub mod wire;

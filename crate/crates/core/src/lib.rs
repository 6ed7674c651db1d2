//! Federated learning with a deterministic cost simulator for
//! heterogeneous device fleets.
//!
//! The pieces, bottom up:
//!
//! - [`codec`], [`tensor`], [`config`]: canonical big-endian encodings for
//!   tensors and typed key/value maps — the payloads everything exchanges.
//! - [`protocol`]: the framed wire protocol and handshake, speakable over
//!   any byte channel.
//! - [`head`]: the softmax classification head clients train locally.
//! - [`client`]: shard-holding training client plus its in-process proxy.
//! - [`strategy`], [`server`]: pluggable aggregation policies and the
//!   synchronous round loop, which treats in-process and remote clients
//!   identically through one proxy interface.
//! - [`sim`]: synthetic datasets, partitioning, and virtual time/energy
//!   accounting for fleets of unequal devices.
//! - [`net`]: the TCP transport for servers and clients.
//! - [`harness`]: JSON experiment configs, factor sweeps, CSV metrics.
//!
//! Determinism is load-bearing throughout: one config document (seeds
//! included) yields byte-identical metrics in either execution mode.

pub mod client;
pub mod codec;
pub mod config;
pub mod harness;
pub mod head;
pub mod net;
pub mod protocol;
pub mod seed;
pub mod server;
pub mod sim;
pub mod strategy;
pub mod tensor;

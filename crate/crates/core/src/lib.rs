//! Non-blocking, selector-driven channels carried by a worker/endpoint
//! tagged-message transport, plus the throughput and latency benchmark
//! harness built on top of them.
//!
//! Layering, bottom up:
//!
//! * [`ringbuf`]: outgoing ring with contiguous region reservation.
//! * [`transport`]: workers progressing endpoints over a loopback or TCP backend.
//! * [`channel`]: `Channel`, `ServerChannel` and `Selector`, one worker per channel.
//! * [`facade`]: socket-attribute view of a channel.
//! * [`bench`] and [`cli`]: the two-sided micro-benchmarks.

pub mod ringbuf;
pub mod transport;
pub mod channel;
pub mod facade;
pub mod bench;
pub mod cli;

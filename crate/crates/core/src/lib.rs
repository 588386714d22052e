//! A user-space TCP/IP stack built from communicating tasks.
//!
//! Each protocol layer runs as its own packet-dealer loop that reads from a
//! bounded queue, classifies what it reads and forwards it to the queue
//! bound for that key. Layers share no state beyond these queues and the
//! binding registries that map demultiplexing keys to them.
//!
//! ```no_run
//! use cspnet::{create_wire_pair, ImpairmentProfile, Stack, StackConfig};
//! use std::time::Duration;
//!
//! # async fn demo() -> cspnet::Result<()> {
//! let (a, b) = create_wire_pair(ImpairmentProfile::lossless());
//! let left = Stack::up_with_device(StackConfig::emulated_host(1), a)?;
//! let right = Stack::up_with_device(StackConfig::emulated_host(2), b)?;
//! let stats = left.ping(right.ip(), 5, Duration::from_millis(10), 56).await?;
//! assert_eq!(stats.received, 5);
//! left.down().await?;
//! right.down().await?;
//! # Ok(()) }
//! ```

pub mod arp;
pub mod config;
pub mod csp;
pub mod error;
pub mod ethernet;
pub mod icmp;
pub mod ipv4;
pub mod link;
pub mod stack;
pub mod stats;
pub mod tcp;
pub mod udp;
pub mod wire;

pub use config::{DeviceConfig, StackConfig};
pub use csp::{BindingRegistry, MessageQueue, TaskCensus};
pub use error::{Error, Result};
pub use icmp::PingStats;
pub use link::{create_wire_pair, create_wire_pair_with, open_tap, ImpairmentProfile, LinkDevice};
pub use stack::Stack;
pub use stats::StackStats;
pub use tcp::{TcbState, TcpListener, TcpStream};
pub use udp::{UdpMessage, UdpSocket};
pub use wire::MacAddr;

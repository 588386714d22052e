//! Datagram sockets behind the UDP packet dealer.

use std::net::{Ipv4Addr, SocketAddrV4};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;

use crate::csp::{BindingRegistry, MessageQueue, TrySendError};
use crate::error::{Error, Result};
use crate::ipv4::{IpDelivery, Ipv4Layer};
use crate::stats::Counters;
use crate::wire::{UdpDatagram, WireError, PROTO_UDP, UDP_MAX_PAYLOAD};

pub const EPHEMERAL_FIRST: u16 = 49152;
pub const EPHEMERAL_LAST: u16 = 65535;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UdpMessage {
    pub src: SocketAddrV4,
    pub payload: Vec<u8>,
}

pub struct UdpLayer {
    ip: Arc<Ipv4Layer>,
    inbound: MessageQueue<IpDelivery>,
    ports: Arc<BindingRegistry<u16, UdpMessage>>,
    next_ephemeral: Mutex<u16>,
    socket_capacity: usize,
    counters: Arc<Counters>,
}

impl UdpLayer {
    pub(crate) fn new(
        ip: Arc<Ipv4Layer>,
        queue_capacity: usize,
        counters: Arc<Counters>,
    ) -> Result<Self> {
        Ok(UdpLayer {
            ip,
            inbound: MessageQueue::new(queue_capacity)?,
            ports: Arc::new(BindingRegistry::new()),
            next_ephemeral: Mutex::new(EPHEMERAL_FIRST),
            socket_capacity: queue_capacity,
            counters,
        })
    }

    pub(crate) fn inbound(&self) -> &MessageQueue<IpDelivery> {
        &self.inbound
    }

    pub fn ports(&self) -> &Arc<BindingRegistry<u16, UdpMessage>> {
        &self.ports
    }

    /// Binds `port`, or an ephemeral port when `port` is 0.
    pub fn bind(self: &Arc<Self>, port: u16) -> Result<UdpSocket> {
        if self.inbound.is_closed() {
            return Err(Error::NotRunning);
        }
        let cap = self.socket_capacity;
        let make = || MessageQueue::new(cap).expect("capacity validated");
        let (port, queue) = if port != 0 {
            (port, self.ports.bind_with(port, make)?)
        } else {
            let mut next = self.next_ephemeral.lock();
            let span = u32::from(EPHEMERAL_LAST - EPHEMERAL_FIRST) + 1;
            let mut found = None;
            for _ in 0..span {
                let candidate = *next;
                *next = if candidate == EPHEMERAL_LAST {
                    EPHEMERAL_FIRST
                } else {
                    candidate + 1
                };
                if let Ok(q) = self.ports.bind_with(candidate, make) {
                    found = Some((candidate, q));
                    break;
                }
            }
            found.ok_or(Error::PortsExhausted)?
        };
        Ok(UdpSocket {
            layer: self.clone(),
            port,
            queue,
            closed: AtomicBool::new(false),
        })
    }

    /// The UDP dealer. Socket queues are fed without blocking: a full socket
    /// loses the newest datagram instead of stalling the layers below.
    pub(crate) async fn run_dealer(self: Arc<Self>) {
        while let Ok(d) = self.inbound.recv().await {
            let dgram = match UdpDatagram::decode(&d.payload, d.src, d.dst) {
                Ok(u) => u,
                Err(_) => {
                    Counters::bump(&self.counters.udp_decode_error);
                    continue;
                }
            };
            let Some(queue) = self.ports.lookup(&dgram.dst_port) else {
                self.ports.count_unbound();
                Counters::bump(&self.counters.udp_unbound_port);
                continue;
            };
            let msg = UdpMessage {
                src: SocketAddrV4::new(d.src, dgram.src_port),
                payload: dgram.payload,
            };
            match queue.try_send(msg) {
                Ok(()) => {}
                Err(TrySendError::Full) => Counters::bump(&self.counters.udp_queue_overflow),
                Err(TrySendError::Closed) => Counters::bump(&self.counters.udp_unbound_port),
            }
        }
    }
}

/// A bound datagram socket. Dropping it releases the port.
pub struct UdpSocket {
    layer: Arc<UdpLayer>,
    port: u16,
    queue: MessageQueue<UdpMessage>,
    closed: AtomicBool,
}

impl std::fmt::Debug for UdpSocket {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UdpSocket").field("port", &self.port).finish()
    }
}

impl UdpSocket {
    pub fn local_port(&self) -> u16 {
        self.port
    }

    pub fn local_addr(&self) -> SocketAddrV4 {
        SocketAddrV4::new(self.layer.ip.ip(), self.port)
    }

    /// Datagrams waiting to be received.
    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub async fn send_to(&self, dst: SocketAddrV4, payload: &[u8]) -> Result<()> {
        if self.closed.load(Ordering::Acquire) {
            return Err(Error::Closed);
        }
        if payload.len() > UDP_MAX_PAYLOAD {
            return Err(WireError::Length {
                layer: "udp",
                len: payload.len(),
                max: UDP_MAX_PAYLOAD,
            }
            .into());
        }
        let src: Ipv4Addr = self.layer.ip.source_for(*dst.ip());
        let dgram = UdpDatagram {
            src_port: self.port,
            dst_port: dst.port(),
            payload: payload.to_vec(),
        };
        let bytes = dgram.encode(src, *dst.ip())?;
        self.layer.ip.send(*dst.ip(), PROTO_UDP, &bytes).await
    }

    /// Waits for the next datagram.
    pub async fn recv(&self) -> Result<UdpMessage> {
        self.queue.recv().await
    }

    pub async fn recv_from(&self, timeout: Duration) -> Result<UdpMessage> {
        self.queue.recv_timeout(timeout).await
    }

    /// Unbinds the port. Pending and future receives fail with `Closed`.
    pub fn close(&self) {
        if self.closed.swap(true, Ordering::AcqRel) {
            return;
        }
        if let Some(q) = self.layer.ports.lookup(&self.port) {
            if q.same_queue(&self.queue) {
                let _ = self.layer.ports.unbind(&self.port);
            }
        }
        self.queue.close();
    }
}

impl Drop for UdpSocket {
    fn drop(&mut self) {
        self.close();
    }
}

//! The IPv4 packet dealer.
//!
//! Inbound packets are validated by the dealer, then whole packets go to a
//! shared dispatch queue drained by a pool of reader tasks which hand the
//! payload to the bound protocol queue. Fragments are routed to one
//! assembler task per datagram; a finished assembler pushes the rebuilt
//! packet into the same dispatch queue, as if it had arrived whole.

use std::collections::HashMap;
use std::net::Ipv4Addr;
use std::sync::atomic::{AtomicU16, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use log::{debug, trace};
use tokio::sync::mpsc;

use crate::arp::ArpLayer;
use crate::csp::{BindingRegistry, MessageQueue, TaskCensus, TrySendError};
use crate::error::{Error, Result};
use crate::ethernet::EthernetLayer;
use crate::stats::Counters;
use crate::wire::{
    EthernetFrame, Ipv4Packet, WireError, ETHERTYPE_IPV4, IPV4_HEADER_LEN, IPV4_MAX_PAYLOAD,
};

mod reassembly;

pub use reassembly::{FragmentKey, InsertOutcome, Reassembly};

pub const DEFAULT_TTL: u8 = 64;

/// A packet payload handed to an upper protocol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IpDelivery {
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub protocol: u8,
    pub payload: Vec<u8>,
}

/// Next-hop selection for a single-subnet endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RouteConfig {
    pub ip: Ipv4Addr,
    pub netmask: Ipv4Addr,
    pub gateway: Option<Ipv4Addr>,
}

impl RouteConfig {
    pub fn next_hop(&self, dst: Ipv4Addr) -> Result<Ipv4Addr> {
        let mask = u32::from(self.netmask);
        if dst == Ipv4Addr::BROADCAST || u32::from(dst) & mask == u32::from(self.ip) & mask {
            Ok(dst)
        } else {
            self.gateway.ok_or(Error::NoRoute(dst))
        }
    }

    pub fn broadcast(&self) -> Ipv4Addr {
        Ipv4Addr::from(u32::from(self.ip) | !u32::from(self.netmask))
    }
}

/// Splits an unfragmented packet into fragments that fit `mtu`. Every
/// fragment but the last carries a multiple of 8 payload bytes.
pub fn fragment(packet: &Ipv4Packet, mtu: usize) -> Vec<Ipv4Packet> {
    if IPV4_HEADER_LEN + packet.payload.len() <= mtu {
        return vec![packet.clone()];
    }
    let step = (mtu - IPV4_HEADER_LEN) & !7;
    let total = packet.payload.len();
    let mut out = Vec::with_capacity(total.div_ceil(step));
    let mut off = 0;
    while off < total {
        let end = (off + step).min(total);
        out.push(Ipv4Packet {
            more_fragments: end < total,
            fragment_offset: (off / 8) as u16,
            payload: packet.payload[off..end].to_vec(),
            ..packet.clone()
        });
        off = end;
    }
    out
}

enum AssemblerExit {
    Done(FragmentKey, u64),
    Expired(FragmentKey, u64),
}

pub struct Ipv4Layer {
    route: RouteConfig,
    mtu: usize,
    eth: Arc<EthernetLayer>,
    arp: Arc<ArpLayer>,
    inbound: MessageQueue<EthernetFrame>,
    dispatch: MessageQueue<Ipv4Packet>,
    protocols: Arc<BindingRegistry<u8, IpDelivery>>,
    next_id: AtomicU16,
    assemblers: AtomicUsize,
    reassembly_timeout: Duration,
    queue_capacity: usize,
    counters: Arc<Counters>,
}

impl Ipv4Layer {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        route: RouteConfig,
        eth: Arc<EthernetLayer>,
        arp: Arc<ArpLayer>,
        reassembly_timeout: Duration,
        queue_capacity: usize,
        first_id: u16,
        counters: Arc<Counters>,
    ) -> Result<Self> {
        Ok(Ipv4Layer {
            route,
            mtu: eth.mtu(),
            eth,
            arp,
            inbound: MessageQueue::new(queue_capacity)?,
            dispatch: MessageQueue::new(queue_capacity)?,
            protocols: Arc::new(BindingRegistry::new()),
            next_id: AtomicU16::new(first_id),
            assemblers: AtomicUsize::new(0),
            reassembly_timeout,
            queue_capacity,
            counters,
        })
    }

    pub fn ip(&self) -> Ipv4Addr {
        self.route.ip
    }

    pub fn mtu(&self) -> usize {
        self.mtu
    }

    pub fn route(&self) -> RouteConfig {
        self.route
    }

    pub fn protocols(&self) -> &Arc<BindingRegistry<u8, IpDelivery>> {
        &self.protocols
    }

    /// Number of live assembler tasks.
    pub fn assembler_count(&self) -> usize {
        self.assemblers.load(Ordering::Relaxed)
    }

    pub(crate) fn inbound(&self) -> &MessageQueue<EthernetFrame> {
        &self.inbound
    }

    pub(crate) fn dispatch_queue(&self) -> &MessageQueue<Ipv4Packet> {
        &self.dispatch
    }

    /// The source address packets to `dst` carry.
    pub fn source_for(&self, dst: Ipv4Addr) -> Ipv4Addr {
        if dst.is_loopback() {
            dst
        } else {
            self.route.ip
        }
    }

    fn is_local(&self, dst: Ipv4Addr) -> bool {
        dst == self.route.ip || dst.is_loopback()
    }

    fn accepts(&self, dst: Ipv4Addr) -> bool {
        self.is_local(dst) || dst == Ipv4Addr::BROADCAST || dst == self.route.broadcast()
    }

    /// Sends `payload` to `dst`, fragmenting when it does not fit the MTU.
    pub async fn send(&self, dst: Ipv4Addr, protocol: u8, payload: &[u8]) -> Result<()> {
        if payload.len() > IPV4_MAX_PAYLOAD {
            return Err(WireError::Length {
                layer: "ipv4",
                len: payload.len(),
                max: IPV4_MAX_PAYLOAD,
            }
            .into());
        }
        let packet = Ipv4Packet {
            dscp_ecn: 0,
            identification: self.next_id.fetch_add(1, Ordering::Relaxed),
            dont_fragment: false,
            more_fragments: false,
            fragment_offset: 0,
            ttl: DEFAULT_TTL,
            protocol,
            src: self.source_for(dst),
            dst,
            payload: payload.to_vec(),
        };
        if self.is_local(dst) {
            return self.loop_back(packet);
        }
        let mac = self.arp.resolve(self.route.next_hop(dst)?).await?;
        for frag in fragment(&packet, self.mtu) {
            self.eth.send(mac, ETHERTYPE_IPV4, &frag.encode()?).await?;
        }
        Ok(())
    }

    /// Local delivery skips the device. The hand-off never blocks, since the
    /// sender may itself be downstream of the inbound queue.
    fn loop_back(&self, packet: Ipv4Packet) -> Result<()> {
        let mac = self.eth.mac();
        let frame = EthernetFrame {
            dst: mac,
            src: mac,
            ethertype: ETHERTYPE_IPV4,
            payload: packet.encode()?,
        };
        match self.inbound.try_send(frame) {
            Ok(()) => Ok(()),
            Err(TrySendError::Full) => {
                Counters::bump(&self.counters.link_rx_overflow);
                Ok(())
            }
            Err(TrySendError::Closed) => Err(Error::NotRunning),
        }
    }

    fn validate(&self, frame: EthernetFrame) -> Option<Ipv4Packet> {
        Counters::bump(&self.counters.ip_rx);
        let packet = match Ipv4Packet::decode(&frame.payload) {
            Ok(p) => p,
            Err(WireError::ChecksumMismatch(_)) => {
                Counters::bump(&self.counters.ip_checksum_error);
                return None;
            }
            Err(e) => {
                trace!("dropping undecodable packet: {e}");
                Counters::bump(&self.counters.ip_decode_error);
                return None;
            }
        };
        if !self.accepts(packet.dst) {
            Counters::bump(&self.counters.ip_not_ours);
            return None;
        }
        if packet.ttl == 0 {
            Counters::bump(&self.counters.ip_ttl_expired);
            return None;
        }
        Some(packet)
    }

    /// The dealer loop. Owns the assembler map; assemblers report their exit
    /// back over a control channel so only this task mutates it.
    pub(crate) async fn run_dealer(self: Arc<Self>, census: TaskCensus) {
        let (exit_tx, mut exit_rx) = mpsc::unbounded_channel();
        let mut map: HashMap<FragmentKey, (u64, MessageQueue<Ipv4Packet>)> = HashMap::new();
        let mut generation = 0u64;
        loop {
            tokio::select! {
                biased;
                Some(exit) = exit_rx.recv() => {
                    let (AssemblerExit::Done(key, gen) | AssemblerExit::Expired(key, gen)) = exit;
                    if map.get(&key).is_some_and(|(g, _)| *g == gen) {
                        map.remove(&key);
                    }
                }
                frame = self.inbound.recv() => {
                    let Ok(frame) = frame else { break };
                    let Some(packet) = self.validate(frame) else { continue };
                    if !packet.is_fragment() {
                        if self.dispatch.send(packet).await.is_err() {
                            break;
                        }
                        continue;
                    }
                    Counters::bump(&self.counters.ip_fragments_rx);
                    let key = FragmentKey {
                        src: packet.src,
                        dst: packet.dst,
                        protocol: packet.protocol,
                        identification: packet.identification,
                    };
                    let mut packet = Some(packet);
                    for _ in 0..2 {
                        let queue = match map.get(&key) {
                            Some((_, q)) => q.clone(),
                            None => {
                                generation += 1;
                                let q = match MessageQueue::new(self.queue_capacity) {
                                    Ok(q) => q,
                                    Err(_) => break,
                                };
                                map.insert(key, (generation, q.clone()));
                                census.spawn(self.clone().run_assembler(
                                    key,
                                    generation,
                                    q.clone(),
                                    exit_tx.clone(),
                                ));
                                q
                            }
                        };
                        match queue.send_or_return(packet.take().expect("fragment present")).await {
                            Ok(()) => break,
                            Err(back) => {
                                // The assembler finished between lookup and send;
                                // this fragment starts a fresh datagram.
                                map.remove(&key);
                                packet = Some(back);
                            }
                        }
                    }
                }
            }
            self.assemblers.store(map.len(), Ordering::Relaxed);
        }
        for (_, (_, q)) in map.drain() {
            q.close();
        }
        self.assemblers.store(0, Ordering::Relaxed);
    }

    async fn run_assembler(
        self: Arc<Self>,
        key: FragmentKey,
        generation: u64,
        input: MessageQueue<Ipv4Packet>,
        exit: mpsc::UnboundedSender<AssemblerExit>,
    ) {
        let mut state = Reassembly::new();
        let mut header: Option<Ipv4Packet> = None;
        loop {
            match input.recv_timeout(self.reassembly_timeout).await {
                Ok(frag) => {
                    let outcome =
                        state.insert(frag.payload_offset(), &frag.payload, !frag.more_fragments);
                    if outcome == InsertOutcome::Conflict {
                        Counters::bump(&self.counters.ip_fragment_conflict);
                        continue;
                    }
                    if header.is_none() || frag.fragment_offset == 0 {
                        header = Some(Ipv4Packet {
                            payload: Vec::new(),
                            ..frag
                        });
                    }
                    if state.is_complete() {
                        break;
                    }
                }
                Err(Error::Timeout) => {
                    debug!("reassembly of {key:?} timed out");
                    Counters::bump(&self.counters.ip_reassembly_timeout);
                    input.close();
                    let _ = exit.send(AssemblerExit::Expired(key, generation));
                    return;
                }
                Err(_) => return,
            }
        }
        input.close();
        let _ = exit.send(AssemblerExit::Done(key, generation));
        let payload = std::mem::take(&mut state).take().unwrap_or_default();
        let whole = Ipv4Packet {
            more_fragments: false,
            fragment_offset: 0,
            payload,
            ..header.expect("complete datagram has a header")
        };
        Counters::bump(&self.counters.ip_reassembled);
        let _ = self.dispatch.send(whole).await;
    }

    /// One reader of the shared dispatch queue.
    pub(crate) async fn run_reader(self: Arc<Self>) {
        while let Ok(packet) = self.dispatch.recv().await {
            let delivery = IpDelivery {
                src: packet.src,
                dst: packet.dst,
                protocol: packet.protocol,
                payload: packet.payload,
            };
            let proto = delivery.protocol;
            if !self.protocols.dispatch(&proto, delivery).await {
                Counters::bump(&self.counters.ip_unbound_protocol);
            }
        }
    }
}

//! Address resolution.
//!
//! One dealer task owns the pending-resolution table and is the only writer
//! of the cache. A resolver blocks in its own task on a one-shot reply that
//! the dealer answers exactly once: with the MAC when a reply arrives, or
//! with `ResolutionTimeout` after the last retry lapses. Concurrent resolves
//! of one address share a single pending entry and its wire requests.

use std::collections::HashMap;
use std::net::Ipv4Addr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use log::debug;
use parking_lot::RwLock;
use tokio::sync::oneshot;
use tokio::time::Instant;
use tokio_util::sync::CancellationToken;

use crate::csp::MessageQueue;
use crate::error::{Error, Result};
use crate::ethernet::EthernetLayer;
use crate::stats::Counters;
use crate::wire::{ArpOp, ArpPacket, EthernetFrame, MacAddr, ETHERTYPE_ARP};

#[derive(Debug, Clone, Copy)]
pub struct ArpCacheEntry {
    pub mac: MacAddr,
    pub inserted_at: Instant,
    /// Static entries never age out.
    pub permanent: bool,
}

pub(crate) enum ArpCommand {
    Resolve {
        ip: Ipv4Addr,
        reply: oneshot::Sender<Result<MacAddr>>,
    },
    Insert {
        ip: Ipv4Addr,
        mac: MacAddr,
    },
}

struct PendingResolution {
    waiters: Vec<oneshot::Sender<Result<MacAddr>>>,
    deadline: Instant,
    retries_left: u32,
}

pub struct ArpLayer {
    ip: Ipv4Addr,
    broadcast: Ipv4Addr,
    eth: Arc<EthernetLayer>,
    cache: RwLock<HashMap<Ipv4Addr, ArpCacheEntry>>,
    commands: MessageQueue<ArpCommand>,
    timeout: Duration,
    retries: u32,
    ttl: Duration,
    pending: AtomicUsize,
    counters: Arc<Counters>,
}

impl ArpLayer {
    pub(crate) fn new(
        ip: Ipv4Addr,
        broadcast: Ipv4Addr,
        eth: Arc<EthernetLayer>,
        timeout: Duration,
        retries: u32,
        ttl: Duration,
        queue_capacity: usize,
        counters: Arc<Counters>,
    ) -> Result<Self> {
        Ok(ArpLayer {
            ip,
            broadcast,
            eth,
            cache: RwLock::new(HashMap::new()),
            commands: MessageQueue::new(queue_capacity)?,
            timeout,
            retries,
            ttl,
            pending: AtomicUsize::new(0),
            counters,
        })
    }

    /// Cached MAC for `ip`, ignoring entries older than the cache TTL.
    pub fn lookup(&self, ip: Ipv4Addr) -> Option<MacAddr> {
        let cache = self.cache.read();
        let e = cache.get(&ip)?;
        (e.permanent || e.inserted_at.elapsed() < self.ttl).then_some(e.mac)
    }

    pub fn cache_snapshot(&self) -> Vec<(Ipv4Addr, ArpCacheEntry)> {
        self.cache.read().iter().map(|(k, v)| (*k, *v)).collect()
    }

    /// Number of addresses with a resolution in flight.
    pub fn pending_resolutions(&self) -> usize {
        self.pending.load(Ordering::Relaxed)
    }

    pub async fn resolve(&self, ip: Ipv4Addr) -> Result<MacAddr> {
        if ip == Ipv4Addr::BROADCAST || ip == self.broadcast {
            return Ok(MacAddr::BROADCAST);
        }
        if ip == self.ip {
            return Ok(self.eth.mac());
        }
        if let Some(mac) = self.lookup(ip) {
            return Ok(mac);
        }
        let (reply, rx) = oneshot::channel();
        self.commands
            .send(ArpCommand::Resolve { ip, reply })
            .await
            .map_err(|_| Error::NotRunning)?;
        rx.await.map_err(|_| Error::NotRunning)?
    }

    /// Installs a static mapping.
    pub async fn insert_static(&self, ip: Ipv4Addr, mac: MacAddr) -> Result<()> {
        self.commands
            .send(ArpCommand::Insert { ip, mac })
            .await
            .map_err(|_| Error::NotRunning)
    }

    pub(crate) fn commands(&self) -> &MessageQueue<ArpCommand> {
        &self.commands
    }

    fn learn(&self, ip: Ipv4Addr, mac: MacAddr) {
        if ip.is_unspecified() || mac.is_broadcast() || mac == MacAddr::ZERO {
            return;
        }
        let mut cache = self.cache.write();
        match cache.get_mut(&ip) {
            Some(e) if e.permanent => {}
            _ => {
                cache.insert(
                    ip,
                    ArpCacheEntry {
                        mac,
                        inserted_at: Instant::now(),
                        permanent: false,
                    },
                );
            }
        }
    }

    async fn send_request(&self, target: Ipv4Addr) {
        let req = ArpPacket::request(self.eth.mac(), self.ip, target);
        Counters::bump(&self.counters.arp_requests_sent);
        if let Err(e) = self.eth.send(MacAddr::BROADCAST, ETHERTYPE_ARP, &req.encode()).await {
            debug!("arp request for {target} not sent: {e}");
        }
    }

    /// Handles one inbound ARP frame: answer requests for our address and
    /// learn the sender mapping. Returns the learned binding, if any.
    pub(crate) async fn handle(&self, frame: &EthernetFrame) -> Option<(Ipv4Addr, MacAddr)> {
        let pkt = match ArpPacket::decode(&frame.payload) {
            Ok(p) => p,
            Err(_) => {
                Counters::bump(&self.counters.arp_malformed);
                return None;
            }
        };
        self.learn(pkt.sender_ip, pkt.sender_mac);
        if pkt.op == ArpOp::Request && pkt.target_ip == self.ip {
            let reply = ArpPacket {
                op: ArpOp::Reply,
                sender_mac: self.eth.mac(),
                sender_ip: self.ip,
                target_mac: pkt.sender_mac,
                target_ip: pkt.sender_ip,
            };
            Counters::bump(&self.counters.arp_replies_sent);
            if let Err(e) = self.eth.send(pkt.sender_mac, ETHERTYPE_ARP, &reply.encode()).await {
                debug!("arp reply to {} not sent: {e}", pkt.sender_ip);
            }
        }
        Some((pkt.sender_ip, pkt.sender_mac))
    }

    /// The ARP dealer loop.
    pub(crate) async fn run(self: Arc<Self>, inbound: MessageQueue<EthernetFrame>, cancel: CancellationToken) {
        let mut pending: HashMap<Ipv4Addr, PendingResolution> = HashMap::new();
        loop {
            let next = pending.values().map(|p| p.deadline).min();
            tokio::select! {
                _ = cancel.cancelled() => break,
                frame = inbound.recv() => {
                    let Ok(frame) = frame else { break };
                    if let Some((ip, mac)) = self.handle(&frame).await {
                        if let Some(p) = pending.remove(&ip) {
                            self.pending.store(pending.len(), Ordering::Relaxed);
                            for w in p.waiters {
                                let _ = w.send(Ok(mac));
                            }
                        }
                    }
                }
                cmd = self.commands.recv() => {
                    let Ok(cmd) = cmd else { break };
                    match cmd {
                        ArpCommand::Resolve { ip, reply } => {
                            if let Some(mac) = self.lookup(ip) {
                                let _ = reply.send(Ok(mac));
                            } else if let Some(p) = pending.get_mut(&ip) {
                                p.waiters.push(reply);
                            } else {
                                self.send_request(ip).await;
                                pending.insert(ip, PendingResolution {
                                    waiters: vec![reply],
                                    deadline: Instant::now() + self.timeout,
                                    retries_left: self.retries - 1,
                                });
                            }
                        }
                        ArpCommand::Insert { ip, mac } => {
                            self.cache.write().insert(ip, ArpCacheEntry {
                                mac,
                                inserted_at: Instant::now(),
                                permanent: true,
                            });
                            if let Some(p) = pending.remove(&ip) {
                                self.pending.store(pending.len(), Ordering::Relaxed);
                                for w in p.waiters {
                                    let _ = w.send(Ok(mac));
                                }
                            }
                        }
                    }
                }
                _ = sleep_until_opt(next) => {
                    let now = Instant::now();
                    let due: Vec<Ipv4Addr> = pending
                        .iter()
                        .filter(|(_, p)| p.deadline <= now)
                        .map(|(ip, _)| *ip)
                        .collect();
                    for ip in due {
                        let retry = {
                            let p = pending.get_mut(&ip).expect("due entry exists");
                            if p.retries_left > 0 {
                                p.retries_left -= 1;
                                p.deadline = now + self.timeout;
                                true
                            } else {
                                false
                            }
                        };
                        if retry {
                            self.send_request(ip).await;
                        } else if let Some(p) = pending.remove(&ip) {
                            self.pending.store(pending.len(), Ordering::Relaxed);
                            for w in p.waiters {
                                let _ = w.send(Err(Error::ResolutionTimeout(ip)));
                            }
                        }
                    }
                }
            }
            self.pending.store(pending.len(), Ordering::Relaxed);
        }
        for (_, p) in pending.drain() {
            for w in p.waiters {
                let _ = w.send(Err(Error::NotRunning));
            }
        }
        self.pending.store(0, Ordering::Relaxed);
    }
}

pub(crate) async fn sleep_until_opt(at: Option<Instant>) {
    match at {
        Some(at) => tokio::time::sleep_until(at).await,
        None => std::future::pending().await,
    }
}

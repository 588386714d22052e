//! ICMP echo.
//!
//! The ICMP dealer splits inbound echo traffic: requests go to a pool of
//! responder tasks, replies go to the ping dealer, which owns the table of
//! outstanding requests. Each outbound echo request gets its own waiter
//! task that registers with the ping dealer and blocks until its reply or
//! the one-second deadline.

use std::collections::{HashMap, HashSet, VecDeque};
use std::net::Ipv4Addr;
use std::sync::atomic::{AtomicU16, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use log::debug;
use tokio::sync::oneshot;
use tokio::time::Instant;

use crate::csp::{MessageQueue, TaskCensus};
use crate::error::{Error, Result};
use crate::ipv4::{IpDelivery, Ipv4Layer};
use crate::stats::Counters;
use crate::wire::{IcmpEcho, IcmpEchoKind, PROTO_ICMP};

pub const PING_TIMEOUT: Duration = Duration::from_secs(1);

/// How many expired (identifier, sequence) pairs are remembered so that a
/// straggling reply is counted as late rather than unmatched.
const EXPIRED_MEMORY: usize = 8192;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PingStats {
    pub sent: u32,
    pub received: u32,
    pub loss: f64,
    pub min_ms: f64,
    pub avg_ms: f64,
    pub max_ms: f64,
    /// Round-trip times of the answered requests, in send order.
    pub rtts_ms: Vec<f64>,
}

impl PingStats {
    pub fn from_rtts(sent: u32, rtts: Vec<Option<Duration>>) -> PingStats {
        let rtts_ms: Vec<f64> = rtts
            .into_iter()
            .flatten()
            .map(|d| d.as_secs_f64() * 1e3)
            .collect();
        let received = rtts_ms.len() as u32;
        let (min_ms, max_ms, avg_ms) = if rtts_ms.is_empty() {
            (0.0, 0.0, 0.0)
        } else {
            (
                rtts_ms.iter().copied().fold(f64::INFINITY, f64::min),
                rtts_ms.iter().copied().fold(0.0, f64::max),
                rtts_ms.iter().sum::<f64>() / rtts_ms.len() as f64,
            )
        };
        PingStats {
            sent,
            received,
            loss: if sent == 0 {
                0.0
            } else {
                1.0 - f64::from(received) / f64::from(sent)
            },
            min_ms,
            avg_ms,
            max_ms,
            rtts_ms,
        }
    }
}

type EchoKey = (u16, u16);

pub(crate) enum PingMsg {
    Register(EchoKey, oneshot::Sender<Instant>),
    Expire(EchoKey),
    Reply(IcmpEcho),
}

pub struct IcmpLayer {
    ip: Arc<Ipv4Layer>,
    inbound: MessageQueue<IpDelivery>,
    requests: MessageQueue<(Ipv4Addr, IcmpEcho)>,
    ping: MessageQueue<PingMsg>,
    outstanding: AtomicUsize,
    next_ident: AtomicU16,
    census: TaskCensus,
    counters: Arc<Counters>,
}

impl IcmpLayer {
    pub(crate) fn new(
        ip: Arc<Ipv4Layer>,
        queue_capacity: usize,
        first_ident: u16,
        census: TaskCensus,
        counters: Arc<Counters>,
    ) -> Result<Self> {
        Ok(IcmpLayer {
            ip,
            inbound: MessageQueue::new(queue_capacity)?,
            requests: MessageQueue::new(queue_capacity)?,
            ping: MessageQueue::new(queue_capacity)?,
            outstanding: AtomicUsize::new(0),
            next_ident: AtomicU16::new(first_ident),
            census,
            counters,
        })
    }

    pub(crate) fn inbound(&self) -> &MessageQueue<IpDelivery> {
        &self.inbound
    }

    pub(crate) fn close(&self) {
        self.inbound.close();
        self.requests.close();
        self.ping.close();
    }

    /// Requests currently awaiting a reply.
    pub fn outstanding(&self) -> usize {
        self.outstanding.load(Ordering::Relaxed)
    }

    /// Sends `count` echo requests of `size` data bytes, one every
    /// `interval`, and waits for every reply or deadline.
    pub async fn ping(&self, dst: Ipv4Addr, count: u32, interval: Duration, size: usize) -> Result<PingStats> {
        if count == 0 {
            return Err(Error::Config("ping count must be at least 1".into()));
        }
        let identifier = self.next_ident.fetch_add(1, Ordering::Relaxed);
        let data: Vec<u8> = (0..size).map(|i| (i % 256) as u8).collect();
        let mut ticker = tokio::time::interval(interval);
        ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        let mut waiters = Vec::with_capacity(count as usize);
        for seq in 0..count {
            ticker.tick().await;
            let sequence = seq as u16;
            let key = (identifier, sequence);
            let (tx, rx) = oneshot::channel();
            self.ping
                .send(PingMsg::Register(key, tx))
                .await
                .map_err(|_| Error::NotRunning)?;
            let echo = IcmpEcho {
                kind: IcmpEchoKind::Request,
                identifier,
                sequence,
                data: data.clone(),
            };
            let sent_at = Instant::now();
            if let Err(e) = self.ip.send(dst, PROTO_ICMP, &echo.encode()).await {
                debug!("echo request {key:?} to {dst} not sent: {e}");
                let _ = self.ping.send(PingMsg::Expire(key)).await;
                waiters.push(None);
                continue;
            }
            let ping = self.ping.clone();
            waiters.push(Some(self.census.spawn(async move {
                match tokio::time::timeout(PING_TIMEOUT, rx).await {
                    Ok(Ok(at)) => Some(at.saturating_duration_since(sent_at)),
                    _ => {
                        let _ = ping.send(PingMsg::Expire(key)).await;
                        None
                    }
                }
            })));
        }
        let mut rtts = Vec::with_capacity(waiters.len());
        for w in waiters {
            rtts.push(match w {
                Some(h) => h.await.unwrap_or(None),
                None => None,
            });
        }
        Ok(PingStats::from_rtts(count, rtts))
    }

    /// Splits inbound ICMP by echo kind.
    pub(crate) async fn run_dealer(self: Arc<Self>) {
        while let Ok(d) = self.inbound.recv().await {
            let echo = match IcmpEcho::decode(&d.payload) {
                Ok(e) => e,
                Err(_) => {
                    Counters::bump(&self.counters.icmp_decode_error);
                    continue;
                }
            };
            let sent = match echo.kind {
                IcmpEchoKind::Request => self.requests.send((d.src, echo)).await,
                IcmpEchoKind::Reply => self.ping.send(PingMsg::Reply(echo)).await,
            };
            if sent.is_err() {
                break;
            }
        }
    }

    /// Routes replies to the waiter registered for their (identifier,
    /// sequence).
    pub(crate) async fn run_ping_dealer(self: Arc<Self>) {
        let mut waiters: HashMap<EchoKey, oneshot::Sender<Instant>> = HashMap::new();
        let mut expired: HashSet<EchoKey> = HashSet::new();
        let mut expired_order: VecDeque<EchoKey> = VecDeque::new();
        while let Ok(msg) = self.ping.recv().await {
            match msg {
                PingMsg::Register(key, tx) => {
                    expired.remove(&key);
                    waiters.insert(key, tx);
                }
                PingMsg::Expire(key) => {
                    if waiters.remove(&key).is_some() && expired.insert(key) {
                        expired_order.push_back(key);
                        if expired_order.len() > EXPIRED_MEMORY {
                            if let Some(old) = expired_order.pop_front() {
                                expired.remove(&old);
                            }
                        }
                    }
                }
                PingMsg::Reply(echo) => {
                    let key = (echo.identifier, echo.sequence);
                    match waiters.remove(&key) {
                        Some(tx) => {
                            let _ = tx.send(Instant::now());
                        }
                        None if expired.contains(&key) => Counters::bump(&self.counters.icmp_late_reply),
                        None => Counters::bump(&self.counters.icmp_unmatched_reply),
                    }
                }
            }
            self.outstanding.store(waiters.len(), Ordering::Relaxed);
        }
        self.outstanding.store(0, Ordering::Relaxed);
    }

    /// One member of the echo responder pool.
    pub(crate) async fn run_responder(self: Arc<Self>) {
        while let Ok((src, req)) = self.requests.recv().await {
            let reply = req.reply();
            Counters::bump(&self.counters.icmp_replies_sent);
            if let Err(e) = self.ip.send(src, PROTO_ICMP, &reply.encode()).await {
                debug!("echo reply to {src} not sent: {e}");
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_aggregate() {
        let ms = Duration::from_millis;
        let s = PingStats::from_rtts(4, vec![Some(ms(1)), None, Some(ms(3)), Some(ms(2))]);
        assert_eq!((s.sent, s.received), (4, 3));
        assert!((s.loss - 0.25).abs() < 1e-12);
        assert!((s.min_ms - 1.0).abs() < 1e-9);
        assert!((s.avg_ms - 2.0).abs() < 1e-9);
        assert!((s.max_ms - 3.0).abs() < 1e-9);
        let none = PingStats::from_rtts(1, vec![None]);
        assert_eq!(none.loss, 1.0);
        assert_eq!(none.received, 0);
    }
}

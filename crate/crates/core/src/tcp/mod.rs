//! TCP: the connection dealer, listeners and active opens.

use std::collections::HashMap;
use std::net::SocketAddrV4;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokio::time::Instant;

use crate::csp::{BindingRegistry, MessageQueue, TaskCensus};
use crate::error::{Error, Result};
use crate::ipv4::{IpDelivery, Ipv4Layer};
use crate::stats::Counters;
use crate::udp::{EPHEMERAL_FIRST, EPHEMERAL_LAST};
use crate::wire::TcpSegment;

mod conn;
pub mod retransmit;
pub mod seq;
mod tcb;

pub use conn::{ConnKey, TcpConfig, TcpStream, RECV_BUFFER};
pub use tcb::{is_legal, LedgerEntry, Tcb, TcbAction, TcbState, LEGAL_TRANSITIONS, RECV_WINDOW};

use conn::{spawn_connection, PassiveCtx, TcpEnv};
use tokio_util::sync::CancellationToken;

pub const DEFAULT_BACKLOG: usize = 16;

struct ListenerEntry {
    accept: MessageQueue<TcpStream>,
    half_open: Arc<AtomicUsize>,
    backlog: usize,
}

pub struct TcpLayer {
    env: Arc<TcpEnv>,
    inbound: MessageQueue<IpDelivery>,
    listeners: RwLock<HashMap<u16, ListenerEntry>>,
    isn: Mutex<ChaCha8Rng>,
    next_ephemeral: Mutex<u16>,
}

impl TcpLayer {
    pub(crate) fn new(
        ip: Arc<Ipv4Layer>,
        config: TcpConfig,
        seed: u64,
        cancel: CancellationToken,
        census: TaskCensus,
        counters: Arc<Counters>,
    ) -> Result<Self> {
        let inbound = MessageQueue::new(config.queue_capacity)?;
        Ok(TcpLayer {
            env: Arc::new(TcpEnv {
                ip,
                config,
                conns: Arc::new(BindingRegistry::new()),
                cancel,
                census,
                counters,
            }),
            inbound,
            listeners: RwLock::new(HashMap::new()),
            isn: Mutex::new(ChaCha8Rng::seed_from_u64(seed ^ 0x7463_705f_6973_6e00)),
            next_ephemeral: Mutex::new(EPHEMERAL_FIRST),
        })
    }

    pub(crate) fn inbound(&self) -> &MessageQueue<IpDelivery> {
        &self.inbound
    }

    pub fn config(&self) -> &TcpConfig {
        &self.env.config
    }

    /// Live connections, by 4-tuple.
    pub fn connection_count(&self) -> usize {
        self.env.conns.len()
    }

    pub(crate) fn shutdown(&self) {
        self.env.conns.clear();
        for (_, l) in self.listeners.write().drain() {
            l.accept.close();
        }
    }

    fn next_isn(&self) -> u32 {
        self.isn.lock().random()
    }

    pub fn listen(self: &Arc<Self>, port: u16) -> Result<TcpListener> {
        self.listen_with_backlog(port, DEFAULT_BACKLOG)
    }

    /// `backlog` bounds half-open plus not-yet-accepted connections; SYNs
    /// beyond it are dropped silently.
    pub fn listen_with_backlog(self: &Arc<Self>, port: u16, backlog: usize) -> Result<TcpListener> {
        if backlog == 0 {
            return Err(Error::Config("backlog must be at least 1".into()));
        }
        if self.inbound.is_closed() {
            return Err(Error::NotRunning);
        }
        let mut listeners = self.listeners.write();
        if listeners.contains_key(&port) {
            return Err(Error::AlreadyBound);
        }
        let accept = MessageQueue::new(backlog)?;
        listeners.insert(
            port,
            ListenerEntry {
                accept: accept.clone(),
                half_open: Arc::new(AtomicUsize::new(0)),
                backlog,
            },
        );
        Ok(TcpListener {
            layer: self.clone(),
            port,
            accept,
        })
    }

    fn unlisten(&self, port: u16, accept: &MessageQueue<TcpStream>) {
        let mut listeners = self.listeners.write();
        if listeners.get(&port).is_some_and(|l| l.accept.same_queue(accept)) {
            listeners.remove(&port);
        }
        drop(listeners);
        accept.close();
    }

    /// Active open. Resolves once the handshake completes.
    pub async fn connect(self: &Arc<Self>, dst: SocketAddrV4, timeout: Duration) -> Result<TcpStream> {
        if self.inbound.is_closed() {
            return Err(Error::NotRunning);
        }
        let deadline = Instant::now() + timeout;
        let cap = self.env.config.queue_capacity;
        let (key, segments) = {
            let mut next = self.next_ephemeral.lock();
            let span = u32::from(EPHEMERAL_LAST - EPHEMERAL_FIRST) + 1;
            let mut found = None;
            for _ in 0..span {
                let port = *next;
                *next = if port == EPHEMERAL_LAST { EPHEMERAL_FIRST } else { port + 1 };
                if self.listeners.read().contains_key(&port) {
                    continue;
                }
                let key = ConnKey {
                    local_port: port,
                    remote: dst,
                };
                if let Ok(q) = self
                    .env
                    .conns
                    .bind_with(key, || MessageQueue::new(cap).expect("capacity validated"))
                {
                    found = Some((key, q));
                    break;
                }
            }
            found.ok_or(Error::PortsExhausted)?
        };
        let local = SocketAddrV4::new(self.env.ip.source_for(*dst.ip()), key.local_port);
        let tcb = Tcb::connect(local, dst, self.next_isn());
        let stream = match spawn_connection(self.env.clone(), tcb, key, segments, None) {
            Ok(s) => s.expect("active open yields a handle"),
            Err(e) => {
                let _ = self.env.conns.unbind(&key);
                return Err(e);
            }
        };
        let mut state = stream.subscribe();
        loop {
            match *state.borrow_and_update() {
                TcbState::SynSent | TcbState::SynRcvd => {}
                TcbState::Closed => {
                    return Err(match stream.outcome() {
                        Some(Error::ConnectionRefused) => Error::ConnectionRefused,
                        Some(Error::ConnectionReset) => Error::ConnectionRefused,
                        Some(Error::NotRunning) => Error::NotRunning,
                        _ => Error::Timeout,
                    })
                }
                _ => return Ok(stream),
            }
            match tokio::time::timeout_at(deadline, state.changed()).await {
                Ok(Ok(())) => {}
                Ok(Err(_)) => return Err(Error::ConnectionClosed),
                Err(_) => {
                    stream.abort();
                    return Err(Error::Timeout);
                }
            }
        }
    }

    /// The TCP dealer: demultiplexes by 4-tuple, opens passive connections
    /// for SYNs to listeners and answers everything else with RST.
    pub(crate) async fn run_dealer(self: Arc<Self>) {
        let env = &self.env;
        while let Ok(d) = self.inbound.recv().await {
            let seg = match TcpSegment::decode(&d.payload, d.src, d.dst) {
                Ok(s) => s,
                Err(_) => {
                    Counters::bump(&env.counters.tcp_decode_error);
                    continue;
                }
            };
            let remote = SocketAddrV4::new(d.src, seg.src_port);
            let local = SocketAddrV4::new(d.dst, seg.dst_port);
            let key = ConnKey {
                local_port: seg.dst_port,
                remote,
            };
            if let Some(q) = env.conns.lookup(&key) {
                if q.send(seg).await.is_ok() {
                    continue;
                }
                // Connection finished between lookup and send; treat the
                // segment as addressed to nobody.
                continue;
            }
            let f = seg.flags;
            if f.syn && !f.ack && !f.rst {
                let listener = self
                    .listeners
                    .read()
                    .get(&seg.dst_port)
                    .map(|l| (l.accept.clone(), l.half_open.clone(), l.backlog));
                if let Some((accept, half_open, backlog)) = listener {
                    if half_open.load(Ordering::Acquire) + accept.len() >= backlog {
                        Counters::bump(&env.counters.tcp_backlog_drop);
                        continue;
                    }
                    let mut tcb = Tcb::listen(local, remote, self.next_isn());
                    tcb.on_segment(&seg, RECV_BUFFER);
                    let cap = env.config.queue_capacity;
                    let Ok(segments) =
                        env.conns.bind_with(key, || MessageQueue::new(cap).expect("capacity validated"))
                    else {
                        continue;
                    };
                    half_open.fetch_add(1, Ordering::AcqRel);
                    let ctx = PassiveCtx {
                        accept,
                        half_open: half_open.clone(),
                    };
                    if spawn_connection(env.clone(), tcb, key, segments, Some(ctx)).is_err() {
                        half_open.fetch_sub(1, Ordering::AcqRel);
                        let _ = env.conns.unbind(&key);
                    }
                    continue;
                }
            }
            if f.rst {
                continue;
            }
            if f.ack {
                env.send_rst(local, remote, seg.ack, None).await;
            } else {
                env.send_rst(local, remote, 0, Some(seg.seq.wrapping_add(seg.seq_len())))
                    .await;
            }
        }
    }
}

/// A bound listening port. Dropping it stops accepting; queued but
/// unaccepted connections are closed.
pub struct TcpListener {
    layer: Arc<TcpLayer>,
    port: u16,
    accept: MessageQueue<TcpStream>,
}

impl std::fmt::Debug for TcpListener {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TcpListener").field("port", &self.port).finish()
    }
}

impl TcpListener {
    pub fn port(&self) -> u16 {
        self.port
    }

    /// Connections that completed the handshake and await `accept`.
    pub fn pending(&self) -> usize {
        self.accept.len()
    }

    pub async fn accept(&self, timeout: Duration) -> Result<TcpStream> {
        match self.accept.recv_timeout(timeout).await {
            Ok(s) => Ok(s),
            Err(Error::Timeout) => Err(Error::Timeout),
            Err(_) => Err(Error::Closed),
        }
    }

    pub fn close(&self) {
        self.layer.unlisten(self.port, &self.accept);
    }
}

impl Drop for TcpListener {
    fn drop(&mut self) {
        self.close();
    }
}

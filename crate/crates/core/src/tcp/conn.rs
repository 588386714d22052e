//! The two long-running tasks behind every connection, and the
//! application handle.
//!
//! The inbound processor owns the [`Tcb`]: sequence state, the receive
//! side and the retransmission ledger. The sender owns the send buffer. The
//! sender reaches the TCB only through the control queue (segment
//! registration, FIN, abort); the processor reports snd_una advances and
//! state changes back through watch channels.

use std::collections::VecDeque;
use std::net::SocketAddrV4;
use std::sync::atomic::{AtomicBool, AtomicU16, AtomicU32, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use log::debug;
use parking_lot::Mutex;
use tokio::sync::{oneshot, watch, Notify};
use tokio::time::Instant;
use tokio_util::sync::CancellationToken;

use super::retransmit::{self, RetransmitOutcome};
use super::seq::seq_ge;
use super::tcb::{Tcb, TcbAction, TcbState, RECV_WINDOW};
use crate::arp::sleep_until_opt;
use crate::csp::{BindingRegistry, MessageQueue, TaskCensus};
use crate::error::{Error, Result};
use crate::ipv4::Ipv4Layer;
use crate::stats::Counters;
use crate::wire::{TcpFlags, TcpSegment, PROTO_TCP};

/// Application receive buffer capacity.
pub const RECV_BUFFER: usize = RECV_WINDOW as usize;

/// Chunk size used when handing application bytes to the sender task.
const SEND_CHUNK: usize = 8192;

/// Connection demultiplexing key: our port and the remote endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConnKey {
    pub local_port: u16,
    pub remote: SocketAddrV4,
}

#[derive(Debug, Clone)]
pub struct TcpConfig {
    pub rto_initial: Duration,
    pub time_wait: Duration,
    pub handshake_timeout: Duration,
    pub window_segments: usize,
    /// Our MSS: link MTU minus IPv4 and TCP headers.
    pub mss: usize,
    pub queue_capacity: usize,
}

pub(crate) struct TcpEnv {
    pub ip: Arc<Ipv4Layer>,
    pub config: TcpConfig,
    pub conns: Arc<BindingRegistry<ConnKey, TcpSegment>>,
    pub cancel: CancellationToken,
    pub census: TaskCensus,
    pub counters: Arc<Counters>,
}

impl TcpEnv {
    pub async fn emit(&self, local: SocketAddrV4, remote: SocketAddrV4, seg: &TcpSegment) {
        let bytes = match seg.encode(*local.ip(), *remote.ip()) {
            Ok(b) => b,
            Err(e) => {
                debug!("tcp segment not encodable: {e}");
                return;
            }
        };
        if let Err(e) = self.ip.send(*remote.ip(), PROTO_TCP, &bytes).await {
            debug!("tcp segment to {remote} not sent: {e}");
        }
    }

    pub async fn send_rst(&self, local: SocketAddrV4, remote: SocketAddrV4, seq: u32, ack: Option<u32>) {
        let seg = TcpSegment {
            src_port: local.port(),
            dst_port: remote.port(),
            seq,
            ack: ack.unwrap_or(0),
            flags: if ack.is_some() { TcpFlags::RST_ACK } else { TcpFlags::RST },
            window: 0,
            mss: None,
            payload: Vec::new(),
        };
        Counters::bump(&self.counters.tcp_rst_sent);
        self.emit(local, remote, &seg).await;
    }
}

pub(crate) enum Control {
    Register {
        start: u32,
        end: u32,
        notify: oneshot::Sender<()>,
    },
    FinSent {
        seq: u32,
        notify: oneshot::Sender<()>,
    },
    Abort(Error),
}

enum SendCmd {
    Data(Vec<u8>),
}

#[derive(Default)]
struct RecvBuf {
    data: VecDeque<u8>,
    eof: bool,
}

pub(crate) struct ConnShared {
    local: SocketAddrV4,
    remote: SocketAddrV4,
    recv: Mutex<RecvBuf>,
    recv_notify: Notify,
    state: watch::Sender<TcbState>,
    una: watch::Sender<u32>,
    outcome: Mutex<Option<Error>>,
    control: MessageQueue<Control>,
    rcv_nxt: AtomicU32,
    peer_mss: AtomicU16,
    ledger_len: AtomicUsize,
    tasks: AtomicUsize,
    actors: AtomicUsize,
    close_requested: AtomicBool,
    close_notify: Notify,
}

impl ConnShared {
    fn recv_space(&self) -> usize {
        RECV_BUFFER.saturating_sub(self.recv.lock().data.len())
    }

    fn set_outcome(&self, e: Error) {
        let mut o = self.outcome.lock();
        if o.is_none() {
            *o = Some(e);
        }
    }

    fn outcome(&self) -> Option<Error> {
        self.outcome.lock().clone()
    }
}

struct TaskGuard<'a>(&'a AtomicUsize);

impl<'a> TaskGuard<'a> {
    fn new(c: &'a AtomicUsize) -> Self {
        c.fetch_add(1, Ordering::AcqRel);
        TaskGuard(c)
    }
}

impl Drop for TaskGuard<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::AcqRel);
    }
}

/// Hand-off for connections created by a listener.
pub(crate) struct PassiveCtx {
    pub accept: MessageQueue<TcpStream>,
    pub half_open: Arc<AtomicUsize>,
}

/// Starts the processor and sender for `tcb`. `segments` is the queue the
/// dealer feeds for this connection's key. An active open returns the
/// application handle; a passive one hands it to the listener once the
/// handshake completes.
pub(crate) fn spawn_connection(
    env: Arc<TcpEnv>,
    tcb: Tcb,
    key: ConnKey,
    segments: MessageQueue<TcpSegment>,
    passive: Option<PassiveCtx>,
) -> Result<Option<TcpStream>> {
    let cap = env.config.queue_capacity;
    let shared = Arc::new(ConnShared {
        local: tcb.local,
        remote: tcb.remote,
        recv: Mutex::new(RecvBuf::default()),
        recv_notify: Notify::new(),
        state: watch::channel(tcb.state()).0,
        una: watch::channel(tcb.snd_una()).0,
        outcome: Mutex::new(None),
        control: MessageQueue::new(cap)?,
        rcv_nxt: AtomicU32::new(tcb.rcv_nxt()),
        peer_mss: AtomicU16::new(tcb.peer_mss().unwrap_or(0)),
        ledger_len: AtomicUsize::new(0),
        tasks: AtomicUsize::new(0),
        actors: AtomicUsize::new(0),
        close_requested: AtomicBool::new(false),
        close_notify: Notify::new(),
    });
    let app = MessageQueue::new(cap)?;
    let stream = TcpStream {
        shared: shared.clone(),
        app: app.clone(),
    };
    let is_passive = passive.is_some();
    let (passive, active) = match passive {
        Some(p) => (Some((p, stream)), None),
        None => (None, Some(stream)),
    };
    // Claim both task slots before either task can observe the other's absence.
    shared.tasks.fetch_add(2, Ordering::AcqRel);
    let sender = Sender {
        env: env.clone(),
        shared: shared.clone(),
        app,
        iss: tcb.iss(),
        passive: is_passive,
    };
    env.census.spawn(run_inbound(env.clone(), shared.clone(), tcb, key, segments, passive));
    env.census.spawn(sender.run());
    Ok(active)
}

async fn run_inbound(
    env: Arc<TcpEnv>,
    shared: Arc<ConnShared>,
    mut tcb: Tcb,
    key: ConnKey,
    segments: MessageQueue<TcpSegment>,
    mut passive: Option<(PassiveCtx, TcpStream)>,
) {
    let _census = ClaimedGuard(&shared.tasks);
    let handshake_deadline = Instant::now() + env.config.handshake_timeout;
    let mut time_wait_deadline: Option<Instant> = None;
    let mut established = tcb.state() == TcbState::Established;
    loop {
        let deadline = match tcb.state() {
            TcbState::SynSent | TcbState::SynRcvd | TcbState::Listen => Some(handshake_deadline),
            TcbState::TimeWait => time_wait_deadline,
            _ => None,
        };
        let mut actions = Vec::new();
        tokio::select! {
            biased;
            _ = env.cancel.cancelled() => {
                tcb.abort();
                shared.set_outcome(Error::NotRunning);
            }
            ctl = shared.control.recv() => match ctl {
                Ok(Control::Register { start, end, notify }) => tcb.register(start, end, notify),
                Ok(Control::FinSent { seq, notify }) => tcb.on_fin_sent(seq, notify),
                Ok(Control::Abort(e)) => {
                    shared.set_outcome(e);
                    actions = tcb.abort();
                }
                Err(_) => {
                    tcb.abort();
                }
            },
            seg = segments.recv() => match seg {
                Ok(seg) => actions = tcb.on_segment(&seg, shared.recv_space()),
                Err(_) => {
                    tcb.abort();
                }
            },
            _ = sleep_until_opt(deadline) => {
                if tcb.state() == TcbState::TimeWait {
                    tcb.time_wait_expired();
                } else {
                    shared.set_outcome(Error::Timeout);
                    tcb.handshake_expired();
                }
            }
        }
        // Readers and the accept queue are served only after the new state
        // is published, so whoever sees end of stream also sees CLOSE_WAIT
        // and an accepted stream is already ESTABLISHED.
        let mut delivered = Vec::new();
        let mut peer_fin = false;
        let mut to_accept = None;
        for a in actions {
            match a {
                TcbAction::SendAck => {
                    let seg = tcb.segment(tcb.snd_nxt(), TcpFlags::ACK, Vec::new());
                    env.emit(tcb.local, tcb.remote, &seg).await;
                }
                TcbAction::SendRst { seq, ack } => env.send_rst(tcb.local, tcb.remote, seq, ack).await,
                TcbAction::SendSynAck => {
                    let mut seg = tcb.segment(tcb.iss(), TcpFlags::SYN_ACK, Vec::new());
                    seg.mss = Some(env.config.mss as u16);
                    env.emit(tcb.local, tcb.remote, &seg).await;
                }
                TcbAction::Deliver(bytes) => delivered.push(bytes),
                TcbAction::PeerFin => peer_fin = true,
                TcbAction::Established => {
                    established = true;
                    shared
                        .peer_mss
                        .store(tcb.peer_mss().unwrap_or(0), Ordering::Relaxed);
                    to_accept = passive.take();
                }
                TcbAction::AckAdvanced(una) => {
                    shared.una.send_replace(una);
                }
                TcbAction::EnterTimeWait => {
                    time_wait_deadline = Some(Instant::now() + env.config.time_wait);
                }
                TcbAction::Reset => shared.set_outcome(Error::ConnectionReset),
                TcbAction::Refused => shared.set_outcome(Error::ConnectionRefused),
                TcbAction::Closed => {}
                TcbAction::OutOfWindow => Counters::bump(&env.counters.tcp_out_of_window),
                TcbAction::BufferDrop => Counters::bump(&env.counters.tcp_recv_buffer_drop),
            }
        }
        shared.rcv_nxt.store(tcb.rcv_nxt(), Ordering::Release);
        shared.ledger_len.store(tcb.ledger_len(), Ordering::Release);
        shared.state.send_if_modified(|s| {
            let changed = *s != tcb.state();
            *s = tcb.state();
            changed
        });
        if let Some((ctx, stream)) = to_accept {
            ctx.half_open.fetch_sub(1, Ordering::AcqRel);
            if ctx.accept.try_send(stream).is_err() {
                debug!("listener gone, resetting {}", tcb.remote);
                for r in tcb.abort() {
                    if let TcbAction::SendRst { seq, ack } = r {
                        env.send_rst(tcb.local, tcb.remote, seq, ack).await;
                    }
                }
                shared.state.send_replace(tcb.state());
            }
        }
        if !delivered.is_empty() || peer_fin {
            let mut b = shared.recv.lock();
            for bytes in delivered {
                b.data.extend(bytes);
            }
            b.eof |= peer_fin;
            drop(b);
            shared.recv_notify.notify_waiters();
        }
        if tcb.state() == TcbState::Closed {
            break;
        }
    }
    if let Some((ctx, _)) = passive.take() {
        ctx.half_open.fetch_sub(1, Ordering::AcqRel);
    }
    if !established {
        shared.set_outcome(Error::Timeout);
    }
    shared.ledger_len.store(0, Ordering::Release);
    let _ = env.conns.unbind(&key);
    segments.close();
    shared.control.close();
    shared.recv_notify.notify_waiters();
    shared.close_notify.notify_one();
}

/// Releases a task slot claimed up front in `spawn_connection`.
struct ClaimedGuard<'a>(&'a AtomicUsize);

impl Drop for ClaimedGuard<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::AcqRel);
    }
}

struct Sender {
    env: Arc<TcpEnv>,
    shared: Arc<ConnShared>,
    app: MessageQueue<SendCmd>,
    iss: u32,
    passive: bool,
}

impl Sender {
    /// Registers `seg` with the processor, emits it and starts its
    /// retransmission actor. Returns false when the connection is gone.
    async fn transmit(&self, seg: TcpSegment, fin: bool) -> bool {
        let (tx, rx) = oneshot::channel();
        let ctl = if fin {
            Control::FinSent {
                seq: seg.seq,
                notify: tx,
            }
        } else {
            Control::Register {
                start: seg.seq,
                end: seg.seq.wrapping_add(seg.seq_len()),
                notify: tx,
            }
        };
        if self.shared.control.send(ctl).await.is_err() {
            return false;
        }
        let mut seg = seg;
        if seg.flags.ack {
            seg.ack = self.shared.rcv_nxt.load(Ordering::Acquire);
        }
        self.env.emit(self.shared.local, self.shared.remote, &seg).await;
        let env = self.env.clone();
        let shared = self.shared.clone();
        self.env.census.spawn(async move {
            let _g = TaskGuard::new(&shared.actors);
            let outcome = retransmit::run(rx, env.config.rto_initial, env.cancel.clone(), |_| {
                let env = env.clone();
                let shared = shared.clone();
                let mut seg = seg.clone();
                async move {
                    if seg.flags.ack {
                        seg.ack = shared.rcv_nxt.load(Ordering::Acquire);
                    }
                    Counters::bump(&env.counters.tcp_retransmits);
                    env.emit(shared.local, shared.remote, &seg).await;
                }
            })
            .await;
            if outcome == RetransmitOutcome::GaveUp {
                let _ = shared.control.send(Control::Abort(Error::Timeout)).await;
            }
        });
        true
    }

    fn template(&self, seq: u32, flags: TcpFlags, payload: Vec<u8>) -> TcpSegment {
        TcpSegment {
            src_port: self.shared.local.port(),
            dst_port: self.shared.remote.port(),
            seq,
            ack: 0,
            flags,
            window: RECV_WINDOW,
            mss: None,
            payload,
        }
    }

    async fn run(self) {
        let _census = ClaimedGuard(&self.shared.tasks);
        let mut state = self.shared.state.subscribe();
        let mut una = self.shared.una.subscribe();
        let our_mss = self.env.config.mss;
        let mut first = self.template(
            self.iss,
            if self.passive { TcpFlags::SYN_ACK } else { TcpFlags::SYN },
            Vec::new(),
        );
        first.mss = Some(our_mss as u16);
        if !self.transmit(first, false).await {
            self.app.close();
            return;
        }
        loop {
            let s = *state.borrow_and_update();
            match s {
                TcbState::SynSent | TcbState::SynRcvd | TcbState::Listen => {}
                TcbState::Closed => {
                    self.app.close();
                    return;
                }
                _ => break,
            }
            tokio::select! {
                r = state.changed() => if r.is_err() { self.app.close(); return; },
                _ = self.env.cancel.cancelled() => { self.app.close(); return; }
            }
        }
        let mss = match self.shared.peer_mss.load(Ordering::Relaxed) {
            0 => our_mss,
            p => our_mss.min(usize::from(p)),
        };
        let window = self.env.config.window_segments;
        let buffer_limit = window * mss;
        let mut next = self.iss.wrapping_add(1);
        let mut buf: VecDeque<u8> = VecDeque::new();
        let mut in_flight: VecDeque<u32> = VecDeque::new();
        let mut closing = false;
        let mut fin_end: Option<u32> = None;
        loop {
            let acked = *una.borrow_and_update();
            while in_flight.front().is_some_and(|&end| seq_ge(acked, end)) {
                in_flight.pop_front();
            }
            let s = *state.borrow_and_update();
            if matches!(s, TcbState::Closed | TcbState::TimeWait) {
                break;
            }
            if fin_end.is_some_and(|f| seq_ge(acked, f)) {
                break;
            }
            if !closing && self.shared.close_requested.load(Ordering::Acquire) && self.app.is_empty() {
                closing = true;
            }
            while in_flight.len() < window && !buf.is_empty() {
                let n = buf.len().min(mss);
                let payload: Vec<u8> = buf.drain(..n).collect();
                let seg = self.template(next, TcpFlags { psh: true, ..TcpFlags::ACK }, payload);
                let end = next.wrapping_add(n as u32);
                if !self.transmit(seg, false).await {
                    self.app.close();
                    return;
                }
                in_flight.push_back(end);
                next = end;
            }
            if closing && buf.is_empty() && fin_end.is_none() && in_flight.len() < window {
                let seg = self.template(next, TcpFlags::FIN_ACK, Vec::new());
                if !self.transmit(seg, true).await {
                    self.app.close();
                    return;
                }
                next = next.wrapping_add(1);
                fin_end = Some(next);
                in_flight.push_back(next);
            }
            let want_data = !closing && buf.len() < buffer_limit;
            tokio::select! {
                _ = self.env.cancel.cancelled() => break,
                r = state.changed() => if r.is_err() { break },
                r = una.changed() => if r.is_err() { break },
                _ = self.shared.close_notify.notified() => {}
                cmd = self.app.recv(), if want_data => match cmd {
                    Ok(SendCmd::Data(d)) => buf.extend(d),
                    Err(_) => closing = true,
                },
            }
        }
        self.app.close();
    }
}

/// An open connection. Dropping it closes the sending direction.
pub struct TcpStream {
    shared: Arc<ConnShared>,
    app: MessageQueue<SendCmd>,
}

impl std::fmt::Debug for TcpStream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TcpStream")
            .field("local", &self.shared.local)
            .field("remote", &self.shared.remote)
            .field("state", &self.state())
            .finish()
    }
}

impl TcpStream {
    pub fn local_addr(&self) -> SocketAddrV4 {
        self.shared.local
    }

    pub fn peer_addr(&self) -> SocketAddrV4 {
        self.shared.remote
    }

    pub fn state(&self) -> TcbState {
        *self.shared.state.borrow()
    }

    pub(crate) fn subscribe(&self) -> watch::Receiver<TcbState> {
        self.shared.state.subscribe()
    }

    pub(crate) fn outcome(&self) -> Option<Error> {
        self.shared.outcome()
    }

    /// Unacknowledged segments in the retransmission ledger.
    pub fn ledger_len(&self) -> usize {
        self.shared.ledger_len.load(Ordering::Acquire)
    }

    /// Long-running tasks (processor, sender) still alive.
    pub fn task_count(&self) -> usize {
        self.shared.tasks.load(Ordering::Acquire)
    }

    /// Retransmission actors still alive.
    pub fn actor_count(&self) -> usize {
        self.shared.actors.load(Ordering::Acquire)
    }

    /// Queues `data` for transmission. Returns once every byte is in the
    /// send path, not when it is acknowledged.
    pub async fn send(&self, data: &[u8]) -> Result<()> {
        if data.is_empty() {
            return Ok(());
        }
        if self.shared.close_requested.load(Ordering::Acquire)
            || !matches!(self.state(), TcbState::Established | TcbState::CloseWait)
        {
            return Err(Error::ConnectionClosed);
        }
        for chunk in data.chunks(SEND_CHUNK) {
            self.app
                .send(SendCmd::Data(chunk.to_vec()))
                .await
                .map_err(|_| Error::ConnectionClosed)?;
        }
        Ok(())
    }

    /// Returns between 1 and `max` in-order bytes, or an empty vector at
    /// end of stream.
    pub async fn recv(&self, max: usize, timeout: Duration) -> Result<Vec<u8>> {
        let deadline = Instant::now() + timeout;
        loop {
            let notified = self.shared.recv_notify.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            {
                let mut b = self.shared.recv.lock();
                if !b.data.is_empty() {
                    let n = b.data.len().min(max.max(1));
                    return Ok(b.data.drain(..n).collect());
                }
                if b.eof {
                    return Ok(Vec::new());
                }
            }
            if self.state() == TcbState::Closed {
                return Err(match self.shared.outcome() {
                    Some(Error::ConnectionReset | Error::Timeout) => Error::ConnectionReset,
                    _ => Error::ConnectionClosed,
                });
            }
            if tokio::time::timeout_at(deadline, notified).await.is_err() {
                return Err(Error::Timeout);
            }
        }
    }

    /// Reads until end of stream or until `limit` bytes are collected.
    pub async fn read_to_end(&self, limit: usize, idle: Duration) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        while out.len() < limit {
            let chunk = self.recv(limit - out.len(), idle).await?;
            if chunk.is_empty() {
                break;
            }
            out.extend(chunk);
        }
        Ok(out)
    }

    /// Sends FIN after everything already queued. Later calls do nothing.
    pub fn close(&self) {
        if !self.shared.close_requested.swap(true, Ordering::AcqRel) {
            self.shared.close_notify.notify_one();
        }
    }

    /// Resets the connection immediately.
    pub fn abort(&self) {
        let _ = self.shared.control.try_send(Control::Abort(Error::ConnectionReset));
    }

    /// Waits until the connection is closed and both of its tasks and all
    /// retransmission actors have exited.
    pub async fn wait_closed(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut state = self.subscribe();
        loop {
            if *state.borrow_and_update() == TcbState::Closed
                && self.task_count() == 0
                && self.actor_count() == 0
            {
                return true;
            }
            let tick = tokio::time::sleep(Duration::from_millis(5));
            tokio::select! {
                _ = state.changed() => {}
                _ = tick => {}
                _ = tokio::time::sleep_until(deadline) => return false,
            }
        }
    }
}

impl Drop for TcpStream {
    fn drop(&mut self) {
        self.close();
    }
}

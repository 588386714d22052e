//! The connection state machine, free of I/O and timers so it can be driven
//! by scripted segment traces.

use std::collections::{BTreeMap, VecDeque};
use std::net::SocketAddrV4;

use tokio::sync::oneshot;

use super::seq::{seq_ge, seq_gt, seq_in, seq_le, seq_lt};
use crate::wire::{TcpFlags, TcpSegment};

/// Advertised receive window. Fixed: no window scaling, no zero-window.
pub const RECV_WINDOW: u16 = 65535;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TcbState {
    Closed,
    Listen,
    SynSent,
    SynRcvd,
    Established,
    FinWait1,
    FinWait2,
    /// Both ends sent FIN before either saw the other's ACK.
    Closing,
    CloseWait,
    LastAck,
    TimeWait,
}

impl TcbState {
    pub const ALL: [TcbState; 11] = [
        TcbState::Closed,
        TcbState::Listen,
        TcbState::SynSent,
        TcbState::SynRcvd,
        TcbState::Established,
        TcbState::FinWait1,
        TcbState::FinWait2,
        TcbState::Closing,
        TcbState::CloseWait,
        TcbState::LastAck,
        TcbState::TimeWait,
    ];

    /// States in which both sequence spaces are known.
    pub fn is_synchronized(self) -> bool {
        !matches!(self, TcbState::Closed | TcbState::Listen | TcbState::SynSent)
    }
}

use TcbState::*;

/// Every edge the state machine may take. A FIN that also acknowledges
/// ours is recorded as FIN_WAIT_1 -> FIN_WAIT_2 -> TIME_WAIT.
pub const LEGAL_TRANSITIONS: &[(TcbState, TcbState)] = &[
    (Closed, Listen),
    (Closed, SynSent),
    (Listen, SynRcvd),
    (Listen, Closed),
    (SynSent, SynRcvd),
    (SynSent, Established),
    (SynSent, Closed),
    (SynRcvd, Established),
    (SynRcvd, FinWait1),
    (SynRcvd, Closed),
    (Established, FinWait1),
    (Established, CloseWait),
    (Established, Closed),
    (FinWait1, FinWait2),
    (FinWait1, Closing),
    (FinWait1, Closed),
    (FinWait2, TimeWait),
    (FinWait2, Closed),
    (Closing, TimeWait),
    (Closing, Closed),
    (CloseWait, LastAck),
    (CloseWait, Closed),
    (LastAck, Closed),
    (TimeWait, Closed),
];

pub fn is_legal(from: TcbState, to: TcbState) -> bool {
    LEGAL_TRANSITIONS.contains(&(from, to))
}

/// One unacknowledged segment. Dropping `notify` tells its retransmission
/// actor to stop; sending on it reports the ACK.
#[derive(Debug)]
pub struct LedgerEntry {
    pub start: u32,
    pub end: u32,
    notify: Option<oneshot::Sender<()>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TcbAction {
    /// Emit a bare ACK carrying `snd_nxt` / `rcv_nxt`.
    SendAck,
    SendRst { seq: u32, ack: Option<u32> },
    /// Emit SYN-ACK with our ISN (simultaneous open).
    SendSynAck,
    /// In-order bytes for the application.
    Deliver(Vec<u8>),
    /// Remote end finished sending.
    PeerFin,
    Established,
    AckAdvanced(u32),
    EnterTimeWait,
    /// Peer reset a synchronized connection.
    Reset,
    /// Peer refused our SYN.
    Refused,
    /// Orderly close finished.
    Closed,
    /// Segment fell outside the receive window.
    OutOfWindow,
    /// In-window bytes dropped because the buffers were full.
    BufferDrop,
}

#[derive(Debug)]
pub struct Tcb {
    pub local: SocketAddrV4,
    pub remote: SocketAddrV4,
    state: TcbState,
    history: Vec<(TcbState, TcbState)>,
    iss: u32,
    irs: u32,
    snd_una: u32,
    snd_nxt: u32,
    rcv_nxt: u32,
    snd_wnd: u16,
    peer_mss: Option<u16>,
    fin_seq: Option<u32>,
    /// Out-of-order bytes keyed by offset from `irs`.
    ooo: BTreeMap<u32, Vec<u8>>,
    ooo_bytes: usize,
    ooo_fin: Option<u32>,
    ledger: VecDeque<LedgerEntry>,
}

impl Tcb {
    fn new(local: SocketAddrV4, remote: SocketAddrV4, iss: u32) -> Tcb {
        Tcb {
            local,
            remote,
            state: Closed,
            history: Vec::new(),
            iss,
            irs: 0,
            snd_una: iss,
            snd_nxt: iss,
            rcv_nxt: 0,
            snd_wnd: 0,
            peer_mss: None,
            fin_seq: None,
            ooo: BTreeMap::new(),
            ooo_bytes: 0,
            ooo_fin: None,
            ledger: VecDeque::new(),
        }
    }

    /// Active open. The caller still has to register and emit the SYN.
    pub fn connect(local: SocketAddrV4, remote: SocketAddrV4, iss: u32) -> Tcb {
        let mut t = Tcb::new(local, remote, iss);
        t.set_state(SynSent);
        t
    }

    /// Passive open, waiting for the SYN that created it.
    pub fn listen(local: SocketAddrV4, remote: SocketAddrV4, iss: u32) -> Tcb {
        let mut t = Tcb::new(local, remote, iss);
        t.set_state(Listen);
        t
    }

    pub fn state(&self) -> TcbState {
        self.state
    }

    pub fn history(&self) -> &[(TcbState, TcbState)] {
        &self.history
    }

    pub fn iss(&self) -> u32 {
        self.iss
    }

    pub fn irs(&self) -> u32 {
        self.irs
    }

    pub fn snd_una(&self) -> u32 {
        self.snd_una
    }

    pub fn snd_nxt(&self) -> u32 {
        self.snd_nxt
    }

    pub fn rcv_nxt(&self) -> u32 {
        self.rcv_nxt
    }

    pub fn peer_mss(&self) -> Option<u16> {
        self.peer_mss
    }

    pub fn peer_window(&self) -> u16 {
        self.snd_wnd
    }

    pub fn fin_seq(&self) -> Option<u32> {
        self.fin_seq
    }

    pub fn ledger_len(&self) -> usize {
        self.ledger.len()
    }

    pub fn ledger_ranges(&self) -> Vec<(u32, u32)> {
        self.ledger.iter().map(|e| (e.start, e.end)).collect()
    }

    pub fn out_of_order_bytes(&self) -> usize {
        self.ooo_bytes
    }

    fn set_state(&mut self, to: TcbState) {
        if to == self.state {
            return;
        }
        debug_assert!(is_legal(self.state, to), "illegal transition {:?} -> {to:?}", self.state);
        self.history.push((self.state, to));
        self.state = to;
        if to == Closed {
            self.ledger.clear();
            self.ooo.clear();
            self.ooo_bytes = 0;
        }
    }

    /// Records `[start, end)` as in flight, before it goes on the wire.
    pub fn register(&mut self, start: u32, end: u32, notify: oneshot::Sender<()>) {
        if self.state == Closed {
            return;
        }
        if seq_gt(end, self.snd_nxt) {
            self.snd_nxt = end;
        }
        self.ledger.push_back(LedgerEntry {
            start,
            end,
            notify: Some(notify),
        });
    }

    /// Records our FIN at `seq` and moves to the matching closing state.
    pub fn on_fin_sent(&mut self, seq: u32, notify: oneshot::Sender<()>) {
        match self.state {
            Established | SynRcvd => self.set_state(FinWait1),
            CloseWait => self.set_state(LastAck),
            _ => return,
        }
        self.fin_seq = Some(seq);
        self.register(seq, seq.wrapping_add(1), notify);
    }

    /// Local abort: retransmission gave up or the application reset.
    pub fn abort(&mut self) -> Vec<TcbAction> {
        let mut out = Vec::new();
        if self.state.is_synchronized() && self.state != TimeWait {
            out.push(TcbAction::SendRst {
                seq: self.snd_nxt,
                ack: None,
            });
        }
        self.set_state(Closed);
        out
    }

    /// A half-open connection ran out of time.
    pub fn handshake_expired(&mut self) {
        if matches!(self.state, SynSent | SynRcvd | Listen) {
            self.set_state(Closed);
        }
    }

    pub fn time_wait_expired(&mut self) {
        if self.state == TimeWait {
            self.set_state(Closed);
        }
    }

    /// Builds an outbound segment with our ports, window and current ACK.
    pub fn segment(&self, seq: u32, flags: TcpFlags, payload: Vec<u8>) -> TcpSegment {
        TcpSegment {
            src_port: self.local.port(),
            dst_port: self.remote.port(),
            seq,
            ack: if flags.ack { self.rcv_nxt } else { 0 },
            flags,
            window: RECV_WINDOW,
            mss: None,
            payload,
        }
    }

    fn acked_through(&mut self, ack: u32) {
        self.snd_una = ack;
        while let Some(front) = self.ledger.front() {
            if !seq_le(front.end, ack) {
                break;
            }
            let mut e = self.ledger.pop_front().expect("front exists");
            if let Some(n) = e.notify.take() {
                let _ = n.send(());
            }
        }
    }

    fn acceptable(&self, seg: &TcpSegment) -> bool {
        let wnd_end = self.rcv_nxt.wrapping_add(u32::from(RECV_WINDOW));
        let len = seg.seq_len();
        if len == 0 {
            seq_in(seg.seq, self.rcv_nxt, wnd_end)
        } else {
            seq_in(seg.seq, self.rcv_nxt, wnd_end)
                || seq_in(seg.seq.wrapping_add(len - 1), self.rcv_nxt, wnd_end)
        }
    }

    /// Applies one inbound segment. `recv_space` is how many bytes the
    /// application buffer can take right now.
    pub fn on_segment(&mut self, seg: &TcpSegment, recv_space: usize) -> Vec<TcbAction> {
        let mut out = Vec::new();
        match self.state {
            Closed => {}
            Listen => self.on_listen(seg, &mut out),
            SynSent => self.on_syn_sent(seg, &mut out),
            _ => self.on_synchronized(seg, recv_space, &mut out),
        }
        out
    }

    fn on_listen(&mut self, seg: &TcpSegment, out: &mut Vec<TcbAction>) {
        if seg.flags.rst {
            return;
        }
        if seg.flags.ack {
            out.push(TcbAction::SendRst {
                seq: seg.ack,
                ack: None,
            });
            return;
        }
        if seg.flags.syn {
            self.irs = seg.seq;
            self.rcv_nxt = seg.seq.wrapping_add(1);
            self.peer_mss = seg.mss;
            self.snd_wnd = seg.window;
            self.set_state(SynRcvd);
            out.push(TcbAction::SendSynAck);
        }
    }

    fn on_syn_sent(&mut self, seg: &TcpSegment, out: &mut Vec<TcbAction>) {
        if seg.flags.ack && !(seq_gt(seg.ack, self.iss) && seq_le(seg.ack, self.snd_nxt)) {
            if !seg.flags.rst {
                out.push(TcbAction::SendRst {
                    seq: seg.ack,
                    ack: None,
                });
            }
            return;
        }
        if seg.flags.rst {
            if seg.flags.ack {
                self.set_state(Closed);
                out.push(TcbAction::Refused);
            }
            return;
        }
        if !seg.flags.syn {
            return;
        }
        self.irs = seg.seq;
        self.rcv_nxt = seg.seq.wrapping_add(1);
        self.peer_mss = seg.mss;
        self.snd_wnd = seg.window;
        if seg.flags.ack {
            self.acked_through(seg.ack);
            self.set_state(Established);
            out.push(TcbAction::SendAck);
            out.push(TcbAction::AckAdvanced(seg.ack));
            out.push(TcbAction::Established);
        } else {
            self.set_state(SynRcvd);
            out.push(TcbAction::SendSynAck);
        }
    }

    fn on_synchronized(&mut self, seg: &TcpSegment, recv_space: usize, out: &mut Vec<TcbAction>) {
        if !self.acceptable(seg) {
            if !seg.flags.rst {
                out.push(TcbAction::OutOfWindow);
                out.push(TcbAction::SendAck);
            }
            return;
        }
        if seg.flags.rst {
            let orderly = matches!(self.state, LastAck | TimeWait | Closing);
            self.set_state(Closed);
            out.push(if orderly { TcbAction::Closed } else { TcbAction::Reset });
            return;
        }
        if seg.flags.syn {
            // In-window SYN on a live connection: challenge instead of abort.
            out.push(TcbAction::SendAck);
            return;
        }
        if !seg.flags.ack {
            return;
        }
        if self.state == SynRcvd {
            if seq_gt(seg.ack, self.snd_una) && seq_le(seg.ack, self.snd_nxt) {
                self.set_state(Established);
                out.push(TcbAction::Established);
            } else {
                out.push(TcbAction::SendRst {
                    seq: seg.ack,
                    ack: None,
                });
                return;
            }
        }
        if seq_gt(seg.ack, self.snd_nxt) {
            out.push(TcbAction::SendAck);
            return;
        }
        if seq_gt(seg.ack, self.snd_una) {
            self.acked_through(seg.ack);
            out.push(TcbAction::AckAdvanced(seg.ack));
        }
        self.snd_wnd = seg.window;
        let fin_acked = self
            .fin_seq
            .is_some_and(|f| seq_ge(self.snd_una, f.wrapping_add(1)));
        if fin_acked {
            match self.state {
                FinWait1 => self.set_state(FinWait2),
                Closing => {
                    self.set_state(TimeWait);
                    out.push(TcbAction::EnterTimeWait);
                }
                LastAck => {
                    self.set_state(Closed);
                    out.push(TcbAction::Closed);
                    return;
                }
                _ => {}
            }
        }
        if !matches!(self.state, Established | FinWait1 | FinWait2) {
            return;
        }
        let mut space = recv_space;
        let mut ack_needed = false;
        if !seg.payload.is_empty() {
            ack_needed = true;
            self.accept_data(seg, &mut space, out);
        }
        if seg.flags.fin {
            ack_needed = true;
            let fin_at = seg.seq.wrapping_add(seg.payload.len() as u32);
            if seq_gt(fin_at, self.rcv_nxt) {
                self.ooo_fin = Some(fin_at);
            }
        }
        if self.ooo_fin == Some(self.rcv_nxt)
            || (seg.flags.fin && seg.seq.wrapping_add(seg.payload.len() as u32) == self.rcv_nxt)
        {
            self.ooo_fin = None;
            self.rcv_nxt = self.rcv_nxt.wrapping_add(1);
            out.push(TcbAction::PeerFin);
            match self.state {
                Established => self.set_state(CloseWait),
                FinWait1 => self.set_state(Closing),
                FinWait2 => {
                    self.set_state(TimeWait);
                    out.push(TcbAction::EnterTimeWait);
                }
                _ => {}
            }
        }
        if ack_needed {
            out.push(TcbAction::SendAck);
        }
    }

    fn accept_data(&mut self, seg: &TcpSegment, space: &mut usize, out: &mut Vec<TcbAction>) {
        let mut seq = seg.seq;
        let mut data = &seg.payload[..];
        if seq_lt(seq, self.rcv_nxt) {
            let skip = self.rcv_nxt.wrapping_sub(seq) as usize;
            data = &data[skip.min(data.len())..];
            seq = self.rcv_nxt;
        }
        if data.is_empty() {
            return;
        }
        if seq != self.rcv_nxt {
            let key = seq.wrapping_sub(self.irs);
            let existing = self.ooo.get(&key).map_or(0, Vec::len);
            if existing >= data.len() {
                return;
            }
            if self.ooo_bytes - existing + data.len() > usize::from(RECV_WINDOW) {
                out.push(TcbAction::BufferDrop);
                return;
            }
            self.ooo_bytes = self.ooo_bytes - existing + data.len();
            self.ooo.insert(key, data.to_vec());
            return;
        }
        let take = data.len().min(*space);
        if take < data.len() {
            out.push(TcbAction::BufferDrop);
        }
        if take > 0 {
            out.push(TcbAction::Deliver(data[..take].to_vec()));
            self.rcv_nxt = self.rcv_nxt.wrapping_add(take as u32);
            *space -= take;
        }
        if take < data.len() {
            return;
        }
        while let Some((&key, _)) = self.ooo.first_key_value() {
            let here = self.rcv_nxt.wrapping_sub(self.irs);
            if key > here {
                break;
            }
            let chunk = self.ooo.remove(&key).expect("first key exists");
            self.ooo_bytes -= chunk.len();
            let skip = (here - key) as usize;
            if skip >= chunk.len() {
                continue;
            }
            let rest = &chunk[skip..];
            let take = rest.len().min(*space);
            if take > 0 {
                out.push(TcbAction::Deliver(rest[..take].to_vec()));
                self.rcv_nxt = self.rcv_nxt.wrapping_add(take as u32);
                *space -= take;
            }
            if take < rest.len() {
                let left = rest[take..].to_vec();
                self.ooo_bytes += left.len();
                self.ooo.insert(here + take as u32, left);
                break;
            }
        }
    }
}

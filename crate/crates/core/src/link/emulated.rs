use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokio::sync::Notify;
use tokio::time::Instant;

use super::ImpairmentProfile;
use crate::error::{Error, Result};

/// A frame held for reordering is released after this long even if no
/// later frame arrives to overtake it.
const HOLD_LIMIT: Duration = Duration::from_millis(2);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameFate {
    Delivered,
    Dropped,
    /// Held back and delivered after the next delivered frame.
    Reordered,
}

/// Per-direction record of written frames, indexed by write order.
#[derive(Debug, Clone, Default)]
pub struct TransmitLog {
    pub fates: Vec<FrameFate>,
    /// Copies of the written frames; empty unless the profile enables capture.
    pub frames: Vec<Vec<u8>>,
}

impl TransmitLog {
    pub fn dropped_indices(&self) -> Vec<usize> {
        self.fates
            .iter()
            .enumerate()
            .filter(|(_, f)| **f == FrameFate::Dropped)
            .map(|(i, _)| i)
            .collect()
    }
}

struct DirState {
    queue: VecDeque<(Instant, Vec<u8>)>,
    held: Option<(Instant, Vec<u8>)>,
    rng: ChaCha8Rng,
    reader_closed: bool,
    log: TransmitLog,
}

struct Direction {
    state: Mutex<DirState>,
    notify: Notify,
    loss_rate: f64,
    reorder_rate: f64,
    delay: Duration,
    capture: bool,
}

impl Direction {
    fn new(profile: &ImpairmentProfile, salt: u64) -> Self {
        Direction {
            state: Mutex::new(DirState {
                queue: VecDeque::new(),
                held: None,
                rng: ChaCha8Rng::seed_from_u64(profile.seed ^ salt),
                reader_closed: false,
                log: TransmitLog::default(),
            }),
            notify: Notify::new(),
            loss_rate: profile.loss_rate,
            reorder_rate: profile.reorder_rate,
            delay: profile.delay,
            capture: profile.capture,
        }
    }
}

pub(crate) struct WireEnd {
    tx: Arc<Direction>,
    rx: Arc<Direction>,
    closed: AtomicBool,
}

pub(crate) fn pair(profile: &ImpairmentProfile) -> (WireEnd, WireEnd) {
    let ab = Arc::new(Direction::new(profile, 0x5eed_a2b0));
    let ba = Arc::new(Direction::new(profile, 0x5eed_b2a0));
    (
        WireEnd {
            tx: ab.clone(),
            rx: ba.clone(),
            closed: AtomicBool::new(false),
        },
        WireEnd {
            tx: ba,
            rx: ab,
            closed: AtomicBool::new(false),
        },
    )
}

impl WireEnd {
    pub(crate) fn write(&self, frame: &[u8]) -> Result<()> {
        if self.closed.load(Ordering::Acquire) {
            return Err(Error::Closed);
        }
        let dir = &*self.tx;
        let now = Instant::now();
        let mut st = dir.state.lock();
        let lost = st.rng.random::<f64>() < dir.loss_rate;
        let reorder = st.rng.random::<f64>() < dir.reorder_rate;
        if dir.capture {
            st.log.frames.push(frame.to_vec());
        }
        if lost {
            st.log.fates.push(FrameFate::Dropped);
            return Ok(());
        }
        let due = now + dir.delay;
        if let Some((_, held)) = st.held.take() {
            st.log.fates.push(FrameFate::Delivered);
            if !st.reader_closed {
                st.queue.push_back((due, frame.to_vec()));
                st.queue.push_back((due, held));
            }
        } else if reorder {
            st.log.fates.push(FrameFate::Reordered);
            st.held = Some((now, frame.to_vec()));
        } else {
            st.log.fates.push(FrameFate::Delivered);
            if !st.reader_closed {
                st.queue.push_back((due, frame.to_vec()));
            }
        }
        drop(st);
        dir.notify.notify_waiters();
        Ok(())
    }

    pub(crate) async fn read(&self) -> Result<Vec<u8>> {
        let dir = &*self.rx;
        loop {
            let notified = dir.notify.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            let wake_at = {
                let mut st = dir.state.lock();
                if st.reader_closed {
                    return Err(Error::Closed);
                }
                let now = Instant::now();
                if let Some(&(due, _)) = st.queue.front() {
                    if due <= now {
                        return Ok(st.queue.pop_front().expect("front exists").1);
                    }
                }
                if st.queue.is_empty() {
                    if let Some((since, _)) = &st.held {
                        if *since + HOLD_LIMIT <= now {
                            let (_, f) = st.held.take().expect("held exists");
                            st.queue.push_back((now + dir.delay, f));
                            continue;
                        }
                    }
                }
                let front = st.queue.front().map(|(due, _)| *due);
                let hold = st.held.as_ref().map(|(since, _)| *since + HOLD_LIMIT);
                match (front, hold) {
                    (Some(a), Some(b)) => Some(a.min(b)),
                    (a, b) => a.or(b),
                }
            };
            match wake_at {
                Some(at) => {
                    tokio::select! {
                        _ = &mut notified => {}
                        _ = tokio::time::sleep_until(at) => {}
                    }
                }
                None => notified.await,
            }
        }
    }

    pub(crate) fn close(&self) {
        self.closed.store(true, Ordering::Release);
        let mut st = self.rx.state.lock();
        st.reader_closed = true;
        st.queue.clear();
        drop(st);
        self.rx.notify.notify_waiters();
    }

    pub(crate) fn is_closed(&self) -> bool {
        self.closed.load(Ordering::Acquire)
    }

    pub(crate) fn transmit_log(&self) -> TransmitLog {
        self.tx.state.lock().log.clone()
    }
}

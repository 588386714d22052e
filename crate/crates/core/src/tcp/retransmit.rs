//! Per-segment retransmission actor.

use std::time::Duration;

use tokio::sync::oneshot;
use tokio_util::sync::CancellationToken;

/// Transmissions of one segment before the connection is reset.
pub const MAX_TRANSMISSIONS: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetransmitOutcome {
    /// The ACK arrived.
    Acked,
    /// The ledger entry went away without an ACK (connection closed).
    Dropped,
    /// Every deadline lapsed.
    GaveUp,
}

/// Waits for the segment's ACK notification. Each lapsed deadline calls
/// `resend` and doubles the timeout, starting from `rto`. After
/// `MAX_TRANSMISSIONS` deadlines without notification it gives up.
pub async fn run<F, Fut>(
    mut notify: oneshot::Receiver<()>,
    rto: Duration,
    cancel: CancellationToken,
    mut resend: F,
) -> RetransmitOutcome
where
    F: FnMut(u32) -> Fut,
    Fut: std::future::Future<Output = ()>,
{
    let mut timeout = rto;
    for attempt in 1..=MAX_TRANSMISSIONS {
        tokio::select! {
            r = &mut notify => {
                return if r.is_ok() {
                    RetransmitOutcome::Acked
                } else {
                    RetransmitOutcome::Dropped
                };
            }
            _ = cancel.cancelled() => return RetransmitOutcome::Dropped,
            _ = tokio::time::sleep(timeout) => {}
        }
        if attempt == MAX_TRANSMISSIONS {
            break;
        }
        resend(attempt).await;
        timeout *= 2;
    }
    RetransmitOutcome::GaveUp
}

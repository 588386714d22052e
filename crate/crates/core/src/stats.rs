//! Drop and event counters. Every policy drop point in the stack bumps
//! exactly one of these.

use std::sync::atomic::{AtomicU64, Ordering};

macro_rules! counters {
    ($($(#[$doc:meta])* $name:ident),* $(,)?) => {
        #[derive(Debug, Default)]
        pub struct Counters {
            $(pub(crate) $name: AtomicU64,)*
        }

        /// Point-in-time copy of [`Counters`].
        #[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
        pub struct StackStats {
            $($(#[$doc])* pub $name: u64,)*
        }

        impl Counters {
            pub fn snapshot(&self) -> StackStats {
                StackStats {
                    $($name: self.$name.load(Ordering::Relaxed),)*
                }
            }
        }
    };
}

counters! {
    /// Inbound frames the link reader could not queue.
    link_rx_overflow,
    eth_rx,
    eth_decode_error,
    /// Frames addressed to another unicast MAC.
    eth_not_ours,
    eth_unbound,
    arp_malformed,
    arp_requests_sent,
    arp_replies_sent,
    ip_rx,
    ip_decode_error,
    ip_checksum_error,
    ip_not_ours,
    ip_ttl_expired,
    ip_unbound_protocol,
    ip_fragments_rx,
    ip_fragment_conflict,
    ip_reassembled,
    ip_reassembly_timeout,
    icmp_decode_error,
    icmp_unmatched_reply,
    icmp_late_reply,
    icmp_replies_sent,
    udp_decode_error,
    udp_unbound_port,
    udp_queue_overflow,
    tcp_decode_error,
    tcp_out_of_window,
    tcp_rst_sent,
    tcp_retransmits,
    tcp_backlog_drop,
    tcp_recv_buffer_drop,
}

impl Counters {
    pub(crate) fn bump(counter: &AtomicU64) {
        counter.fetch_add(1, Ordering::Relaxed);
    }
}

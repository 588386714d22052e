//! Bit-exact encode/decode of the protocol headers this stack speaks.
//!
//! Every type here is an owned, parsed representation: `decode` checks the
//! length, version and checksum fields and returns the payload as the exact
//! residual byte range, while `encode` computes length and checksum fields
//! itself and never trusts values from the caller. No other module touches
//! raw header layouts.

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

mod arp;
mod checksum;
mod ethernet;
mod icmp;
mod ipv4;
mod tcp;
mod udp;

pub use arp::{ArpOp, ArpPacket, ARP_LEN};
pub use checksum::{internet_checksum, transport_checksum};
pub(crate) use ethernet::encode_frame;
pub use ethernet::{EthernetFrame, ETHERNET_HEADER_LEN, ETHERTYPE_ARP, ETHERTYPE_IPV4};
pub use icmp::{IcmpEcho, IcmpEchoKind, ICMP_ECHO_HEADER_LEN};
pub use ipv4::{
    Ipv4Packet, IPV4_HEADER_LEN, IPV4_MAX_PAYLOAD, PROTO_ICMP, PROTO_TCP, PROTO_UDP,
};
pub use tcp::{TcpFlags, TcpSegment, TCP_HEADER_LEN};
pub use udp::{UdpDatagram, UDP_HEADER_LEN, UDP_MAX_PAYLOAD};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("truncated {layer}: need {needed} bytes, have {len}")]
    TruncatedFrame {
        layer: &'static str,
        needed: usize,
        len: usize,
    },
    #[error("{0} checksum mismatch")]
    ChecksumMismatch(&'static str),
    #[error("unsupported {0}")]
    Unsupported(&'static str),
    #[error("{layer} length {len} exceeds {max}")]
    Length {
        layer: &'static str,
        len: usize,
        max: usize,
    },
}

pub(crate) fn need(layer: &'static str, data: &[u8], needed: usize) -> Result<(), WireError> {
    if data.len() < needed {
        Err(WireError::TruncatedFrame {
            layer,
            needed,
            len: data.len(),
        })
    } else {
        Ok(())
    }
}

/// A 48-bit Ethernet hardware address.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct MacAddr(pub [u8; 6]);

impl MacAddr {
    pub const BROADCAST: MacAddr = MacAddr([0xff; 6]);
    pub const ZERO: MacAddr = MacAddr([0; 6]);

    pub fn is_broadcast(&self) -> bool {
        *self == Self::BROADCAST
    }

    /// Locally administered unicast address ending in `n`.
    pub const fn local(n: u32) -> MacAddr {
        let b = n.to_be_bytes();
        MacAddr([0x02, 0x00, b[0], b[1], b[2], b[3]])
    }
}

impl fmt::Display for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            b[0], b[1], b[2], b[3], b[4], b[5]
        )
    }
}

impl fmt::Debug for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid hardware address {0:?}")]
pub struct ParseMacError(String);

impl FromStr for MacAddr {
    type Err = ParseMacError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 6];
        let mut parts = s.split([':', '-']);
        for slot in out.iter_mut() {
            let part = parts.next().ok_or_else(|| ParseMacError(s.to_string()))?;
            if part.len() != 2 {
                return Err(ParseMacError(s.to_string()));
            }
            *slot = u8::from_str_radix(part, 16).map_err(|_| ParseMacError(s.to_string()))?;
        }
        if parts.next().is_some() {
            return Err(ParseMacError(s.to_string()));
        }
        Ok(MacAddr(out))
    }
}

/// Which header layout to parse. UDP and TCP carry the pseudo-header
/// addresses their checksum covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Ethernet,
    Arp,
    Ipv4,
    Icmp,
    Udp { src: Ipv4Addr, dst: Ipv4Addr },
    Tcp { src: Ipv4Addr, dst: Ipv4Addr },
}

/// Any parsed protocol unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Pdu {
    Ethernet(EthernetFrame),
    Arp(ArpPacket),
    Ipv4(Ipv4Packet),
    Icmp(IcmpEcho),
    Udp {
        src: Ipv4Addr,
        dst: Ipv4Addr,
        datagram: UdpDatagram,
    },
    Tcp {
        src: Ipv4Addr,
        dst: Ipv4Addr,
        segment: TcpSegment,
    },
}

pub fn decode(layer: Layer, data: &[u8]) -> Result<Pdu, WireError> {
    Ok(match layer {
        Layer::Ethernet => Pdu::Ethernet(EthernetFrame::decode(data)?),
        Layer::Arp => Pdu::Arp(ArpPacket::decode(data)?),
        Layer::Ipv4 => Pdu::Ipv4(Ipv4Packet::decode(data)?),
        Layer::Icmp => Pdu::Icmp(IcmpEcho::decode(data)?),
        Layer::Udp { src, dst } => Pdu::Udp {
            src,
            dst,
            datagram: UdpDatagram::decode(data, src, dst)?,
        },
        Layer::Tcp { src, dst } => Pdu::Tcp {
            src,
            dst,
            segment: TcpSegment::decode(data, src, dst)?,
        },
    })
}

pub fn encode(unit: &Pdu) -> Result<Vec<u8>, WireError> {
    match unit {
        Pdu::Ethernet(f) => Ok(f.encode()),
        Pdu::Arp(a) => Ok(a.encode()),
        Pdu::Ipv4(p) => p.encode(),
        Pdu::Icmp(e) => Ok(e.encode()),
        Pdu::Udp { src, dst, datagram } => datagram.encode(*src, *dst),
        Pdu::Tcp { src, dst, segment } => segment.encode(*src, *dst),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mac_parse_and_display() {
        let m: MacAddr = "02:00:00:00:00:0a".parse().unwrap();
        assert_eq!(m, MacAddr::local(10));
        assert_eq!(m.to_string(), "02:00:00:00:00:0a");
        assert!("02:00:00:00:00".parse::<MacAddr>().is_err());
        assert!("02:00:00:00:00:00:01".parse::<MacAddr>().is_err());
        assert!("zz:00:00:00:00:00".parse::<MacAddr>().is_err());
    }

    #[test]
    fn layer_dispatch() {
        let mut raw = vec![0u8; 14];
        raw[12] = 0x08;
        match decode(Layer::Ethernet, &raw).unwrap() {
            Pdu::Ethernet(f) => assert_eq!(f.ethertype, 2048),
            other => panic!("wrong unit {other:?}"),
        }
        assert!(matches!(
            decode(Layer::Ethernet, &raw[..13]),
            Err(WireError::TruncatedFrame { .. })
        ));
    }
}

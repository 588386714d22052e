use std::net::Ipv4Addr;

use super::{internet_checksum, need, WireError};

pub const IPV4_HEADER_LEN: usize = 20;
/// Largest payload that fits the 16-bit total-length field.
pub const IPV4_MAX_PAYLOAD: usize = 65535 - IPV4_HEADER_LEN;

pub const PROTO_ICMP: u8 = 1;
pub const PROTO_TCP: u8 = 6;
pub const PROTO_UDP: u8 = 17;

const FLAG_DF: u16 = 0x4000;
const FLAG_MF: u16 = 0x2000;
const OFFSET_MASK: u16 = 0x1fff;

/// An IPv4 packet without options (IHL is always 5).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ipv4Packet {
    pub dscp_ecn: u8,
    pub identification: u16,
    pub dont_fragment: bool,
    pub more_fragments: bool,
    /// Offset of this fragment's payload in 8-byte units.
    pub fragment_offset: u16,
    pub ttl: u8,
    pub protocol: u8,
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub payload: Vec<u8>,
}

impl Ipv4Packet {
    pub fn is_fragment(&self) -> bool {
        self.more_fragments || self.fragment_offset != 0
    }

    /// Byte offset of the payload within the original datagram.
    pub fn payload_offset(&self) -> usize {
        usize::from(self.fragment_offset) * 8
    }

    pub fn decode(data: &[u8]) -> Result<Self, WireError> {
        need("ipv4 header", data, IPV4_HEADER_LEN)?;
        if data[0] >> 4 != 4 {
            return Err(WireError::Unsupported("ip version"));
        }
        if data[0] & 0x0f != 5 {
            return Err(WireError::Unsupported("ip options"));
        }
        let total = usize::from(u16::from_be_bytes([data[2], data[3]]));
        if total < IPV4_HEADER_LEN {
            return Err(WireError::TruncatedFrame {
                layer: "ipv4 total length",
                needed: IPV4_HEADER_LEN,
                len: total,
            });
        }
        need("ipv4 packet", data, total)?;
        if internet_checksum(&data[..IPV4_HEADER_LEN]) != 0 {
            return Err(WireError::ChecksumMismatch("ipv4 header"));
        }
        let flags = u16::from_be_bytes([data[6], data[7]]);
        let fragment_offset = flags & OFFSET_MASK;
        let payload = data[IPV4_HEADER_LEN..total].to_vec();
        let end = usize::from(fragment_offset) * 8 + payload.len();
        if end > 65535 {
            return Err(WireError::Length {
                layer: "ipv4 fragment end",
                len: end,
                max: 65535,
            });
        }
        Ok(Ipv4Packet {
            dscp_ecn: data[1],
            identification: u16::from_be_bytes([data[4], data[5]]),
            dont_fragment: flags & FLAG_DF != 0,
            more_fragments: flags & FLAG_MF != 0,
            fragment_offset,
            ttl: data[8],
            protocol: data[9],
            src: Ipv4Addr::new(data[12], data[13], data[14], data[15]),
            dst: Ipv4Addr::new(data[16], data[17], data[18], data[19]),
            payload,
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        if self.payload.len() > IPV4_MAX_PAYLOAD {
            return Err(WireError::Length {
                layer: "ipv4 payload",
                len: self.payload.len(),
                max: IPV4_MAX_PAYLOAD,
            });
        }
        if self.fragment_offset > OFFSET_MASK
            || self.payload_offset() + self.payload.len() > 65535
        {
            return Err(WireError::Length {
                layer: "ipv4 fragment end",
                len: self.payload_offset() + self.payload.len(),
                max: 65535,
            });
        }
        let total = (IPV4_HEADER_LEN + self.payload.len()) as u16;
        let mut flags = self.fragment_offset;
        if self.dont_fragment {
            flags |= FLAG_DF;
        }
        if self.more_fragments {
            flags |= FLAG_MF;
        }
        let mut out = Vec::with_capacity(usize::from(total));
        out.push(0x45);
        out.push(self.dscp_ecn);
        out.extend_from_slice(&total.to_be_bytes());
        out.extend_from_slice(&self.identification.to_be_bytes());
        out.extend_from_slice(&flags.to_be_bytes());
        out.push(self.ttl);
        out.push(self.protocol);
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&self.src.octets());
        out.extend_from_slice(&self.dst.octets());
        let sum = internet_checksum(&out);
        out[10..12].copy_from_slice(&sum.to_be_bytes());
        out.extend_from_slice(&self.payload);
        Ok(out)
    }
}

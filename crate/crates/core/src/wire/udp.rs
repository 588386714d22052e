use std::net::Ipv4Addr;

use super::{need, transport_checksum, WireError, IPV4_MAX_PAYLOAD, PROTO_UDP};

pub const UDP_HEADER_LEN: usize = 8;
pub const UDP_MAX_PAYLOAD: usize = IPV4_MAX_PAYLOAD - UDP_HEADER_LEN;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UdpDatagram {
    pub src_port: u16,
    pub dst_port: u16,
    pub payload: Vec<u8>,
}

impl UdpDatagram {
    /// Parses and verifies a datagram. A zero checksum field means the
    /// sender did not compute one and is accepted.
    pub fn decode(data: &[u8], src: Ipv4Addr, dst: Ipv4Addr) -> Result<Self, WireError> {
        need("udp header", data, UDP_HEADER_LEN)?;
        let length = usize::from(u16::from_be_bytes([data[4], data[5]]));
        if length < UDP_HEADER_LEN {
            return Err(WireError::TruncatedFrame {
                layer: "udp length",
                needed: UDP_HEADER_LEN,
                len: length,
            });
        }
        need("udp datagram", data, length)?;
        let stored = u16::from_be_bytes([data[6], data[7]]);
        if stored != 0 && transport_checksum(src, dst, PROTO_UDP, &data[..length])? != 0 {
            return Err(WireError::ChecksumMismatch("udp"));
        }
        Ok(UdpDatagram {
            src_port: u16::from_be_bytes([data[0], data[1]]),
            dst_port: u16::from_be_bytes([data[2], data[3]]),
            payload: data[UDP_HEADER_LEN..length].to_vec(),
        })
    }

    pub fn encode(&self, src: Ipv4Addr, dst: Ipv4Addr) -> Result<Vec<u8>, WireError> {
        if self.payload.len() > UDP_MAX_PAYLOAD {
            return Err(WireError::Length {
                layer: "udp payload",
                len: self.payload.len(),
                max: UDP_MAX_PAYLOAD,
            });
        }
        let length = (UDP_HEADER_LEN + self.payload.len()) as u16;
        let mut out = Vec::with_capacity(usize::from(length));
        out.extend_from_slice(&self.src_port.to_be_bytes());
        out.extend_from_slice(&self.dst_port.to_be_bytes());
        out.extend_from_slice(&length.to_be_bytes());
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&self.payload);
        let mut sum = transport_checksum(src, dst, PROTO_UDP, &out)?;
        if sum == 0 {
            // zero on the wire means "no checksum"
            sum = 0xffff;
        }
        out[6..8].copy_from_slice(&sum.to_be_bytes());
        Ok(out)
    }
}

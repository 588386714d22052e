use super::{need, MacAddr, WireError};

pub const ETHERNET_HEADER_LEN: usize = 14;
pub const ETHERTYPE_IPV4: u16 = 0x0800;
pub const ETHERTYPE_ARP: u16 = 0x0806;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EthernetFrame {
    pub dst: MacAddr,
    pub src: MacAddr,
    pub ethertype: u16,
    pub payload: Vec<u8>,
}

impl EthernetFrame {
    pub fn decode(data: &[u8]) -> Result<Self, WireError> {
        need("ethernet frame", data, ETHERNET_HEADER_LEN)?;
        let mut dst = [0u8; 6];
        let mut src = [0u8; 6];
        dst.copy_from_slice(&data[0..6]);
        src.copy_from_slice(&data[6..12]);
        Ok(EthernetFrame {
            dst: MacAddr(dst),
            src: MacAddr(src),
            ethertype: u16::from_be_bytes([data[12], data[13]]),
            payload: data[ETHERNET_HEADER_LEN..].to_vec(),
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_frame(self.dst, self.src, self.ethertype, &self.payload)
    }
}

/// Frames `payload` without first building an [`EthernetFrame`].
pub(crate) fn encode_frame(dst: MacAddr, src: MacAddr, ethertype: u16, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(ETHERNET_HEADER_LEN + payload.len());
    out.extend_from_slice(&dst.0);
    out.extend_from_slice(&src.0);
    out.extend_from_slice(&ethertype.to_be_bytes());
    out.extend_from_slice(payload);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let f = EthernetFrame {
            dst: MacAddr::BROADCAST,
            src: MacAddr::local(1),
            ethertype: ETHERTYPE_IPV4,
            payload: vec![1, 2, 3],
        };
        let raw = f.encode();
        assert_eq!(raw.len(), 17);
        assert_eq!(&raw[0..6], &[0xff; 6]);
        assert_eq!(&raw[6..12], &MacAddr::local(1).0);
        assert_eq!(&raw[12..14], &[0x08, 0x00]);
        assert_eq!(EthernetFrame::decode(&raw).unwrap(), f);
    }
}

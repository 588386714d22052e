use super::{internet_checksum, need, WireError};

pub const ICMP_ECHO_HEADER_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IcmpEchoKind {
    Request,
    Reply,
}

impl IcmpEchoKind {
    pub fn type_code(self) -> u8 {
        match self {
            IcmpEchoKind::Request => 8,
            IcmpEchoKind::Reply => 0,
        }
    }
}

/// ICMP echo request or reply. Other ICMP types are rejected on decode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IcmpEcho {
    pub kind: IcmpEchoKind,
    pub identifier: u16,
    pub sequence: u16,
    pub data: Vec<u8>,
}

impl IcmpEcho {
    /// The reply mirroring this request's identifier, sequence and data.
    pub fn reply(&self) -> IcmpEcho {
        IcmpEcho {
            kind: IcmpEchoKind::Reply,
            identifier: self.identifier,
            sequence: self.sequence,
            data: self.data.clone(),
        }
    }

    pub fn decode(data: &[u8]) -> Result<Self, WireError> {
        need("icmp echo", data, ICMP_ECHO_HEADER_LEN)?;
        let kind = match data[0] {
            8 => IcmpEchoKind::Request,
            0 => IcmpEchoKind::Reply,
            _ => return Err(WireError::Unsupported("icmp type")),
        };
        if data[1] != 0 {
            return Err(WireError::Unsupported("icmp code"));
        }
        if internet_checksum(data) != 0 {
            return Err(WireError::ChecksumMismatch("icmp"));
        }
        Ok(IcmpEcho {
            kind,
            identifier: u16::from_be_bytes([data[4], data[5]]),
            sequence: u16::from_be_bytes([data[6], data[7]]),
            data: data[ICMP_ECHO_HEADER_LEN..].to_vec(),
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(ICMP_ECHO_HEADER_LEN + self.data.len());
        out.push(self.kind.type_code());
        out.push(0);
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&self.identifier.to_be_bytes());
        out.extend_from_slice(&self.sequence.to_be_bytes());
        out.extend_from_slice(&self.data);
        let sum = internet_checksum(&out);
        out[2..4].copy_from_slice(&sum.to_be_bytes());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reply_mirrors_request() {
        let req = IcmpEcho {
            kind: IcmpEchoKind::Request,
            identifier: 7,
            sequence: 3,
            data: b"abc".to_vec(),
        };
        let rep = req.reply();
        assert_eq!((rep.identifier, rep.sequence, &rep.data[..]), (7, 3, &b"abc"[..]));
        let raw = rep.encode();
        assert_eq!(raw[0], 0);
        assert_eq!(internet_checksum(&raw), 0);
        assert_eq!(IcmpEcho::decode(&raw).unwrap(), rep);
    }

    #[test]
    fn rejects_other_types() {
        let mut raw = IcmpEcho {
            kind: IcmpEchoKind::Request,
            identifier: 1,
            sequence: 1,
            data: vec![],
        }
        .encode();
        raw[0] = 3;
        assert_eq!(IcmpEcho::decode(&raw), Err(WireError::Unsupported("icmp type")));
    }
}

//! One's-complement Internet checksum and the UDP/TCP pseudo-header variant.

use std::net::Ipv4Addr;

use super::WireError;

/// Adds `data` to a running one's-complement accumulator as big-endian
/// 16-bit words. A trailing odd byte is padded with zero.
fn accumulate(mut acc: u64, data: &[u8]) -> u64 {
    let mut words = data.chunks_exact(2);
    for w in &mut words {
        acc += u64::from(u16::from_be_bytes([w[0], w[1]]));
    }
    if let [last] = words.remainder() {
        acc += u64::from(*last) << 8;
    }
    acc
}

fn fold(mut acc: u64) -> u16 {
    while acc > 0xffff {
        acc = (acc & 0xffff) + (acc >> 16);
    }
    acc as u16
}

/// Returns the one's complement of the one's-complement sum of `data`.
///
/// Writing the result into the checksum field of the covered region makes a
/// second pass over that region return zero.
pub fn internet_checksum(data: &[u8]) -> u16 {
    !fold(accumulate(0, data))
}

/// Checksum over the IPv4 pseudo-header (source, destination, zero,
/// protocol, segment length) followed by `segment`.
pub fn transport_checksum(
    src: Ipv4Addr,
    dst: Ipv4Addr,
    protocol: u8,
    segment: &[u8],
) -> Result<u16, WireError> {
    if segment.len() > usize::from(u16::MAX) {
        return Err(WireError::Length {
            layer: "transport segment",
            len: segment.len(),
            max: usize::from(u16::MAX),
        });
    }
    let mut acc = accumulate(0, &src.octets());
    acc = accumulate(acc, &dst.octets());
    acc += u64::from(protocol);
    acc += segment.len() as u64;
    Ok(!fold(accumulate(acc, segment)))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straight-line reference: build explicit 16-bit words, sum in u32,
    /// fold carries, complement.
    fn oracle(data: &[u8]) -> u16 {
        let mut padded = data.to_vec();
        if padded.len() % 2 == 1 {
            padded.push(0);
        }
        let mut sum: u32 = 0;
        for i in (0..padded.len()).step_by(2) {
            sum += (u32::from(padded[i]) << 8) | u32::from(padded[i + 1]);
            sum = (sum & 0xffff) + (sum >> 16);
        }
        !(sum as u16)
    }

    #[test]
    fn empty_and_zero_word() {
        assert_eq!(internet_checksum(&[]), 0xffff);
        assert_eq!(internet_checksum(&[0, 0]), 0xffff);
    }

    #[test]
    fn reference_vector() {
        let data = [0x00, 0x01, 0xf2, 0x03, 0xf4, 0xf5, 0xf6, 0xf7];
        assert_eq!(oracle(&data), 0x220d);
        assert_eq!(internet_checksum(&data), 0x220d);
    }

    #[test]
    fn odd_length_pads_low_byte() {
        assert_eq!(internet_checksum(&[0x12]), !0x1200);
        assert_eq!(internet_checksum(&[0x12, 0x34, 0x56]), oracle(&[0x12, 0x34, 0x56]));
    }

    #[test]
    fn pseudo_header_only() {
        let z = Ipv4Addr::UNSPECIFIED;
        assert_eq!(transport_checksum(z, z, 17, &[]).unwrap(), 0xffee);
    }

    #[test]
    fn pseudo_header_rejects_oversize() {
        let z = Ipv4Addr::UNSPECIFIED;
        let big = vec![0u8; 65536];
        assert!(matches!(
            transport_checksum(z, z, 6, &big),
            Err(WireError::Length { .. })
        ));
    }

    #[test]
    fn single_bit_flips_are_detected() {
        let src = Ipv4Addr::new(10, 0, 0, 1);
        let dst = Ipv4Addr::new(10, 0, 0, 2);
        let mut seg: Vec<u8> = (0u8..16).map(|b| b.wrapping_mul(37)).collect();
        // checksum field at bytes 6..8, as in a UDP header
        seg[6] = 0;
        seg[7] = 0;
        let c = transport_checksum(src, dst, 17, &seg).unwrap();
        seg[6..8].copy_from_slice(&c.to_be_bytes());
        assert_eq!(transport_checksum(src, dst, 17, &seg).unwrap(), 0);
        for byte in 0..seg.len() {
            for bit in 0..8 {
                let mut flipped = seg.clone();
                flipped[byte] ^= 1 << bit;
                assert_ne!(
                    transport_checksum(src, dst, 17, &flipped).unwrap(),
                    0,
                    "flip of byte {byte} bit {bit} went unnoticed"
                );
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn matches_oracle(data in proptest::collection::vec(proptest::num::u8::ANY, 0..2000)) {
            proptest::prop_assert_eq!(internet_checksum(&data), oracle(&data));
        }
    }
}

use std::net::Ipv4Addr;

use cspnet::wire::{
    self, ArpOp, ArpPacket, EthernetFrame, IcmpEcho, IcmpEchoKind, Ipv4Packet, Layer, TcpFlags, TcpSegment,
    UdpDatagram,
};
use cspnet::MacAddr;
use proptest::collection::vec;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CASES: u32 = 10_000;

fn mac() -> impl Strategy<Value = MacAddr> {
    any::<[u8; 6]>().prop_map(MacAddr)
}

fn ip() -> impl Strategy<Value = Ipv4Addr> {
    any::<u32>().prop_map(Ipv4Addr::from)
}

/// Straight-line ones'-complement sum, sharing nothing with the crate.
fn ones_sum(chunks: &[&[u8]]) -> u16 {
    let mut bytes = Vec::new();
    for c in chunks {
        bytes.extend_from_slice(c);
    }
    if bytes.len() % 2 == 1 {
        bytes.push(0);
    }
    let mut acc: u64 = 0;
    for w in bytes.chunks(2) {
        acc += u64::from(w[0]) << 8 | u64::from(w[1]);
    }
    while acc > 0xffff {
        acc = (acc & 0xffff) + (acc >> 16);
    }
    acc as u16
}

fn pseudo(src: Ipv4Addr, dst: Ipv4Addr, proto: u8, len: usize) -> Vec<u8> {
    let mut p = Vec::new();
    p.extend_from_slice(&src.octets());
    p.extend_from_slice(&dst.octets());
    p.extend_from_slice(&[0, proto]);
    p.extend_from_slice(&(len as u16).to_be_bytes());
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn ethernet_roundtrip(dst in mac(), src in mac(), ethertype in any::<u16>(), payload in vec(any::<u8>(), 0..200)) {
        let f = EthernetFrame { dst, src, ethertype, payload };
        prop_assert_eq!(EthernetFrame::decode(&f.encode()).unwrap(), f);
    }

    #[test]
    fn arp_roundtrip(req in any::<bool>(), sm in mac(), si in ip(), tm in mac(), ti in ip()) {
        let a = ArpPacket { op: if req { ArpOp::Request } else { ArpOp::Reply }, sender_mac: sm, sender_ip: si, target_mac: tm, target_ip: ti };
        prop_assert_eq!(ArpPacket::decode(&a.encode()).unwrap(), a);
    }

    #[test]
    fn ipv4_roundtrip(
        id in any::<u16>(), df in any::<bool>(), mf in any::<bool>(), off in 0u16..0x1f00,
        dscp in any::<u8>(), ttl in any::<u8>(), protocol in any::<u8>(), src in ip(), dst in ip(),
        payload in vec(any::<u8>(), 0..600),
    ) {
        let p = Ipv4Packet { dscp_ecn: dscp, identification: id, dont_fragment: df, more_fragments: mf,
            fragment_offset: off, ttl, protocol, src, dst, payload };
        let raw = p.encode().unwrap();
        prop_assert_eq!(ones_sum(&[&raw[..20]]), 0xffff);
        prop_assert_eq!(Ipv4Packet::decode(&raw).unwrap(), p);
    }

    #[test]
    fn icmp_roundtrip(req in any::<bool>(), identifier in any::<u16>(), sequence in any::<u16>(), data in vec(any::<u8>(), 0..300)) {
        let e = IcmpEcho { kind: if req { IcmpEchoKind::Request } else { IcmpEchoKind::Reply }, identifier, sequence, data };
        let raw = e.encode();
        prop_assert_eq!(ones_sum(&[&raw]), 0xffff);
        prop_assert_eq!(IcmpEcho::decode(&raw).unwrap(), e);
    }

    #[test]
    fn udp_roundtrip(sp in any::<u16>(), dp in any::<u16>(), src in ip(), dst in ip(), payload in vec(any::<u8>(), 0..600)) {
        let u = UdpDatagram { src_port: sp, dst_port: dp, payload };
        let raw = u.encode(src, dst).unwrap();
        prop_assert_eq!(ones_sum(&[&pseudo(src, dst, 17, raw.len()), &raw]), 0xffff);
        prop_assert_eq!(UdpDatagram::decode(&raw, src, dst).unwrap(), u);
    }

    #[test]
    fn tcp_roundtrip(
        sp in any::<u16>(), dp in any::<u16>(), seq in any::<u32>(), ack in any::<u32>(), bits in 0u8..64,
        window in any::<u16>(), mss in proptest::option::of(any::<u16>()), src in ip(), dst in ip(),
        payload in vec(any::<u8>(), 0..600),
    ) {
        let t = TcpSegment { src_port: sp, dst_port: dp, seq, ack, flags: TcpFlags::from_bits(bits), window, mss, payload };
        let raw = t.encode(src, dst).unwrap();
        prop_assert_eq!(ones_sum(&[&pseudo(src, dst, 6, raw.len()), &raw]), 0xffff);
        prop_assert_eq!(TcpSegment::decode(&raw, src, dst).unwrap(), t);
    }

    #[test]
    fn corrupted_udp_is_rejected(payload in vec(any::<u8>(), 1..200), at in any::<prop::sample::Index>(), flip in 1u8..=255) {
        let (src, dst) = (Ipv4Addr::new(10, 0, 0, 1), Ipv4Addr::new(10, 0, 0, 2));
        let mut raw = UdpDatagram { src_port: 1, dst_port: 2, payload }.encode(src, dst).unwrap();
        let i = 8 + at.index(raw.len() - 8);
        raw[i] ^= flip;
        prop_assert!(UdpDatagram::decode(&raw, src, dst).is_err());
    }
}

#[test]
fn random_buffers_never_panic() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let (src, dst) = (Ipv4Addr::new(10, 0, 0, 1), Ipv4Addr::new(10, 0, 0, 2));
    let layers = [
        Layer::Ethernet,
        Layer::Arp,
        Layer::Ipv4,
        Layer::Icmp,
        Layer::Udp { src, dst },
        Layer::Tcp { src, dst },
    ];
    let mut buf = Vec::new();
    for i in 0..100_000usize {
        let len = rng.random_range(0..128);
        buf.clear();
        buf.extend((0..len).map(|_| rng.random::<u8>()));
        // Bias some buffers toward plausible headers to reach deeper paths.
        if len > 1 && i % 3 == 0 {
            buf[0] = 0x45;
        }
        for layer in layers {
            if let Ok(pdu) = wire::decode(layer, &buf) {
                let again = wire::encode(&pdu).unwrap();
                assert_eq!(wire::decode(layer, &again).unwrap(), pdu);
            }
        }
    }
}

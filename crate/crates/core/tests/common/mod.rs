#![allow(dead_code)]

use std::time::Duration;

use cspnet::{create_wire_pair, ImpairmentProfile, LinkDevice, Stack, StackConfig};

/// Host `n` with timers short enough for tests.
pub fn quick(n: u8) -> StackConfig {
    StackConfig {
        arp_timeout: Duration::from_millis(200),
        tcp_rto_initial: Duration::from_millis(200),
        tcp_time_wait: Duration::from_millis(200),
        tcp_handshake_timeout: Duration::from_secs(2),
        reassembly_timeout: Duration::from_secs(2),
        ..StackConfig::emulated_host(n)
    }
}

pub fn pair_with(profile: ImpairmentProfile, a: StackConfig, b: StackConfig) -> (Stack, Stack) {
    let (da, db) = create_wire_pair(profile);
    (
        Stack::up_with_device(a, da).unwrap(),
        Stack::up_with_device(b, db).unwrap(),
    )
}

/// Two quick hosts, 10.0.0.1 and 10.0.0.2, with static ARP entries so
/// impaired wires do not disturb resolution.
pub async fn linked(profile: ImpairmentProfile) -> (Stack, Stack) {
    let (a, b) = pair_with(profile, quick(1), quick(2));
    a.arp_insert(b.ip(), b.mac()).await.unwrap();
    b.arp_insert(a.ip(), a.mac()).await.unwrap();
    (a, b)
}

/// A stack on one end and the raw other end, for scripted peers.
pub fn with_raw_peer(cfg: StackConfig) -> (Stack, LinkDevice) {
    let (da, db) = create_wire_pair(ImpairmentProfile::lossless());
    (Stack::up_with_device(cfg, da).unwrap(), db)
}

pub async fn down(stacks: &[&Stack]) {
    for s in stacks {
        s.down().await.unwrap();
        assert_eq!(s.census().live(), 0);
    }
}

use std::net::Ipv4Addr;

use cspnet::wire::{EthernetFrame, Ipv4Packet, ETHERTYPE_IPV4};
use cspnet::MacAddr;

/// A scripted host at 10.0.0.2 speaking raw frames on a wire end.
pub struct RawPeer {
    pub dev: LinkDevice,
    pub ip: Ipv4Addr,
    pub mac: MacAddr,
    pub stack_mac: MacAddr,
}

impl RawPeer {
    /// Brings up a stack at 10.0.0.1 facing a raw peer, with ARP entries
    /// preinstalled on the stack side.
    pub async fn attach(cfg: StackConfig) -> (Stack, RawPeer) {
        let (stack, dev) = with_raw_peer(cfg);
        let peer = RawPeer {
            dev,
            ip: Ipv4Addr::new(10, 0, 0, 2),
            mac: MacAddr::local(2),
            stack_mac: stack.mac(),
        };
        stack.arp_insert(peer.ip, peer.mac).await.unwrap();
        (stack, peer)
    }

    pub fn packet(&self, dst: Ipv4Addr, protocol: u8, id: u16, payload: Vec<u8>) -> Ipv4Packet {
        Ipv4Packet {
            dscp_ecn: 0,
            identification: id,
            dont_fragment: false,
            more_fragments: false,
            fragment_offset: 0,
            ttl: 64,
            protocol,
            src: self.ip,
            dst,
            payload,
        }
    }

    pub async fn send_ip(&self, p: &Ipv4Packet) {
        let frame = EthernetFrame {
            dst: self.stack_mac,
            src: self.mac,
            ethertype: ETHERTYPE_IPV4,
            payload: p.encode().unwrap(),
        };
        self.dev.write_frame(&frame.encode()).await.unwrap();
    }

    /// Next IPv4 packet from the stack, skipping anything else.
    pub async fn recv_ip(&self, timeout: Duration) -> Option<Ipv4Packet> {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let raw = tokio::time::timeout_at(deadline, self.dev.read_frame()).await.ok()?.ok()?;
            let Ok(f) = EthernetFrame::decode(&raw) else { continue };
            if f.ethertype != ETHERTYPE_IPV4 {
                continue;
            }
            if let Ok(p) = Ipv4Packet::decode(&f.payload) {
                return Some(p);
            }
        }
    }
}

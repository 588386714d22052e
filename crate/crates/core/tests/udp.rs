mod common;

use std::net::{Ipv4Addr, SocketAddrV4};
use std::time::Duration;

use cspnet::udp::{EPHEMERAL_FIRST, EPHEMERAL_LAST};
use cspnet::{Error, ImpairmentProfile};

use common::{down, linked};

const WAIT: Duration = Duration::from_secs(2);

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn hello_roundtrip() {
    let (a, b) = linked(ImpairmentProfile::lossless()).await;
    let server = b.udp_bind(7000).unwrap();
    let client = a.udp_bind(0).unwrap();
    client.send_to(server.local_addr(), b"hello").await.unwrap();
    let m = server.recv_from(WAIT).await.unwrap();
    assert_eq!(m.payload, b"hello");
    assert_eq!(m.src, client.local_addr());
    server.send_to(m.src, b"world").await.unwrap();
    assert_eq!(client.recv_from(WAIT).await.unwrap().payload, b"world");
    drop((server, client));
    down(&[&a, &b]).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn port_binding_rules() {
    let (a, b) = linked(ImpairmentProfile::lossless()).await;
    let s = a.udp_bind(5000).unwrap();
    assert!(matches!(a.udp_bind(5000), Err(Error::AlreadyBound)));
    drop(s);
    let again = a.udp_bind(5000).unwrap();
    let e1 = a.udp_bind(0).unwrap();
    let e2 = a.udp_bind(0).unwrap();
    for e in [&e1, &e2] {
        assert!((EPHEMERAL_FIRST..=EPHEMERAL_LAST).contains(&e.local_port()));
    }
    assert_ne!(e1.local_port(), e2.local_port());
    drop((again, e1, e2));
    down(&[&a, &b]).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn oversize_payload_rejected() {
    let (a, b) = linked(ImpairmentProfile::lossless()).await;
    let s = a.udp_bind(0).unwrap();
    let dst = SocketAddrV4::new(b.ip(), 9);
    let r = s.send_to(dst, &vec![0u8; 65508]).await;
    assert!(matches!(r, Err(Error::Wire(_))), "{r:?}");
    assert_eq!(a.device().transmit_log().unwrap().fates.len(), 0);
    drop(s);
    down(&[&a, &b]).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn large_datagram_is_fragmented_and_rebuilt() {
    let (a, b) = linked(ImpairmentProfile::lossless()).await;
    let server = b.udp_bind(7001).unwrap();
    let client = a.udp_bind(0).unwrap();
    let data: Vec<u8> = (0..3000u32).map(|i| (i * 7 % 251) as u8).collect();
    client.send_to(server.local_addr(), &data).await.unwrap();
    let m = server.recv_from(WAIT).await.unwrap();
    assert_eq!(m.payload, data);
    assert_eq!(a.device().transmit_log().unwrap().fates.len(), 3);
    assert_eq!(b.stats().ip_reassembled, 1);
    drop((server, client));
    down(&[&a, &b]).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn max_payload_crosses_the_wire() {
    let (a, b) = linked(ImpairmentProfile::lossless()).await;
    let server = b.udp_bind(7002).unwrap();
    let client = a.udp_bind(0).unwrap();
    let data = vec![0x5a; 65507];
    client.send_to(server.local_addr(), &data).await.unwrap();
    assert_eq!(server.recv_from(WAIT).await.unwrap().payload.len(), 65507);
    drop((server, client));
    down(&[&a, &b]).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn recv_timeout() {
    let (a, b) = linked(ImpairmentProfile::lossless()).await;
    let s = a.udp_bind(7003).unwrap();
    let t = std::time::Instant::now();
    assert!(matches!(s.recv_from(Duration::from_millis(100)).await, Err(Error::Timeout)));
    let el = t.elapsed();
    assert!(el >= Duration::from_millis(100) && el < Duration::from_millis(500), "{el:?}");
    drop(s);
    down(&[&a, &b]).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn order_preserved_on_clean_wire() {
    let (a, b) = linked(ImpairmentProfile::lossless()).await;
    let server = b.udp_bind(7004).unwrap();
    let client = a.udp_bind(0).unwrap();
    for i in 0..100u32 {
        client.send_to(server.local_addr(), &i.to_be_bytes()).await.unwrap();
    }
    for i in 0..100u32 {
        let m = server.recv_from(WAIT).await.unwrap();
        assert_eq!(m.payload, i.to_be_bytes());
    }
    drop((server, client));
    down(&[&a, &b]).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn unbound_port_counted() {
    let (a, b) = linked(ImpairmentProfile::lossless()).await;
    let client = a.udp_bind(0).unwrap();
    client.send_to(SocketAddrV4::new(b.ip(), 4444), b"x").await.unwrap();
    tokio::time::sleep(Duration::from_millis(100)).await;
    assert_eq!(b.stats().udp_unbound_port, 1);
    drop(client);
    down(&[&a, &b]).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn loopback_datagram() {
    let (a, b) = linked(ImpairmentProfile::lossless()).await;
    let s = a.udp_bind(7005).unwrap();
    let c = a.udp_bind(0).unwrap();
    c.send_to(SocketAddrV4::new(Ipv4Addr::LOCALHOST, 7005), b"lo").await.unwrap();
    let m = s.recv_from(WAIT).await.unwrap();
    assert_eq!(m.payload, b"lo");
    assert_eq!(*m.src.ip(), Ipv4Addr::LOCALHOST);
    drop((s, c));
    down(&[&a, &b]).await;
}

mod common;

use std::net::SocketAddrV4;
use std::time::{Duration, Instant};

use cspnet::{create_wire_pair, Error, ImpairmentProfile, Stack, StackConfig};

use common::{linked, quick};

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn busy_stack_drains_to_zero_tasks() {
    let (a, b) = linked(ImpairmentProfile::lossless()).await;
    let idle = a.census().live();
    assert!(idle > 0);
    let l = b.tcp_listen(80).unwrap();
    let c = a.tcp_connect(SocketAddrV4::new(b.ip(), 80), Duration::from_secs(2)).await.unwrap();
    let s = l.accept(Duration::from_secs(2)).await.unwrap();
    c.send(&vec![1u8; 200_000]).await.unwrap();
    let _udp = a.udp_bind(53).unwrap();
    let pinger = a.icmp().clone();
    let dst = b.ip();
    let ping = tokio::spawn(async move { pinger.ping(dst, 100, Duration::from_millis(5), 56).await });
    tokio::time::sleep(Duration::from_millis(50)).await;
    assert!(a.census().live() > idle);
    let t = Instant::now();
    a.down().await.unwrap();
    b.down().await.unwrap();
    assert!(t.elapsed() < a.config().longest_timer() * 2);
    assert_eq!(a.census().live(), 0);
    assert_eq!(b.census().live(), 0);
    assert!(ping.await.is_ok());
    assert!(!a.is_running());
    drop((c, s, l));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn down_twice_and_use_after_down() {
    let (a, b) = linked(ImpairmentProfile::lossless()).await;
    a.down().await.unwrap();
    assert!(matches!(a.down().await, Err(Error::NotRunning)));
    assert!(matches!(a.udp_bind(0), Err(Error::NotRunning)));
    assert!(matches!(a.tcp_listen(1), Err(Error::NotRunning)));
    let r = a.tcp_connect(SocketAddrV4::new(b.ip(), 1), Duration::from_millis(100)).await;
    assert!(matches!(r, Err(Error::NotRunning)));
    b.down().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn invalid_config_rejected() {
    let (d, _e) = create_wire_pair(ImpairmentProfile::lossless());
    let bad = StackConfig {
        netmask: "255.0.255.0".parse().unwrap(),
        ..quick(1)
    };
    assert!(matches!(Stack::up_with_device(bad, d.clone()), Err(Error::Config(_))));
    d.close();
    assert!(matches!(
        Stack::up_with_device(quick(1), d),
        Err(Error::DeviceUnavailable(_))
    ));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn dropping_a_stack_stops_its_tasks() {
    let (a, b) = linked(ImpairmentProfile::lossless()).await;
    let census = a.census().clone();
    drop(a);
    let t = Instant::now();
    while census.live() > 0 && t.elapsed() < Duration::from_secs(3) {
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    assert_eq!(census.live(), 0);
    b.down().await.unwrap();
}

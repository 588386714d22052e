mod common;

use std::time::Duration;

use cspnet::link::FrameFate;
use cspnet::{ImpairmentProfile, StackConfig};

use common::{down, linked, pair_with, quick};

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn fifty_pings_lossless() {
    let (a, b) = pair_with(ImpairmentProfile::lossless(), quick(1), quick(2));
    let stats = a.ping(b.ip(), 50, Duration::from_millis(10), 56).await.unwrap();
    assert_eq!(stats.sent, 50);
    assert_eq!(stats.received, 50);
    assert_eq!(stats.loss, 0.0);
    assert!(stats.avg_ms < 5.0, "avg {} ms", stats.avg_ms);
    assert!(stats.min_ms <= stats.avg_ms && stats.avg_ms <= stats.max_ms);
    down(&[&a, &b]).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn silent_peer_is_total_loss() {
    let (a, _raw) = common::with_raw_peer(quick(1));
    a.arp_insert("10.0.0.2".parse().unwrap(), cspnet::MacAddr::local(2))
        .await
        .unwrap();
    let stats = a
        .ping("10.0.0.2".parse().unwrap(), 3, Duration::from_millis(10), 56)
        .await
        .unwrap();
    assert_eq!(stats.received, 0);
    assert_eq!(stats.loss, 1.0);
    assert!(stats.rtts_ms.is_empty());
    down(&[&a]).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn loss_matches_wire_logs() {
    let (a, b) = linked(ImpairmentProfile::lossy(0.5, 0.0, 7)).await;
    let n = 40;
    let stats = a.ping(b.ip(), n, Duration::from_millis(5), 56).await.unwrap();
    let requests = a.device().transmit_log().unwrap().fates;
    let replies = b.device().transmit_log().unwrap().fates;
    assert_eq!(requests.len(), n as usize);
    let delivered = requests.iter().filter(|f| **f == FrameFate::Delivered).count();
    assert_eq!(replies.len(), delivered);
    let answered = replies.iter().filter(|f| **f == FrameFate::Delivered).count();
    assert_eq!(stats.received as usize, answered);
    let expect = 1.0 - answered as f64 / n as f64;
    assert!((stats.loss - expect).abs() < 1e-9);
    assert!(stats.loss > 0.0 && stats.loss < 1.0);
    down(&[&a, &b]).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_sessions_do_not_cross() {
    let (a, b) = pair_with(ImpairmentProfile::lossless(), quick(1), quick(2));
    let dst = b.ip();
    let (x, y) = tokio::join!(
        a.ping(dst, 20, Duration::from_millis(5), 56),
        a.ping(dst, 20, Duration::from_millis(7), 200),
    );
    let (x, y) = (x.unwrap(), y.unwrap());
    assert_eq!((x.received, y.received), (20, 20));
    assert_eq!(a.stats().icmp_unmatched_reply, 0);
    down(&[&a, &b]).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn burst_of_requests_all_answered() {
    let cfg = |n| StackConfig {
        queue_capacity: 2048,
        ..quick(n)
    };
    let (a, b) = pair_with(ImpairmentProfile::lossless(), cfg(1), cfg(2));
    let stats = a.ping(b.ip(), 1000, Duration::from_micros(200), 56).await.unwrap();
    assert_eq!(stats.received, 1000);
    assert_eq!(a.icmp().outstanding(), 0);
    down(&[&a, &b]).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn ping_self_over_loopback() {
    let (a, b) = pair_with(ImpairmentProfile::lossless(), quick(1), quick(2));
    let s = a.ping(a.ip(), 5, Duration::from_millis(2), 56).await.unwrap();
    assert_eq!(s.received, 5);
    let s = a.ping("127.0.0.1".parse().unwrap(), 5, Duration::from_millis(2), 56).await.unwrap();
    assert_eq!(s.received, 5);
    assert!(a.device().transmit_log().unwrap().fates.is_empty());
    down(&[&a, &b]).await;
}


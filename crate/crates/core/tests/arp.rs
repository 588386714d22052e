mod common;

use std::net::Ipv4Addr;
use std::time::{Duration, Instant};

use cspnet::{Error, ImpairmentProfile, StackConfig};

use common::{down, pair_with, quick, with_raw_peer};

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn resolves_peer_and_learns_reverse() {
    let (a, b) = pair_with(ImpairmentProfile::lossless(), quick(1), quick(2));
    assert_eq!(a.arp_resolve(b.ip()).await.unwrap(), b.mac());
    // The request taught b our mapping.
    assert_eq!(b.arp().lookup(a.ip()), Some(a.mac()));
    down(&[&a, &b]).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_resolutions_share_one_request() {
    let (a, b) = pair_with(ImpairmentProfile::lossless(), quick(1), quick(2));
    let dst = b.ip();
    let tasks: Vec<_> = (0..20)
        .map(|_| {
            let arp = a.arp().clone();
            tokio::spawn(async move { arp.resolve(dst).await })
        })
        .collect();
    for t in tasks {
        assert_eq!(t.await.unwrap().unwrap(), b.mac());
    }
    assert_eq!(a.stats().arp_requests_sent, 1);
    down(&[&a, &b]).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn unanswered_request_times_out_after_retries() {
    let cfg = StackConfig {
        arp_timeout: Duration::from_millis(100),
        arp_retries: 3,
        ..quick(1)
    };
    let (a, raw) = with_raw_peer(cfg);
    let t = Instant::now();
    let r = a.arp_resolve(Ipv4Addr::new(10, 0, 0, 9)).await;
    assert!(matches!(r, Err(Error::ResolutionTimeout(_))));
    assert!(t.elapsed() >= Duration::from_millis(300));
    assert_eq!(a.stats().arp_requests_sent, 3);
    assert_eq!(a.arp().pending_resolutions(), 0);
    drop(raw);
    down(&[&a]).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn foreign_address_gets_no_reply() {
    let (a, b) = pair_with(ImpairmentProfile::lossless(), quick(1), quick(2));
    let r = a.arp_resolve(Ipv4Addr::new(10, 0, 0, 77)).await;
    assert!(matches!(r, Err(Error::ResolutionTimeout(_))));
    assert_eq!(b.stats().arp_replies_sent, 0);
    down(&[&a, &b]).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn broadcast_and_self_need_no_traffic() {
    let (a, b) = pair_with(ImpairmentProfile::lossless(), quick(1), quick(2));
    assert_eq!(
        a.arp_resolve(Ipv4Addr::BROADCAST).await.unwrap(),
        cspnet::MacAddr::BROADCAST
    );
    assert_eq!(a.arp_resolve(a.ip()).await.unwrap(), a.mac());
    assert_eq!(a.stats().arp_requests_sent, 0);
    down(&[&a, &b]).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn static_entry_skips_resolution() {
    let (a, b) = pair_with(ImpairmentProfile::lossless(), quick(1), quick(2));
    a.arp_insert(b.ip(), b.mac()).await.unwrap();
    assert_eq!(a.arp_resolve(b.ip()).await.unwrap(), b.mac());
    assert_eq!(a.stats().arp_requests_sent, 0);
    down(&[&a, &b]).await;
}

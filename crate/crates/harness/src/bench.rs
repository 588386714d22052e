//! Latency and throughput benchmarks.

use std::net::{Ipv4Addr, SocketAddrV4};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use cspnet::{create_wire_pair, ImpairmentProfile, Stack, StackConfig};
use serde::{Deserialize, Serialize};

pub const DEFAULT_PINGS_EACH: u32 = 50;
pub const DEFAULT_INTERVAL: Duration = Duration::from_millis(10);
pub const DEFAULT_SIZE: usize = 56;
pub const DEFAULT_BYTES_PER_CLIENT: usize = 4096;
pub const THROUGHPUT_PORT: u16 = 5001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub concurrent_pingers: usize,
    pub pings_each: u32,
    pub avg_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRecord {
    pub clients: usize,
    pub bytes_per_client: usize,
    pub wall_time_s: f64,
    pub throughput_mbit_s: f64,
}

impl ThroughputRecord {
    pub fn new(clients: usize, bytes_per_client: usize, wall: Duration) -> Self {
        let wall_time_s = wall.as_secs_f64();
        ThroughputRecord {
            clients,
            bytes_per_client,
            wall_time_s,
            throughput_mbit_s: (clients * bytes_per_client * 8) as f64 / wall_time_s / 1e6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LatencyOptions {
    pub pings_each: u32,
    pub interval: Duration,
    pub size: usize,
}

impl Default for LatencyOptions {
    fn default() -> Self {
        LatencyOptions {
            pings_each: DEFAULT_PINGS_EACH,
            interval: DEFAULT_INTERVAL,
            size: DEFAULT_SIZE,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Stack(#[from] cspnet::Error),
    #[error("client {client}: {msg}")]
    Integrity { client: usize, msg: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Two stacks on one emulated wire: `client` is host 1, `server` host 2.
pub struct EmulatedPair {
    pub client: Stack,
    pub server: Stack,
}

/// Wire and stack settings for an emulated benchmark run. The same setup
/// is used for every level of a run.
#[derive(Debug, Clone)]
pub struct BenchSetup {
    pub wire: ImpairmentProfile,
    pub client: StackConfig,
    pub server: StackConfig,
}

/// One-way delay of the default benchmark wire. Without it, round trips on
/// an idle in-process wire are a few microseconds and every comparison
/// between load levels measures scheduler noise.
pub const DEFAULT_WIRE_DELAY: Duration = Duration::from_micros(500);

impl Default for BenchSetup {
    fn default() -> Self {
        let host = |n| StackConfig {
            queue_capacity: 4096,
            tcp_rto_initial: Duration::from_millis(250),
            tcp_time_wait: Duration::from_millis(100),
            ..StackConfig::emulated_host(n)
        };
        BenchSetup {
            wire: ImpairmentProfile {
                delay: DEFAULT_WIRE_DELAY,
                ..ImpairmentProfile::lossless()
            },
            client: host(1),
            server: host(2),
        }
    }
}

impl EmulatedPair {
    /// Must be called inside a Tokio runtime.
    pub async fn up(setup: &BenchSetup) -> Result<Self, BenchError> {
        let (a, b) = create_wire_pair(setup.wire.clone());
        let client = Stack::up_with_device(setup.client.clone(), a)?;
        let server = Stack::up_with_device(setup.server.clone(), b)?;
        client.arp_insert(server.ip(), server.mac()).await?;
        server.arp_insert(client.ip(), client.mac()).await?;
        Ok(EmulatedPair { client, server })
    }

    pub async fn down(self) -> Result<(), BenchError> {
        self.client.down().await?;
        self.server.down().await?;
        Ok(())
    }
}

/// For each level, runs that many concurrent ping sessions from `stack` to
/// `dst` and aggregates every RTT sample of the level.
pub async fn bench_latency(
    stack: &Stack,
    dst: Ipv4Addr,
    levels: &[usize],
    opts: &LatencyOptions,
) -> Result<Vec<LatencyRecord>, BenchError> {
    let mut out = Vec::with_capacity(levels.len());
    for &n in levels {
        let sessions: Vec<_> = (0..n)
            .map(|_| {
                let icmp = stack.icmp().clone();
                let o = opts.clone();
                tokio::spawn(async move { icmp.ping(dst, o.pings_each, o.interval, o.size).await })
            })
            .collect();
        let mut rtts = Vec::new();
        let mut sent = 0u64;
        for s in sessions {
            let stats = s.await.expect("ping session panicked")?;
            sent += u64::from(stats.sent);
            rtts.extend(stats.rtts_ms);
        }
        out.push(latency_record(n, opts.pings_each, sent, &rtts));
    }
    Ok(out)
}

fn latency_record(n: usize, pings_each: u32, sent: u64, rtts: &[f64]) -> LatencyRecord {
    let (min, max, avg) = if rtts.is_empty() {
        (0.0, 0.0, 0.0)
    } else {
        (
            rtts.iter().copied().fold(f64::INFINITY, f64::min),
            rtts.iter().copied().fold(0.0, f64::max),
            rtts.iter().sum::<f64>() / rtts.len() as f64,
        )
    };
    LatencyRecord {
        concurrent_pingers: n,
        pings_each,
        avg_ms: avg,
        min_ms: min,
        max_ms: max,
        loss: if sent == 0 {
            0.0
        } else {
            1.0 - rtts.len() as f64 / sent as f64
        },
    }
}

/// Deterministic payload for client `i`. Payloads of eight bytes or more
/// start with the client index, so misrouted streams are caught; shorter
/// ones are the same for every client.
pub fn client_payload(i: usize, len: usize) -> Vec<u8> {
    let i = if len >= 8 { i } else { 0 };
    let mut v: Vec<u8> = (0..len).map(|k| ((k * 131 + i * 7) % 251) as u8).collect();
    if len >= 8 {
        v[..8].copy_from_slice(&(i as u64).to_be_bytes());
    }
    v
}

/// Rounds run per level; the record carries the median wall time. A round
/// at the default size lasts tens of milliseconds, short enough for one
/// scheduler hiccup to dominate a single sample.
pub const THROUGHPUT_ROUNDS: usize = 5;

/// For each level, `n` clients on `pair.client` each send `bytes` to one
/// server on `pair.server`. The clock stops once the server has received
/// and verified every payload.
pub async fn bench_throughput(
    pair: &EmulatedPair,
    levels: &[usize],
    bytes: usize,
) -> Result<Vec<ThroughputRecord>, BenchError> {
    let mut out = Vec::with_capacity(levels.len());
    for &n in levels {
        let mut walls = Vec::with_capacity(THROUGHPUT_ROUNDS);
        for _ in 0..THROUGHPUT_ROUNDS {
            walls.push(throughput_round(pair, n, bytes).await?);
        }
        walls.sort();
        out.push(ThroughputRecord::new(n, bytes, walls[walls.len() / 2]));
    }
    Ok(out)
}

async fn throughput_round(pair: &EmulatedPair, n: usize, bytes: usize) -> Result<Duration, BenchError> {
    let listener = Arc::new(pair.server.tcp_listen_with_backlog(THROUGHPUT_PORT, n.max(16))?);
    let dst = SocketAddrV4::new(pair.server.ip(), THROUGHPUT_PORT);
    let idle = Duration::from_secs(30);
    let start = Instant::now();

    let server = {
        let listener = listener.clone();
        tokio::spawn(async move {
            let mut readers = Vec::with_capacity(n);
            for _ in 0..n {
                let conn = listener.accept(idle).await?;
                readers.push(tokio::spawn(async move {
                    let got = conn.read_to_end(bytes + 1, idle).await;
                    (conn, got)
                }));
            }
            let mut seen = vec![false; n];
            let mut conns = Vec::with_capacity(n);
            for r in readers {
                let (conn, got) = r.await.expect("reader panicked");
                let got = got?;
                let client = check_payload(&got, n, bytes)?;
                if let Some(client) = client.filter(|&c| std::mem::replace(&mut seen[c], true)) {
                    return Err(BenchError::Integrity {
                        client,
                        msg: "payload received twice".into(),
                    });
                }
                conns.push(conn);
            }
            Ok::<_, BenchError>(conns)
        })
    };

    let clients: Vec<_> = (0..n)
        .map(|i| {
            let tcp = pair.client.tcp().clone();
            tokio::spawn(async move {
                let c = tcp.connect(dst, idle).await?;
                c.send(&client_payload(i, bytes)).await?;
                c.close();
                Ok::<_, cspnet::Error>(c)
            })
        })
        .collect();
    let mut streams = Vec::with_capacity(n);
    for c in clients {
        streams.push(c.await.expect("client panicked")?);
    }
    let conns = server.await.expect("server panicked")?;
    let wall = start.elapsed();

    listener.close();
    for c in &conns {
        c.close();
    }
    for s in streams.iter().chain(conns.iter()) {
        s.wait_closed(Duration::from_secs(5)).await;
    }
    Ok(wall)
}

/// Returns the sending client when the payload carries a tag.
fn check_payload(got: &[u8], n: usize, bytes: usize) -> Result<Option<usize>, BenchError> {
    let bad = |client, msg: String| BenchError::Integrity { client, msg };
    let client = if bytes >= 8 {
        if got.len() < 8 {
            return Err(bad(0, format!("short stream of {} bytes", got.len())));
        }
        let c = u64::from_be_bytes(got[..8].try_into().expect("eight bytes")) as usize;
        if c >= n {
            return Err(bad(c, "unknown client tag".into()));
        }
        c
    } else {
        0
    };
    if got.len() != bytes {
        return Err(bad(client, format!("received {} of {bytes} bytes", got.len())));
    }
    if got != client_payload(client, bytes).as_slice() {
        return Err(bad(client, "payload mismatch".into()));
    }
    Ok((bytes >= 8).then_some(client))
}

pub fn write_latency_csv(path: &Path, records: &[LatencyRecord]) -> Result<(), BenchError> {
    write_csv(path, records)
}

pub fn write_throughput_csv(path: &Path, records: &[ThroughputRecord]) -> Result<(), BenchError> {
    write_csv(path, records)
}

fn write_csv<T: Serialize>(path: &Path, records: &[T]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn throughput_recomputes() {
        let r = ThroughputRecord::new(10, 4096, Duration::from_millis(80));
        assert!((r.throughput_mbit_s - 10.0 * 4096.0 * 8.0 / 0.08 / 1e6).abs() < 1e-9);
    }

    #[test]
    fn latency_aggregate() {
        let r = latency_record(2, 2, 4, &[1.0, 3.0, 2.0]);
        assert_eq!((r.min_ms, r.max_ms, r.avg_ms), (1.0, 3.0, 2.0));
        assert!((r.loss - 0.25).abs() < 1e-12);
        let empty = latency_record(1, 5, 5, &[]);
        assert_eq!(empty.loss, 1.0);
    }

    #[test]
    fn payload_tags_are_checked() {
        let p = client_payload(3, 4096);
        assert_eq!(check_payload(&p, 5, 4096).unwrap(), Some(3));
        assert_eq!(check_payload(&client_payload(1, 4), 5, 4).unwrap(), None);
        assert!(check_payload(&p, 3, 4096).is_err());
        assert!(check_payload(&p[..4000], 5, 4096).is_err());
        let mut q = p.clone();
        q[100] ^= 1;
        assert!(check_payload(&q, 5, 4096).is_err());
    }
}

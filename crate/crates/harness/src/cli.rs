//! The `cspnet` command line.

use std::ffi::OsString;
use std::net::{Ipv4Addr, SocketAddrV4};
use std::path::PathBuf;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use cspnet::{create_wire_pair, DeviceConfig, ImpairmentProfile, MacAddr, Stack, StackConfig, TcbState};

use crate::bench::{self, BenchSetup, EmulatedPair, LatencyOptions};
use crate::config;

#[derive(Debug, Parser)]
#[command(name = "cspnet", version, about = "User-space TCP/IP stack driver and benchmarks")]
pub struct Cli {
    /// Stack configuration file (key=value lines). Without one, the stack
    /// runs on an emulated wire with built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Frame loss probability on the emulated wire, seeded from the
    /// config `seed`.
    #[arg(long, global = true, default_value_t = 0.0, value_name = "RATE")]
    pub loss: f64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Bring the stack up and keep it running.
    Up {
        /// Stop after this long instead of waiting for Ctrl-C.
        #[arg(long = "for", value_parser = humantime::parse_duration)]
        run_for: Option<Duration>,
    },
    /// Send ICMP echo requests.
    Ping {
        dst: Ipv4Addr,
        #[arg(short = 'c', default_value_t = 4)]
        count: u32,
        #[arg(short = 'i', default_value = "10ms", value_parser = humantime::parse_duration)]
        interval: Duration,
        #[arg(short = 's', default_value_t = bench::DEFAULT_SIZE)]
        size: usize,
    },
    /// Echo UDP datagrams back to their sender.
    UdpEcho {
        #[arg(long)]
        port: u16,
        #[arg(long = "for", value_parser = humantime::parse_duration)]
        run_for: Option<Duration>,
    },
    /// Send one UDP datagram and print the reply, if any.
    UdpSend {
        dst: SocketAddrV4,
        msg: String,
        #[arg(long, default_value = "1s", value_parser = humantime::parse_duration)]
        timeout: Duration,
    },
    /// Accept TCP connections and report how many bytes each one sent.
    TcpServe {
        #[arg(long)]
        port: u16,
        #[arg(long = "for", value_parser = humantime::parse_duration)]
        run_for: Option<Duration>,
    },
    /// Open a TCP connection and send N bytes.
    TcpSend {
        dst: SocketAddrV4,
        #[arg(long)]
        bytes: usize,
    },
    /// Run a benchmark and write CSV.
    Bench {
        #[command(subcommand)]
        kind: BenchKind,
    },
}

#[derive(Debug, Subcommand)]
pub enum BenchKind {
    /// Ping latency against the number of concurrent pingers.
    Latency {
        #[command(flatten)]
        common: BenchCommon,
        #[arg(long, default_value_t = bench::DEFAULT_PINGS_EACH)]
        pings: u32,
        #[arg(long, default_value = "10ms", value_parser = humantime::parse_duration)]
        interval: Duration,
        #[arg(long, default_value_t = bench::DEFAULT_SIZE)]
        size: usize,
        /// Target host when running on a TAP device.
        #[arg(long)]
        dst: Option<Ipv4Addr>,
    },
    /// Aggregate TCP throughput against the number of concurrent clients.
    Throughput {
        #[command(flatten)]
        common: BenchCommon,
        #[arg(long, default_value_t = bench::DEFAULT_BYTES_PER_CLIENT)]
        bytes: usize,
    },
}

#[derive(Debug, Args)]
pub struct BenchCommon {
    /// Comma-separated load levels.
    #[arg(long, value_delimiter = ',', required = true)]
    pub levels: Vec<usize>,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl From<cspnet::Error> for CliError {
    fn from(e: cspnet::Error) -> Self {
        match e {
            cspnet::Error::Config(_) => CliError::Usage(e.to_string()),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<bench::BenchError> for CliError {
    fn from(e: bench::BenchError) -> Self {
        match e {
            bench::BenchError::Stack(e) => e.into(),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let rt = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match rt.block_on(run(cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// The address one past `cfg.ip` in its subnet, skipping the broadcast.
pub fn neighbour_ip(cfg: &StackConfig) -> Ipv4Addr {
    let mask = u32::from(cfg.netmask);
    let net = u32::from(cfg.ip) & mask;
    let mut host = (u32::from(cfg.ip) + 1) & !mask;
    if host == !mask || host == 0 {
        host = 1;
    }
    Ipv4Addr::from(net | host)
}

/// Config for an emulated neighbour of `cfg` at `ip`.
pub fn neighbour_config(cfg: &StackConfig, ip: Ipv4Addr) -> StackConfig {
    let mut mac = MacAddr::local(u32::from(ip.octets()[3]) | 0x100);
    if mac == cfg.mac {
        mac = MacAddr::local(0x200);
    }
    StackConfig {
        device: DeviceConfig::Emulated,
        ip,
        mac,
        seed: cfg.seed.wrapping_add(1),
        ..cfg.clone()
    }
}

fn load_config(cli: &Cli) -> Result<StackConfig, CliError> {
    match &cli.config {
        Some(p) => config::load(p).map_err(|e| CliError::Usage(e.to_string())),
        None => Ok(StackConfig::emulated_host(1)),
    }
}

/// The local stack, plus an emulated neighbour at `peer` when the device
/// is emulated (there is nobody else on an emulated wire).
struct Session {
    local: Stack,
    peer: Option<Stack>,
}

impl Session {
    async fn open(cfg: StackConfig, peer: Option<Ipv4Addr>, wire: ImpairmentProfile) -> Result<Session, CliError> {
        match cfg.device {
            DeviceConfig::Tap(_) => Ok(Session {
                local: Stack::up(cfg)?,
                peer: None,
            }),
            DeviceConfig::Emulated => {
                let peer_ip = peer.unwrap_or_else(|| neighbour_ip(&cfg));
                if peer_ip == cfg.ip || !cfg.on_link(peer_ip) {
                    return Err(CliError::Usage(format!(
                        "{peer_ip} is not a neighbour of {} on the emulated wire",
                        cfg.ip
                    )));
                }
                let pcfg = neighbour_config(&cfg, peer_ip);
                let (a, b) = create_wire_pair(wire);
                let local = Stack::up_with_device(cfg, a)?;
                let peer = Stack::up_with_device(pcfg, b)?;
                Ok(Session {
                    local,
                    peer: Some(peer),
                })
            }
        }
    }

    async fn close(self) -> Result<(), CliError> {
        self.local.down().await?;
        if let Some(p) = self.peer {
            p.down().await?;
        }
        Ok(())
    }
}

async fn wait(run_for: Option<Duration>) {
    match run_for {
        Some(d) => tokio::time::sleep(d).await,
        None => {
            let _ = tokio::signal::ctrl_c().await;
        }
    }
}

pub async fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli)?;
    if !(0.0..1.0).contains(&cli.loss) {
        return Err(CliError::Usage("--loss must be in [0, 1)".into()));
    }
    let wire = ImpairmentProfile {
        loss_rate: cli.loss,
        seed: cfg.seed,
        ..ImpairmentProfile::lossless()
    };
    match cli.command {
        Command::Up { run_for } => {
            let s = Session::open(cfg, None, wire.clone()).await?;
            println!(
                "up {} {} mtu {} ({} tasks)",
                s.local.ip(),
                s.local.mac(),
                s.local.mtu(),
                s.local.census().live()
            );
            wait(run_for).await;
            s.close().await
        }
        Command::Ping {
            dst,
            count,
            interval,
            size,
        } => {
            let s = Session::open(cfg, Some(dst), wire.clone()).await?;
            let st = s.local.ping(dst, count, interval, size).await?;
            println!(
                "{} packets transmitted, {} received, {:.1}% packet loss, rtt min/avg/max = {:.3}/{:.3}/{:.3} ms",
                st.sent,
                st.received,
                st.loss * 100.0,
                st.min_ms,
                st.avg_ms,
                st.max_ms
            );
            s.close().await?;
            if st.received == 0 && count > 0 {
                return Err(CliError::Runtime(format!("no replies from {dst}")));
            }
            Ok(())
        }
        Command::UdpEcho { port, run_for } => {
            let s = Session::open(cfg, None, wire.clone()).await?;
            let sock = s.local.udp_bind(port)?;
            println!("udp echo on {}", sock.local_addr());
            let serve = async {
                while let Ok(m) = sock.recv().await {
                    let _ = sock.send_to(m.src, &m.payload).await;
                }
            };
            tokio::select! {
                _ = serve => {}
                _ = wait(run_for) => {}
            }
            drop(sock);
            s.close().await
        }
        Command::UdpSend { dst, msg, timeout } => {
            let s = Session::open(cfg, Some(*dst.ip()), wire.clone()).await?;
            // The emulated neighbour answers as an echo server.
            let echo = match &s.peer {
                Some(p) => {
                    let sock = p.udp_bind(dst.port())?;
                    Some(tokio::spawn(async move {
                        if let Ok(m) = sock.recv_from(Duration::from_secs(5)).await {
                            let _ = sock.send_to(m.src, &m.payload).await;
                        }
                    }))
                }
                None => None,
            };
            let sock = s.local.udp_bind(0)?;
            sock.send_to(dst, msg.as_bytes()).await?;
            let reply = sock.recv_from(timeout).await;
            if let Some(h) = echo {
                let _ = h.await;
            }
            drop(sock);
            s.close().await?;
            match reply {
                Ok(m) => {
                    println!("{} bytes from {}: {}", m.payload.len(), m.src, String::from_utf8_lossy(&m.payload));
                    Ok(())
                }
                Err(cspnet::Error::Timeout) => {
                    println!("sent {} bytes to {dst}, no reply", msg.len());
                    Ok(())
                }
                Err(e) => Err(e.into()),
            }
        }
        Command::TcpServe { port, run_for } => {
            let s = Session::open(cfg, None, wire.clone()).await?;
            let l = s.local.tcp_listen(port)?;
            println!("tcp listening on {}:{port}", s.local.ip());
            let serve = async {
                loop {
                    let Ok(c) = l.accept(Duration::from_secs(3600)).await else {
                        break;
                    };
                    tokio::spawn(async move {
                        let n = c.read_to_end(usize::MAX, Duration::from_secs(60)).await.map(|v| v.len());
                        match n {
                            Ok(n) => println!("{}: {n} bytes", c.peer_addr()),
                            Err(e) => println!("{}: {e}", c.peer_addr()),
                        }
                        c.close();
                        c.wait_closed(Duration::from_secs(5)).await;
                    });
                }
            };
            tokio::select! {
                _ = serve => {}
                _ = wait(run_for) => {}
            }
            drop(l);
            s.close().await
        }
        Command::TcpSend { dst, bytes } => {
            let s = Session::open(cfg, Some(*dst.ip()), wire.clone()).await?;
            let sink = match &s.peer {
                Some(p) => {
                    let l = p.tcp_listen(dst.port())?;
                    Some(tokio::spawn(async move {
                        let c = l.accept(Duration::from_secs(10)).await?;
                        let got = c.read_to_end(usize::MAX, Duration::from_secs(30)).await?;
                        c.close();
                        c.wait_closed(Duration::from_secs(5)).await;
                        Ok::<_, cspnet::Error>(got)
                    }))
                }
                None => None,
            };
            let payload = bench::client_payload(0, bytes);
            let t = std::time::Instant::now();
            let c = s.local.tcp_connect(dst, Duration::from_secs(10)).await?;
            c.send(&payload).await?;
            c.close();
            // Done once our FIN is acknowledged; TIME_WAIT is not worth waiting out.
            let fin_acked = async {
                while !matches!(c.state(), TcbState::FinWait2 | TcbState::TimeWait | TcbState::Closed) {
                    tokio::time::sleep(Duration::from_millis(1)).await;
                }
            };
            if tokio::time::timeout(Duration::from_secs(30), fin_acked).await.is_err() {
                return Err(CliError::Runtime("peer did not acknowledge the data".into()));
            }
            let wall = t.elapsed();
            if let Some(h) = sink {
                let got = h.await.expect("sink task")?;
                if got != payload {
                    return Err(CliError::Runtime(format!(
                        "peer received {} of {bytes} bytes or corrupted data",
                        got.len()
                    )));
                }
            }
            println!(
                "sent {bytes} bytes to {dst} in {:.3} s ({:.3} Mbit/s)",
                wall.as_secs_f64(),
                bytes as f64 * 8.0 / wall.as_secs_f64() / 1e6
            );
            drop(c);
            s.close().await
        }
        Command::Bench { kind } => run_bench(cfg, cli.config.is_some(), wire, kind).await,
    }
}

fn bench_setup(cfg: StackConfig, from_file: bool, wire: &ImpairmentProfile) -> BenchSetup {
    let mut setup = BenchSetup::default();
    setup.wire.loss_rate = wire.loss_rate;
    setup.wire.seed = wire.seed;
    if from_file {
        setup.server = neighbour_config(&cfg, neighbour_ip(&cfg));
        setup.client = cfg;
    }
    setup
}

async fn run_bench(cfg: StackConfig, from_file: bool, wire: ImpairmentProfile, kind: BenchKind) -> Result<(), CliError> {
    let levels = match &kind {
        BenchKind::Latency { common, .. } | BenchKind::Throughput { common, .. } => common.levels.clone(),
    };
    if levels.is_empty() || levels.contains(&0) {
        return Err(CliError::Usage("levels must be positive".into()));
    }
    match kind {
        BenchKind::Latency {
            common,
            pings,
            interval,
            size,
            dst,
        } => {
            let opts = LatencyOptions {
                pings_each: pings,
                interval,
                size,
            };
            let records = if let DeviceConfig::Tap(_) = cfg.device {
                let dst = dst.ok_or_else(|| CliError::Usage("--dst is required on a TAP device".into()))?;
                let stack = Stack::up(cfg)?;
                let r = bench::bench_latency(&stack, dst, &levels, &opts).await;
                stack.down().await?;
                r?
            } else {
                let pair = EmulatedPair::up(&bench_setup(cfg, from_file, &wire)).await?;
                let dst = pair.server.ip();
                let r = bench::bench_latency(&pair.client, dst, &levels, &opts).await;
                pair.down().await?;
                r?
            };
            for r in &records {
                println!(
                    "pingers={} avg={:.3}ms min={:.3}ms max={:.3}ms loss={:.3}",
                    r.concurrent_pingers, r.avg_ms, r.min_ms, r.max_ms, r.loss
                );
            }
            bench::write_latency_csv(&common.out, &records)?;
            Ok(())
        }
        BenchKind::Throughput { common, bytes } => {
            if let DeviceConfig::Tap(_) = cfg.device {
                return Err(CliError::Usage("the throughput benchmark runs on the emulated wire only".into()));
            }
            let pair = EmulatedPair::up(&bench_setup(cfg, from_file, &wire)).await?;
            let r = bench::bench_throughput(&pair, &levels, bytes).await;
            pair.down().await?;
            let records = r?;
            for r in &records {
                println!(
                    "clients={} bytes={} wall={:.4}s throughput={:.3}Mbit/s",
                    r.clients, r.bytes_per_client, r.wall_time_s, r.throughput_mbit_s
                );
            }
            bench::write_throughput_csv(&common.out, &records)?;
            Ok(())
        }
    }
}

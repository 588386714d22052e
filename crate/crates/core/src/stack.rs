//! Stack assembly and lifecycle.

use std::net::{Ipv4Addr, SocketAddrV4};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use tokio_util::sync::CancellationToken;

use crate::arp::ArpLayer;
use crate::config::{DeviceConfig, StackConfig};
use crate::csp::{run_dealer, MessageQueue, TaskCensus};
use crate::error::{Error, Result};
use crate::ethernet::{run_link_reader, EthernetLayer};
use crate::icmp::{IcmpLayer, PingStats};
use crate::ipv4::{Ipv4Layer, RouteConfig};
use crate::link::{open_tap, LinkDevice};
use crate::stats::{Counters, StackStats};
use crate::tcp::{TcpConfig, TcpLayer, TcpListener, TcpStream};
use crate::udp::{UdpLayer, UdpSocket};
use crate::wire::{MacAddr, ETHERTYPE_ARP, ETHERTYPE_IPV4, PROTO_ICMP, PROTO_TCP, PROTO_UDP};

/// A running stack. Every task it spawns is counted in its census.
pub struct Stack {
    config: StackConfig,
    device: LinkDevice,
    link_rx: MessageQueue<Vec<u8>>,
    eth: Arc<EthernetLayer>,
    arp: Arc<ArpLayer>,
    ip: Arc<Ipv4Layer>,
    icmp: Arc<IcmpLayer>,
    udp: Arc<UdpLayer>,
    tcp: Arc<TcpLayer>,
    census: TaskCensus,
    cancel: CancellationToken,
    counters: Arc<Counters>,
    running: AtomicBool,
}

impl std::fmt::Debug for Stack {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stack")
            .field("ip", &self.config.ip)
            .field("mac", &self.config.mac)
            .field("tasks", &self.census.live())
            .finish()
    }
}

impl Stack {
    /// Brings a stack up on the TAP device named in `config`. Must be
    /// called inside a Tokio runtime.
    pub fn up(config: StackConfig) -> Result<Stack> {
        let device = match &config.device {
            DeviceConfig::Tap(name) => open_tap(name, config.mac, config.mtu)?,
            DeviceConfig::Emulated => {
                return Err(Error::Config(
                    "an emulated stack needs its wire end; use Stack::up_with_device".into(),
                ))
            }
        };
        Self::up_with_device(config, device)
    }

    /// Brings a stack up on an already opened device.
    pub fn up_with_device(config: StackConfig, device: LinkDevice) -> Result<Stack> {
        config.validate()?;
        if device.is_closed() {
            return Err(Error::DeviceUnavailable("device is closed".into()));
        }
        let cap = config.queue_capacity;
        let counters = Arc::new(Counters::default());
        let census = TaskCensus::new();
        let cancel = CancellationToken::new();
        let mtu = config.mtu.min(device.mtu());

        let eth = Arc::new(EthernetLayer::new(device.clone(), config.mac, mtu, counters.clone()));
        let arp = Arc::new(ArpLayer::new(
            config.ip,
            config.subnet_broadcast(),
            eth.clone(),
            config.arp_timeout,
            config.arp_retries,
            config.arp_cache_ttl,
            cap,
            counters.clone(),
        )?);
        let route = RouteConfig {
            ip: config.ip,
            netmask: config.netmask,
            gateway: config.gateway,
        };
        let ip = Arc::new(Ipv4Layer::new(
            route,
            eth.clone(),
            arp.clone(),
            config.reassembly_timeout,
            cap,
            (config.seed as u16).wrapping_mul(0x9e37),
            counters.clone(),
        )?);
        let icmp = Arc::new(IcmpLayer::new(
            ip.clone(),
            cap,
            (config.seed as u16).wrapping_mul(0x2545).wrapping_add(1),
            census.clone(),
            counters.clone(),
        )?);
        let udp = Arc::new(UdpLayer::new(ip.clone(), cap, counters.clone())?);
        let tcp = Arc::new(TcpLayer::new(
            ip.clone(),
            TcpConfig {
                rto_initial: config.tcp_rto_initial,
                time_wait: config.tcp_time_wait,
                handshake_timeout: config.tcp_handshake_timeout,
                window_segments: config.tcp_window_segments,
                mss: mtu - 40,
                queue_capacity: cap,
            },
            config.seed,
            cancel.clone(),
            census.clone(),
            counters.clone(),
        )?);

        let link_rx = MessageQueue::new(cap)?;
        let arp_in = MessageQueue::new(cap)?;
        eth.registry().bind(ETHERTYPE_ARP, arp_in.clone())?;
        eth.registry().bind(ETHERTYPE_IPV4, ip.inbound().clone())?;
        ip.protocols().bind(PROTO_ICMP, icmp.inbound().clone())?;
        ip.protocols().bind(PROTO_UDP, udp.inbound().clone())?;
        ip.protocols().bind(PROTO_TCP, tcp.inbound().clone())?;

        census.spawn(run_link_reader(device.clone(), link_rx.clone(), counters.clone()));
        {
            let eth = eth.clone();
            let registry = eth.registry().clone();
            census.spawn(run_dealer(link_rx.clone(), move |raw| eth.classify(raw), registry));
        }
        census.spawn(arp.clone().run(arp_in, cancel.clone()));
        census.spawn(ip.clone().run_dealer(census.clone()));
        for _ in 0..config.ip_reader_count {
            census.spawn(ip.clone().run_reader());
        }
        census.spawn(icmp.clone().run_dealer());
        census.spawn(icmp.clone().run_ping_dealer());
        for _ in 0..config.icmp_responders {
            census.spawn(icmp.clone().run_responder());
        }
        census.spawn(udp.clone().run_dealer());
        census.spawn(tcp.clone().run_dealer());

        Ok(Stack {
            config,
            device,
            link_rx,
            eth,
            arp,
            ip,
            icmp,
            udp,
            tcp,
            census,
            cancel,
            counters,
            running: AtomicBool::new(true),
        })
    }

    pub fn config(&self) -> &StackConfig {
        &self.config
    }

    pub fn ip(&self) -> Ipv4Addr {
        self.config.ip
    }

    pub fn mac(&self) -> MacAddr {
        self.eth.mac()
    }

    pub fn mtu(&self) -> usize {
        self.eth.mtu()
    }

    pub fn device(&self) -> &LinkDevice {
        &self.device
    }

    pub fn is_running(&self) -> bool {
        self.running.load(Ordering::Acquire)
    }

    pub fn census(&self) -> &TaskCensus {
        &self.census
    }

    pub fn stats(&self) -> StackStats {
        let mut s = self.counters.snapshot();
        s.eth_unbound = self.eth.registry().unbound_drops();
        s
    }

    pub fn ethernet(&self) -> &Arc<EthernetLayer> {
        &self.eth
    }

    pub fn arp(&self) -> &Arc<ArpLayer> {
        &self.arp
    }

    pub fn ipv4(&self) -> &Arc<Ipv4Layer> {
        &self.ip
    }

    pub fn icmp(&self) -> &Arc<IcmpLayer> {
        &self.icmp
    }

    pub fn udp(&self) -> &Arc<UdpLayer> {
        &self.udp
    }

    pub fn tcp(&self) -> &Arc<TcpLayer> {
        &self.tcp
    }

    /// Live reassemblies.
    pub fn assembler_count(&self) -> usize {
        self.ip.assembler_count()
    }

    pub async fn arp_resolve(&self, ip: Ipv4Addr) -> Result<MacAddr> {
        self.arp.resolve(ip).await
    }

    pub async fn arp_insert(&self, ip: Ipv4Addr, mac: MacAddr) -> Result<()> {
        self.arp.insert_static(ip, mac).await
    }

    pub async fn ip_send(&self, dst: Ipv4Addr, protocol: u8, payload: &[u8]) -> Result<()> {
        self.ip.send(dst, protocol, payload).await
    }

    pub async fn ping(&self, dst: Ipv4Addr, count: u32, interval: Duration, size: usize) -> Result<PingStats> {
        self.icmp.ping(dst, count, interval, size).await
    }

    pub fn udp_bind(&self, port: u16) -> Result<UdpSocket> {
        self.udp.bind(port)
    }

    pub fn tcp_listen(&self, port: u16) -> Result<TcpListener> {
        self.tcp.listen(port)
    }

    pub fn tcp_listen_with_backlog(&self, port: u16, backlog: usize) -> Result<TcpListener> {
        self.tcp.listen_with_backlog(port, backlog)
    }

    pub async fn tcp_connect(&self, dst: SocketAddrV4, timeout: Duration) -> Result<TcpStream> {
        self.tcp.connect(dst, timeout).await
    }

    /// Closes every queue from the device upward, then waits for the task
    /// census to reach zero, bounded by twice the longest protocol timer.
    pub async fn down(&self) -> Result<()> {
        if !self.running.swap(false, Ordering::AcqRel) {
            return Err(Error::NotRunning);
        }
        self.close_all();
        let limit = self.config.longest_timer() * 2;
        if self.census.wait_zero(limit).await {
            Ok(())
        } else {
            Err(Error::Timeout)
        }
    }

    fn close_all(&self) {
        self.device.close();
        self.link_rx.close();
        self.eth.registry().clear();
        self.arp.commands().close();
        self.ip.inbound().close();
        self.ip.dispatch_queue().close();
        self.ip.protocols().clear();
        self.icmp.close();
        self.udp.inbound().close();
        self.udp.ports().clear();
        self.tcp.inbound().close();
        self.tcp.shutdown();
        self.cancel.cancel();
    }
}

impl Drop for Stack {
    fn drop(&mut self) {
        if self.running.swap(false, Ordering::AcqRel) {
            self.close_all();
        }
    }
}

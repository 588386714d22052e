use std::net::Ipv4Addr;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::link::{DEFAULT_MTU, MIN_MTU};
use crate::wire::MacAddr;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeviceConfig {
    /// Attach to an existing host TAP interface.
    Tap(String),
    /// Run on an emulated wire end supplied by the caller.
    Emulated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackConfig {
    pub device: DeviceConfig,
    pub ip: Ipv4Addr,
    pub netmask: Ipv4Addr,
    pub gateway: Option<Ipv4Addr>,
    pub mac: MacAddr,
    pub mtu: usize,
    pub ip_reader_count: usize,
    pub queue_capacity: usize,
    pub arp_timeout: Duration,
    pub arp_retries: u32,
    pub arp_cache_ttl: Duration,
    pub reassembly_timeout: Duration,
    pub icmp_responders: usize,
    pub tcp_rto_initial: Duration,
    pub tcp_time_wait: Duration,
    pub tcp_window_segments: usize,
    pub tcp_handshake_timeout: Duration,
    /// Seeds the TCP initial-sequence-number generator.
    pub seed: u64,
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig {
            device: DeviceConfig::Emulated,
            ip: Ipv4Addr::new(10, 0, 0, 1),
            netmask: Ipv4Addr::new(255, 255, 255, 0),
            gateway: None,
            mac: MacAddr::local(1),
            mtu: DEFAULT_MTU,
            ip_reader_count: 4,
            queue_capacity: 256,
            arp_timeout: Duration::from_millis(1000),
            arp_retries: 3,
            arp_cache_ttl: Duration::from_secs(60),
            reassembly_timeout: Duration::from_millis(30_000),
            icmp_responders: 4,
            tcp_rto_initial: Duration::from_millis(1000),
            tcp_time_wait: Duration::from_millis(10_000),
            tcp_window_segments: 32,
            tcp_handshake_timeout: Duration::from_secs(5),
            seed: 0,
        }
    }
}

impl StackConfig {
    /// Emulated-device config for host `n` on 10.0.0.0/24 with MAC
    /// `02:00:00:00:00:n`.
    pub fn emulated_host(n: u8) -> Self {
        StackConfig {
            ip: Ipv4Addr::new(10, 0, 0, n),
            mac: MacAddr::local(u32::from(n)),
            seed: u64::from(n),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mask = u32::from(self.netmask);
        if mask.leading_ones() + mask.trailing_zeros() != 32 {
            return Err(Error::Config(format!("netmask {} is not contiguous", self.netmask)));
        }
        if let Some(gw) = self.gateway {
            if !self.on_link(gw) {
                return Err(Error::Config(format!("gateway {gw} is outside the local subnet")));
            }
        }
        if self.mtu < MIN_MTU || self.mtu > 65535 {
            return Err(Error::Config(format!("mtu {} out of range", self.mtu)));
        }
        for (name, v) in [
            ("ip_reader_count", self.ip_reader_count),
            ("queue_capacity", self.queue_capacity),
            ("icmp_responders", self.icmp_responders),
            ("tcp_window_segments", self.tcp_window_segments),
            ("arp_retries", self.arp_retries as usize),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.arp_timeout.is_zero() || self.tcp_rto_initial.is_zero() {
            return Err(Error::Config("timers must be positive".into()));
        }
        Ok(())
    }

    pub fn on_link(&self, addr: Ipv4Addr) -> bool {
        let mask = u32::from(self.netmask);
        u32::from(addr) & mask == u32::from(self.ip) & mask
    }

    pub fn subnet_broadcast(&self) -> Ipv4Addr {
        Ipv4Addr::from(u32::from(self.ip) | !u32::from(self.netmask))
    }

    /// The longest protocol timer, which bounds how long shutdown may wait.
    pub fn longest_timer(&self) -> Duration {
        [
            self.arp_timeout * self.arp_retries,
            self.reassembly_timeout,
            self.tcp_time_wait,
            self.tcp_handshake_timeout,
            self.tcp_rto_initial * 16,
        ]
        .into_iter()
        .max()
        .unwrap_or_default()
    }
}

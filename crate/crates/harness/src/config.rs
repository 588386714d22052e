//! Line-oriented `key=value` stack configuration files.

use std::net::Ipv4Addr;
use std::path::Path;
use std::time::Duration;

use cspnet::{DeviceConfig, MacAddr, StackConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Invalid(#[from] cspnet::Error),
}

pub const KEYS: &[&str] = &[
    "device",
    "ip",
    "netmask",
    "gateway",
    "mac",
    "mtu",
    "ip_readers",
    "queue_capacity",
    "arp_timeout_ms",
    "reassembly_timeout_ms",
    "tcp_rto_ms",
    "tcp_window_segments",
    "tcp_time_wait_ms",
    "seed",
];

pub fn load(path: &Path) -> Result<StackConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse(&text)
}

/// Parses config text over `StackConfig::default()`. Blank lines and lines
/// starting with `#` are ignored. Unknown keys are errors.
pub fn parse(text: &str) -> Result<StackConfig, ConfigError> {
    let mut cfg = StackConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let err = |msg: String| ConfigError::Parse { line, msg };
        let (key, value) = s
            .split_once('=')
            .ok_or_else(|| err(format!("expected key=value, got {s:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |what: &str| err(format!("{key}: invalid {what} {value:?}"));
        match key {
            "device" => {
                cfg.device = if value == "emulated" {
                    DeviceConfig::Emulated
                } else if let Some(name) = value.strip_prefix("tap:") {
                    if name.is_empty() {
                        return Err(bad("device"));
                    }
                    DeviceConfig::Tap(name.to_string())
                } else {
                    return Err(bad("device (want emulated or tap:NAME)"));
                }
            }
            "ip" => cfg.ip = value.parse().map_err(|_| bad("address"))?,
            "netmask" => cfg.netmask = value.parse().map_err(|_| bad("address"))?,
            "gateway" => {
                cfg.gateway = match value {
                    "" | "none" => None,
                    v => Some(v.parse::<Ipv4Addr>().map_err(|_| bad("address"))?),
                }
            }
            "mac" => cfg.mac = value.parse::<MacAddr>().map_err(|_| bad("mac"))?,
            "mtu" => cfg.mtu = value.parse().map_err(|_| bad("number"))?,
            "ip_readers" => cfg.ip_reader_count = value.parse().map_err(|_| bad("number"))?,
            "queue_capacity" => cfg.queue_capacity = value.parse().map_err(|_| bad("number"))?,
            "arp_timeout_ms" => cfg.arp_timeout = ms(value).ok_or_else(|| bad("duration"))?,
            "reassembly_timeout_ms" => cfg.reassembly_timeout = ms(value).ok_or_else(|| bad("duration"))?,
            "tcp_rto_ms" => cfg.tcp_rto_initial = ms(value).ok_or_else(|| bad("duration"))?,
            "tcp_window_segments" => cfg.tcp_window_segments = value.parse().map_err(|_| bad("number"))?,
            "tcp_time_wait_ms" => cfg.tcp_time_wait = ms(value).ok_or_else(|| bad("duration"))?,
            "seed" => cfg.seed = value.parse().map_err(|_| bad("number"))?,
            _ => return Err(err(format!("unknown key {key:?}"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ms(v: &str) -> Option<Duration> {
    v.parse().ok().map(Duration::from_millis)
}

/// Renders `cfg` in the same format `parse` reads.
pub fn render(cfg: &StackConfig) -> String {
    let device = match &cfg.device {
        DeviceConfig::Emulated => "emulated".to_string(),
        DeviceConfig::Tap(n) => format!("tap:{n}"),
    };
    let gateway = cfg.gateway.map_or("none".to_string(), |g| g.to_string());
    format!(
        "device={device}\nip={}\nnetmask={}\ngateway={gateway}\nmac={}\nmtu={}\nip_readers={}\n\
         queue_capacity={}\narp_timeout_ms={}\nreassembly_timeout_ms={}\ntcp_rto_ms={}\n\
         tcp_window_segments={}\ntcp_time_wait_ms={}\nseed={}\n",
        cfg.ip,
        cfg.netmask,
        cfg.mac,
        cfg.mtu,
        cfg.ip_reader_count,
        cfg.queue_capacity,
        cfg.arp_timeout.as_millis(),
        cfg.reassembly_timeout.as_millis(),
        cfg.tcp_rto_initial.as_millis(),
        cfg.tcp_window_segments,
        cfg.tcp_time_wait.as_millis(),
        cfg.seed,
    )
}

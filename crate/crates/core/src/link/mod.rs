//! Frame-level I/O endpoints.
//!
//! A [`LinkDevice`] is either a host TAP interface or one end of an
//! in-process emulated wire. Both carry raw Ethernet frames, delivered
//! whole; the emulated wire can drop, reorder and delay frames from a
//! seeded generator so lossy runs replay exactly.

use std::sync::Arc;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::wire::{MacAddr, ETHERNET_HEADER_LEN};

mod emulated;
mod tap;

pub use emulated::{FrameFate, TransmitLog};

pub const DEFAULT_MTU: usize = 1500;
pub const MIN_MTU: usize = 576;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviceKind {
    Tap,
    Emulated,
}

/// Impairments applied independently to each direction of an emulated wire.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImpairmentProfile {
    /// Probability that a written frame is discarded.
    pub loss_rate: f64,
    /// Probability that a frame is held back and delivered after the next one.
    pub reorder_rate: f64,
    /// Fixed one-way latency added to every frame.
    pub delay: Duration,
    pub seed: u64,
    /// Keep a copy of every written frame in the transmit log.
    pub capture: bool,
}

impl ImpairmentProfile {
    pub fn lossless() -> Self {
        Self::default()
    }

    pub fn lossy(loss_rate: f64, reorder_rate: f64, seed: u64) -> Self {
        ImpairmentProfile {
            loss_rate,
            reorder_rate,
            seed,
            ..Self::default()
        }
    }
}

pub(crate) enum Backend {
    Emulated(emulated::WireEnd),
    Tap(tap::TapDevice),
}

/// A frame read/write endpoint. Cloning yields another handle to the same
/// device.
#[derive(Clone)]
pub struct LinkDevice {
    mtu: usize,
    mac: MacAddr,
    backend: Arc<Backend>,
}

impl std::fmt::Debug for LinkDevice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LinkDevice")
            .field("kind", &self.kind())
            .field("mac", &self.mac)
            .field("mtu", &self.mtu)
            .finish()
    }
}

impl LinkDevice {
    pub fn mtu(&self) -> usize {
        self.mtu
    }

    pub fn mac(&self) -> MacAddr {
        self.mac
    }

    pub fn kind(&self) -> DeviceKind {
        match *self.backend {
            Backend::Emulated(_) => DeviceKind::Emulated,
            Backend::Tap(_) => DeviceKind::Tap,
        }
    }

    pub fn max_frame_len(&self) -> usize {
        self.mtu + ETHERNET_HEADER_LEN
    }

    /// Blocks until a whole frame is available; `Closed` once the device
    /// has been closed.
    pub async fn read_frame(&self) -> Result<Vec<u8>> {
        match &*self.backend {
            Backend::Emulated(end) => end.read().await,
            Backend::Tap(tap) => tap.read(self.max_frame_len()).await,
        }
    }

    pub async fn write_frame(&self, frame: &[u8]) -> Result<()> {
        if frame.len() > self.max_frame_len() {
            return Err(Error::FrameTooLarge {
                len: frame.len(),
                max: self.max_frame_len(),
            });
        }
        if frame.len() < ETHERNET_HEADER_LEN {
            return Err(Error::Wire(crate::wire::WireError::TruncatedFrame {
                layer: "ethernet frame",
                needed: ETHERNET_HEADER_LEN,
                len: frame.len(),
            }));
        }
        match &*self.backend {
            Backend::Emulated(end) => end.write(frame),
            Backend::Tap(tap) => tap.write(frame).await,
        }
    }

    /// Closes this end. Pending and future reads return `Closed`, writes
    /// fail. The peer end of an emulated wire stays open.
    pub fn close(&self) {
        match &*self.backend {
            Backend::Emulated(end) => end.close(),
            Backend::Tap(tap) => tap.close(),
        }
    }

    pub fn is_closed(&self) -> bool {
        match &*self.backend {
            Backend::Emulated(end) => end.is_closed(),
            Backend::Tap(tap) => tap.is_closed(),
        }
    }

    /// Snapshot of every frame written at this end and what the wire did
    /// with it. `None` for TAP devices.
    pub fn transmit_log(&self) -> Option<TransmitLog> {
        match &*self.backend {
            Backend::Emulated(end) => Some(end.transmit_log()),
            Backend::Tap(_) => None,
        }
    }
}

/// Two connected emulated ends with locally administered MACs
/// `02:00:00:00:00:01` and `02:00:00:00:00:02` and a 1500-byte MTU.
pub fn create_wire_pair(profile: ImpairmentProfile) -> (LinkDevice, LinkDevice) {
    create_wire_pair_with(profile, [MacAddr::local(1), MacAddr::local(2)], DEFAULT_MTU)
        .expect("default mtu is valid")
}

pub fn create_wire_pair_with(
    profile: ImpairmentProfile,
    macs: [MacAddr; 2],
    mtu: usize,
) -> Result<(LinkDevice, LinkDevice)> {
    check_mtu(mtu)?;
    if !(0.0..=1.0).contains(&profile.loss_rate) || !(0.0..=1.0).contains(&profile.reorder_rate) {
        return Err(Error::Config("impairment rates must lie in [0, 1]".into()));
    }
    let (a, b) = emulated::pair(&profile);
    let dev = |mac, end| LinkDevice {
        mtu,
        mac,
        backend: Arc::new(Backend::Emulated(end)),
    };
    Ok((dev(macs[0], a), dev(macs[1], b)))
}

/// Attaches to an existing host TAP interface. Must be called from within
/// a tokio runtime.
pub fn open_tap(name: &str, mac: MacAddr, mtu: usize) -> Result<LinkDevice> {
    check_mtu(mtu)?;
    let tap = tap::TapDevice::open(name)?;
    Ok(LinkDevice {
        mtu,
        mac,
        backend: Arc::new(Backend::Tap(tap)),
    })
}

fn check_mtu(mtu: usize) -> Result<()> {
    if mtu < MIN_MTU {
        return Err(Error::Config(format!("mtu {mtu} below minimum {MIN_MTU}")));
    }
    if mtu > 65535 {
        return Err(Error::Config(format!("mtu {mtu} above 65535")));
    }
    Ok(())
}

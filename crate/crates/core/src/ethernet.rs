//! Bottom dealer: ethertype demultiplexing of inbound frames and framing of
//! outbound packets.

use std::sync::Arc;

use log::trace;

use crate::csp::{BindingRegistry, MessageQueue, TrySendError};
use crate::error::{Error, Result};
use crate::link::LinkDevice;
use crate::stats::Counters;
use crate::wire::{encode_frame, EthernetFrame, MacAddr};

pub struct EthernetLayer {
    device: LinkDevice,
    mac: MacAddr,
    mtu: usize,
    registry: Arc<BindingRegistry<u16, EthernetFrame>>,
    counters: Arc<Counters>,
}

impl EthernetLayer {
    pub(crate) fn new(device: LinkDevice, mac: MacAddr, mtu: usize, counters: Arc<Counters>) -> Self {
        EthernetLayer {
            mtu: mtu.min(device.mtu()),
            device,
            mac,
            registry: Arc::new(BindingRegistry::new()),
            counters,
        }
    }

    pub fn mac(&self) -> MacAddr {
        self.mac
    }

    pub fn mtu(&self) -> usize {
        self.mtu
    }

    pub fn device(&self) -> &LinkDevice {
        &self.device
    }

    pub fn registry(&self) -> &Arc<BindingRegistry<u16, EthernetFrame>> {
        &self.registry
    }

    /// Decodes an inbound frame and picks its ethertype binding. Frames for
    /// another unicast or multicast address are dropped.
    pub fn classify(&self, raw: Vec<u8>) -> Option<(u16, EthernetFrame)> {
        Counters::bump(&self.counters.eth_rx);
        let frame = match EthernetFrame::decode(&raw) {
            Ok(f) => f,
            Err(e) => {
                trace!("dropping undecodable frame: {e}");
                Counters::bump(&self.counters.eth_decode_error);
                return None;
            }
        };
        if frame.dst != self.mac && !frame.dst.is_broadcast() {
            Counters::bump(&self.counters.eth_not_ours);
            return None;
        }
        Some((frame.ethertype, frame))
    }

    /// Frames `payload` with our source address and writes it to the device.
    pub async fn send(&self, dst: MacAddr, ethertype: u16, payload: &[u8]) -> Result<()> {
        if payload.len() > self.mtu {
            return Err(Error::FrameTooLarge {
                len: payload.len(),
                max: self.mtu,
            });
        }
        let frame = encode_frame(dst, self.mac, ethertype, payload);
        self.device.write_frame(&frame).await
    }
}

/// Moves frames from the device into the Ethernet dealer's queue. The
/// hand-off never blocks: a full queue drops the frame, the way a NIC ring
/// overflows.
pub(crate) async fn run_link_reader(
    device: LinkDevice,
    out: MessageQueue<Vec<u8>>,
    counters: Arc<Counters>,
) {
    while let Ok(frame) = device.read_frame().await {
        match out.try_send(frame) {
            Ok(()) => {}
            Err(TrySendError::Full) => Counters::bump(&counters.link_rx_overflow),
            Err(TrySendError::Closed) => break,
        }
    }
}

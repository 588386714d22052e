use crate::wire::WireError;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("device unavailable: {0}")]
    DeviceUnavailable(String),
    #[error("frame of {len} bytes exceeds limit of {max}")]
    FrameTooLarge { len: usize, max: usize },
    #[error("channel or device closed")]
    Closed,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("key already bound")]
    AlreadyBound,
    #[error("key not bound")]
    NotBound,
    #[error("stack is not running")]
    NotRunning,
    #[error("no ARP reply for {0}")]
    ResolutionTimeout(std::net::Ipv4Addr),
    #[error("no route to {0}")]
    NoRoute(std::net::Ipv4Addr),
    #[error("timed out")]
    Timeout,
    #[error("no free ephemeral ports")]
    PortsExhausted,
    #[error("connection refused")]
    ConnectionRefused,
    #[error("connection closed")]
    ConnectionClosed,
    #[error("connection reset")]
    ConnectionReset,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

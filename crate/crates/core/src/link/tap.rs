use std::os::fd::{AsRawFd, FromRawFd, OwnedFd};
use std::sync::atomic::{AtomicBool, Ordering};

use tokio::io::unix::AsyncFd;
use tokio::io::Interest;
use tokio_util::sync::CancellationToken;

use crate::error::{Error, Result};

const TUNSETIFF: libc::c_ulong = 0x4004_54ca;
const IFF_TAP: libc::c_short = 0x0002;
const IFF_NO_PI: libc::c_short = 0x1000;

#[repr(C)]
struct IfReq {
    name: [libc::c_char; libc::IFNAMSIZ],
    flags: libc::c_short,
    _pad: [u8; 22],
}

pub(crate) struct TapDevice {
    fd: AsyncFd<OwnedFd>,
    closed: AtomicBool,
    cancel: CancellationToken,
}

impl TapDevice {
    pub(crate) fn open(name: &str) -> Result<Self> {
        let unavailable = |why: String| Error::DeviceUnavailable(format!("{name}: {why}"));
        if name.is_empty() || name.len() >= libc::IFNAMSIZ {
            return Err(unavailable("invalid interface name".into()));
        }
        // TUNSETIFF would create a missing interface when privileged; attach
        // only to interfaces that already exist.
        if !std::path::Path::new("/sys/class/net").join(name).exists() {
            return Err(unavailable("no such interface".into()));
        }
        let raw = unsafe {
            libc::open(
                c"/dev/net/tun".as_ptr(),
                libc::O_RDWR | libc::O_NONBLOCK | libc::O_CLOEXEC,
            )
        };
        if raw < 0 {
            return Err(unavailable(std::io::Error::last_os_error().to_string()));
        }
        let fd = unsafe { OwnedFd::from_raw_fd(raw) };
        let mut req = IfReq {
            name: [0; libc::IFNAMSIZ],
            flags: IFF_TAP | IFF_NO_PI,
            _pad: [0; 22],
        };
        for (dst, src) in req.name.iter_mut().zip(name.bytes()) {
            *dst = src as libc::c_char;
        }
        let rc = unsafe { libc::ioctl(fd.as_raw_fd(), TUNSETIFF as _, &mut req) };
        if rc < 0 {
            return Err(unavailable(std::io::Error::last_os_error().to_string()));
        }
        let fd = AsyncFd::with_interest(fd, Interest::READABLE | Interest::WRITABLE)
            .map_err(|e| unavailable(e.to_string()))?;
        Ok(TapDevice {
            fd,
            closed: AtomicBool::new(false),
            cancel: CancellationToken::new(),
        })
    }

    pub(crate) async fn read(&self, max_len: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; 65536];
        loop {
            if self.is_closed() {
                return Err(Error::Closed);
            }
            let mut guard = tokio::select! {
                g = self.fd.readable() => g.map_err(|_| Error::Closed)?,
                _ = self.cancel.cancelled() => return Err(Error::Closed),
            };
            let res = guard.try_io(|fd| {
                let n = unsafe {
                    libc::read(fd.as_raw_fd(), buf.as_mut_ptr().cast(), buf.len())
                };
                if n < 0 {
                    Err(std::io::Error::last_os_error())
                } else {
                    Ok(n as usize)
                }
            });
            match res {
                Ok(Ok(n)) if n <= max_len => {
                    buf.truncate(n);
                    return Ok(buf);
                }
                // larger than our mtu allows: not ours to deliver
                Ok(Ok(_)) => continue,
                Ok(Err(e)) => return Err(Error::DeviceUnavailable(e.to_string())),
                Err(_would_block) => continue,
            }
        }
    }

    pub(crate) async fn write(&self, frame: &[u8]) -> Result<()> {
        loop {
            if self.is_closed() {
                return Err(Error::Closed);
            }
            let mut guard = self.fd.writable().await.map_err(|_| Error::Closed)?;
            let res = guard.try_io(|fd| {
                let n = unsafe {
                    libc::write(fd.as_raw_fd(), frame.as_ptr().cast(), frame.len())
                };
                if n < 0 {
                    Err(std::io::Error::last_os_error())
                } else {
                    Ok(())
                }
            });
            match res {
                Ok(r) => return r.map_err(|e| Error::DeviceUnavailable(e.to_string())),
                Err(_would_block) => continue,
            }
        }
    }

    pub(crate) fn close(&self) {
        self.closed.store(true, Ordering::Release);
        self.cancel.cancel();
    }

    pub(crate) fn is_closed(&self) -> bool {
        self.closed.load(Ordering::Acquire)
    }
}

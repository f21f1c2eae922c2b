//! UDP socket backend.

use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::{Datagram, Endpoint, RxQueue, RxWait, Transport, DEFAULT_RX_CAPACITY};
use crate::error::{Error, Result};
use crate::runtime::DomainContext;

const RECV_POLL: Duration = Duration::from_millis(50);

/// A bound socket with a receive thread feeding an [`RxQueue`].
#[derive(Debug)]
pub struct UdpTransport {
    socket: UdpSocket,
    local: SocketAddr,
    mtu: usize,
    rx: Arc<RxQueue>,
    stop: Arc<AtomicBool>,
    receiver: Option<JoinHandle<()>>,
}

impl UdpTransport {
    pub fn bind(addr: SocketAddr, mtu: usize) -> Result<Self> {
        let socket = UdpSocket::bind(addr)?;
        let local = socket.local_addr()?;
        let rx = Arc::new(RxQueue::new(DEFAULT_RX_CAPACITY));
        let stop = Arc::new(AtomicBool::new(false));
        let recv_sock = socket.try_clone()?;
        recv_sock.set_read_timeout(Some(RECV_POLL))?;
        let receiver = {
            let rx = Arc::clone(&rx);
            let stop = Arc::clone(&stop);
            thread::Builder::new()
                .name(format!("udp-rx-{local}"))
                .spawn(move || receive_loop(recv_sock, rx, stop))?
        };
        Ok(Self {
            socket,
            local,
            mtu,
            rx,
            stop,
            receiver: Some(receiver),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local
    }
}

fn receive_loop(socket: UdpSocket, rx: Arc<RxQueue>, stop: Arc<AtomicBool>) {
    let mut buf = vec![0u8; 65_536];
    while !stop.load(Ordering::Relaxed) {
        match socket.recv_from(&mut buf) {
            Ok((n, src)) => {
                rx.push(Datagram {
                    src: Endpoint::Udp(src),
                    bytes: buf[..n].to_vec(),
                });
            }
            Err(e)
                if matches!(
                    e.kind(),
                    std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
                ) => {}
            Err(e) => {
                log::warn!("udp receive on {:?} failed: {e}", socket.local_addr());
                thread::sleep(RECV_POLL);
            }
        }
    }
}

impl Drop for UdpTransport {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.receiver.take() {
            let _ = h.join();
        }
    }
}

impl Transport for UdpTransport {
    fn local_endpoint(&self) -> Endpoint {
        Endpoint::Udp(self.local)
    }

    fn mtu(&self) -> usize {
        self.mtu
    }

    fn send(&self, dest: Endpoint, datagram: &[u8]) -> Result<()> {
        if datagram.len() > self.mtu {
            return Err(Error::OversizedDatagram {
                len: datagram.len(),
                mtu: self.mtu,
            });
        }
        let Endpoint::Udp(addr) = dest else {
            return Err(Error::InvalidConfig(format!(
                "{dest} is not a UDP endpoint"
            )));
        };
        self.socket.send_to(datagram, addr)?;
        Ok(())
    }

    fn poll_rx(&self, max: usize) -> Vec<Datagram> {
        self.rx.pop_batch(max)
    }

    fn wait_rx(&self, ctx: &DomainContext, timeout: Duration) -> Result<RxWait> {
        ctx.require_application()?;
        let start = Instant::now();
        let out = self.rx.wait_until(start + timeout);
        ctx.add_blocked(start.elapsed());
        Ok(out)
    }

    fn rx_dropped(&self) -> u64 {
        self.rx.dropped()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{Runtime, TimeBoundPolicy};

    #[test]
    fn loopback_round_trip() {
        let any: SocketAddr = "127.0.0.1:0".parse().unwrap();
        let a = UdpTransport::bind(any, 1408).unwrap();
        let b = UdpTransport::bind(any, 1408).unwrap();
        a.send(b.local_endpoint(), b"ping").unwrap();
        let rt = Runtime::new(TimeBoundPolicy::default());
        let ctx = rt.daemon_context();
        assert_eq!(
            b.wait_rx(&ctx, Duration::from_secs(2)).unwrap(),
            RxWait::Ready
        );
        let got = b.poll_rx(4);
        assert_eq!(got[0].bytes, b"ping");
        assert_eq!(got[0].src, a.local_endpoint());
    }
}

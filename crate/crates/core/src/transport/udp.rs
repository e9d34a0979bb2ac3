use std::io;
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};
use socket2::{Domain, Protocol, Socket, Type};

use super::{check_size, Locator, Transport, TransportError};
use crate::wire::MAX_MESSAGE_LEN;

const POLL_INTERVAL: Duration = Duration::from_millis(100);

#[derive(Debug, Clone)]
pub struct UdpConfig {
    pub bind_address: Ipv4Addr,
    /// `None` lets the OS pick a port.
    pub unicast_port: Option<u16>,
    /// Interface used to join groups and send multicast.
    pub multicast_interface: Ipv4Addr,
    pub multicast_ttl: u32,
}

impl Default for UdpConfig {
    fn default() -> Self {
        UdpConfig {
            bind_address: Ipv4Addr::UNSPECIFIED,
            unicast_port: None,
            multicast_interface: Ipv4Addr::UNSPECIFIED,
            multicast_ttl: 1,
        }
    }
}

impl UdpConfig {
    /// Everything pinned to 127.0.0.1; used by tests and single-host setups.
    pub fn loopback() -> Self {
        UdpConfig {
            bind_address: Ipv4Addr::UNSPECIFIED,
            unicast_port: None,
            multicast_interface: Ipv4Addr::LOCALHOST,
            multicast_ttl: 0,
        }
    }
}

fn unavailable(e: io::Error) -> TransportError {
    TransportError::NetworkUnavailable(e.to_string())
}

/// UDP unicast socket plus optional multicast discovery sockets.
///
/// Each socket is drained by a pump thread into one channel, so `receive`
/// sees unicast and discovery traffic through a single queue.
pub struct UdpTransport {
    config: UdpConfig,
    socket: Arc<UdpSocket>,
    local: Locator,
    tx: Sender<(Locator, Vec<u8>)>,
    rx: Receiver<(Locator, Vec<u8>)>,
    shutdown: Arc<AtomicBool>,
    pumps: Mutex<Vec<thread::JoinHandle<()>>>,
}

impl UdpTransport {
    pub fn bind(config: UdpConfig) -> Result<Self, TransportError> {
        let addr = SocketAddrV4::new(config.bind_address, config.unicast_port.unwrap_or(0));
        let socket = UdpSocket::bind(addr).map_err(unavailable)?;
        socket.set_multicast_loop_v4(true).map_err(unavailable)?;
        socket.set_multicast_ttl_v4(config.multicast_ttl).map_err(unavailable)?;
        if !config.multicast_interface.is_unspecified() {
            socket2::SockRef::from(&socket).set_multicast_if_v4(&config.multicast_interface).map_err(unavailable)?;
        }
        let local = match socket.local_addr().map_err(unavailable)? {
            SocketAddr::V4(a) => {
                let ip = if a.ip().is_unspecified() { Ipv4Addr::LOCALHOST } else { *a.ip() };
                Locator::new(ip, a.port())
            }
            SocketAddr::V6(_) => return Err(TransportError::NetworkUnavailable("IPv6 not supported".into())),
        };
        let (tx, rx) = crossbeam_channel::unbounded();
        let transport = UdpTransport {
            config,
            socket: Arc::new(socket),
            local,
            tx,
            rx,
            shutdown: Arc::new(AtomicBool::new(false)),
            pumps: Mutex::new(Vec::new()),
        };
        transport.spawn_pump(Arc::clone(&transport.socket))?;
        Ok(transport)
    }

    fn spawn_pump(&self, socket: Arc<UdpSocket>) -> Result<(), TransportError> {
        socket.set_read_timeout(Some(POLL_INTERVAL)).map_err(unavailable)?;
        let tx = self.tx.clone();
        let shutdown = Arc::clone(&self.shutdown);
        let handle = thread::Builder::new()
            .name("udp-pump".into())
            .spawn(move || {
                let mut buf = vec![0u8; MAX_MESSAGE_LEN + 1];
                while !shutdown.load(Ordering::Relaxed) {
                    match socket.recv_from(&mut buf) {
                        Ok((n, SocketAddr::V4(from))) => {
                            if tx.send((from.into(), buf[..n].to_vec())).is_err() {
                                break;
                            }
                        }
                        Ok(_) => {}
                        Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
                        Err(e) => {
                            log::warn!("udp receive failed: {e}");
                            thread::sleep(POLL_INTERVAL);
                        }
                    }
                }
            })
            .map_err(unavailable)?;
        self.pumps.lock().unwrap_or_else(|e| e.into_inner()).push(handle);
        Ok(())
    }
}

impl Transport for UdpTransport {
    fn local_locator(&self) -> Locator {
        self.local
    }

    fn send(&self, to: Locator, datagram: &[u8]) -> Result<(), TransportError> {
        check_size(datagram)?;
        self.socket.send_to(datagram, to.socket_addr()).map_err(unavailable)?;
        Ok(())
    }

    fn receive(&self, timeout: Duration) -> Result<(Locator, Vec<u8>), TransportError> {
        match self.rx.recv_timeout(timeout) {
            Ok(item) => Ok(item),
            Err(RecvTimeoutError::Timeout) => Err(TransportError::TimedOut),
            Err(RecvTimeoutError::Disconnected) => Err(TransportError::Closed),
        }
    }

    fn join_discovery_group(&self, group: Locator) -> Result<(), TransportError> {
        if !group.is_multicast() {
            return Err(TransportError::NotMulticast(group));
        }
        let socket = Socket::new(Domain::IPV4, Type::DGRAM, Some(Protocol::UDP)).map_err(unavailable)?;
        socket.set_reuse_address(true).map_err(unavailable)?;
        #[cfg(unix)]
        socket.set_reuse_port(true).map_err(unavailable)?;
        let bind = SocketAddrV4::new(Ipv4Addr::UNSPECIFIED, group.port);
        socket.bind(&bind.into()).map_err(unavailable)?;
        socket.join_multicast_v4(&group.address, &self.config.multicast_interface).map_err(unavailable)?;
        self.spawn_pump(Arc::new(socket.into()))
    }
}

impl Drop for UdpTransport {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        let pumps = std::mem::take(&mut *self.pumps.lock().unwrap_or_else(|e| e.into_inner()));
        for handle in pumps {
            let _ = handle.join();
        }
    }
}

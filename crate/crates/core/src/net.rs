//! Small TCP helpers shared by both planes.

use std::io;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crate::error::{Error, Result};
use crate::wire::Frame;

/// Write half of a framed connection, shareable between contexts.
pub(crate) struct FrameSink {
    stream: Mutex<TcpStream>,
}

impl FrameSink {
    pub(crate) fn new(stream: TcpStream) -> Self {
        FrameSink {
            stream: Mutex::new(stream),
        }
    }

    pub(crate) fn send(&self, frame: &Frame) -> io::Result<()> {
        let bytes = frame.encode();
        let mut s = self.stream.lock().unwrap();
        io::Write::write_all(&mut *s, &bytes)
    }

    pub(crate) fn shutdown(&self) {
        if let Ok(s) = self.stream.lock() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }

    /// Ends our direction only; the peer sees end of stream after any
    /// frames already sent.
    pub(crate) fn shutdown_write(&self) {
        if let Ok(s) = self.stream.lock() {
            let _ = s.shutdown(Shutdown::Write);
        }
    }
}

/// Accept loop on its own thread; each connection is handed to `on_conn`.
pub(crate) struct Acceptor {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl Acceptor {
    pub(crate) fn spawn(host: &str, name: &str, on_conn: impl Fn(TcpStream) + Send + 'static) -> Result<Acceptor> {
        let listener = TcpListener::bind((host, 0))?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop2 = stop.clone();
        let handle = thread::Builder::new().name(name.to_string()).spawn(move || {
            for conn in listener.incoming() {
                if stop2.load(Ordering::SeqCst) {
                    break;
                }
                match conn {
                    Ok(s) => {
                        let _ = s.set_nodelay(true);
                        on_conn(s);
                    }
                    Err(e) => log::warn!("accept failed: {e}"),
                }
            }
        })?;
        Ok(Acceptor {
            addr,
            stop,
            handle: Some(handle),
        })
    }

    pub(crate) fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub(crate) fn shutdown(&mut self) {
        if let Some(h) = self.handle.take() {
            self.stop.store(true, Ordering::SeqCst);
            // wake the blocking accept
            let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
            let _ = h.join();
        }
    }
}

impl Drop for Acceptor {
    fn drop(&mut self) {
        self.shutdown();
    }
}

pub(crate) fn connect(addr: &str) -> Result<TcpStream> {
    let sa = addr
        .to_socket_addrs()
        .map_err(|e| Error::ConnectionLost(format!("{addr}: {e}")))?
        .next()
        .ok_or_else(|| Error::ConnectionLost(format!("{addr} did not resolve")))?;
    let s = TcpStream::connect(sa).map_err(|e| Error::ConnectionLost(format!("{addr}: {e}")))?;
    s.set_nodelay(true)?;
    Ok(s)
}

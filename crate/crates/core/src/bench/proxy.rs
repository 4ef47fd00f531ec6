//! Loopback TCP relay that keeps a copy of every byte it forwards.

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

#[derive(Debug, Default, Clone)]
pub struct Conversation {
    pub upstream: Vec<u8>,
    pub downstream: Vec<u8>,
}

type Log = Arc<Mutex<Vec<Arc<Mutex<Conversation>>>>>;

pub struct CountingProxy {
    addr: SocketAddr,
    log: Log,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

fn pump(mut from: TcpStream, mut to: TcpStream, conv: Arc<Mutex<Conversation>>, up: bool) {
    let mut buf = [0u8; 8192];
    loop {
        let n = match from.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => n,
        };
        {
            let mut c = conv.lock().expect("proxy log poisoned");
            let side = if up {
                &mut c.upstream
            } else {
                &mut c.downstream
            };
            side.extend_from_slice(&buf[..n]);
        }
        if to.write_all(&buf[..n]).is_err() {
            break;
        }
    }
    let _ = to.shutdown(Shutdown::Write);
}

impl CountingProxy {
    /// Listens on an ephemeral loopback port and relays to `target`.
    pub fn start(target: SocketAddr) -> io::Result<Self> {
        let listener = TcpListener::bind(("127.0.0.1", 0))?;
        let addr = listener.local_addr()?;
        let log: Log = Arc::default();
        let stop = Arc::new(AtomicBool::new(false));
        let (log2, stop2) = (log.clone(), stop.clone());
        let thread = std::thread::spawn(move || {
            for client in listener.incoming() {
                if stop2.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(client) = client else { continue };
                let Ok(server) = TcpStream::connect(target) else {
                    continue;
                };
                let conv = Arc::new(Mutex::new(Conversation::default()));
                log2.lock().expect("proxy log poisoned").push(conv.clone());
                let (Ok(c2), Ok(s2)) = (client.try_clone(), server.try_clone()) else {
                    continue;
                };
                let up = conv.clone();
                std::thread::spawn(move || pump(client, server, up, true));
                std::thread::spawn(move || pump(s2, c2, conv, false));
            }
        });
        Ok(CountingProxy {
            addr,
            log,
            stop,
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Returns and clears everything relayed so far.
    pub fn take(&self) -> Vec<Conversation> {
        let mut log = self.log.lock().expect("proxy log poisoned");
        log.drain(..)
            .map(|c| c.lock().expect("proxy log poisoned").clone())
            .collect()
    }
}

impl Drop for CountingProxy {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Splits one HTTP/1.1 message stream into (header bytes, payload bytes).
pub fn split_http(bytes: &[u8]) -> (usize, usize) {
    match bytes.windows(4).position(|w| w == b"\r\n\r\n") {
        Some(p) => (p + 4, bytes.len() - p - 4),
        None => (bytes.len(), 0),
    }
}

//! Blocking TCP channel: one reader thread per connection feeding a single
//! event queue on the server side.

use std::collections::HashMap;
use std::io::{ErrorKind, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use super::{encode_frame, FrameDecoder, Message, ERR_FRAME_TOO_LARGE, ERR_PROTOCOL, MAX_FRAME};
use crate::error::{Error, Result};

const READ_CHUNK: usize = 64 * 1024;

/// Client end of a connection.
pub struct Connection {
    stream: TcpStream,
    decoder: FrameDecoder,
    peer: String,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

impl Connection {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        Ok(Connection::from_stream(stream))
    }

    pub fn from_stream(stream: TcpStream) -> Self {
        let _ = stream.set_nodelay(true);
        let peer = stream.peer_addr().map_or_else(|_| "unknown".to_string(), |a| a.to_string());
        Connection { stream, decoder: FrameDecoder::new(), peer, bytes_sent: 0, bytes_received: 0 }
    }

    pub fn peer(&self) -> &str {
        &self.peer
    }

    /// Sends one message and returns the frame length in bytes.
    pub fn send(&mut self, msg: &Message) -> Result<usize> {
        let frame = encode_frame(msg)?;
        self.send_raw(&frame)?;
        Ok(frame.len())
    }

    pub fn send_raw(&mut self, bytes: &[u8]) -> Result<()> {
        self.stream.write_all(bytes).map_err(|e| self.peer_error(e))?;
        self.bytes_sent += bytes.len() as u64;
        Ok(())
    }

    /// Blocks for the next message and its frame length.
    pub fn recv(&mut self) -> Result<(Message, usize)> {
        let mut chunk = vec![0u8; READ_CHUNK];
        loop {
            if let Some((msg, len)) = self.decoder.next_frame()? {
                self.bytes_received += len as u64;
                return Ok((msg, len));
            }
            let n = self.stream.read(&mut chunk).map_err(|e| self.peer_error(e))?;
            if n == 0 {
                return Err(Error::Peer { peer: self.peer.clone(), message: "connection closed".into() });
            }
            self.decoder.push(&chunk[..n]);
        }
    }

    fn peer_error(&self, e: std::io::Error) -> Error {
        Error::Peer { peer: self.peer.clone(), message: e.to_string() }
    }

    pub fn close(&self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

/// What the server's reader threads report.
#[derive(Debug)]
pub enum ServerEvent {
    Connected { peer: u32, addr: String },
    Message { peer: u32, msg: Message, frame_len: usize },
    /// The connection ended; `reason` is set when the server closed it.
    Closed { peer: u32, reason: Option<String> },
}

type Writers = Arc<Mutex<HashMap<u32, TcpStream>>>;

/// Listening server. Connections are numbered in accept order.
pub struct ServerHandle {
    addr: SocketAddr,
    events: Receiver<ServerEvent>,
    writers: Writers,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
    max_frame: usize,
}

pub fn serve<A: ToSocketAddrs>(bind: A) -> Result<ServerHandle> {
    serve_with_limit(bind, MAX_FRAME)
}

/// [`serve`] with a custom frame limit; used by tests to exercise the
/// oversized-frame path cheaply.
pub fn serve_with_limit<A: ToSocketAddrs>(bind: A, max_frame: usize) -> Result<ServerHandle> {
    let listener = TcpListener::bind(bind)?;
    let addr = listener.local_addr()?;
    let (tx, rx) = channel();
    let writers: Writers = Arc::new(Mutex::new(HashMap::new()));
    let stop = Arc::new(AtomicBool::new(false));
    let acceptor = {
        let writers = Arc::clone(&writers);
        let stop = Arc::clone(&stop);
        thread::spawn(move || accept_loop(listener, tx, writers, stop, max_frame))
    };
    Ok(ServerHandle { addr, events: rx, writers, stop, acceptor: Some(acceptor), max_frame })
}

fn accept_loop(listener: TcpListener, tx: Sender<ServerEvent>, writers: Writers, stop: Arc<AtomicBool>, max: usize) {
    let mut next_peer = 0u32;
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        let _ = stream.set_nodelay(true);
        let Ok(writer) = stream.try_clone() else { continue };
        let peer = next_peer;
        next_peer += 1;
        writers.lock().expect("writer map poisoned").insert(peer, writer);
        let addr = stream.peer_addr().map_or_else(|_| "unknown".to_string(), |a| a.to_string());
        if tx.send(ServerEvent::Connected { peer, addr }).is_err() {
            break;
        }
        let tx = tx.clone();
        let writers = Arc::clone(&writers);
        thread::spawn(move || read_loop(peer, stream, tx, writers, max));
    }
}

fn read_loop(peer: u32, mut stream: TcpStream, tx: Sender<ServerEvent>, writers: Writers, max: usize) {
    let mut decoder = FrameDecoder::with_max(max);
    let mut chunk = vec![0u8; READ_CHUNK];
    let reason = 'conn: loop {
        loop {
            match decoder.next_frame() {
                Ok(Some((msg, frame_len))) => {
                    if tx.send(ServerEvent::Message { peer, msg, frame_len }).is_err() {
                        break 'conn None;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    let code = match e {
                        Error::FrameTooLarge { .. } => ERR_FRAME_TOO_LARGE,
                        _ => ERR_PROTOCOL,
                    };
                    let reply = Message::Error { code, message: e.to_string() };
                    if let Ok(frame) = encode_frame(&reply) {
                        let _ = stream.write_all(&frame);
                    }
                    break 'conn Some(e.to_string());
                }
            }
        }
        match stream.read(&mut chunk) {
            Ok(0) => break None,
            Ok(n) => decoder.push(&chunk[..n]),
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => break Some(e.to_string()),
        }
    };
    let _ = stream.shutdown(Shutdown::Both);
    writers.lock().expect("writer map poisoned").remove(&peer);
    let _ = tx.send(ServerEvent::Closed { peer, reason });
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn max_frame(&self) -> usize {
        self.max_frame
    }

    /// Blocks for the next event from any connection.
    pub fn next_event(&self) -> Result<ServerEvent> {
        self.events.recv().map_err(|_| Error::Protocol("server event queue closed".into()))
    }

    /// Sends to one peer and returns the frame length.
    pub fn send(&self, peer: u32, msg: &Message) -> Result<usize> {
        let frame = encode_frame(msg)?;
        let mut writers = self.writers.lock().expect("writer map poisoned");
        let stream = writers.get_mut(&peer).ok_or_else(|| Error::Peer {
            peer: format!("#{peer}"),
            message: "connection is closed".into(),
        })?;
        stream
            .write_all(&frame)
            .map_err(|e| Error::Peer { peer: format!("#{peer}"), message: e.to_string() })?;
        Ok(frame.len())
    }

    /// Closes one connection; its reader thread then reports `Closed`.
    pub fn close(&self, peer: u32) {
        if let Some(s) = self.writers.lock().expect("writer map poisoned").get(&peer) {
            let _ = s.shutdown(Shutdown::Both);
        }
    }

    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the acceptor so it observes the flag.
        let _ = TcpStream::connect(self.addr);
        for s in self.writers.lock().expect("writer map poisoned").values() {
            let _ = s.shutdown(Shutdown::Both);
        }
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

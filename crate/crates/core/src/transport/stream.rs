//! OS byte-stream backend: framed tagged messages over non-blocking TCP.

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpStream};

use socket2::{Domain, Protocol, Socket, Type};

use super::tag::{decode_frame, Decoded, TaggedMessage};

// Stop encoding new frames once this much is waiting for the socket.
const WRITE_HIGH_WATER: usize = 1 << 20;
const READ_CHUNK: usize = 256 * 1024;
const MAX_READ_PER_PROGRESS: usize = 4 << 20;

pub(crate) enum FrameResult {
    Frame(TaggedMessage),
    None,
    TooLong(usize),
}

pub(crate) struct StreamLink {
    sock: TcpStream,
    connecting: bool,
    wbuf: Vec<u8>,
    wpos: usize,
    rbuf: Vec<u8>,
    rpos: usize,
    rend: usize,
    read_closed: bool,
}

impl std::fmt::Debug for StreamLink {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StreamLink")
            .field("local", &self.sock.local_addr().ok())
            .field("peer", &self.sock.peer_addr().ok())
            .field("connecting", &self.connecting)
            .finish()
    }
}

impl StreamLink {
    /// Starts a non-blocking connect.
    pub(crate) fn connect(addr: SocketAddr) -> io::Result<Self> {
        let socket = Socket::new(Domain::for_address(addr), Type::STREAM, Some(Protocol::TCP))?;
        socket.set_nonblocking(true)?;
        socket.set_tcp_nodelay(true)?;
        match socket.connect(&addr.into()) {
            Ok(()) => {}
            Err(e)
                if e.raw_os_error() == Some(libc::EINPROGRESS)
                    || e.kind() == io::ErrorKind::WouldBlock => {}
            Err(e) => return Err(e),
        }
        Ok(Self::wrap(socket.into(), true))
    }

    pub(crate) fn accepted(sock: TcpStream) -> io::Result<Self> {
        sock.set_nonblocking(true)?;
        sock.set_nodelay(true)?;
        Ok(Self::wrap(sock, false))
    }

    fn wrap(sock: TcpStream, connecting: bool) -> Self {
        Self {
            sock,
            connecting,
            wbuf: Vec::new(),
            wpos: 0,
            rbuf: Vec::new(),
            rpos: 0,
            rend: 0,
            read_closed: false,
        }
    }

    /// Returns true once the TCP connection is usable.
    pub(crate) fn poll_connect(&mut self) -> io::Result<bool> {
        if !self.connecting {
            return Ok(true);
        }
        if let Some(err) = self.sock.take_error()? {
            return Err(err);
        }
        match self.sock.peer_addr() {
            Ok(_) => {
                self.connecting = false;
                Ok(true)
            }
            Err(e) if e.kind() == io::ErrorKind::NotConnected => Ok(false),
            Err(e) => Err(e),
        }
    }

    pub(crate) fn local_addr(&self) -> String {
        self.sock
            .local_addr()
            .map(|a| a.to_string())
            .unwrap_or_default()
    }

    pub(crate) fn peer_addr(&self) -> String {
        self.sock
            .peer_addr()
            .map(|a| a.to_string())
            .unwrap_or_default()
    }

    pub(crate) fn can_enqueue(&self) -> bool {
        !self.connecting && self.pending_write() < WRITE_HIGH_WATER
    }

    pub(crate) fn enqueue(&mut self, msg: &TaggedMessage) {
        msg.encode_into(&mut self.wbuf);
    }

    pub(crate) fn pending_write(&self) -> usize {
        self.wbuf.len() - self.wpos
    }

    /// Writes buffered frames until the socket would block.
    pub(crate) fn flush(&mut self) -> io::Result<()> {
        while self.wpos < self.wbuf.len() {
            match self.sock.write(&self.wbuf[self.wpos..]) {
                Ok(0) => return Err(io::ErrorKind::WriteZero.into()),
                Ok(n) => self.wpos += n,
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e),
            }
        }
        if self.wpos == self.wbuf.len() {
            self.wbuf.clear();
            self.wpos = 0;
        } else if self.wpos > WRITE_HIGH_WATER {
            self.wbuf.drain(..self.wpos);
            self.wpos = 0;
        }
        Ok(())
    }

    /// Pulls available bytes from the socket. Returns true when the peer has
    /// closed its sending side.
    pub(crate) fn fill(&mut self) -> io::Result<bool> {
        if self.read_closed {
            return Ok(true);
        }
        if self.rpos > 0 {
            self.rbuf.copy_within(self.rpos..self.rend, 0);
            self.rend -= self.rpos;
            self.rpos = 0;
        }
        let mut total = 0;
        while total < MAX_READ_PER_PROGRESS {
            if self.rbuf.len() - self.rend < READ_CHUNK {
                // `rbuf` stays initialized; only the growth is zeroed.
                self.rbuf.resize(self.rend + READ_CHUNK, 0);
            }
            match self.sock.read(&mut self.rbuf[self.rend..]) {
                Ok(0) => {
                    self.read_closed = true;
                    break;
                }
                Ok(n) => {
                    self.rend += n;
                    total += n;
                }
                Err(e) => match e.kind() {
                    io::ErrorKind::WouldBlock => break,
                    io::ErrorKind::Interrupted => {}
                    _ => return Err(e),
                },
            }
        }
        Ok(self.read_closed)
    }

    pub(crate) fn next_frame(&mut self, max_payload: usize) -> FrameResult {
        match decode_frame(&self.rbuf[self.rpos..self.rend], max_payload) {
            Decoded::Frame(msg, used) => {
                self.rpos += used;
                FrameResult::Frame(msg)
            }
            Decoded::Incomplete => FrameResult::None,
            Decoded::TooLong(len) => FrameResult::TooLong(len),
        }
    }

    pub(crate) fn shutdown(&self, how: Shutdown) {
        let _ = self.sock.shutdown(how);
    }
}

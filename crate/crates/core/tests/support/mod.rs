//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

pub mod fidelity;
pub mod shadow;

use std::time::{Duration, Instant};

use tagnio::channel::{Channel, Provider, ReadResult, ServerChannel};

/// Connects a fresh client to `server` and returns (client, accepted).
pub fn connect_pair(provider: &Provider, server: &ServerChannel, addr: &str) -> (Channel, Channel) {
    let client = provider.open_channel().unwrap();
    client.connect(addr).unwrap();
    let deadline = Instant::now() + Duration::from_secs(10);
    let mut accepted = None;
    while Instant::now() < deadline {
        if accepted.is_none() {
            accepted = server.accept().unwrap();
        }
        if client.finish_connect().unwrap() && accepted.is_some() {
            return (client, accepted.unwrap());
        }
        std::thread::yield_now();
    }
    panic!("handshake with {addr} timed out");
}

/// Reads until end of stream, progressing `peer` meanwhile.
pub fn read_to_end(ch: &Channel, peer: Option<&Channel>, limit: Duration) -> Result<Vec<u8>, String> {
    let deadline = Instant::now() + limit;
    let mut out = Vec::new();
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        if let Some(p) = peer {
            if p.is_open() {
                let _ = p.poll();
            }
        }
        match ch.read(&mut buf).map_err(|e| e.to_string())? {
            ReadResult::Bytes(n) => out.extend_from_slice(&buf[..n]),
            ReadResult::EndOfStream => return Ok(out),
        }
        if Instant::now() > deadline {
            return Err(format!("no end of stream after {} bytes", out.len()));
        }
    }
}

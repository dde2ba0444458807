//! Randomized sender/receiver sessions checking byte-exact delivery.

use std::time::{Duration, Instant};

use rand::Rng;
use tagnio::channel::{Channel, Provider, ReadResult, ServerChannel};

pub const MAX_MESSAGE: usize = 256 * 1024;

/// Message sizes from 1 B to 256 KiB, log-uniform so small and large both occur.
pub fn message_size(rng: &mut impl Rng) -> usize {
    let bits = rng.gen_range(0..=18u32);
    let lo = 1usize << bits.saturating_sub(1);
    let hi = (1usize << bits).min(MAX_MESSAGE);
    rng.gen_range(lo.min(hi)..=hi)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SessionStats {
    pub bytes: usize,
    pub messages: usize,
    pub writes: usize,
    pub gathers: usize,
}

/// One session: random messages sent with a random mix of `write` and
/// `write_gather` at random flush points, then closed. Returns an error
/// describing the first divergence.
pub fn session(
    provider: &Provider,
    server: &ServerChannel,
    addr: &str,
    rng: &mut impl Rng,
) -> Result<SessionStats, String> {
    let (client, accepted) = super::connect_pair(provider, server, addr);
    let count = rng.gen_range(1..=8);
    let messages: Vec<Vec<u8>> = (0..count)
        .map(|_| {
            let len = message_size(rng);
            (0..len).map(|_| rng.gen()).collect()
        })
        .collect();
    let expected = messages.concat();
    let mut stats = SessionStats {
        bytes: expected.len(),
        messages: count,
        ..SessionStats::default()
    };

    let mut received = Vec::with_capacity(expected.len());
    let mut buf = vec![0u8; 64 * 1024];
    let deadline = Instant::now() + Duration::from_secs(30);
    // Cursor into the message list: (message index, offset).
    let (mut idx, mut off) = (0usize, 0usize);
    while idx < messages.len() {
        let batch_end = (idx + rng.gen_range(1..=8)).min(messages.len());
        let gather = rng.gen_bool(0.5);
        while idx < batch_end {
            let n = if gather {
                let mut spans: Vec<&[u8]> = vec![&messages[idx][off..]];
                spans.extend(messages[idx + 1..batch_end].iter().map(Vec::as_slice));
                stats.gathers += 1;
                client.write_gather(&spans).map_err(|e| e.to_string())?
            } else {
                stats.writes += 1;
                client.write(&messages[idx][off..]).map_err(|e| e.to_string())?
            };
            advance(&messages, &mut idx, &mut off, n);
            drain_into(&accepted, &mut buf, &mut received)?;
            if Instant::now() > deadline {
                return Err(format!("sender stalled at message {idx}/{count}"));
            }
        }
    }
    client.close().map_err(|e| e.to_string())?;
    loop {
        match accepted.read(&mut buf).map_err(|e| e.to_string())? {
            ReadResult::Bytes(n) => received.extend_from_slice(&buf[..n]),
            ReadResult::EndOfStream => break,
        }
        if Instant::now() > deadline {
            return Err(format!("receiver stalled at {} of {} bytes", received.len(), expected.len()));
        }
    }
    accepted.close().map_err(|e| e.to_string())?;
    if received.len() != expected.len() {
        return Err(format!("received {} of {} bytes", received.len(), expected.len()));
    }
    if let Some(at) = received.iter().zip(&expected).position(|(a, b)| a != b) {
        return Err(format!("first mismatch at byte {at}"));
    }
    Ok(stats)
}

fn advance(messages: &[Vec<u8>], idx: &mut usize, off: &mut usize, mut n: usize) {
    while n > 0 {
        let left = messages[*idx].len() - *off;
        if n >= left {
            n -= left;
            *idx += 1;
            *off = 0;
        } else {
            *off += n;
            n = 0;
        }
    }
}

fn drain_into(ch: &Channel, buf: &mut [u8], out: &mut Vec<u8>) -> Result<(), String> {
    loop {
        match ch.read(buf).map_err(|e| e.to_string())? {
            ReadResult::Bytes(0) => return Ok(()),
            ReadResult::Bytes(n) => out.extend_from_slice(&buf[..n]),
            ReadResult::EndOfStream => return Err("premature end of stream".into()),
        }
    }
}

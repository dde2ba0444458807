//! Tag layout and wire framing for tagged messages.
//!
//! ```text
//!  63            32  31   30  29  28                    0
//! +----------------+----+-------+------------------------+
//! | connection id  | dir| kind  | reserved / credit grant|
//! +----------------+----+-------+------------------------+
//! ```
//!
//! On byte streams a message is framed as `[tag: u64 BE][length: u32 BE][payload]`.

use std::fmt;

pub const FRAME_HEADER_LEN: usize = 12;
/// Largest credit grant a single ACK can carry in the reserved bits.
pub const MAX_GRANT: u32 = (1 << 29) - 1;

const KIND_SHIFT: u32 = 29;
const DIR_SHIFT: u32 = 31;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    Data = 0,
    Syn = 1,
    Ack = 2,
    Fin = 3,
}

impl MessageKind {
    fn from_bits(bits: u64) -> Self {
        match bits & 0b11 {
            0 => MessageKind::Data,
            1 => MessageKind::Syn,
            2 => MessageKind::Ack,
            _ => MessageKind::Fin,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Sent by the connecting side.
    ToServer = 0,
    /// Sent by the accepting side.
    ToClient = 1,
}

impl Direction {
    pub fn reverse(self) -> Self {
        match self {
            Direction::ToServer => Direction::ToClient,
            Direction::ToClient => Direction::ToServer,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tag(u64);

impl Tag {
    pub fn new(connection_id: u32, direction: Direction, kind: MessageKind, reserved: u32) -> Self {
        Tag(((connection_id as u64) << 32)
            | ((direction as u64) << DIR_SHIFT)
            | ((kind as u64) << KIND_SHIFT)
            | (reserved & MAX_GRANT) as u64)
    }

    pub fn from_raw(raw: u64) -> Self {
        Tag(raw)
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn connection_id(self) -> u32 {
        (self.0 >> 32) as u32
    }

    pub fn direction(self) -> Direction {
        if (self.0 >> DIR_SHIFT) & 1 == 0 {
            Direction::ToServer
        } else {
            Direction::ToClient
        }
    }

    pub fn kind(self) -> MessageKind {
        MessageKind::from_bits(self.0 >> KIND_SHIFT)
    }

    pub fn reserved(self) -> u32 {
        (self.0 as u32) & MAX_GRANT
    }
}

impl fmt::Debug for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tag")
            .field("conn", &self.connection_id())
            .field("dir", &self.direction())
            .field("kind", &self.kind())
            .field("reserved", &self.reserved())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedMessage {
    pub tag: Tag,
    pub payload: Vec<u8>,
}

impl TaggedMessage {
    pub fn new(tag: Tag, payload: Vec<u8>) -> Self {
        Self { tag, payload }
    }

    pub fn control(tag: Tag) -> Self {
        Self {
            tag,
            payload: Vec::new(),
        }
    }

    pub fn encoded_len(&self) -> usize {
        FRAME_HEADER_LEN + self.payload.len()
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.tag.raw().to_be_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
    }
}

/// Outcome of trying to pull one frame off the front of a byte buffer.
#[derive(Debug, PartialEq, Eq)]
pub enum Decoded {
    Frame(TaggedMessage, usize),
    Incomplete,
    TooLong(usize),
}

/// Decodes a frame from the start of `buf`, rejecting payloads above `max_payload`.
pub fn decode_frame(buf: &[u8], max_payload: usize) -> Decoded {
    if buf.len() < FRAME_HEADER_LEN {
        return Decoded::Incomplete;
    }
    let tag = u64::from_be_bytes(buf[0..8].try_into().unwrap());
    let len = u32::from_be_bytes(buf[8..12].try_into().unwrap()) as usize;
    if len > max_payload {
        return Decoded::TooLong(len);
    }
    let end = FRAME_HEADER_LEN + len;
    if buf.len() < end {
        return Decoded::Incomplete;
    }
    Decoded::Frame(
        TaggedMessage::new(Tag::from_raw(tag), buf[FRAME_HEADER_LEN..end].to_vec()),
        end,
    )
}

/// SYN payload: the connector's initial credit followed by its address.
pub(crate) fn encode_syn(initial_credit: u64, local_addr: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + local_addr.len());
    out.extend_from_slice(&initial_credit.to_be_bytes());
    out.extend_from_slice(local_addr.as_bytes());
    out
}

pub(crate) fn decode_syn(payload: &[u8]) -> Option<(u64, String)> {
    if payload.len() < 8 {
        return None;
    }
    let credit = u64::from_be_bytes(payload[..8].try_into().unwrap());
    let addr = String::from_utf8(payload[8..].to_vec()).ok()?;
    Some((credit, addr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn frame_layout_is_big_endian() {
        let tag = Tag::new(0x0102_0304, Direction::ToClient, MessageKind::Data, 0);
        let msg = TaggedMessage::new(tag, vec![0xaa, 0xbb]);
        let mut out = Vec::new();
        msg.encode_into(&mut out);
        assert_eq!(
            out,
            [0x01, 0x02, 0x03, 0x04, 0x80, 0, 0, 0, 0, 0, 0, 2, 0xaa, 0xbb]
        );
        assert_eq!(msg.encoded_len(), out.len());
    }

    #[test]
    fn kind_bits() {
        let fin = Tag::new(0, Direction::ToServer, MessageKind::Fin, 0);
        assert_eq!(fin.raw(), 0b11 << 29);
        let ack = Tag::new(7, Direction::ToServer, MessageKind::Ack, MAX_GRANT);
        assert_eq!(ack.reserved(), MAX_GRANT);
        assert_eq!(ack.kind(), MessageKind::Ack);
        assert_eq!(ack.connection_id(), 7);
    }

    #[test]
    fn decode_handles_partial_and_oversize() {
        let msg = TaggedMessage::new(Tag::from_raw(42), vec![1; 10]);
        let mut out = Vec::new();
        msg.encode_into(&mut out);
        assert_eq!(decode_frame(&out[..5], 64), Decoded::Incomplete);
        assert_eq!(decode_frame(&out[..15], 64), Decoded::Incomplete);
        assert_eq!(decode_frame(&out, 4), Decoded::TooLong(10));
        assert_eq!(decode_frame(&out, 64), Decoded::Frame(msg, 22));
    }

    #[test]
    fn syn_params() {
        let p = encode_syn(8 << 20, "10.0.0.1:5000");
        assert_eq!(decode_syn(&p), Some((8 << 20, "10.0.0.1:5000".to_string())));
        assert_eq!(decode_syn(&p[..3]), None);
    }

    proptest! {
        #[test]
        fn tag_fields_roundtrip(conn in any::<u32>(), dir in any::<bool>(), kind in 0u8..4, reserved in 0u32..=MAX_GRANT) {
            let dir = if dir { Direction::ToClient } else { Direction::ToServer };
            let kind = MessageKind::from_bits(kind as u64);
            let tag = Tag::new(conn, dir, kind, reserved);
            prop_assert_eq!(tag.connection_id(), conn);
            prop_assert_eq!(tag.direction(), dir);
            prop_assert_eq!(tag.kind(), kind);
            prop_assert_eq!(tag.reserved(), reserved);
        }

        #[test]
        fn frame_stream_roundtrip(payloads in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..64), 0..8)) {
            let mut wire = Vec::new();
            let msgs: Vec<_> = payloads.into_iter().enumerate()
                .map(|(i, p)| TaggedMessage::new(Tag::from_raw(i as u64), p))
                .collect();
            for m in &msgs {
                m.encode_into(&mut wire);
            }
            let mut at = 0;
            let mut out = Vec::new();
            while let Decoded::Frame(m, used) = decode_frame(&wire[at..], 64) {
                out.push(m);
                at += used;
            }
            prop_assert_eq!(at, wire.len());
            prop_assert_eq!(out, msgs);
        }
    }
}

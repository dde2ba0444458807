//! Outgoing byte ring partitioned into contiguous, reservable regions.
//!
//! Every transport send request needs one physically contiguous payload, so a
//! region never straddles the end of the buffer. When the gap at the end is too
//! small for a reservation the gap is turned into padding and the region starts
//! again at offset 0. Regions go through `reserved -> committed -> in-flight ->
//! released` and are released strictly in reservation order.

use std::collections::VecDeque;

use thiserror::Error;

/// Default ring capacity in bytes (8 MiB).
pub const DEFAULT_CAPACITY: usize = 8 * 1024 * 1024;
/// Default upper bound for one region and one transport request (64 KiB).
pub const DEFAULT_SLICE_LENGTH: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RingError {
    #[error("length {len} exceeds slice length {slice_length}")]
    Oversize { len: usize, slice_length: usize },
    #[error("insufficient contiguous space in ring")]
    Insufficient,
    #[error("zero-length reservation")]
    ZeroLength,
    #[error("region is in state {actual:?}, expected {expected:?}")]
    InvalidState {
        expected: RegionState,
        actual: RegionState,
    },
    #[error("commit length {actual} exceeds reserved length {reserved}")]
    CommitTooLong { actual: usize, reserved: usize },
    #[error("region released out of reservation order")]
    FifoViolation,
    #[error("region is no longer outstanding")]
    StaleRegion,
    #[error("invalid ring geometry: capacity {capacity}, slice length {slice_length}")]
    InvalidGeometry { capacity: usize, slice_length: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionState {
    Reserved,
    Committed,
    InFlight,
    Released,
}

/// Handle to a contiguous range of the ring.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    seq: u64,
    offset: usize,
    len: usize,
}

impl Region {
    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug)]
struct Entry {
    seq: u64,
    // skipped end-of-buffer bytes placed in front of this region
    lead_padding: usize,
    offset: usize,
    len: usize,
    // len at reservation time; the difference to `len` is trailing padding
    reserved_len: usize,
    state: RegionState,
}

impl Entry {
    fn footprint(&self) -> usize {
        self.lead_padding + self.reserved_len
    }
}

/// Byte accounting snapshot. The fields always sum to the ring capacity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Accounting {
    pub free: usize,
    pub reserved: usize,
    pub committed: usize,
    pub in_flight: usize,
    pub padding: usize,
}

impl Accounting {
    pub fn total(&self) -> usize {
        self.free + self.reserved + self.committed + self.in_flight + self.padding
    }
}

pub struct RingBuffer {
    data: Box<[u8]>,
    slice_length: usize,
    write_pos: usize,
    used: usize,
    next_seq: u64,
    entries: VecDeque<Entry>,
}

impl std::fmt::Debug for RingBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RingBuffer")
            .field("capacity", &self.capacity())
            .field("slice_length", &self.slice_length)
            .field("write_pos", &self.write_pos)
            .field("used", &self.used)
            .field("outstanding", &self.entries.len())
            .finish()
    }
}

impl Default for RingBuffer {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY, DEFAULT_SLICE_LENGTH).expect("default geometry is valid")
    }
}

impl RingBuffer {
    pub fn new(capacity: usize, slice_length: usize) -> Result<Self, RingError> {
        if capacity == 0 || slice_length == 0 || slice_length > capacity {
            return Err(RingError::InvalidGeometry {
                capacity,
                slice_length,
            });
        }
        Ok(Self {
            data: vec![0u8; capacity].into_boxed_slice(),
            slice_length,
            write_pos: 0,
            used: 0,
            next_seq: 0,
            entries: VecDeque::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.data.len()
    }

    pub fn slice_length(&self) -> usize {
        self.slice_length
    }

    /// Bytes not owned by any outstanding region or padding.
    pub fn free(&self) -> usize {
        self.capacity() - self.used
    }

    pub fn used(&self) -> usize {
        self.used
    }

    /// Physical offset where the next reservation is attempted.
    pub fn write_position(&self) -> usize {
        self.write_pos
    }

    /// Number of regions that have not been released yet.
    pub fn outstanding(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Largest length a single `reserve` call would currently succeed with.
    pub fn max_reservable(&self) -> usize {
        let free = self.free();
        let tail_gap = self.capacity() - self.write_pos;
        let in_place = tail_gap.min(free);
        let wrapped = free.saturating_sub(tail_gap);
        in_place.max(wrapped).min(self.slice_length)
    }

    pub fn reserve(&mut self, len: usize) -> Result<Region, RingError> {
        if len == 0 {
            return Err(RingError::ZeroLength);
        }
        if len > self.slice_length {
            return Err(RingError::Oversize {
                len,
                slice_length: self.slice_length,
            });
        }
        let free = self.free();
        let tail_gap = self.capacity() - self.write_pos;
        let (lead_padding, offset) = if len <= tail_gap {
            if len > free {
                return Err(RingError::Insufficient);
            }
            (0, self.write_pos)
        } else {
            if free < tail_gap + len {
                return Err(RingError::Insufficient);
            }
            (tail_gap, 0)
        };

        let seq = self.next_seq;
        self.next_seq += 1;
        self.used += lead_padding + len;
        self.write_pos = (offset + len) % self.capacity();
        self.entries.push_back(Entry {
            seq,
            lead_padding,
            offset,
            len,
            reserved_len: len,
            state: RegionState::Reserved,
        });
        Ok(Region { seq, offset, len })
    }

    /// Commits the first `actual_len` bytes of a reservation.
    ///
    /// Shrinking the most recent reservation hands the tail back to free space;
    /// committing 0 bytes there cancels it outright (including any wrap padding)
    /// and the region reads as released afterwards. Shrinking an older
    /// reservation keeps the tail as padding.
    pub fn commit(&mut self, region: &mut Region, actual_len: usize) -> Result<(), RingError> {
        let idx = self.index_of(region.seq)?;
        let is_latest = idx + 1 == self.entries.len();
        let capacity = self.capacity();
        let entry = &mut self.entries[idx];
        if entry.state != RegionState::Reserved {
            return Err(RingError::InvalidState {
                expected: RegionState::Reserved,
                actual: entry.state,
            });
        }
        if actual_len > entry.len {
            return Err(RingError::CommitTooLong {
                actual: actual_len,
                reserved: entry.len,
            });
        }

        if is_latest && actual_len == 0 {
            let footprint = entry.footprint();
            let start = (entry.offset + capacity - entry.lead_padding) % capacity;
            self.entries.pop_back();
            self.used -= footprint;
            self.write_pos = start;
            region.len = 0;
            return Ok(());
        }

        if is_latest && actual_len < entry.len {
            let returned = entry.len - actual_len;
            entry.reserved_len = actual_len;
            self.used -= returned;
            self.write_pos = entry.offset + actual_len;
        }
        entry.len = actual_len;
        entry.state = RegionState::Committed;
        region.len = actual_len;
        Ok(())
    }

    /// Marks a committed region as handed to the transport.
    pub fn mark_in_flight(&mut self, region: &Region) -> Result<(), RingError> {
        let idx = self.index_of(region.seq)?;
        let entry = &mut self.entries[idx];
        if entry.state != RegionState::Committed {
            return Err(RingError::InvalidState {
                expected: RegionState::Committed,
                actual: entry.state,
            });
        }
        entry.state = RegionState::InFlight;
        Ok(())
    }

    /// Returns the oldest outstanding region, with its padding, to free space.
    pub fn release(&mut self, region: &Region) -> Result<(), RingError> {
        let idx = self.index_of(region.seq)?;
        if idx != 0 {
            return Err(RingError::FifoViolation);
        }
        let entry = &self.entries[0];
        if entry.state != RegionState::InFlight {
            return Err(RingError::InvalidState {
                expected: RegionState::InFlight,
                actual: entry.state,
            });
        }
        self.used -= entry.footprint();
        self.entries.pop_front();
        Ok(())
    }

    pub fn region_state(&self, region: &Region) -> RegionState {
        match self.index_of(region.seq) {
            Ok(idx) => self.entries[idx].state,
            Err(_) => RegionState::Released,
        }
    }

    pub fn region_bytes(&self, region: &Region) -> &[u8] {
        &self.data[region.offset..region.offset + region.len]
    }

    pub fn region_bytes_mut(&mut self, region: &Region) -> &mut [u8] {
        &mut self.data[region.offset..region.offset + region.len]
    }

    /// Copies the longest prefix of whole spans that fits into one region.
    ///
    /// Returns the committed region and how many spans it holds.
    pub fn merge_gather(&mut self, srcs: &[&[u8]]) -> Result<(Region, usize), RingError> {
        self.merge_gather_within(srcs, usize::MAX)
    }

    /// Like [`merge_gather`](Self::merge_gather) with an extra byte budget,
    /// e.g. the peer's remaining credit.
    pub fn merge_gather_within(
        &mut self,
        srcs: &[&[u8]],
        budget: usize,
    ) -> Result<(Region, usize), RingError> {
        let first = srcs.first().ok_or(RingError::ZeroLength)?;
        if first.is_empty() {
            return Err(RingError::Insufficient);
        }
        if first.len() > self.slice_length {
            return Err(RingError::Oversize {
                len: first.len(),
                slice_length: self.slice_length,
            });
        }

        let limit = self.max_reservable().min(budget);
        let mut total = 0usize;
        let mut consumed = 0usize;
        for span in srcs {
            if total + span.len() > limit {
                break;
            }
            total += span.len();
            consumed += 1;
        }
        if consumed == 0 {
            return Err(RingError::Insufficient);
        }

        let mut region = self.reserve(total)?;
        let mut at = region.offset;
        for span in &srcs[..consumed] {
            self.data[at..at + span.len()].copy_from_slice(span);
            at += span.len();
        }
        self.commit(&mut region, total)?;
        Ok((region, consumed))
    }

    pub fn accounting(&self) -> Accounting {
        let mut acc = Accounting {
            free: self.free(),
            ..Accounting::default()
        };
        for entry in &self.entries {
            acc.padding += entry.footprint() - entry.len;
            match entry.state {
                RegionState::Reserved => acc.reserved += entry.len,
                RegionState::Committed => acc.committed += entry.len,
                RegionState::InFlight => acc.in_flight += entry.len,
                RegionState::Released => unreachable!("released entries are dropped"),
            }
        }
        acc
    }

    fn index_of(&self, seq: u64) -> Result<usize, RingError> {
        self.entries
            .binary_search_by_key(&seq, |e| e.seq)
            .map_err(|_| RingError::StaleRegion)
    }
}

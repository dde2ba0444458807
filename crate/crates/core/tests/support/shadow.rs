//! Byte-per-cell model of the send ring and a randomized differential driver.

use std::collections::VecDeque;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use tagnio::ringbuf::{Accounting, Region, RegionState, RingBuffer, RingError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cell {
    Free,
    Pad(u64),
    Data(u64),
}

#[derive(Debug, Clone)]
struct ModelRegion {
    id: u64,
    offset: usize,
    len: usize,
    pad_start: Option<usize>,
    state: RegionState,
}

/// Error classes compared between model and implementation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    Oversize,
    Insufficient,
    ZeroLength,
    InvalidState,
    CommitTooLong,
    Fifo,
    Stale,
}

pub fn classify(e: &RingError) -> Fault {
    match e {
        RingError::Oversize { .. } => Fault::Oversize,
        RingError::Insufficient => Fault::Insufficient,
        RingError::ZeroLength => Fault::ZeroLength,
        RingError::InvalidState { .. } => Fault::InvalidState,
        RingError::CommitTooLong { .. } => Fault::CommitTooLong,
        RingError::FifoViolation => Fault::Fifo,
        RingError::StaleRegion => Fault::Stale,
        RingError::InvalidGeometry { .. } => panic!("geometry error during operation"),
    }
}

pub struct ShadowRing {
    cells: Vec<Cell>,
    slice: usize,
    cursor: usize,
    next_id: u64,
    regions: VecDeque<ModelRegion>,
}

impl ShadowRing {
    pub fn new(capacity: usize, slice: usize) -> Self {
        Self {
            cells: vec![Cell::Free; capacity],
            slice,
            cursor: 0,
            next_id: 0,
            regions: VecDeque::new(),
        }
    }

    fn cap(&self) -> usize {
        self.cells.len()
    }

    fn all_free(&self, from: usize, to: usize) -> bool {
        self.cells[from..to].iter().all(|c| *c == Cell::Free)
    }

    /// Where a region of `len` would go: (offset, padding start).
    fn placement(&self, len: usize) -> Option<(usize, Option<usize>)> {
        let cap = self.cap();
        let w = self.cursor;
        if w + len <= cap {
            self.all_free(w, w + len).then_some((w, None))
        } else if self.all_free(w, cap) && len <= w && self.all_free(0, len) {
            Some((0, Some(w)))
        } else {
            None
        }
    }

    fn free_run(&self, from: usize, to: usize) -> usize {
        self.cells[from..to].iter().take_while(|c| **c == Cell::Free).count()
    }

    /// Largest length `placement` accepts, found from the free runs at the
    /// cursor and at offset 0.
    pub fn max_reservable(&self) -> usize {
        let (cap, w) = (self.cap(), self.cursor);
        let tail = self.free_run(w, cap);
        let mut best = tail;
        if tail == cap - w {
            best = best.max(self.free_run(0, w));
        }
        let best = best.min(self.slice);
        debug_assert!(best == 0 || self.placement(best).is_some());
        debug_assert!(best == self.slice || self.placement(best + 1).is_none());
        best
    }

    pub fn reserve(&mut self, len: usize) -> Result<(u64, usize, usize), Fault> {
        if len == 0 {
            return Err(Fault::ZeroLength);
        }
        if len > self.slice {
            return Err(Fault::Oversize);
        }
        let (offset, pad_start) = self.placement(len).ok_or(Fault::Insufficient)?;
        let id = self.next_id;
        self.next_id += 1;
        if let Some(p) = pad_start {
            let cap = self.cap();
            self.cells[p..cap].fill(Cell::Pad(id));
        }
        self.cells[offset..offset + len].fill(Cell::Data(id));
        self.cursor = (offset + len) % self.cap();
        self.regions.push_back(ModelRegion {
            id,
            offset,
            len,
            pad_start,
            state: RegionState::Reserved,
        });
        Ok((id, offset, len))
    }

    fn position(&self, id: u64) -> Result<usize, Fault> {
        self.regions.iter().position(|r| r.id == id).ok_or(Fault::Stale)
    }

    fn clear(&mut self, id: u64) {
        for c in &mut self.cells {
            if *c == Cell::Data(id) || *c == Cell::Pad(id) {
                *c = Cell::Free;
            }
        }
    }

    pub fn commit(&mut self, id: u64, actual: usize) -> Result<(), Fault> {
        let idx = self.position(id)?;
        let latest = idx + 1 == self.regions.len();
        let r = self.regions[idx].clone();
        if r.state != RegionState::Reserved {
            return Err(Fault::InvalidState);
        }
        if actual > r.len {
            return Err(Fault::CommitTooLong);
        }
        if latest && actual == 0 {
            self.clear(id);
            self.cursor = r.pad_start.unwrap_or(r.offset);
            self.regions.pop_back();
            return Ok(());
        }
        let tail = if latest { Cell::Free } else { Cell::Pad(id) };
        self.cells[r.offset + actual..r.offset + r.len].fill(tail);
        if latest && actual < r.len {
            self.cursor = r.offset + actual;
        }
        let m = &mut self.regions[idx];
        m.len = actual;
        m.state = RegionState::Committed;
        Ok(())
    }

    pub fn mark_in_flight(&mut self, id: u64) -> Result<(), Fault> {
        let idx = self.position(id)?;
        let m = &mut self.regions[idx];
        if m.state != RegionState::Committed {
            return Err(Fault::InvalidState);
        }
        m.state = RegionState::InFlight;
        Ok(())
    }

    pub fn release(&mut self, id: u64) -> Result<(), Fault> {
        let idx = self.position(id)?;
        if idx != 0 {
            return Err(Fault::Fifo);
        }
        if self.regions[0].state != RegionState::InFlight {
            return Err(Fault::InvalidState);
        }
        self.clear(id);
        self.regions.pop_front();
        Ok(())
    }

    pub fn merge(&mut self, spans: &[Vec<u8>], budget: usize) -> Result<(u64, usize, usize, usize), Fault> {
        let first = spans.first().ok_or(Fault::ZeroLength)?;
        if first.is_empty() {
            return Err(Fault::Insufficient);
        }
        if first.len() > self.slice {
            return Err(Fault::Oversize);
        }
        let limit = self.max_reservable().min(budget);
        let mut total = 0;
        let mut k = 0;
        while k < spans.len() && total + spans[k].len() <= limit {
            total += spans[k].len();
            k += 1;
        }
        if k == 0 {
            return Err(Fault::Insufficient);
        }
        let (id, offset, len) = self.reserve(total)?;
        self.commit(id, total)?;
        Ok((id, offset, len, k))
    }

    pub fn accounting(&self) -> Accounting {
        let mut acc = Accounting::default();
        for c in &self.cells {
            match *c {
                Cell::Free => acc.free += 1,
                Cell::Pad(_) => acc.padding += 1,
                Cell::Data(id) => {
                    let r = self.regions.iter().find(|r| r.id == id).expect("owner");
                    match r.state {
                        RegionState::Reserved => acc.reserved += 1,
                        RegionState::Committed => acc.committed += 1,
                        RegionState::InFlight => acc.in_flight += 1,
                        RegionState::Released => unreachable!(),
                    }
                }
            }
        }
        acc
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }
}

struct Live {
    id: u64,
    region: Region,
    bytes: Vec<u8>,
}

fn compare<T: PartialEq + std::fmt::Debug>(step: usize, what: &str, model: T, real: T) -> Result<(), String> {
    if model == real {
        Ok(())
    } else {
        Err(format!("step {step}: {what}: model {model:?}, ring {real:?}"))
    }
}

/// Runs `steps` random operations against both the ring and the model.
pub fn differential(seed: u64, steps: usize, capacity: usize, slice: usize) -> Result<(), String> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut ring = RingBuffer::new(capacity, slice).map_err(|e| e.to_string())?;
    let mut model = ShadowRing::new(capacity, slice);
    let mut live: Vec<Live> = Vec::new();
    let mut stale: Vec<Region> = Vec::new();

    for step in 0..steps {
        match rng.gen_range(0..100) {
            0..=29 => {
                let len = match rng.gen_range(0..20) {
                    0 => 0,
                    1 => slice + rng.gen_range(1..8),
                    _ => rng.gen_range(1..=slice),
                };
                let real = ring.reserve(len).map_err(|e| classify(&e));
                let expect = model.reserve(len);
                match (expect, real) {
                    (Ok((id, off, l)), Ok(region)) => {
                        compare(step, "reserve offset", (off, l), (region.offset(), region.len()))?;
                        let bytes: Vec<u8> = (0..l).map(|_| rng.gen()).collect();
                        ring.region_bytes_mut(&region).copy_from_slice(&bytes);
                        live.push(Live { id, region, bytes });
                    }
                    (m, r) => compare(step, "reserve", m.err(), r.err())?,
                }
            }
            30..=49 if !live.is_empty() => {
                let i = rng.gen_range(0..live.len());
                let len = live[i].region.len();
                let actual = match rng.gen_range(0..10) {
                    0 => 0,
                    1 => len + 1,
                    2..=5 => len,
                    _ => rng.gen_range(0..=len),
                };
                let real = ring.commit(&mut live[i].region, actual).map_err(|e| classify(&e));
                let expect = model.commit(live[i].id, actual);
                compare(step, "commit", expect, real)?;
                if expect.is_ok() {
                    live[i].bytes.truncate(actual);
                    if model.position(live[i].id).is_err() {
                        stale.push(live.remove(i).region);
                    }
                }
            }
            50..=64 if !live.is_empty() => {
                let i = rng.gen_range(0..live.len());
                let real = ring.mark_in_flight(&live[i].region).map_err(|e| classify(&e));
                compare(step, "mark_in_flight", model.mark_in_flight(live[i].id), real)?;
            }
            65..=84 if !live.is_empty() => {
                let i = if rng.gen_bool(0.8) { 0 } else { rng.gen_range(0..live.len()) };
                let real = ring.release(&live[i].region).map_err(|e| classify(&e));
                let expect = model.release(live[i].id);
                compare(step, "release", expect, real)?;
                if expect.is_ok() {
                    let gone = live.remove(i);
                    compare(step, "released bytes", &gone.bytes[..], ring.region_bytes(&gone.region))?;
                    stale.push(gone.region);
                }
            }
            85..=89 if !stale.is_empty() => {
                let i = rng.gen_range(0..stale.len());
                let r = stale[i].clone();
                compare(step, "stale release", Err(Fault::Stale), ring.release(&r).map_err(|e| classify(&e)))?;
                compare(
                    step,
                    "stale state",
                    RegionState::Released,
                    ring.region_state(&r),
                )?;
            }
            _ => {
                let n = rng.gen_range(0..12);
                let spans: Vec<Vec<u8>> = (0..n)
                    .map(|_| {
                        let len = match rng.gen_range(0..12) {
                            0 => 0,
                            1 => rng.gen_range(1..=slice + 4),
                            _ => rng.gen_range(1..=slice / 4 + 1),
                        };
                        (0..len).map(|_| rng.gen()).collect()
                    })
                    .collect();
                let budget = if rng.gen_bool(0.3) { rng.gen_range(0..=slice) } else { usize::MAX };
                let refs: Vec<&[u8]> = spans.iter().map(Vec::as_slice).collect();
                let real = ring.merge_gather_within(&refs, budget).map_err(|e| classify(&e));
                match (model.merge(&spans, budget), real) {
                    (Ok((id, off, len, k)), Ok((region, consumed))) => {
                        compare(step, "merge", (off, len, k), (region.offset(), region.len(), consumed))?;
                        let bytes = spans[..k].concat();
                        compare(step, "merged bytes", &bytes[..], ring.region_bytes(&region))?;
                        compare(step, "merged state", RegionState::Committed, ring.region_state(&region))?;
                        live.push(Live { id, region, bytes });
                    }
                    (m, r) => compare(step, "merge", m.err(), r.map(|_| ()).err())?,
                }
            }
        }
        let acc = ring.accounting();
        compare(step, "accounting", model.accounting(), acc)?;
        compare(step, "conservation", capacity, acc.total())?;
        compare(step, "free", model.accounting().free, ring.free())?;
        compare(step, "cursor", model.cursor(), ring.write_position())?;
        compare(step, "max_reservable", model.max_reservable(), ring.max_reservable())?;
        live.sort_by_key(|l| l.id);
    }
    Ok(())
}

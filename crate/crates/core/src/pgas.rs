//! Emulated partitioned global address space.
//!
//! Each device owns a symmetric heap shaped by [`LayoutSpec`] plus two flag
//! arrays. Payload words are written with relaxed stores; the flag store that
//! follows is a release, and [`Fabric::poll_flag`] loads it with acquire, so a
//! visible signal implies a visible payload.

use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::error::ProtocolViolation;
use crate::layout::{validate_write, Coord, LayoutSpec, Round, WriteDescriptor, WriteValidity, BYTES_PER_ELEMENT};
use crate::types::MoeConfig;

/// Count carried by a flag: valid token rows in the packet or tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Signal {
    pub value: usize,
    pub round: Round,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum FlagId {
    /// One per (sending device, local expert).
    Dispatch { peer: usize, expert: usize },
    /// One per returned output tile: (expert device, local expert, row block, column block).
    Combine {
        peer: usize,
        expert: usize,
        row_block: usize,
        col_block: usize,
    },
}

impl FlagId {
    pub fn round(&self) -> Round {
        match self {
            FlagId::Dispatch { .. } => Round::Dispatch,
            FlagId::Combine { .. } => Round::Combine,
        }
    }
}

/// Row slice `[slot, slot + rows)` × column slice `[col0, col0 + cols)` of one cell.
#[derive(Debug, Clone, Copy)]
pub struct Payload<'a> {
    pub rows: usize,
    pub cols: usize,
    pub col0: usize,
    pub data: &'a [f32],
}

impl<'a> Payload<'a> {
    pub fn rows(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Payload { rows, cols, col0: 0, data }
    }

    pub fn empty() -> Self {
        Payload {
            rows: 0,
            cols: 0,
            col0: 0,
            data: &[],
        }
    }

    pub fn bytes(&self) -> u64 {
        (self.rows * self.cols * BYTES_PER_ELEMENT) as u64
    }
}

#[derive(Default)]
struct FlagSlot {
    /// 0 = unset, otherwise `value + 1`.
    state: AtomicU64,
    /// Nanoseconds after the fabric epoch before the signal may be observed; 0 = immediately.
    deliver_at: AtomicU64,
}

struct DeviceMemory {
    heap: Box<[AtomicU32]>,
    dispatch_flags: Box<[FlagSlot]>,
    combine_flags: Box<[FlagSlot]>,
}

fn zeroed<T: Default>(n: usize) -> Box<[T]> {
    (0..n).map(|_| T::default()).collect()
}

/// Geometry of returned output tiles inside one expert cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TileGrid {
    pub tile_m: usize,
    pub tile_n: usize,
    pub row_blocks: usize,
    pub col_blocks: usize,
}

pub struct Fabric {
    spec: LayoutSpec,
    grid: TileGrid,
    devices: Vec<DeviceMemory>,
    /// Per round, `devices × devices` matrix indexed `[src * P + dst]`.
    bytes: [Box<[AtomicU64]>; 2],
    dispatch_delay_ns: Box<[AtomicU64]>,
    epoch: OnceLock<Instant>,
}

impl Fabric {
    pub fn new(cfg: &MoeConfig) -> Self {
        let spec = LayoutSpec::from_config(cfg);
        let grid = TileGrid {
            tile_m: cfg.tile_m,
            tile_n: cfg.tile_n,
            row_blocks: spec.padded_capacity.div_ceil(cfg.tile_m),
            col_blocks: cfg.hidden.div_ceil(cfg.tile_n),
        };
        let p = spec.devices;
        let dispatch_count = p * spec.local_experts;
        let combine_count = dispatch_count * grid.row_blocks * grid.col_blocks;
        let devices = (0..p)
            .map(|_| DeviceMemory {
                heap: zeroed(spec.element_count()),
                dispatch_flags: zeroed(dispatch_count),
                combine_flags: zeroed(combine_count),
            })
            .collect();
        Fabric {
            spec,
            grid,
            devices,
            bytes: [zeroed(p * p), zeroed(p * p)],
            dispatch_delay_ns: zeroed(p),
            epoch: OnceLock::new(),
        }
    }

    pub fn spec(&self) -> &LayoutSpec {
        &self.spec
    }

    pub fn grid(&self) -> &TileGrid {
        &self.grid
    }

    pub fn dispatch_flag_count(&self) -> usize {
        self.devices[0].dispatch_flags.len()
    }

    pub fn combine_flag_count(&self) -> usize {
        self.devices[0].combine_flags.len()
    }

    /// Bytes of symmetric heap plus flag words on one device.
    pub fn device_bytes(&self) -> usize {
        self.spec.size_bytes() + (self.dispatch_flag_count() + self.combine_flag_count()) * 16
    }

    /// Holds back visibility of every dispatch signal sent by `device` by `delay`.
    pub fn set_dispatch_delay(&self, device: usize, delay: Duration) {
        if !delay.is_zero() {
            self.epoch.get_or_init(Instant::now);
        }
        self.dispatch_delay_ns[device].store(delay.as_nanos() as u64, Ordering::Relaxed);
    }

    fn now_ns(&self) -> u64 {
        self.epoch.get().map_or(0, |e| e.elapsed().as_nanos() as u64)
    }

    pub fn flag_index(&self, flag: FlagId) -> usize {
        match flag {
            FlagId::Dispatch { peer, expert } => peer * self.spec.local_experts + expert,
            FlagId::Combine {
                peer,
                expert,
                row_block,
                col_block,
            } => {
                ((peer * self.spec.local_experts + expert) * self.grid.row_blocks + row_block) * self.grid.col_blocks
                    + col_block
            }
        }
    }

    /// Inverse of [`Fabric::flag_index`] for combine flags.
    pub fn combine_flag_at(&self, index: usize) -> FlagId {
        let col_block = index % self.grid.col_blocks;
        let rest = index / self.grid.col_blocks;
        let row_block = rest % self.grid.row_blocks;
        let rest = rest / self.grid.row_blocks;
        FlagId::Combine {
            peer: rest / self.spec.local_experts,
            expert: rest % self.spec.local_experts,
            row_block,
            col_block,
        }
    }

    fn flag_slot(&self, device: usize, flag: FlagId) -> Result<&FlagSlot, ProtocolViolation> {
        let mem = &self.devices[device];
        let slots = match flag {
            FlagId::Dispatch { .. } => &mem.dispatch_flags,
            FlagId::Combine { .. } => &mem.combine_flags,
        };
        let idx = self.flag_index(flag);
        slots.get(idx).ok_or(ProtocolViolation::FlagOutOfRange {
            flag: idx,
            count: slots.len(),
        })
    }

    /// Bounds- and rule-checks a write, returning the heap offset of its first row.
    fn check_write(&self, w: &WriteDescriptor, payload: &Payload<'_>) -> Result<usize, ProtocolViolation> {
        if let WriteValidity::Invalid(rule) = validate_write(w) {
            return Err(ProtocolViolation::InvalidWrite(rule));
        }
        if payload.rows == 0 && payload.data.is_empty() {
            // Nothing is stored; only the cell itself must exist (C' may be 0).
            let cell = Coord { slot: 0, ..w.coord };
            let probe = LayoutSpec {
                padded_capacity: self.spec.padded_capacity.max(1),
                ..self.spec
            };
            probe.flat_index(&cell)?;
            return Ok(0);
        }
        let base = self.spec.flat_index(&w.coord)?;
        if payload.data.len() != payload.rows * payload.cols {
            return Err(ProtocolViolation::PayloadShape {
                len: payload.data.len(),
                rows: payload.rows,
                cols: payload.cols,
            });
        }
        if w.coord.slot + payload.rows > self.spec.padded_capacity || payload.col0 + payload.cols > self.spec.hidden {
            return Err(ProtocolViolation::Overrun {
                rows: payload.rows,
                cols: payload.cols,
                slot: w.coord.slot,
                col0: payload.col0,
                slots: self.spec.padded_capacity,
                hidden: self.spec.hidden,
            });
        }
        Ok(base)
    }

    fn store(&self, target: usize, base: usize, payload: &Payload<'_>) {
        let heap = &self.devices[target].heap;
        let h = self.spec.hidden;
        for (r, row) in payload.data.chunks(payload.cols.max(1)).take(payload.rows).enumerate() {
            let start = base + r * h + payload.col0;
            for (cell, v) in heap[start..start + payload.cols].iter().zip(row) {
                cell.store(v.to_bits(), Ordering::Relaxed);
            }
        }
    }

    /// Unsignalled write; used for intra-device staging (`b = 0`).
    pub fn write_rows(&self, w: &WriteDescriptor, payload: &Payload<'_>) -> Result<(), ProtocolViolation> {
        let base = self.check_write(w, payload)?;
        self.store(w.target, base, payload);
        Ok(())
    }

    /// One-sided put whose flag on `w.target` becomes visible only after the payload.
    pub fn put_with_signal(
        &self,
        w: &WriteDescriptor,
        payload: &Payload<'_>,
        flag: FlagId,
        signal: Signal,
    ) -> Result<(), ProtocolViolation> {
        let base = self.check_write(w, payload)?;
        let slot = self.flag_slot(w.target, flag)?;
        let double = || ProtocolViolation::DoubleSignal {
            device: w.target,
            flag: self.flag_index(flag),
        };
        if slot.state.load(Ordering::Relaxed) != 0 {
            return Err(double());
        }
        self.store(w.target, base, payload);
        let round = signal.round as usize;
        self.bytes[round][w.source * self.spec.devices + w.target].fetch_add(payload.bytes(), Ordering::Relaxed);
        let delay = match signal.round {
            Round::Dispatch => self.dispatch_delay_ns[w.source].load(Ordering::Relaxed),
            Round::Combine => 0,
        };
        let deliver_at = if delay == 0 { 0 } else { self.now_ns() + delay };
        slot.deliver_at.store(deliver_at, Ordering::Relaxed);
        slot.state
            .compare_exchange(0, signal.value as u64 + 1, Ordering::Release, Ordering::Relaxed)
            .map(|_| ())
            .map_err(|_| double())
    }

    /// Non-blocking acquire read of a flag.
    pub fn poll_flag(&self, device: usize, flag: FlagId) -> Option<Signal> {
        let slot = self.flag_slot(device, flag).ok()?;
        let state = slot.state.load(Ordering::Acquire);
        if state == 0 {
            return None;
        }
        let deliver_at = slot.deliver_at.load(Ordering::Relaxed);
        if deliver_at != 0 && self.now_ns() < deliver_at {
            return None;
        }
        Some(Signal {
            value: (state - 1) as usize,
            round: flag.round(),
        })
    }

    /// Copies `rows × cols` values starting at `coord`, column `col0`, into `out`.
    pub fn read_rows(&self, device: usize, coord: &Coord, rows: usize, col0: usize, cols: usize, out: &mut Vec<f32>) {
        let base = self
            .spec
            .flat_index(coord)
            .expect("read coordinate within layout bounds");
        assert!(coord.slot + rows <= self.spec.padded_capacity && col0 + cols <= self.spec.hidden);
        let heap = &self.devices[device].heap;
        let h = self.spec.hidden;
        out.clear();
        out.reserve(rows * cols);
        for r in 0..rows {
            let start = base + r * h + col0;
            out.extend(heap[start..start + cols].iter().map(|c| f32::from_bits(c.load(Ordering::Relaxed))));
        }
    }

    pub fn payload_bytes(&self) -> PayloadBytes {
        let read = |v: &[AtomicU64]| v.iter().map(|b| b.load(Ordering::Relaxed)).collect();
        PayloadBytes {
            devices: self.spec.devices,
            dispatch: read(&self.bytes[0]),
            combine: read(&self.bytes[1]),
        }
    }
}

/// Transferred bytes per `(src, dst)` for both rounds, `[src * P + dst]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PayloadBytes {
    pub devices: usize,
    pub dispatch: Vec<u64>,
    pub combine: Vec<u64>,
}

impl PayloadBytes {
    pub fn zeros(devices: usize) -> Self {
        PayloadBytes {
            devices,
            dispatch: vec![0; devices * devices],
            combine: vec![0; devices * devices],
        }
    }

    /// What a padded all-to-all would move: every (expert, destination)
    /// packet is charged `C'·H` rows in both rounds, whatever its occupancy.
    pub fn padded_baseline(cfg: &MoeConfig) -> Self {
        let p = cfg.devices;
        let packet = (cfg.local_experts() * cfg.padded_capacity() * cfg.hidden * BYTES_PER_ELEMENT) as u64;
        PayloadBytes {
            devices: p,
            dispatch: vec![packet; p * p],
            combine: vec![packet; p * p],
        }
    }

    pub fn get(&self, round: Round, src: usize, dst: usize) -> u64 {
        let m = match round {
            Round::Dispatch => &self.dispatch,
            Round::Combine => &self.combine,
        };
        m[src * self.devices + dst]
    }

    pub fn total(&self) -> u64 {
        self.dispatch.iter().chain(&self.combine).sum()
    }

    /// Total excluding self-loop traffic.
    pub fn remote(&self) -> u64 {
        let p = self.devices;
        (0..p * p)
            .filter(|i| i / p != i % p)
            .map(|i| self.dispatch[i] + self.combine[i])
            .sum()
    }

    pub fn accumulate(&mut self, other: &PayloadBytes) {
        for (a, b) in self.dispatch.iter_mut().zip(&other.dispatch) {
            *a += b;
        }
        for (a, b) in self.combine.iter_mut().zip(&other.combine) {
            *a += b;
        }
    }

    /// `round,src,dst,bytes` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,src,dst,bytes\n");
        for (name, m) in [("dispatch", &self.dispatch), ("combine", &self.combine)] {
            for (i, b) in m.iter().enumerate() {
                out.push_str(&format!("{name},{},{},{b}\n", i / self.devices, i % self.devices));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{Buffer, WriteRule};

    fn cfg() -> MoeConfig {
        MoeConfig::new(8, 8, 8, 6, 3, 1).with_tiles(4, 4)
    }

    fn incoming(src: usize, dst: usize, expert: usize, slot: usize) -> WriteDescriptor {
        WriteDescriptor {
            source: src,
            target: dst,
            coord: Coord::new(src, Round::Dispatch, Buffer::Incoming, expert, slot),
        }
    }

    #[test]
    fn put_counts_bytes_and_sets_flag() {
        let f = Fabric::new(&cfg());
        let flag = FlagId::Dispatch { peer: 0, expert: 1 };
        assert_eq!(f.poll_flag(1, flag), None);
        let data: Vec<f32> = (0..32).map(|v| v as f32).collect();
        f.put_with_signal(&incoming(0, 1, 1, 0), &Payload::rows(&data, 4, 8), flag, Signal { value: 4, round: Round::Dispatch })
            .unwrap();
        assert_eq!(f.payload_bytes().get(Round::Dispatch, 0, 1), 128);
        assert_eq!(f.poll_flag(1, flag), Some(Signal { value: 4, round: Round::Dispatch }));
        let mut out = Vec::new();
        f.read_rows(1, &incoming(0, 1, 1, 0).coord, 4, 0, 8, &mut out);
        assert_eq!(out, data);
    }

    #[test]
    fn zero_count_signal_moves_no_bytes() {
        let f = Fabric::new(&cfg());
        let flag = FlagId::Dispatch { peer: 2, expert: 0 };
        f.put_with_signal(&incoming(2, 0, 0, 0), &Payload::empty(), flag, Signal { value: 0, round: Round::Dispatch })
            .unwrap();
        assert_eq!(f.payload_bytes().total(), 0);
        assert_eq!(f.poll_flag(0, flag).map(|s| s.value), Some(0));
    }

    #[test]
    fn invalid_write_and_double_signal_are_protocol_violations() {
        let f = Fabric::new(&cfg());
        let mut w = incoming(0, 1, 0, 0);
        w.coord.peer = 1;
        let flag = FlagId::Dispatch { peer: 0, expert: 0 };
        let sig = Signal { value: 0, round: Round::Dispatch };
        assert_eq!(
            f.put_with_signal(&w, &Payload::empty(), flag, sig),
            Err(ProtocolViolation::InvalidWrite(WriteRule::IncomingPeerMismatch))
        );
        f.put_with_signal(&incoming(0, 1, 0, 0), &Payload::empty(), flag, sig).unwrap();
        assert!(matches!(
            f.put_with_signal(&incoming(0, 1, 0, 0), &Payload::empty(), flag, sig),
            Err(ProtocolViolation::DoubleSignal { device: 1, .. })
        ));
    }

    #[test]
    fn overrun_is_rejected_before_any_store() {
        let f = Fabric::new(&cfg());
        // C = ceil(8/6) = 2, C' = 4.
        let data = vec![1.0; 2 * 8];
        let err = f
            .put_with_signal(
                &incoming(0, 1, 0, 3),
                &Payload::rows(&data, 2, 8),
                FlagId::Dispatch { peer: 0, expert: 0 },
                Signal { value: 2, round: Round::Dispatch },
            )
            .unwrap_err();
        assert!(matches!(err, ProtocolViolation::Overrun { .. }));
        assert_eq!(f.payload_bytes().total(), 0);
        assert_eq!(f.poll_flag(1, FlagId::Dispatch { peer: 0, expert: 0 }), None);
    }

    #[test]
    fn concurrent_puts_into_one_device_land_disjointly() {
        let f = Fabric::new(&cfg());
        std::thread::scope(|s| {
            for src in 0..2 {
                let f = &f;
                s.spawn(move || {
                    let data = vec![src as f32 + 1.0; 2 * 8];
                    f.put_with_signal(
                        &incoming(src, 2, 0, 0),
                        &Payload::rows(&data, 2, 8),
                        FlagId::Dispatch { peer: src, expert: 0 },
                        Signal { value: 2, round: Round::Dispatch },
                    )
                    .unwrap();
                });
            }
        });
        let mut out = Vec::new();
        for src in 0..2 {
            f.read_rows(2, &incoming(src, 2, 0, 0).coord, 2, 0, 8, &mut out);
            assert!(out.iter().all(|&v| v == src as f32 + 1.0));
        }
    }

    #[test]
    fn combine_flag_index_round_trips() {
        let f = Fabric::new(&cfg());
        for i in 0..f.combine_flag_count() {
            assert_eq!(f.flag_index(f.combine_flag_at(i)), i);
        }
    }

    #[test]
    fn delayed_dispatch_signal_is_invisible_until_due() {
        let f = Fabric::new(&cfg());
        f.set_dispatch_delay(0, Duration::from_millis(40));
        let flag = FlagId::Dispatch { peer: 0, expert: 0 };
        f.put_with_signal(&incoming(0, 1, 0, 0), &Payload::empty(), flag, Signal { value: 0, round: Round::Dispatch })
            .unwrap();
        assert_eq!(f.poll_flag(1, flag), None);
        std::thread::sleep(Duration::from_millis(60));
        assert!(f.poll_flag(1, flag).is_some());
    }

    #[test]
    fn padded_baseline_charges_every_packet() {
        let c = cfg();
        let padded = PayloadBytes::padded_baseline(&c);
        // 2 local experts × C' = 4 × H = 8 × 4 bytes.
        assert_eq!(padded.get(Round::Dispatch, 0, 1), 256);
        assert_eq!(padded.total(), 2 * 9 * 256);
        assert_eq!(padded.remote(), 2 * 6 * 256);
        assert!(padded.to_csv().starts_with("round,src,dst,bytes\ndispatch,0,0,256\n"));
    }
}

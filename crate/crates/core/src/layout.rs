//! Symmetric tensor layout `L ∈ R^{P × R × B × E × C' × H}`.
//!
//! Every device owns an identically shaped buffer. A cell `(peer, round,
//! buffer, expert)` holds `C'` token rows of `H` values. Writes are legal only
//! when `validate_write` accepts them, and legal writes from distinct sources
//! never alias (see the exhaustive tests below and in the acceptance suite).

use std::fmt;

use serde::Serialize;

use crate::error::LayoutError;
use crate::types::MoeConfig;

pub const ROUNDS: usize = 2;
pub const BUFFERS: usize = 2;
pub const BYTES_PER_ELEMENT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Round {
    Dispatch = 0,
    Combine = 1,
}

impl Round {
    pub const ALL: [Round; ROUNDS] = [Round::Dispatch, Round::Combine];
}

/// `b = 0` stages outgoing data on the sender, `b = 1` receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Buffer {
    Outgoing = 0,
    Incoming = 1,
}

impl Buffer {
    pub const ALL: [Buffer; BUFFERS] = [Buffer::Outgoing, Buffer::Incoming];
}

/// Index coordinates `(p*, r, b, e, c)` of one token row in `L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Coord {
    pub peer: usize,
    pub round: Round,
    pub buffer: Buffer,
    pub expert: usize,
    pub slot: usize,
}

impl Coord {
    pub fn new(peer: usize, round: Round, buffer: Buffer, expert: usize, slot: usize) -> Self {
        Coord {
            peer,
            round,
            buffer,
            expert,
            slot,
        }
    }
}

/// A one-sided write `w(p_s, p_t, i)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct WriteDescriptor {
    pub source: usize,
    pub target: usize,
    pub coord: Coord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum WriteRule {
    /// Writes into the incoming buffer must carry `p* = p_s`.
    IncomingPeerMismatch,
    /// Staging (`b = 0`) writes must stay on the source device.
    RemoteStaging,
}

impl fmt::Display for WriteRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WriteRule::IncomingPeerMismatch => f.write_str("rule 1: incoming writes require p* = p_s and b = 1"),
            WriteRule::RemoteStaging => f.write_str("rule 2: staging writes (b = 0) require p_s = p_t"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum WriteValidity {
    Valid,
    Invalid(WriteRule),
}

impl WriteValidity {
    pub fn is_valid(self) -> bool {
        self == WriteValidity::Valid
    }
}

pub fn validate_write(w: &WriteDescriptor) -> WriteValidity {
    match w.coord.buffer {
        Buffer::Incoming if w.coord.peer == w.source => WriteValidity::Valid,
        Buffer::Incoming => WriteValidity::Invalid(WriteRule::IncomingPeerMismatch),
        Buffer::Outgoing if w.source == w.target => WriteValidity::Valid,
        Buffer::Outgoing => WriteValidity::Invalid(WriteRule::RemoteStaging),
    }
}

/// Shape of one device's `L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayoutSpec {
    pub devices: usize,
    pub local_experts: usize,
    pub padded_capacity: usize,
    pub hidden: usize,
}

impl LayoutSpec {
    pub fn from_config(cfg: &MoeConfig) -> Self {
        LayoutSpec {
            devices: cfg.devices,
            local_experts: cfg.local_experts(),
            padded_capacity: cfg.padded_capacity(),
            hidden: cfg.hidden,
        }
    }

    pub fn rounds(&self) -> usize {
        ROUNDS
    }

    pub fn buffers(&self) -> usize {
        BUFFERS
    }

    pub fn element_count(&self) -> usize {
        self.devices * ROUNDS * BUFFERS * self.local_experts * self.padded_capacity * self.hidden
    }

    pub fn cell_bytes(&self) -> usize {
        self.hidden * BYTES_PER_ELEMENT
    }

    pub fn size_bytes(&self) -> usize {
        self.element_count() * BYTES_PER_ELEMENT
    }

    /// Element offset of the first value of row `coord` (row-major over
    /// `(p*, r, b, e, c)` with `H` innermost).
    pub fn flat_index(&self, coord: &Coord) -> Result<usize, LayoutError> {
        let bounds = [
            ("peer", coord.peer, self.devices),
            ("expert", coord.expert, self.local_experts),
            ("slot", coord.slot, self.padded_capacity),
        ];
        for (axis, value, extent) in bounds {
            if value >= extent {
                return Err(LayoutError::OutOfBounds { axis, value, extent });
            }
        }
        let mut idx = coord.peer;
        idx = idx * ROUNDS + coord.round as usize;
        idx = idx * BUFFERS + coord.buffer as usize;
        idx = idx * self.local_experts + coord.expert;
        idx = idx * self.padded_capacity + coord.slot;
        Ok(idx * self.hidden)
    }

    /// Every row coordinate of the grid, in offset order.
    pub fn coords(&self) -> impl Iterator<Item = Coord> + '_ {
        (0..self.devices).flat_map(move |peer| {
            Round::ALL.into_iter().flat_map(move |round| {
                Buffer::ALL.into_iter().flat_map(move |buffer| {
                    (0..self.local_experts).flat_map(move |expert| {
                        (0..self.padded_capacity).map(move |slot| Coord::new(peer, round, buffer, expert, slot))
                    })
                })
            })
        })
    }
}

/// `Size(L)` in bytes from the closed-form sizing rule:
/// `4·Size(T)` when `S/E ≥ bM`, otherwise `4·(bM·E/S)·Size(T)`,
/// with `Size(T) = S·H·4`.
pub fn size_l(cfg: &MoeConfig) -> u64 {
    let (s, e, h, bm) = (cfg.tokens as u64, cfg.experts as u64, cfg.hidden as u64, cfg.tile_m as u64);
    let elem = BYTES_PER_ELEMENT as u64;
    if s >= bm * e {
        4 * s * h * elem
    } else {
        // (bM·E/S)·S·H·4 without the intermediate fraction.
        4 * bm * e * h * elem
    }
}

pub const MIB: f64 = 1024.0 * 1024.0;

/// One row of the memory-overhead table at `H = 1024`, `bM = 128`, FP32.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MemoryRow {
    pub tokens: usize,
    pub experts: usize,
    pub capacity: usize,
    pub padded_capacity: usize,
    pub size_l_mb: f64,
}

pub const MEMORY_TABLE_TOKENS: [usize; 3] = [4096, 8192, 16384];
pub const MEMORY_TABLE_EXPERTS: [usize; 4] = [16, 32, 64, 128];

pub fn memory_table() -> Vec<MemoryRow> {
    MEMORY_TABLE_TOKENS
        .iter()
        .flat_map(|&tokens| MEMORY_TABLE_EXPERTS.iter().map(move |&experts| (tokens, experts)))
        .map(|(tokens, experts)| {
            let cfg = MoeConfig::new(tokens, 1024, 1024, experts, 1, 2).with_tiles(128, 64);
            MemoryRow {
                tokens,
                experts,
                capacity: cfg.capacity(),
                padded_capacity: cfg.padded_capacity(),
                size_l_mb: size_l(&cfg) as f64 / MIB,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    fn spec(p: usize, e: usize, c: usize, h: usize) -> LayoutSpec {
        LayoutSpec {
            devices: p,
            local_experts: e,
            padded_capacity: c,
            hidden: h,
        }
    }

    #[test]
    fn size_l_examples() {
        let mb = |t, e| size_l(&MoeConfig::new(t, 1024, 1024, e, 1, 2).with_tiles(128, 64)) as f64 / MIB;
        assert_eq!(mb(4096, 16), 64.0);
        assert_eq!(mb(4096, 128), 256.0);
        assert_eq!(mb(16384, 128), 256.0);
    }

    #[test]
    fn size_l_matches_exact_layout_on_table_configs() {
        for (tokens, experts) in [(4096, 16), (4096, 64), (8192, 128), (16384, 32)] {
            for devices in [1, 2, 8] {
                let cfg = MoeConfig::new(tokens, 1024, 1024, experts, devices, 2).with_tiles(128, 64);
                let exact = LayoutSpec::from_config(&cfg).size_bytes() as u64;
                assert_eq!(size_l(&cfg), exact, "{tokens} {experts} {devices}");
            }
        }
    }

    #[test]
    fn flat_index_endpoints() {
        let s = spec(3, 2, 4, 5);
        assert_eq!(s.flat_index(&Coord::new(0, Round::Dispatch, Buffer::Outgoing, 0, 0)).unwrap(), 0);
        let last = Coord::new(2, Round::Combine, Buffer::Incoming, 1, 3);
        assert_eq!(s.flat_index(&last).unwrap(), s.element_count() - s.hidden);
    }

    #[test]
    fn flat_index_is_bijective_on_grid() {
        let s = spec(2, 2, 4, 3);
        let offsets: Vec<usize> = s.coords().map(|c| s.flat_index(&c).unwrap()).collect();
        assert_eq!(offsets.len(), s.element_count() / s.hidden);
        let distinct: HashSet<_> = offsets.iter().copied().collect();
        assert_eq!(distinct.len(), offsets.len());
        assert!(offsets.windows(2).all(|w| w[1] == w[0] + s.hidden));
    }

    #[test]
    fn flat_index_rejects_out_of_bounds() {
        let s = spec(2, 2, 4, 3);
        let err = s.flat_index(&Coord::new(2, Round::Dispatch, Buffer::Incoming, 0, 0)).unwrap_err();
        assert_eq!(err, LayoutError::OutOfBounds { axis: "peer", value: 2, extent: 2 });
        assert!(s.flat_index(&Coord::new(0, Round::Dispatch, Buffer::Incoming, 0, 4)).is_err());
        assert!(s.flat_index(&Coord::new(0, Round::Dispatch, Buffer::Incoming, 2, 0)).is_err());
    }

    #[test]
    fn write_rules() {
        let w = |s, t, peer, b| WriteDescriptor {
            source: s,
            target: t,
            coord: Coord::new(peer, Round::Dispatch, b, 0, 0),
        };
        assert_eq!(validate_write(&w(0, 1, 0, Buffer::Incoming)), WriteValidity::Valid);
        assert_eq!(
            validate_write(&w(0, 1, 1, Buffer::Incoming)),
            WriteValidity::Invalid(WriteRule::IncomingPeerMismatch)
        );
        assert_eq!(validate_write(&w(0, 0, 0, Buffer::Outgoing)), WriteValidity::Valid);
        assert_eq!(validate_write(&w(0, 0, 1, Buffer::Outgoing)), WriteValidity::Valid);
        assert_eq!(validate_write(&w(1, 1, 1, Buffer::Incoming)), WriteValidity::Valid);
        assert_eq!(
            validate_write(&w(0, 1, 1, Buffer::Outgoing)),
            WriteValidity::Invalid(WriteRule::RemoteStaging)
        );
    }

    #[test]
    fn memory_table_has_twelve_rows() {
        let rows = memory_table();
        assert_eq!(rows.len(), 12);
        assert_eq!(rows[3].capacity, 32);
        assert_eq!(rows[3].padded_capacity, 128);
    }
}

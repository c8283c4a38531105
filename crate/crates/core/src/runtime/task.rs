//! Task descriptors and tile-count arithmetic.

use serde::{Deserialize, Serialize};

use crate::error::RuntimeFault;
use crate::gate::RoutingTable;
use crate::types::{Activation, MoeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    Gemm0,
    Gemm1,
    Combine,
}

/// The binary tensor operation `⋆` of a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinaryOp {
    MatMul,
    Hadamard,
}

/// Index of a task in its device's task queue.
pub type TaskId = usize;

/// `t = (M, ⋆, φ)`.
///
/// For GEMM tasks `source` is the device that sent the packet and `expert`
/// the local expert on the executing device. For combine tasks `source` is
/// the device that owns the expert and `expert` its local index there.
/// `row_block` indexes `bM` slot rows of the expert cell; `col_block` indexes
/// `bN` columns of the task's output (D for GEMM0, H otherwise).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub kind: TaskKind,
    pub source: usize,
    pub expert: usize,
    pub row_block: usize,
    pub col_block: usize,
    /// Valid rows in the tile (`≤ bM`).
    pub rows: usize,
    pub op: BinaryOp,
    pub activation: Activation,
}

impl TaskDescriptor {
    pub fn gemm0(source: usize, expert: usize, row_block: usize, col_block: usize, rows: usize, phi: Activation) -> Self {
        TaskDescriptor {
            kind: TaskKind::Gemm0,
            source,
            expert,
            row_block,
            col_block,
            rows,
            op: BinaryOp::MatMul,
            activation: phi,
        }
    }

    pub fn gemm1(source: usize, expert: usize, row_block: usize, col_block: usize, rows: usize) -> Self {
        TaskDescriptor {
            kind: TaskKind::Gemm1,
            op: BinaryOp::MatMul,
            activation: Activation::Identity,
            ..Self::gemm0(source, expert, row_block, col_block, rows, Activation::Identity)
        }
    }

    pub fn combine(source: usize, expert: usize, row_block: usize, col_block: usize, rows: usize) -> Self {
        TaskDescriptor {
            kind: TaskKind::Combine,
            op: BinaryOp::Hadamard,
            activation: Activation::Identity,
            ..Self::gemm0(source, expert, row_block, col_block, rows, Activation::Identity)
        }
    }
}

/// Rows of row block `rb` in a packet of `rows` valid slots.
pub fn block_rows(rows: usize, tile_m: usize, rb: usize) -> usize {
    tile_m.min(rows.saturating_sub(rb * tile_m))
}

/// GEMM0 tiles per row block.
pub fn gemm0_cols(cfg: &MoeConfig) -> usize {
    cfg.ffn.div_ceil(cfg.tile_n)
}

/// GEMM1 (and combine) tiles per row block.
pub fn gemm1_cols(cfg: &MoeConfig) -> usize {
    cfg.hidden.div_ceil(cfg.tile_n)
}

/// GEMM0 + GEMM1 tasks spawned by one packet of `rows` tokens.
pub fn packet_tasks(rows: usize, cfg: &MoeConfig) -> usize {
    rows.div_ceil(cfg.tile_m) * (gemm0_cols(cfg) + gemm1_cols(cfg))
}

/// GEMM tasks if every one of the `P · E_local` incoming packets were full.
pub fn worst_case_gemm_tasks(cfg: &MoeConfig) -> usize {
    cfg.devices * cfg.local_experts() * packet_tasks(cfg.padded_capacity(), cfg)
}

/// Combine tasks a device will receive back, known from its own routing table.
pub fn combine_tasks(routing: &RoutingTable, cfg: &MoeConfig) -> usize {
    (0..routing.experts())
        .map(|e| routing.occupancy(e).div_ceil(cfg.tile_m) * gemm1_cols(cfg))
        .sum()
}

/// Initial task bound of a device: worst-case GEMM work plus its exact combine count.
pub fn initial_task_bound(routing: &RoutingTable, cfg: &MoeConfig) -> usize {
    worst_case_gemm_tasks(cfg) + combine_tasks(routing, cfg)
}

/// Tightens `bound` once a dispatch signal reports `rows` occupied slots.
pub fn self_correct_task_bound(
    bound: usize,
    rows: usize,
    enqueued: usize,
    cfg: &MoeConfig,
    device: usize,
) -> Result<usize, RuntimeFault> {
    let slack = packet_tasks(cfg.padded_capacity(), cfg) - packet_tasks(rows, cfg);
    match bound.checked_sub(slack) {
        Some(b) if b >= enqueued => Ok(b),
        _ => Err(RuntimeFault::BoundUnderflow {
            device,
            bound: bound.saturating_sub(slack),
            enqueued,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gate::route_scores;
    use crate::types::TokenMatrix;

    #[test]
    fn packet_tile_counts() {
        // rows = C' = 16, bM = 8, D = 8, bN = 8 → 2 GEMM0 tiles.
        let cfg = MoeConfig::new(32, 8, 8, 2, 1, 1).with_tiles(8, 8);
        let by_enumeration = (0..2).filter(|rb| block_rows(16, 8, *rb) > 0).count() * gemm0_cols(&cfg);
        assert_eq!(by_enumeration, 2);
        assert_eq!(packet_tasks(16, &cfg), 2 * (1 + 1));
        assert_eq!(packet_tasks(0, &cfg), 0);
        assert_eq!(block_rows(13, 8, 1), 5);
        assert_eq!(block_rows(13, 8, 2), 0);
    }

    #[test]
    fn full_signals_leave_bound_unchanged() {
        let cfg = MoeConfig::new(16, 8, 8, 4, 2, 1).with_tiles(4, 4);
        let c = cfg.padded_capacity();
        let start = 100;
        assert_eq!(self_correct_task_bound(start, c, 0, &cfg, 0).unwrap(), start);
    }

    #[test]
    fn mixed_signals_reach_exact_count() {
        let cfg = MoeConfig::new(16, 8, 8, 4, 2, 2).with_tiles(4, 4);
        let scores = TokenMatrix::from_fn(16, 4, |i, e| if e == i % 3 { 0.6 } else { 0.4 / 3.0 });
        let gate = route_scores(scores, 2, cfg.capacity());
        let mut bound = initial_task_bound(&gate.routing, &cfg);
        let occupancies = [0, 1, 4, 3];
        for &n in &occupancies {
            bound = self_correct_task_bound(bound, n, 0, &cfg, 0).unwrap();
        }
        let exact: usize = occupancies.iter().map(|&n| packet_tasks(n, &cfg)).sum::<usize>()
            + combine_tasks(&gate.routing, &cfg);
        assert_eq!(bound, exact);
    }

    #[test]
    fn underflow_is_fault() {
        let cfg = MoeConfig::new(16, 8, 8, 4, 2, 1).with_tiles(4, 4);
        assert!(matches!(
            self_correct_task_bound(3, 0, 0, &cfg, 1),
            Err(RuntimeFault::BoundUnderflow { device: 1, .. })
        ));
        let full = worst_case_gemm_tasks(&cfg);
        assert!(self_correct_task_bound(full, 0, full, &cfg, 0).is_err());
    }
}

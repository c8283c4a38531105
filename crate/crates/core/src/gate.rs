//! Fused gate: affinity scores, top-k selection, capacity-limited slot
//! assignment and combine weights.
//!
//! Selection policy (shared with the reference implementation only through
//! these constants' documented meaning):
//! * top-k ties go to the lower expert index;
//! * slots fill in ascending token order, so on overflow the higher token
//!   index is dropped;
//! * the combine denominator sums all `k` selected affinities, dropped or not.

use serde::Serialize;

use crate::error::ConfigError;
use crate::types::{GateWeights, MoeConfig, TokenMatrix};

/// One occupied slot of the routing table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Route {
    pub token: usize,
    pub weight: f32,
}

/// `T_phi`: for every global expert, the occupied slots in slot order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingTable {
    capacity: usize,
    slots: Vec<Vec<Route>>,
}

impl RoutingTable {
    pub fn new(experts: usize, capacity: usize) -> Self {
        RoutingTable {
            capacity,
            slots: vec![Vec::new(); experts],
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn experts(&self) -> usize {
        self.slots.len()
    }

    /// Occupied slots of `expert`; index = slot.
    pub fn expert(&self, expert: usize) -> &[Route] {
        &self.slots[expert]
    }

    pub fn occupancy(&self, expert: usize) -> usize {
        self.slots[expert].len()
    }

    pub fn get(&self, expert: usize, slot: usize) -> Option<Route> {
        self.slots[expert].get(slot).copied()
    }

    /// Appends to the next free slot; `false` when the expert is full.
    fn try_push(&mut self, expert: usize, route: Route) -> bool {
        let slots = &mut self.slots[expert];
        if slots.len() < self.capacity {
            slots.push(route);
            true
        } else {
            false
        }
    }

    pub fn routed_pairs(&self) -> usize {
        self.slots.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateOutput {
    /// `G_phi`: softmax affinities, S × E_total.
    #[serde(skip)]
    pub scores: TokenMatrix,
    pub routing: RoutingTable,
    /// Selected experts per token, in selection order.
    pub selected: Vec<Vec<usize>>,
    /// `(token, expert)` pairs that found the expert full.
    pub dropped: Vec<(usize, usize)>,
}

/// Row-wise numerically stable softmax of `x · w`.
pub fn affinity_scores(a: &TokenMatrix, wg: &TokenMatrix) -> TokenMatrix {
    let (s, e) = (a.rows(), wg.cols());
    let mut out = TokenMatrix::zeros(s, e);
    for i in 0..s {
        let x = a.row(i);
        let row = out.row_mut(i);
        for (j, z) in row.iter_mut().enumerate() {
            *z = x.iter().enumerate().map(|(h, &v)| v * wg.get(h, j)).sum();
        }
        softmax_in_place(row);
    }
    out
}

fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for z in row.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    for z in row.iter_mut() {
        *z /= sum;
    }
}

/// Indices of the `k` largest scores; ties resolved toward the lower index.
pub fn top_k(scores: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn gate_forward(a: &TokenMatrix, gate: &GateWeights, cfg: &MoeConfig) -> Result<GateOutput, ConfigError> {
    if a.shape() != (cfg.tokens, cfg.hidden) {
        return Err(ConfigError::Shape {
            what: "token shard",
            expected: (cfg.tokens, cfg.hidden),
            actual: a.shape(),
        });
    }
    gate.validate(cfg)?;
    let scores = affinity_scores(a, &gate.wg);
    Ok(route_scores(scores, cfg.top_k, cfg.capacity()))
}

/// Top-k selection and capacity-limited slot assignment on precomputed scores.
pub fn route_scores(scores: TokenMatrix, k: usize, capacity: usize) -> GateOutput {
    let mut routing = RoutingTable::new(scores.cols(), capacity);
    let mut selected = Vec::with_capacity(scores.rows());
    let mut dropped = Vec::new();
    for i in 0..scores.rows() {
        let row = scores.row(i);
        let chosen = top_k(row, k);
        let norm: f32 = chosen.iter().map(|&e| row[e]).sum();
        for &e in &chosen {
            let route = Route {
                token: i,
                weight: row[e] / norm,
            };
            if !routing.try_push(e, route) {
                dropped.push((i, e));
            }
        }
        selected.push(chosen);
    }
    GateOutput {
        scores,
        routing,
        selected,
        dropped,
    }
}

/// Tokens bound for one expert on its owning device.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExpertPacket {
    pub expert: usize,
    pub local_expert: usize,
    pub tokens: Vec<usize>,
}

impl ExpertPacket {
    pub fn occupied(&self) -> usize {
        self.tokens.len()
    }
}

/// Per destination device, one packet per local expert (possibly empty).
pub type DispatchManifest = Vec<Vec<ExpertPacket>>;

pub fn dispatch_manifest(routing: &RoutingTable, cfg: &MoeConfig) -> DispatchManifest {
    let local = cfg.local_experts();
    (0..cfg.devices)
        .map(|dst| {
            (0..local)
                .map(|e| {
                    let expert = dst * local + e;
                    ExpertPacket {
                        expert,
                        local_expert: e,
                        tokens: routing.expert(expert).iter().map(|r| r.token).collect(),
                    }
                })
                .collect()
        })
        .collect()
}

//! Browser bindings: capacity/memory explorer, routing with payload bytes
//! through the fabric, and a dense reference forward.
//!
//! Everything runs on one thread; the multi-threaded runtime is not used here.

use fused_moe::gate::{dispatch_manifest, gate_forward};
use fused_moe::layout::{size_l, Buffer, Coord, LayoutSpec, Round, WriteDescriptor, MIB};
use fused_moe::oracle::dense_moe_forward;
use fused_moe::pgas::{Fabric, FlagId, Payload, PayloadBytes, Signal};
use fused_moe::{Activation, ExpertWeights, GateWeights, MoeConfig, TokenMatrix};
use rand::SeedableRng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn config(tokens: usize, hidden: usize, experts: usize, devices: usize, top_k: usize, cf: f64, tile_m: usize) -> Result<MoeConfig, String> {
    let cfg = MoeConfig::new(tokens, hidden, hidden, experts, devices, top_k)
        .with_capacity_factor(cf)
        .with_tiles(tile_m, tile_m.max(1));
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

/// Capacity, padded capacity and `Size(L)` for one shape.
pub fn memory(tokens: usize, hidden: usize, experts: usize, tile_m: usize, cf: f64) -> Result<Value, String> {
    let cfg = config(tokens, hidden, experts, 1, 1, cf, tile_m)?;
    let spec = LayoutSpec::from_config(&cfg);
    Ok(json!({
        "capacity": cfg.capacity(),
        "padded_capacity": cfg.padded_capacity(),
        "size_l_mb": size_l(&cfg) as f64 / MIB,
        "layout_mb": spec.size_bytes() as f64 / MIB,
        "token_matrix_mb": (tokens * hidden * 4) as f64 / MIB,
    }))
}

/// Routes seeded random tokens and moves them through an emulated fabric.
pub fn route(
    tokens: usize,
    hidden: usize,
    experts: usize,
    devices: usize,
    top_k: usize,
    cf: f64,
    seed: u64,
) -> Result<Value, String> {
    let cfg = config(tokens, hidden, experts, devices, top_k, cf, 4)?.with_seed(seed);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let gate = GateWeights::random(&cfg, &mut rng);
    let fabric = Fabric::new(&cfg);
    let mut occupancy = vec![0usize; experts];
    let mut dropped = 0;
    let mut buf = Vec::new();
    for src in 0..devices {
        let shard = TokenMatrix::random(tokens, hidden, 1.0, &mut rng);
        let g = gate_forward(&shard, &gate, &cfg).map_err(|e| e.to_string())?;
        dropped += g.dropped.len();
        for packet in dispatch_manifest(&g.routing, &cfg).into_iter().flatten() {
            let dst = cfg.owner(packet.expert);
            let rows = packet.occupied();
            occupancy[packet.expert] += rows;
            buf.clear();
            for &t in &packet.tokens {
                buf.extend_from_slice(shard.row(t));
            }
            let payload = if rows == 0 { Payload::empty() } else { Payload::rows(&buf, rows, hidden) };
            // Dispatch, then the same rows come back as the combine round.
            for (round, from, to) in [(Round::Dispatch, src, dst), (Round::Combine, dst, src)] {
                let w = WriteDescriptor {
                    source: from,
                    target: to,
                    coord: Coord::new(from, round, Buffer::Incoming, packet.local_expert, 0),
                };
                let flag = match round {
                    Round::Dispatch => FlagId::Dispatch {
                        peer: from,
                        expert: packet.local_expert,
                    },
                    Round::Combine => FlagId::Combine {
                        peer: from,
                        expert: packet.local_expert,
                        row_block: 0,
                        col_block: 0,
                    },
                };
                fabric
                    .put_with_signal(&w, &payload, flag, Signal { value: rows, round })
                    .map_err(|e| e.to_string())?;
            }
        }
    }
    let efficient = fabric.payload_bytes();
    let padded = PayloadBytes::padded_baseline(&cfg);
    Ok(json!({
        "capacity": cfg.capacity(),
        "padded_capacity": cfg.padded_capacity(),
        "occupancy": occupancy,
        "dropped": dropped,
        "efficient": efficient,
        "padded": padded,
        "efficient_total": efficient.total(),
        "padded_total": padded.total(),
    }))
}

/// Dense reference forward over seeded inputs; returns the output rows.
pub fn reference_forward(tokens: usize, hidden: usize, ffn: usize, experts: usize, top_k: usize, activation: &str, seed: u64) -> Result<Value, String> {
    let phi: Activation = activation.parse().map_err(|e: fused_moe::ConfigError| e.to_string())?;
    let cfg = MoeConfig::new(tokens, hidden, ffn, experts, 1, top_k)
        .with_activation(phi)
        .with_seed(seed);
    cfg.validate().map_err(|e| e.to_string())?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let a = TokenMatrix::random(tokens, hidden, 1.0, &mut rng);
    let gate = GateWeights::random(&cfg, &mut rng);
    let experts_w = ExpertWeights::random(&cfg, &mut rng);
    let out = dense_moe_forward(&a, &gate, &experts_w, &cfg).map_err(|e| e.to_string())?;
    let rows: Vec<&[f32]> = (0..tokens).map(|t| out.row(t)).collect();
    Ok(json!({ "rows": rows }))
}

fn to_js(v: Result<Value, String>) -> Result<String, JsError> {
    v.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = layoutSize)]
pub fn memory_js(tokens: usize, hidden: usize, experts: usize, tile_m: usize, cf: f64) -> Result<String, JsError> {
    to_js(memory(tokens, hidden, experts, tile_m, cf))
}

#[wasm_bindgen(js_name = route)]
pub fn route_js(tokens: usize, hidden: usize, experts: usize, devices: usize, top_k: usize, cf: f64, seed: u32) -> Result<String, JsError> {
    to_js(route(tokens, hidden, experts, devices, top_k, cf, seed as u64))
}

#[wasm_bindgen(js_name = referenceForward)]
pub fn reference_forward_js(tokens: usize, hidden: usize, ffn: usize, experts: usize, top_k: usize, activation: &str, seed: u32) -> Result<String, JsError> {
    to_js(reference_forward(tokens, hidden, ffn, experts, top_k, activation, seed as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn memory_matches_closed_form() {
        let v = memory(4096, 1024, 64, 128, 1.0).unwrap();
        assert_eq!(v["capacity"], 64);
        assert_eq!(v["padded_capacity"], 128);
        assert_eq!(v["size_l_mb"], 128.0);
        assert!(memory(10, 4, 3, 4, 1.0).is_ok());
        assert!(memory(0, 4, 3, 4, 1.0).is_err());
    }

    #[test]
    fn route_bytes_never_exceed_padded() {
        let v = route(32, 8, 8, 4, 2, 1.0, 3).unwrap();
        let (e, p) = (v["efficient_total"].as_u64().unwrap(), v["padded_total"].as_u64().unwrap());
        assert!(e <= p);
        let routed: u64 = v["occupancy"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).sum();
        assert_eq!(e, 2 * routed * 8 * 4);
        assert!(route(32, 8, 6, 4, 2, 1.0, 3).is_err());
    }

    #[test]
    fn reference_forward_shape() {
        let v = reference_forward(5, 4, 6, 3, 2, "gelu", 1).unwrap();
        let rows = v["rows"].as_array().unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[0].as_array().unwrap().len(), 4);
        assert!(reference_forward(5, 4, 6, 3, 2, "swish", 1).is_err());
    }
}

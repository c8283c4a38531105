//! Dense single-address-space reference for the whole MoE layer.
//!
//! Nothing here calls into `gate`, `tiled_blas` or `runtime`; routing
//! policy agreement comes from the policy constants in `types` only.

use crate::error::ConfigError;
use crate::types::{
    Activation, ExpertWeights, GateWeights, MoeConfig, OverflowPolicy, TieBreak, TokenMatrix, CAPACITY_OVERFLOW,
    TOP_K_TIE_BREAK,
};

/// Triple-loop `A · B`.
pub fn naive_matmul(a: &TokenMatrix, b: &TokenMatrix) -> Result<TokenMatrix, ConfigError> {
    if a.cols() != b.rows() {
        return Err(ConfigError::Shape {
            what: "naive matmul",
            expected: (a.rows(), b.rows()),
            actual: a.shape(),
        });
    }
    let mut c = TokenMatrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0f32;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            c.set(i, j, s);
        }
    }
    Ok(c)
}

fn act(phi: Activation, x: f32) -> f32 {
    match phi {
        Activation::Relu => {
            if x > 0.0 {
                x
            } else {
                0.0
            }
        }
        Activation::Identity => x,
        Activation::Gelu => {
            let x = x as f64;
            (0.5 * x * libm::erfc(-x / std::f64::consts::SQRT_2)) as f32
        }
    }
}

fn ffn(x: &[f32], w: &crate::types::Expert, phi: Activation) -> Vec<f32> {
    let d = w.b1.len();
    let h = w.b2.len();
    let mut mid = vec![0.0f32; d];
    for (j, m) in mid.iter_mut().enumerate() {
        let mut s = 0.0f32;
        for (k, &xv) in x.iter().enumerate() {
            s += xv * w.w1.get(k, j);
        }
        *m = act(phi, s + w.b1[j]);
    }
    (0..h)
        .map(|j| {
            let mut s = 0.0f32;
            for (k, &mv) in mid.iter().enumerate() {
                s += mv * w.w2.get(k, j);
            }
            s + w.b2[j]
        })
        .collect()
}

fn gate_probs(x: &[f32], wg: &TokenMatrix) -> Vec<f32> {
    let mut z: Vec<f32> = (0..wg.cols())
        .map(|j| x.iter().enumerate().map(|(h, &v)| v * wg.get(h, j)).sum())
        .collect();
    let m = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0f32;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    for v in z.iter_mut() {
        *v /= total;
    }
    z
}

/// Repeated arg-max selection, `k` times.
fn select(probs: &[f32], k: usize) -> Vec<usize> {
    let TieBreak::LowerExpertIndex = TOP_K_TIE_BREAK;
    let mut taken = vec![false; probs.len()];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (e, &p) in probs.iter().enumerate() {
            if taken[e] {
                continue;
            }
            // Strict comparison keeps the first (lowest) index on ties.
            if best.is_none_or(|b| p > probs[b]) {
                best = Some(e);
            }
        }
        let b = best.expect("k <= experts");
        taken[b] = true;
        out.push(b);
    }
    out
}

/// Reference forward over all `devices × tokens` rows, with capacity applied
/// per source-device shard of `cfg.tokens` rows.
pub fn dense_moe_forward(
    a: &TokenMatrix,
    gate: &GateWeights,
    experts: &ExpertWeights,
    cfg: &MoeConfig,
) -> Result<TokenMatrix, ConfigError> {
    // Recomputed here rather than borrowed from `types::expert_capacity`.
    let raw = cfg.capacity_factor * cfg.tokens as f64 / cfg.experts as f64;
    let capacity = if (raw - raw.round()).abs() < 1e-9 { raw.round() } else { raw.ceil() } as usize;
    dense_moe_forward_with_capacity(a, gate, experts, cfg, capacity)
}

pub fn dense_moe_forward_with_capacity(
    a: &TokenMatrix,
    gate: &GateWeights,
    experts: &ExpertWeights,
    cfg: &MoeConfig,
    capacity: usize,
) -> Result<TokenMatrix, ConfigError> {
    let rows = cfg.devices * cfg.tokens;
    if a.shape() != (rows, cfg.hidden) {
        return Err(ConfigError::Shape {
            what: "oracle input",
            expected: (rows, cfg.hidden),
            actual: a.shape(),
        });
    }
    if gate.wg.shape() != (cfg.hidden, cfg.experts) || experts.experts.len() != cfg.experts {
        return Err(ConfigError::Shape {
            what: "oracle weights",
            expected: (cfg.hidden, cfg.experts),
            actual: gate.wg.shape(),
        });
    }
    let OverflowPolicy::DropHigherTokenIndex = CAPACITY_OVERFLOW;
    let mut out = TokenMatrix::zeros(rows, cfg.hidden);
    for shard in 0..cfg.devices {
        let mut used = vec![0usize; cfg.experts];
        for t in 0..cfg.tokens {
            let row = shard * cfg.tokens + t;
            let x = a.row(row);
            let probs = gate_probs(x, &gate.wg);
            let chosen = select(&probs, cfg.top_k);
            let norm: f32 = chosen.iter().map(|&e| probs[e]).sum();
            for &e in &chosen {
                if used[e] >= capacity {
                    continue;
                }
                used[e] += 1;
                let y = ffn(x, &experts.experts[e], cfg.activation);
                let w = probs[e] / norm;
                for (o, v) in out.row_mut(row).iter_mut().zip(&y) {
                    *o += w * v;
                }
            }
        }
    }
    Ok(out)
}

/// `max |got - want| / max |want|` (absolute error when `want` is all zero).
pub fn max_relative_error(got: &TokenMatrix, want: &TokenMatrix) -> f32 {
    assert_eq!(got.shape(), want.shape(), "compared matrices differ in shape");
    let diff = got.data().iter().zip(want.data()).map(|(g, w)| (g - w).abs()).fold(0.0f32, f32::max);
    let scale = want.data().iter().map(|w| w.abs()).fold(0.0f32, f32::max);
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_products() {
        let mut r = rng(0);
        let b = TokenMatrix::random(4, 6, 1.0, &mut r);
        assert_eq!(naive_matmul(&TokenMatrix::identity(4), &b).unwrap(), b);
        assert_eq!(naive_matmul(&b, &TokenMatrix::identity(6)).unwrap(), b);
        assert!(naive_matmul(&b, &b).is_err());
    }

    #[test]
    fn associativity_within_tolerance() {
        let mut r = rng(5);
        let (a, b, c) = (
            TokenMatrix::random(8, 8, 1.0, &mut r),
            TokenMatrix::random(8, 8, 1.0, &mut r),
            TokenMatrix::random(8, 8, 1.0, &mut r),
        );
        let left = naive_matmul(&naive_matmul(&a, &b).unwrap(), &c).unwrap();
        let right = naive_matmul(&a, &naive_matmul(&b, &c).unwrap()).unwrap();
        assert!(left.data().iter().zip(right.data()).all(|(x, y)| (x - y).abs() <= 1e-5));
    }

    #[test]
    fn single_expert_k1_is_plain_ffn() {
        let cfg = MoeConfig::new(6, 4, 5, 1, 1, 1).with_activation(Activation::Gelu);
        let mut r = rng(9);
        let a = TokenMatrix::random(6, 4, 1.0, &mut r);
        let gate = GateWeights::random(&cfg, &mut r);
        let experts = ExpertWeights::random(&cfg, &mut r);
        let o = dense_moe_forward(&a, &gate, &experts, &cfg).unwrap();
        let w = &experts.experts[0];
        let mid = naive_matmul(&a, &w.w1).unwrap();
        let mid = TokenMatrix::from_fn(6, 5, |i, j| act(Activation::Gelu, mid.get(i, j) + w.b1[j]));
        let y = naive_matmul(&mid, &w.w2).unwrap();
        for i in 0..6 {
            for j in 0..4 {
                assert!((o.get(i, j) - (y.get(i, j) + w.b2[j])).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn zero_capacity_drops_everything() {
        let cfg = MoeConfig::new(8, 4, 4, 4, 2, 2).with_capacity_factor(0.0);
        let mut r = rng(2);
        let a = TokenMatrix::random(16, 4, 1.0, &mut r);
        let gate = GateWeights::random(&cfg, &mut r);
        let experts = ExpertWeights::random(&cfg, &mut r);
        let o = dense_moe_forward(&a, &gate, &experts, &cfg).unwrap();
        assert!(o.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn select_prefers_lower_index_on_ties() {
        assert_eq!(select(&[0.25, 0.25, 0.25, 0.25], 2), vec![0, 1]);
        assert_eq!(select(&[0.1, 0.3, 0.3, 0.3], 2), vec![1, 2]);
    }

    #[test]
    fn permutation_equivariance_without_overflow() {
        // Generous capacity so no drop depends on token order.
        let cfg = MoeConfig::new(8, 4, 4, 4, 1, 2).with_capacity_factor(4.0);
        let mut r = rng(11);
        let a = TokenMatrix::random(8, 4, 1.0, &mut r);
        let gate = GateWeights::random(&cfg, &mut r);
        let experts = ExpertWeights::random(&cfg, &mut r);
        let o = dense_moe_forward(&a, &gate, &experts, &cfg).unwrap();
        let perm = [3usize, 0, 7, 1, 6, 2, 5, 4];
        let pa = TokenMatrix::from_fn(8, 4, |i, j| a.get(perm[i], j));
        let po = dense_moe_forward(&pa, &gate, &experts, &cfg).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(po.row(i), o.row(p));
        }
    }
}

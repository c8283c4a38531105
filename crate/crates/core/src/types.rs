//! Model configuration, dense FP32 containers and capacity arithmetic.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Element-wise activation applied in the fused epilogue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
    Identity,
}

impl FromStr for Activation {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "identity" | "id" => Ok(Activation::Identity),
            other => Err(ConfigError::UnknownActivation(other.to_string())),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Identity => "identity",
        })
    }
}

/// Shape and routing parameters of one distributed MoE layer.
///
/// `tokens` is the per-device sequence length; experts are placed uniformly,
/// `experts / devices` per device, global id `device * local + e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    #[serde(alias = "S")]
    pub tokens: usize,
    #[serde(alias = "H")]
    pub hidden: usize,
    #[serde(alias = "D")]
    pub ffn: usize,
    #[serde(alias = "E_total", alias = "E")]
    pub experts: usize,
    #[serde(alias = "P")]
    pub devices: usize,
    #[serde(alias = "k")]
    pub top_k: usize,
    #[serde(alias = "cf")]
    pub capacity_factor: f64,
    #[serde(alias = "bM", default = "default_tile_m")]
    pub tile_m: usize,
    #[serde(alias = "bN", default = "default_tile_n")]
    pub tile_n: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub seed: u64,
}

pub const DEFAULT_TILE_M: usize = 16;
pub const DEFAULT_TILE_N: usize = 8;

fn default_tile_m() -> usize {
    DEFAULT_TILE_M
}

fn default_tile_n() -> usize {
    DEFAULT_TILE_N
}

impl MoeConfig {
    /// A config with desk-scale tile defaults, cf = 1.0 and relu.
    pub fn new(tokens: usize, hidden: usize, ffn: usize, experts: usize, devices: usize, top_k: usize) -> Self {
        MoeConfig {
            tokens,
            hidden,
            ffn,
            experts,
            devices,
            top_k,
            capacity_factor: 1.0,
            tile_m: DEFAULT_TILE_M,
            tile_n: DEFAULT_TILE_N,
            activation: Activation::Relu,
            seed: 0,
        }
    }

    pub fn with_tiles(mut self, tile_m: usize, tile_n: usize) -> Self {
        self.tile_m = tile_m;
        self.tile_n = tile_n;
        self
    }

    pub fn with_capacity_factor(mut self, cf: f64) -> Self {
        self.capacity_factor = cf;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("tokens", self.tokens),
            ("hidden", self.hidden),
            ("ffn", self.ffn),
            ("experts", self.experts),
            ("devices", self.devices),
            ("top_k", self.top_k),
            ("tile_m", self.tile_m),
            ("tile_n", self.tile_n),
        ] {
            if v == 0 {
                return Err(ConfigError::Zero(name));
            }
        }
        if !self.experts.is_multiple_of(self.devices) {
            return Err(ConfigError::UnevenPlacement {
                experts: self.experts,
                devices: self.devices,
            });
        }
        if self.top_k > self.experts {
            return Err(ConfigError::TopKTooLarge {
                top_k: self.top_k,
                experts: self.experts,
            });
        }
        if !self.capacity_factor.is_finite() || self.capacity_factor < 0.0 {
            return Err(ConfigError::CapacityFactor(self.capacity_factor));
        }
        // Largest allocation is the symmetric heap: devices * 4 * experts_local * C' * hidden,
        // plus the per-device intermediate scratch with `ffn` columns.
        let c_pad = self.padded_capacity();
        let checks: [(&'static str, &[usize]); 3] = [
            ("symmetric heap", &[4, self.experts, c_pad, self.hidden.max(self.ffn)]),
            ("token shard", &[self.tokens, self.hidden.max(self.experts)]),
            ("expert weights", &[self.experts, self.hidden, self.ffn]),
        ];
        for (what, dims) in checks {
            dims.iter()
                .try_fold(4usize, |acc, &d| acc.checked_mul(d))
                .ok_or(ConfigError::Overflow(what))?;
        }
        Ok(())
    }

    pub fn local_experts(&self) -> usize {
        self.experts / self.devices
    }

    /// Device owning global expert `expert`.
    pub fn owner(&self, expert: usize) -> usize {
        expert / self.local_experts()
    }

    pub fn capacity(&self) -> usize {
        expert_capacity(self)
    }

    pub fn padded_capacity(&self) -> usize {
        padded_capacity(self.capacity(), self.tile_m)
    }
}

/// How equal affinities are ordered during top-k selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TieBreak {
    LowerExpertIndex,
}

/// Which token loses when an expert's slots run out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverflowPolicy {
    /// Slots fill in ascending token order; later tokens are dropped.
    DropHigherTokenIndex,
}

pub const TOP_K_TIE_BREAK: TieBreak = TieBreak::LowerExpertIndex;
pub const CAPACITY_OVERFLOW: OverflowPolicy = OverflowPolicy::DropHigherTokenIndex;

/// Slots per expert per source device: `ceil(cf * S / E_total)`.
///
/// Only `cf == 0` yields zero; any positive factor gives at least one slot.
pub fn expert_capacity(cfg: &MoeConfig) -> usize {
    let raw = cfg.capacity_factor * cfg.tokens as f64 / cfg.experts as f64;
    // Guard against 1.0 * 4096 / 16 landing at 256.00000000001.
    let rounded = raw.round();
    if (raw - rounded).abs() <= 1e-9 * raw.max(1.0) {
        rounded as usize
    } else {
        raw.ceil() as usize
    }
}

/// Smallest multiple of `tile_m` that holds `capacity` slots.
pub fn padded_capacity(capacity: usize, tile_m: usize) -> usize {
    capacity.div_ceil(tile_m) * tile_m
}

/// Dense row-major FP32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl TokenMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        TokenMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, ConfigError> {
        if data.len() != rows * cols {
            return Err(ConfigError::Shape {
                what: "matrix data",
                expected: (rows, cols),
                actual: (data.len(), 1),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ConfigError::NonFinite("matrix data"));
        }
        Ok(TokenMatrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        TokenMatrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    /// Uniform entries in `[-scale, scale)`.
    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f32, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
        TokenMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stack matrices with equal column counts vertically.
    pub fn vstack(parts: &[TokenMatrix]) -> Self {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        for p in parts {
            assert_eq!(p.cols, cols, "vstack column mismatch");
            data.extend_from_slice(&p.data);
        }
        TokenMatrix {
            rows: data.len().checked_div(cols).unwrap_or(0),
            cols,
            data,
        }
    }

    /// Split into consecutive blocks of `rows_per` rows.
    pub fn split_rows(&self, rows_per: usize) -> Vec<TokenMatrix> {
        self.data
            .chunks(rows_per * self.cols)
            .map(|chunk| TokenMatrix {
                rows: rows_per,
                cols: self.cols,
                data: chunk.to_vec(),
            })
            .collect()
    }
}

/// One position-wise FFN: `W2 · φ(x W1 + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub w1: TokenMatrix,
    pub b1: Vec<f32>,
    pub w2: TokenMatrix,
    pub b2: Vec<f32>,
}

impl Expert {
    pub fn random<R: Rng + ?Sized>(hidden: usize, ffn: usize, rng: &mut R) -> Self {
        let s1 = (1.0 / hidden as f32).sqrt();
        let s2 = (1.0 / ffn as f32).sqrt();
        Expert {
            w1: TokenMatrix::random(hidden, ffn, s1, rng),
            b1: (0..ffn).map(|_| rng.random_range(-0.1..0.1)).collect(),
            w2: TokenMatrix::random(ffn, hidden, s2, rng),
            b2: (0..hidden).map(|_| rng.random_range(-0.1..0.1)).collect(),
        }
    }

    fn check(&self, hidden: usize, ffn: usize) -> Result<(), ConfigError> {
        let shapes = [
            ("W1", (hidden, ffn), self.w1.shape()),
            ("b1", (ffn, 1), (self.b1.len(), 1)),
            ("W2", (ffn, hidden), self.w2.shape()),
            ("b2", (hidden, 1), (self.b2.len(), 1)),
        ];
        for (what, expected, actual) in shapes {
            if expected != actual {
                return Err(ConfigError::Shape { what, expected, actual });
            }
        }
        let finite = self.w1.is_finite()
            && self.w2.is_finite()
            && self.b1.iter().chain(&self.b2).all(|v| v.is_finite());
        if !finite {
            return Err(ConfigError::NonFinite("expert weights"));
        }
        Ok(())
    }
}

/// Weights of every expert in the model, indexed by global expert id.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertWeights {
    pub experts: Vec<Expert>,
}

impl ExpertWeights {
    pub fn random<R: Rng + ?Sized>(cfg: &MoeConfig, rng: &mut R) -> Self {
        ExpertWeights {
            experts: (0..cfg.experts).map(|_| Expert::random(cfg.hidden, cfg.ffn, rng)).collect(),
        }
    }

    pub fn validate(&self, cfg: &MoeConfig) -> Result<(), ConfigError> {
        if self.experts.len() != cfg.experts {
            return Err(ConfigError::Shape {
                what: "expert count",
                expected: (cfg.experts, 1),
                actual: (self.experts.len(), 1),
            });
        }
        self.experts.iter().try_for_each(|e| e.check(cfg.hidden, cfg.ffn))
    }

    /// Experts resident on `device`.
    pub fn local(&self, cfg: &MoeConfig, device: usize) -> &[Expert] {
        let n = cfg.local_experts();
        &self.experts[device * n..(device + 1) * n]
    }
}

/// Gating projection `Wg` (H × E_total).
#[derive(Debug, Clone, PartialEq)]
pub struct GateWeights {
    pub wg: TokenMatrix,
}

impl GateWeights {
    pub fn random<R: Rng + ?Sized>(cfg: &MoeConfig, rng: &mut R) -> Self {
        GateWeights {
            wg: TokenMatrix::random(cfg.hidden, cfg.experts, 1.0, rng),
        }
    }

    pub fn validate(&self, cfg: &MoeConfig) -> Result<(), ConfigError> {
        if self.wg.shape() != (cfg.hidden, cfg.experts) {
            return Err(ConfigError::Shape {
                what: "gate weights",
                expected: (cfg.hidden, cfg.experts),
                actual: self.wg.shape(),
            });
        }
        if !self.wg.is_finite() {
            return Err(ConfigError::NonFinite("gate weights"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(tokens: usize, experts: usize, cf: f64) -> MoeConfig {
        MoeConfig::new(tokens, 8, 8, experts, 1, 1).with_capacity_factor(cf)
    }

    #[test]
    fn capacity_matches_memory_table_rows() {
        assert_eq!(expert_capacity(&cfg(4096, 16, 1.0)), 256);
        assert_eq!(expert_capacity(&cfg(4096, 128, 1.0)), 32);
        assert_eq!(expert_capacity(&cfg(1, 1, 1.0)), 1);
        assert_eq!(expert_capacity(&cfg(16384, 16, 1.0)), 1024);
    }

    #[test]
    fn capacity_rounds_up() {
        assert_eq!(expert_capacity(&cfg(10, 4, 1.0)), 3);
        assert_eq!(expert_capacity(&cfg(8, 4, 0.5)), 1);
        assert_eq!(expert_capacity(&cfg(8, 4, 1.5)), 3);
        assert_eq!(expert_capacity(&cfg(8, 4, 0.01)), 1);
        assert_eq!(expert_capacity(&cfg(8, 4, 0.0)), 0);
    }

    #[test]
    fn padded_capacity_examples() {
        assert_eq!(padded_capacity(32, 128), 128);
        assert_eq!(padded_capacity(1024, 128), 1024);
        // Oracle: scan multiples of 128 for the first one >= 130.
        let scanned = (1..).map(|m| m * 128).find(|&v| v >= 130).unwrap();
        assert_eq!(scanned, 256);
        assert_eq!(padded_capacity(130, 128), scanned);
    }

    #[test]
    fn validate_rejects_bad_configs() {
        let good = MoeConfig::new(8, 4, 4, 4, 2, 2);
        assert!(good.validate().is_ok());
        assert!(matches!(
            MoeConfig::new(8, 4, 4, 3, 2, 1).validate(),
            Err(ConfigError::UnevenPlacement { .. })
        ));
        assert!(matches!(
            MoeConfig::new(8, 4, 4, 4, 2, 5).validate(),
            Err(ConfigError::TopKTooLarge { .. })
        ));
        assert!(matches!(good.clone().with_tiles(0, 8).validate(), Err(ConfigError::Zero("tile_m"))));
        assert!(matches!(
            good.clone().with_capacity_factor(f64::NAN).validate(),
            Err(ConfigError::CapacityFactor(_))
        ));
        let huge = MoeConfig::new(usize::MAX / 2, 1 << 20, 4, 4, 1, 1);
        assert!(matches!(huge.validate(), Err(ConfigError::Overflow(_))));
    }

    #[test]
    fn config_parses_symbolic_keys() {
        let cfg: MoeConfig = toml::from_str(
            "S = 8\nH = 4\nD = 4\nE_total = 4\nP = 2\nk = 2\ncf = 1.5\nbM = 4\nactivation = \"gelu\"\n",
        )
        .unwrap();
        assert_eq!(cfg.tokens, 8);
        assert_eq!(cfg.tile_m, 4);
        assert_eq!(cfg.tile_n, DEFAULT_TILE_N);
        assert_eq!(cfg.activation, Activation::Gelu);
        assert_eq!(cfg.capacity(), 3);
    }

    #[test]
    fn from_vec_checks_shape_and_finiteness() {
        assert!(TokenMatrix::from_vec(2, 2, vec![0.0; 3]).is_err());
        assert!(TokenMatrix::from_vec(1, 2, vec![0.0, f32::NAN]).is_err());
        let m = TokenMatrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.row(1), &[3.0, 4.0]);
        let parts = m.split_rows(1);
        assert_eq!(TokenMatrix::vstack(&parts), m);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn capacity_monotone(s in 1usize..5000, e in 1usize..200, cf in 0.05f64..3.0) {
                let c = expert_capacity(&cfg(s, e, cf));
                prop_assert!(c >= 1);
                prop_assert!(expert_capacity(&cfg(s + 1, e, cf)) >= c);
                prop_assert!(expert_capacity(&cfg(s, e, cf + 0.25)) >= c);
                prop_assert!(expert_capacity(&cfg(s, e + 1, cf)) <= c);
            }

            #[test]
            fn padded_capacity_is_aligned(c in 1usize..10_000, bm in 1usize..300) {
                let p = padded_capacity(c, bm);
                prop_assert_eq!(p % bm, 0);
                prop_assert!(p >= c);
                prop_assert!(p - c < bm);
            }
        }
    }
}

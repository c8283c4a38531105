//! Experiment driver behind the CLI: config files, warmup/measured passes,
//! straggler injection, overlapped vs sequential comparison and reports.

pub mod straggler;

use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{ConfigError, RuntimeFault};
use crate::layout::{memory_table, size_l, LayoutSpec, MemoryRow, MIB};
use crate::oracle::{dense_moe_forward, max_relative_error};
use crate::pgas::PayloadBytes;
use crate::runtime::audit::{audit, busy_fraction, AuditReport};
use crate::runtime::{forward, DeviceStats, ForwardOutput, RuntimeOptions, ScheduleMode, TraceEvent};
use crate::types::{ExpertWeights, GateWeights, MoeConfig, TokenMatrix};
pub use straggler::{DelayDistribution, StragglerSpec};

/// Acceptance threshold of `--mode oracle-check`.
pub const ORACLE_TOLERANCE: f32 = 1e-5;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("straggler spec: {0}")]
    Straggler(String),
    #[error(transparent)]
    Runtime(#[from] RuntimeFault),
}

fn default_processors() -> usize {
    4
}

fn default_warmup() -> usize {
    4
}

fn default_measured() -> usize {
    16
}

/// Contents of a `--config` file: the layer config plus run parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub moe: MoeConfig,
    #[serde(default = "default_processors")]
    pub processors: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default = "default_measured")]
    pub measured: usize,
    /// Straggler spec used when none is given on the command line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub straggler: Option<String>,
}

impl ExperimentConfig {
    pub fn new(moe: MoeConfig) -> Self {
        ExperimentConfig {
            moe,
            processors: default_processors(),
            warmup: default_warmup(),
            measured: default_measured(),
            straggler: None,
        }
    }

    /// Parses TOML, or JSON when the text is a JSON object.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?
        };
        cfg.moe.validate()?;
        if cfg.processors == 0 {
            return Err(ConfigError::Zero("processors").into());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }
}

/// Seeded inputs and weights for one config.
#[derive(Debug, Clone)]
pub struct Workload {
    pub shards: Vec<TokenMatrix>,
    pub gate: GateWeights,
    pub experts: ExpertWeights,
}

impl Workload {
    pub fn generate(cfg: &MoeConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let shards = (0..cfg.devices)
            .map(|_| TokenMatrix::random(cfg.tokens, cfg.hidden, 1.0, &mut rng))
            .collect();
        let gate = GateWeights::random(cfg, &mut rng);
        let experts = ExpertWeights::random(cfg, &mut rng);
        Workload { shards, gate, experts }
    }

    pub fn forward(&self, cfg: &MoeConfig, opts: &RuntimeOptions) -> Result<ForwardOutput, RuntimeFault> {
        forward(cfg, &self.shards, &self.gate, &self.experts, opts)
    }

    /// Max relative error of the runtime output against the dense reference.
    pub fn oracle_error(&self, cfg: &MoeConfig, out: &ForwardOutput) -> Result<f32, ConfigError> {
        let want = dense_moe_forward(&TokenMatrix::vstack(&self.shards), &self.gate, &self.experts, cfg)?;
        Ok(max_relative_error(&TokenMatrix::vstack(&out.outputs), &want))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Overlapped,
    Sequential,
    OracleCheck,
}

impl std::str::FromStr for RunMode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "overlapped" => Ok(RunMode::Overlapped),
            "sequential" => Ok(RunMode::Sequential),
            "oracle-check" => Ok(RunMode::OracleCheck),
            other => Err(HarnessError::Parse(format!("unknown mode `{other}`"))),
        }
    }
}

impl RunMode {
    pub fn schedule(self) -> ScheduleMode {
        match self {
            RunMode::Sequential => ScheduleMode::Sequential,
            RunMode::Overlapped | RunMode::OracleCheck => ScheduleMode::Overlapped,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyStats {
    pub samples_ms: Vec<f64>,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub warmup_median_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ByteReport {
    pub efficient: PayloadBytes,
    pub padded: PayloadBytes,
    pub efficient_total: u64,
    pub padded_total: u64,
    /// `efficient_total / padded_total` (0 when nothing would move).
    pub ratio: f64,
}

impl ByteReport {
    pub fn new(cfg: &MoeConfig, efficient: PayloadBytes) -> Self {
        let padded = PayloadBytes::padded_baseline(cfg);
        let (e, p) = (efficient.total(), padded.total());
        ByteReport {
            ratio: if p == 0 { 0.0 } else { e as f64 / p as f64 },
            efficient_total: e,
            padded_total: p,
            efficient,
            padded,
        }
    }

    /// `kind,round,src,dst,bytes` rows for both matrices.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,round,src,dst,bytes\n");
        for (kind, m) in [("efficient", &self.efficient), ("padded", &self.padded)] {
            for line in m.to_csv().lines().skip(1) {
                out.push_str(kind);
                out.push(',');
                out.push_str(line);
                out.push('\n');
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReport {
    pub size_l_bytes: u64,
    pub size_l_mb: f64,
    /// Exact element count of the allocated layout, in bytes.
    pub layout_bytes: usize,
    pub heap_bytes_per_device: usize,
    pub bookkeeping_bytes_per_device: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StragglerReport {
    pub spec: String,
    pub device: usize,
    pub delays_ms: Vec<f64>,
    pub overlapped_median_ms: f64,
    pub sequential_median_ms: f64,
    /// Overlapped / sequential median makespan.
    pub ratio: f64,
    pub overlapped_wins: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleReport {
    pub max_relative_error: f32,
    pub tolerance: f32,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub config: ExperimentConfig,
    pub mode: RunMode,
    pub latency: LatencyStats,
    pub bytes: ByteReport,
    pub tasks: Vec<DeviceStats>,
    pub busy_fraction: f64,
    pub idle_fraction: f64,
    pub memory: MemoryReport,
    pub audit: AuditReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub straggler: Option<StragglerReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleReport>,
}

impl Report {
    /// `false` only when an oracle check was requested and failed.
    pub fn ok(&self) -> bool {
        self.oracle.is_none_or(|o| o.passed)
    }
}

pub struct RunOutcome {
    pub report: Report,
    /// Trace of the last measured pass.
    pub trace: Vec<TraceEvent>,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn options(exp: &ExperimentConfig, mode: ScheduleMode, delay: Option<(usize, Duration)>) -> RuntimeOptions {
    RuntimeOptions {
        processors: exp.processors,
        mode,
        dispatch_delays: delay.into_iter().collect(),
        ..RuntimeOptions::default()
    }
}

/// Median makespan of `passes` undelayed overlapped passes, in ms.
pub fn measure_compute_ms(exp: &ExperimentConfig, work: &Workload, passes: usize) -> Result<f64, HarnessError> {
    let opts = options(exp, ScheduleMode::Overlapped, None);
    let mut samples = Vec::with_capacity(passes.max(1));
    for _ in 0..passes.max(1) {
        samples.push(ms(work.forward(&exp.moe, &opts)?.makespan));
    }
    Ok(median(&samples))
}

/// One straggler trial: same delay in both schedules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OverlapTrial {
    pub delay_ms: f64,
    pub overlapped_ms: f64,
    pub sequential_ms: f64,
}

/// Runs `trials` paired passes; delays are drawn from `spec` with `seed`.
pub fn overlap_trials(
    exp: &ExperimentConfig,
    work: &Workload,
    spec: &StragglerSpec,
    compute_ms: f64,
    trials: usize,
    seed: u64,
) -> Result<Vec<OverlapTrial>, HarnessError> {
    let device = spec.device(exp.moe.devices);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .map(|_| {
            let delay = spec.sample(3.0 * compute_ms, &mut rng);
            let o = work.forward(&exp.moe, &options(exp, ScheduleMode::Overlapped, Some((device, delay))))?;
            let s = work.forward(&exp.moe, &options(exp, ScheduleMode::Sequential, Some((device, delay))))?;
            Ok(OverlapTrial {
                delay_ms: ms(delay),
                overlapped_ms: ms(o.makespan),
                sequential_ms: ms(s.makespan),
            })
        })
        .collect()
}

/// Warmup plus measured passes, with optional straggler comparison and oracle check.
pub fn run(exp: &ExperimentConfig, mode: RunMode, straggler: Option<&StragglerSpec>) -> Result<RunOutcome, HarnessError> {
    let cfg = &exp.moe;
    cfg.validate()?;
    let work = Workload::generate(cfg);
    let warmup_median_ms = measure_compute_ms(exp, &work, exp.warmup)?;

    let device = straggler.map(|s| s.device(cfg.devices));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x57a6_61e5);
    let delays: Vec<Duration> = (0..exp.measured.max(1))
        .map(|_| straggler.map_or(Duration::ZERO, |s| s.sample(3.0 * warmup_median_ms, &mut rng)))
        .collect();

    let mut samples = Vec::with_capacity(delays.len());
    let mut last = None;
    for &d in &delays {
        let out = work.forward(cfg, &options(exp, mode.schedule(), device.map(|dev| (dev, d))))?;
        samples.push(ms(out.makespan));
        last = Some(out);
    }
    let last = last.expect("at least one measured pass");

    let straggler_report = match (straggler, device) {
        (Some(spec), Some(dev)) => {
            let other = match mode.schedule() {
                ScheduleMode::Overlapped => ScheduleMode::Sequential,
                ScheduleMode::Sequential => ScheduleMode::Overlapped,
            };
            let mut other_samples = Vec::with_capacity(delays.len());
            for &d in &delays {
                other_samples.push(ms(work.forward(cfg, &options(exp, other, Some((dev, d))))?.makespan));
            }
            let (ov, seq) = match other {
                ScheduleMode::Sequential => (samples.clone(), other_samples),
                ScheduleMode::Overlapped => (other_samples, samples.clone()),
            };
            let (om, sm) = (median(&ov), median(&seq));
            Some(StragglerReport {
                spec: spec.to_string(),
                device: dev,
                delays_ms: delays.iter().map(|&d| ms(d)).collect(),
                overlapped_median_ms: om,
                sequential_median_ms: sm,
                ratio: if sm > 0.0 { om / sm } else { 0.0 },
                overlapped_wins: ov.iter().zip(&seq).filter(|(o, s)| o < s).count(),
            })
        }
        _ => None,
    };

    let oracle = match mode {
        RunMode::OracleCheck => {
            let err = work.oracle_error(cfg, &last)?;
            Some(OracleReport {
                max_relative_error: err,
                tolerance: ORACLE_TOLERANCE,
                passed: err <= ORACLE_TOLERANCE,
            })
        }
        _ => None,
    };

    let busy = busy_fraction(&last);
    let report = Report {
        config: exp.clone(),
        mode,
        latency: LatencyStats {
            median_ms: median(&samples),
            mean_ms: mean(&samples),
            samples_ms: samples,
            warmup_median_ms,
        },
        bytes: ByteReport::new(cfg, last.bytes.clone()),
        tasks: last.devices.clone(),
        busy_fraction: busy,
        idle_fraction: 1.0 - busy,
        memory: MemoryReport {
            size_l_bytes: size_l(cfg),
            size_l_mb: size_l(cfg) as f64 / MIB,
            layout_bytes: LayoutSpec::from_config(cfg).size_bytes(),
            heap_bytes_per_device: last.heap_bytes,
            bookkeeping_bytes_per_device: last.devices.iter().map(|d| d.bookkeeping_bytes).collect(),
        },
        audit: audit(&last, cfg, exp.processors),
        straggler: straggler_report,
        oracle,
    };
    Ok(RunOutcome {
        report,
        trace: last.trace,
    })
}

/// The memory table as aligned text.
pub fn memory_table_text(rows: &[MemoryRow]) -> String {
    let mut out = format!("{:>7} {:>7} {:>6} {:>12} {:>12}\n", "tokens", "experts", "EC", "max(bM,EC)", "size_l_mb");
    for r in rows {
        out.push_str(&format!(
            "{:>7} {:>7} {:>6} {:>12} {:>12.2}\n",
            r.tokens, r.experts, r.capacity, r.padded_capacity, r.size_l_mb
        ));
    }
    out
}

pub fn memory_table_rows() -> Vec<MemoryRow> {
    memory_table()
}

pub fn write_file(path: &Path, contents: &[u8]) -> Result<(), HarnessError> {
    std::fs::write(path, contents).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

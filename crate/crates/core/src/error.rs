use thiserror::Error;

use crate::layout::WriteRule;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{0} must be at least 1")]
    Zero(&'static str),
    #[error("expert count {experts} is not divisible by device count {devices}")]
    UnevenPlacement { experts: usize, devices: usize },
    #[error("top_k {top_k} exceeds expert count {experts}")]
    TopKTooLarge { top_k: usize, experts: usize },
    #[error("capacity factor must be finite and non-negative, got {0}")]
    CapacityFactor(f64),
    #[error("dimension product overflows the address space: {0}")]
    Overflow(&'static str),
    #[error("shape mismatch for {what}: expected {expected:?}, got {actual:?}")]
    Shape {
        what: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("unknown activation `{0}`")]
    UnknownActivation(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LayoutError {
    #[error("coordinate `{axis}` = {value} out of bounds (extent {extent})")]
    OutOfBounds {
        axis: &'static str,
        value: usize,
        extent: usize,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolViolation {
    #[error("write rejected by layout rules: {0}")]
    InvalidWrite(WriteRule),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("flag {flag} on device {device} signalled twice in one round")]
    DoubleSignal { device: usize, flag: usize },
    #[error("payload of {rows} rows x {cols} cols at slot {slot} col {col0} overruns the cell ({slots} slots x {hidden} cols)")]
    Overrun {
        rows: usize,
        cols: usize,
        slot: usize,
        col0: usize,
        slots: usize,
        hidden: usize,
    },
    #[error("payload length {len} does not match {rows} x {cols}")]
    PayloadShape { len: usize, rows: usize, cols: usize },
    #[error("flag id {flag} out of range ({count} flags)")]
    FlagOutOfRange { flag: usize, count: usize },
}

#[derive(Debug, Error)]
pub enum RuntimeFault {
    #[error("no progress for {stalled_ms} ms; state:\n{dump}")]
    Deadlock { stalled_ms: u128, dump: String },
    #[error("task bound underflow on device {device}: bound {bound} < enqueued {enqueued}")]
    BoundUnderflow {
        device: usize,
        bound: usize,
        enqueued: usize,
    },
    #[error("task queue overflow on device {device}: capacity {capacity}")]
    QueueOverflow { device: usize, capacity: usize },
    #[error(transparent)]
    Protocol(#[from] ProtocolViolation),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("worker panicked on device {0}")]
    WorkerPanic(usize),
}

//! Single-launch runtime: one launch per device, each running a scheduler,
//! a subscriber and `N` processors until the device's task bound is met.

pub mod audit;
mod device;
pub mod processor;
pub mod queues;
pub mod scheduler;
pub mod task;
pub mod trace;

use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::error::{ConfigError, RuntimeFault};
use crate::gate::{gate_forward, GateOutput};
use crate::pgas::PayloadBytes;
use crate::types::{ExpertWeights, GateWeights, MoeConfig, TokenMatrix};
use device::{AbortOnPanic, DeviceExecutor, DeviceHooks, DeviceState, PassCtx};
pub use task::{TaskDescriptor, TaskId, TaskKind};
pub use trace::{EventKind, TraceEvent, Worker};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// Tiles flow between devices as soon as they are ready.
    Overlapped,
    /// Barrier after dispatch and before combine.
    Sequential,
}

#[derive(Debug, Clone)]
pub struct RuntimeOptions {
    /// Processors per device.
    pub processors: usize,
    pub mode: ScheduleMode,
    /// A pass with no trace progress for this long fails with a deadlock fault.
    pub stall_timeout: Duration,
    /// `(device, delay)`: hold back that device's dispatch signals.
    pub dispatch_delays: Vec<(usize, Duration)>,
}

impl Default for RuntimeOptions {
    fn default() -> Self {
        RuntimeOptions {
            processors: 4,
            mode: ScheduleMode::Overlapped,
            stall_timeout: Duration::from_secs(10),
            dispatch_delays: Vec::new(),
        }
    }
}

impl RuntimeOptions {
    pub fn with_mode(mut self, mode: ScheduleMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_processors(mut self, processors: usize) -> Self {
        self.processors = processors;
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DeviceStats {
    pub launches: usize,
    pub workers_spawned: usize,
    pub initial_bound: usize,
    pub final_bound: usize,
    pub scheduled: usize,
    pub enqueued: usize,
    pub executed: usize,
    pub combine_tasks: usize,
    pub signals_seen: usize,
    pub bookkeeping_bytes: usize,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Per device, `S × H`.
    pub outputs: Vec<TokenMatrix>,
    pub gates: Vec<GateOutput>,
    /// All events of the pass, ordered by `seq`.
    pub trace: Vec<TraceEvent>,
    pub devices: Vec<DeviceStats>,
    pub bytes: PayloadBytes,
    pub makespan: Duration,
    /// Symmetric heap plus flags, per device.
    pub heap_bytes: usize,
}

struct DeviceResult {
    output: TokenMatrix,
    gate: GateOutput,
    events: Vec<TraceEvent>,
    stats: DeviceStats,
}

fn check_inputs(
    cfg: &MoeConfig,
    shards: &[TokenMatrix],
    gate: &GateWeights,
    experts: &ExpertWeights,
    opts: &RuntimeOptions,
) -> Result<(), ConfigError> {
    cfg.validate()?;
    if opts.processors == 0 {
        return Err(ConfigError::Zero("processors"));
    }
    if shards.len() != cfg.devices {
        return Err(ConfigError::Shape {
            what: "device shards",
            expected: (cfg.devices, 1),
            actual: (shards.len(), 1),
        });
    }
    for s in shards {
        if s.shape() != (cfg.tokens, cfg.hidden) {
            return Err(ConfigError::Shape {
                what: "token shard",
                expected: (cfg.tokens, cfg.hidden),
                actual: s.shape(),
            });
        }
        if !s.is_finite() {
            return Err(ConfigError::NonFinite("token shard"));
        }
    }
    gate.validate(cfg)?;
    experts.validate(cfg)
}

/// Runs one forward pass of the layer over `P` device shards.
pub fn forward(
    cfg: &MoeConfig,
    shards: &[TokenMatrix],
    gate: &GateWeights,
    experts: &ExpertWeights,
    opts: &RuntimeOptions,
) -> Result<ForwardOutput, RuntimeFault> {
    check_inputs(cfg, shards, gate, experts, opts)?;
    let ctx = PassCtx::new(cfg, opts, gate, experts);
    for &(device, delay) in &opts.dispatch_delays {
        if device < cfg.devices {
            ctx.fabric.set_dispatch_delay(device, delay);
        }
    }
    let start = Instant::now();
    let results: Vec<Option<DeviceResult>> = thread::scope(|s| {
        let handles: Vec<_> = shards
            .iter()
            .enumerate()
            .map(|(d, shard)| {
                let ctx = &ctx;
                s.spawn(move || {
                    let _guard = AbortOnPanic(ctx);
                    match launch(ctx, d, shard) {
                        Ok(r) => r,
                        Err(e) => {
                            ctx.fail(e);
                            None
                        }
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .enumerate()
            .map(|(d, h)| {
                h.join().unwrap_or_else(|_| {
                    ctx.fail(RuntimeFault::WorkerPanic(d));
                    None
                })
            })
            .collect()
    });
    let makespan = start.elapsed();
    if let Some(fault) = ctx.take_fault() {
        return Err(fault);
    }
    let mut out = ForwardOutput {
        outputs: Vec::with_capacity(cfg.devices),
        gates: Vec::with_capacity(cfg.devices),
        trace: Vec::new(),
        devices: Vec::with_capacity(cfg.devices),
        bytes: ctx.fabric.payload_bytes(),
        makespan,
        heap_bytes: ctx.fabric.device_bytes(),
    };
    for (d, r) in results.into_iter().enumerate() {
        let r = r.ok_or(RuntimeFault::WorkerPanic(d))?;
        out.outputs.push(r.output);
        out.gates.push(r.gate);
        out.trace.extend(r.events);
        out.devices.push(r.stats);
    }
    out.trace.sort_by_key(|e| e.seq);
    Ok(out)
}

fn join<T>(h: thread::ScopedJoinHandle<'_, T>, device: usize) -> Result<T, RuntimeFault> {
    h.join().map_err(|_| RuntimeFault::WorkerPanic(device))
}

/// The single launch of one device; `None` if another device aborted the pass.
fn launch(ctx: &PassCtx<'_>, id: usize, shard: &TokenMatrix) -> Result<Option<DeviceResult>, RuntimeFault> {
    ctx.launches[id].fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    let mut tracer = trace::Tracer::new(&ctx.clock, id, Worker::Launch);
    tracer.emit(EventKind::Launch);
    let gate = gate_forward(shard, ctx.gate, ctx.cfg)?;
    tracer.emit(EventKind::Gate).rows = Some(gate.routing.routed_pairs());
    let dev = DeviceState::new(ctx, id, shard, gate);
    let n = ctx.opts.processors;
    let spawned = || ctx.workers[id].fetch_add(1, std::sync::atomic::Ordering::Relaxed);

    let (sched, sub, procs) = thread::scope(|s| {
        let dev = &dev;
        let sched = s.spawn(move || {
            let _guard = AbortOnPanic(ctx);
            spawned();
            let mut tr = trace::Tracer::new(&ctx.clock, id, Worker::Scheduler);
            let mut hooks = DeviceHooks::new(dev);
            let r = scheduler::run_scheduler(&dev.queues, &mut hooks, &mut tr, ctx.opts.stall_timeout);
            if r.is_err() {
                // Let the other devices stop too.
                ctx.abort();
            }
            (r, tr.into_events())
        });
        let sub = s.spawn(move || {
            let _guard = AbortOnPanic(ctx);
            spawned();
            let mut tr = trace::Tracer::new(&ctx.clock, id, Worker::Subscriber);
            let r = dev.run_subscriber(&mut tr);
            if r.is_err() {
                ctx.abort();
            }
            (r, tr.into_events())
        });
        let procs: Vec<_> = (0..n)
            .map(|p| {
                s.spawn(move || {
                    let _guard = AbortOnPanic(ctx);
                    spawned();
                    let mut tr = trace::Tracer::new(&ctx.clock, id, Worker::Processor(p));
                    let r = dev.dispatch_share(p, &mut tr).and_then(|()| {
                        let mut exec = DeviceExecutor::new(dev, p);
                        processor::run_processor(&dev.queues, p, &mut exec, &mut tr, &|| ctx.aborted())
                    });
                    if r.is_err() {
                        ctx.abort();
                    }
                    (r, tr.into_events())
                })
            })
            .collect();
        (
            join(sched, id),
            join(sub, id),
            procs.into_iter().map(|h| join(h, id)).collect::<Vec<_>>(),
        )
    });

    let mut events = tracer.into_events();
    let (sched_result, ev) = sched?;
    events.extend(ev);
    let (sub_result, ev) = sub?;
    events.extend(ev);
    let mut executed = 0;
    let mut proc_fault = None;
    for p in procs {
        let (r, ev) = p?;
        events.extend(ev);
        match r {
            Ok(x) => executed += x,
            Err(e) => proc_fault = proc_fault.or(Some(e)),
        }
    }
    sub_result?;
    if let Some(e) = proc_fault {
        return Err(e);
    }
    let report = sched_result?;
    if ctx.aborted() {
        return Ok(None);
    }
    let stats = DeviceStats {
        launches: ctx.launches[id].load(std::sync::atomic::Ordering::Relaxed),
        workers_spawned: ctx.workers[id].load(std::sync::atomic::Ordering::Relaxed),
        initial_bound: dev.initial_bound,
        final_bound: report.final_bound,
        scheduled: report.scheduled,
        enqueued: dev.queues.enqueued(),
        executed,
        combine_tasks: dev.combine_count,
        signals_seen: dev.queues.signals_seen(),
        bookkeeping_bytes: dev.bookkeeping_bytes(),
    };
    Ok(Some(DeviceResult {
        output: dev.output(),
        gate: dev.gate.clone(),
        events,
        stats,
    }))
}

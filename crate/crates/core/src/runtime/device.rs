//! Per-device state and the device-specific halves of the three actors.

use std::sync::atomic::{AtomicBool, AtomicU32, AtomicUsize, Ordering};
use std::sync::Mutex;

use super::processor::TaskExecutor;
use super::queues::{Backoff, DeviceQueues, SUBSCRIBER_DOORBELL};
use super::scheduler::SchedulerHooks;
use super::task::{
    block_rows, combine_tasks, gemm0_cols, gemm1_cols, self_correct_task_bound, worst_case_gemm_tasks,
    TaskDescriptor, TaskId, TaskKind,
};
use super::trace::{EventKind, PassClock, TileCoord, Tracer};
use super::{RuntimeOptions, ScheduleMode};
use crate::error::RuntimeFault;
use crate::gate::{dispatch_manifest, DispatchManifest, GateOutput, Route};
use crate::layout::{Buffer, Coord, Round, WriteDescriptor};
use crate::pgas::{Fabric, FlagId, Payload, Signal};
use crate::tiled_blas::{combine_tile, fused_gemm_epilogue, Addend, MatMut, MatRef, RowAccumulator, Tile};
use crate::types::{Activation, Expert, ExpertWeights, GateWeights, MoeConfig, TokenMatrix};

/// Single-use barrier across devices that gives up when the pass aborts.
pub(crate) struct SpinBarrier {
    parties: usize,
    arrived: AtomicUsize,
}

impl SpinBarrier {
    pub fn new(parties: usize) -> Self {
        SpinBarrier {
            parties,
            arrived: AtomicUsize::new(0),
        }
    }

    /// `false` if the pass aborted while waiting.
    pub fn wait(&self, aborted: impl Fn() -> bool) -> bool {
        self.arrived.fetch_add(1, Ordering::AcqRel);
        let mut backoff = Backoff::new();
        while self.arrived.load(Ordering::Acquire) < self.parties {
            if aborted() {
                return false;
            }
            backoff.snooze();
        }
        true
    }
}

/// State shared by every device of one forward pass.
pub(crate) struct PassCtx<'a> {
    pub cfg: &'a MoeConfig,
    pub opts: &'a RuntimeOptions,
    pub fabric: Fabric,
    pub clock: PassClock,
    pub gate: &'a GateWeights,
    pub experts: &'a ExpertWeights,
    pub launches: Box<[AtomicUsize]>,
    pub workers: Box<[AtomicUsize]>,
    pub dispatch_barrier: SpinBarrier,
    pub flush_barrier: SpinBarrier,
    abort: AtomicBool,
    fault: Mutex<Option<RuntimeFault>>,
}

impl<'a> PassCtx<'a> {
    pub fn new(cfg: &'a MoeConfig, opts: &'a RuntimeOptions, gate: &'a GateWeights, experts: &'a ExpertWeights) -> Self {
        let p = cfg.devices;
        PassCtx {
            cfg,
            opts,
            fabric: Fabric::new(cfg),
            clock: PassClock::new(),
            gate,
            experts,
            launches: (0..p).map(|_| AtomicUsize::new(0)).collect(),
            workers: (0..p).map(|_| AtomicUsize::new(0)).collect(),
            dispatch_barrier: SpinBarrier::new(p),
            flush_barrier: SpinBarrier::new(p),
            abort: AtomicBool::new(false),
            fault: Mutex::new(None),
        }
    }

    pub fn aborted(&self) -> bool {
        self.abort.load(Ordering::Acquire)
    }

    /// Records the first fault of the pass and tells every worker to stop.
    pub fn fail(&self, fault: RuntimeFault) {
        let mut slot = self.fault.lock().unwrap_or_else(|e| e.into_inner());
        if slot.is_none() {
            *slot = Some(fault);
        }
        self.abort.store(true, Ordering::Release);
    }

    pub fn abort(&self) {
        self.abort.store(true, Ordering::Release);
    }

    pub fn take_fault(&self) -> Option<RuntimeFault> {
        self.fault.lock().unwrap_or_else(|e| e.into_inner()).take()
    }
}

/// Sets the abort flag if the owning thread unwinds.
pub(crate) struct AbortOnPanic<'a>(pub &'a PassCtx<'a>);

impl Drop for AbortOnPanic<'_> {
    fn drop(&mut self) {
        if std::thread::panicking() {
            self.0.abort();
        }
    }
}

/// `O` shared by the processors of one device.
struct AtomicRows<'a> {
    data: &'a [AtomicU32],
    cols: usize,
}

impl RowAccumulator for AtomicRows<'_> {
    fn accumulate(&mut self, row: usize, col0: usize, weight: f32, values: &[f32]) {
        // Combine tasks on one column block never overlap, so load/store is enough.
        let start = row * self.cols + col0;
        for (cell, v) in self.data[start..start + values.len()].iter().zip(values) {
            let cur = f32::from_bits(cell.load(Ordering::Relaxed));
            cell.store((cur + weight * v).to_bits(), Ordering::Relaxed);
        }
    }
}

pub(crate) struct DeviceState<'a> {
    pub id: usize,
    pub ctx: &'a PassCtx<'a>,
    pub shard: &'a TokenMatrix,
    pub gate: GateOutput,
    pub manifest: DispatchManifest,
    pub queues: DeviceQueues,
    pub initial_bound: usize,
    pub combine_count: usize,
    /// Combine flags this device will receive, derived from its own routing.
    pub expected_combines: Vec<FlagId>,
    local: &'a [Expert],
    /// GEMM0 output, `[P, E_local, C', D]`.
    scratch: Box<[AtomicU32]>,
    /// Finished GEMM0 tiles per `(source, expert, row block)`.
    gemm0_done: Box<[AtomicUsize]>,
    output: Box<[AtomicU32]>,
}

impl<'a> DeviceState<'a> {
    pub fn new(ctx: &'a PassCtx<'a>, id: usize, shard: &'a TokenMatrix, gate: GateOutput) -> Self {
        let cfg = ctx.cfg;
        let (p, el, cp) = (cfg.devices, cfg.local_experts(), cfg.padded_capacity());
        let row_blocks = cp.div_ceil(cfg.tile_m);
        let combine_count = combine_tasks(&gate.routing, cfg);
        let initial_bound = worst_case_gemm_tasks(cfg) + combine_count;
        let mut expected_combines = Vec::with_capacity(combine_count);
        for x in 0..cfg.experts {
            let n = gate.routing.occupancy(x);
            for row_block in 0..n.div_ceil(cfg.tile_m) {
                for col_block in 0..gemm1_cols(cfg) {
                    expected_combines.push(FlagId::Combine {
                        peer: cfg.owner(x),
                        expert: x % el,
                        row_block,
                        col_block,
                    });
                }
            }
        }
        DeviceState {
            id,
            ctx,
            shard,
            manifest: dispatch_manifest(&gate.routing, cfg),
            gate,
            queues: DeviceQueues::new(id, ctx.opts.processors, initial_bound, initial_bound),
            initial_bound,
            combine_count,
            expected_combines,
            local: ctx.experts.local(cfg, id),
            scratch: (0..p * el * cp * cfg.ffn).map(|_| AtomicU32::new(0)).collect(),
            gemm0_done: (0..p * el * row_blocks).map(|_| AtomicUsize::new(0)).collect(),
            output: (0..cfg.tokens * cfg.hidden).map(|_| AtomicU32::new(0)).collect(),
        }
    }

    fn cfg(&self) -> &MoeConfig {
        self.ctx.cfg
    }

    pub fn output(&self) -> TokenMatrix {
        let data = self.output.iter().map(|c| f32::from_bits(c.load(Ordering::Relaxed))).collect();
        TokenMatrix::from_vec(self.cfg().tokens, self.cfg().hidden, data).expect("output buffer shape")
    }

    /// Bytes of per-device runtime bookkeeping beyond the symmetric heap.
    pub fn bookkeeping_bytes(&self) -> usize {
        self.queues.capacity() * std::mem::size_of::<TaskDescriptor>()
            + self.scratch.len() * 4
            + self.gemm0_done.len() * std::mem::size_of::<usize>()
    }

    /// Sends every `processors`-th packet starting at `processor`.
    pub fn dispatch_share(&self, processor: usize, tracer: &mut Tracer<'_>) -> Result<(), RuntimeFault> {
        let cfg = self.cfg();
        let fabric = &self.ctx.fabric;
        let mut buf = Vec::new();
        let packets = self.manifest.iter().flatten().enumerate();
        for (_, packet) in packets.filter(|(j, _)| j % self.ctx.opts.processors == processor) {
            let dst = cfg.owner(packet.expert);
            let e = packet.local_expert;
            let rows = packet.occupied();
            buf.clear();
            for &t in &packet.tokens {
                buf.extend_from_slice(self.shard.row(t));
            }
            let payload = if rows == 0 {
                Payload::empty()
            } else {
                Payload::rows(&buf, rows, cfg.hidden)
            };
            if rows > 0 {
                let stage = WriteDescriptor {
                    source: self.id,
                    target: self.id,
                    coord: Coord::new(dst, Round::Dispatch, Buffer::Outgoing, e, 0),
                };
                fabric.write_rows(&stage, &payload)?;
            }
            let put = WriteDescriptor {
                source: self.id,
                target: dst,
                coord: Coord::new(self.id, Round::Dispatch, Buffer::Incoming, e, 0),
            };
            let signal = Signal {
                value: rows,
                round: Round::Dispatch,
            };
            fabric.put_with_signal(&put, &payload, FlagId::Dispatch { peer: self.id, expert: e }, signal)?;
            let ev = tracer.emit(EventKind::DispatchPut);
            ev.peer = Some(dst);
            ev.rows = Some(rows);
            ev.tile = Some(TileCoord {
                source: self.id,
                expert: e,
                row_block: 0,
                col_block: 0,
            });
        }
        Ok(())
    }

    /// Puts a finished GEMM1 tile back to the device that sent its tokens.
    fn send_combine(&self, task: &TaskDescriptor, tile: Tile, data: &[f32], tracer: &mut Tracer<'_>) -> Result<(), RuntimeFault> {
        let cfg = self.cfg();
        let put = WriteDescriptor {
            source: self.id,
            target: task.source,
            coord: Coord::new(self.id, Round::Combine, Buffer::Incoming, task.expert, task.row_block * cfg.tile_m),
        };
        let payload = Payload {
            rows: task.rows,
            cols: tile.cols,
            col0: tile.col0,
            data,
        };
        let flag = FlagId::Combine {
            peer: self.id,
            expert: task.expert,
            row_block: task.row_block,
            col_block: task.col_block,
        };
        let signal = Signal {
            value: task.rows,
            round: Round::Combine,
        };
        self.ctx.fabric.put_with_signal(&put, &payload, flag, signal)?;
        let ev = tracer.emit(EventKind::CombinePut);
        ev.peer = Some(task.source);
        ev.rows = Some(task.rows);
        ev.tile = Some(TileCoord::from(task));
        Ok(())
    }

    fn decode_dispatch(&self, peer: usize, expert: usize, rows: usize, tracer: &mut Tracer<'_>) -> Result<(), RuntimeFault> {
        let cfg = self.cfg();
        let q = &self.queues;
        let bound = self_correct_task_bound(q.task_bound(), rows, q.enqueued(), cfg, self.id)?;
        q.set_task_bound(bound);
        for rb in 0..rows.div_ceil(cfg.tile_m) {
            let n = block_rows(rows, cfg.tile_m, rb);
            for cb in 0..gemm0_cols(cfg) {
                let t = TaskDescriptor::gemm0(peer, expert, rb, cb, n, cfg.activation);
                let id = q.push(SUBSCRIBER_DOORBELL, t)?;
                tracer.task(EventKind::Enqueue, id, &t);
            }
        }
        q.record_signal();
        Ok(())
    }

    /// Subscriber loop: turns visible signals into tasks until interrupted.
    pub fn run_subscriber(&self, tracer: &mut Tracer<'_>) -> Result<(), RuntimeFault> {
        tracer.emit(EventKind::WorkerStart);
        let cfg = self.cfg();
        let fabric = &self.ctx.fabric;
        let el = cfg.local_experts();
        let total = cfg.devices * el;
        let sequential = self.ctx.opts.mode == ScheduleMode::Sequential;
        let mut dispatch_seen = vec![false; total];
        let mut dispatch_left = total;
        let mut held = Vec::new();
        let mut released = !sequential;
        let mut combine_seen = vec![false; self.expected_combines.len()];
        let mut backoff = Backoff::new();
        let result = loop {
            if self.queues.subscriber_interrupted() || self.ctx.aborted() {
                break Ok(());
            }
            let mut progress = false;
            for (idx, seen) in dispatch_seen.iter_mut().enumerate().filter(|(_, s)| !**s) {
                let (peer, expert) = (idx / el, idx % el);
                if let Some(sig) = fabric.poll_flag(self.id, FlagId::Dispatch { peer, expert }) {
                    *seen = true;
                    dispatch_left -= 1;
                    progress = true;
                    let ev = tracer.emit(EventKind::DispatchSignal);
                    ev.peer = Some(peer);
                    ev.rows = Some(sig.value);
                    ev.tile = Some(TileCoord {
                        source: peer,
                        expert,
                        row_block: 0,
                        col_block: 0,
                    });
                    held.push((peer, expert, sig.value));
                }
            }
            if !released && dispatch_left == 0 {
                tracer.emit(EventKind::Barrier);
                if !self.ctx.dispatch_barrier.wait(|| self.ctx.aborted()) {
                    break Ok(());
                }
                released = true;
            }
            if released {
                for (peer, expert, rows) in held.drain(..) {
                    self.decode_dispatch(peer, expert, rows, tracer)?;
                }
            }
            for (flag, seen) in self.expected_combines.iter().zip(combine_seen.iter_mut()).filter(|(_, s)| !**s) {
                let Some(sig) = fabric.poll_flag(self.id, *flag) else {
                    continue;
                };
                let FlagId::Combine {
                    peer,
                    expert,
                    row_block,
                    col_block,
                } = *flag
                else {
                    unreachable!("combine flag list holds combine flags")
                };
                *seen = true;
                progress = true;
                let t = TaskDescriptor::combine(peer, expert, row_block, col_block, sig.value);
                let ev = tracer.emit(EventKind::CombineSignal);
                ev.peer = Some(peer);
                ev.rows = Some(sig.value);
                ev.tile = Some(TileCoord::from(&t));
                let id = self.queues.push(SUBSCRIBER_DOORBELL, t)?;
                tracer.task(EventKind::Enqueue, id, &t);
            }
            if progress {
                backoff.reset();
            } else {
                backoff.snooze();
            }
        };
        tracer.emit(EventKind::WorkerExit);
        result
    }
}

/// Executes GEMM0, GEMM1 and combine tiles for one processor.
pub(crate) struct DeviceExecutor<'s, 'a> {
    pub dev: &'s DeviceState<'a>,
    pub processor: usize,
    input: Vec<f32>,
    wide: Vec<f32>,
    tile: Vec<f32>,
}

impl<'s, 'a> DeviceExecutor<'s, 'a> {
    pub fn new(dev: &'s DeviceState<'a>, processor: usize) -> Self {
        DeviceExecutor {
            dev,
            processor,
            input: Vec::new(),
            wide: Vec::new(),
            tile: Vec::new(),
        }
    }

    fn scratch_row(&self, source: usize, expert: usize, slot: usize) -> usize {
        let cfg = self.dev.cfg();
        ((source * cfg.local_experts() + expert) * cfg.padded_capacity() + slot) * cfg.ffn
    }

    fn gemm0(&mut self, task: &TaskDescriptor, tracer: &mut Tracer<'_>) -> Result<(), RuntimeFault> {
        let dev = self.dev;
        let cfg = dev.cfg();
        let (h, d) = (cfg.hidden, cfg.ffn);
        let rows = task.rows;
        let slot0 = task.row_block * cfg.tile_m;
        let coord = Coord::new(task.source, Round::Dispatch, Buffer::Incoming, task.expert, slot0);
        dev.ctx.fabric.read_rows(dev.id, &coord, rows, 0, h, &mut self.input);
        let w = &dev.local[task.expert];
        let tile = Tile::at(0, task.col_block, cfg.tile_m, cfg.tile_n, rows, d);
        self.wide.resize(rows * d, 0.0);
        fused_gemm_epilogue(
            MatRef::new(&self.input, rows, h),
            MatRef::from(&w.w1),
            Addend::Bias(&w.b1),
            task.activation,
            tile,
            &mut MatMut::new(&mut self.wide, rows, d),
        )?;
        for r in 0..rows {
            let base = self.scratch_row(task.source, task.expert, slot0 + r);
            for c in tile.col0..tile.col0 + tile.cols {
                dev.scratch[base + c].store(self.wide[r * d + c].to_bits(), Ordering::Relaxed);
            }
        }
        let row_blocks = cfg.padded_capacity().div_ceil(cfg.tile_m);
        let counter = (task.source * cfg.local_experts() + task.expert) * row_blocks + task.row_block;
        // AcqRel: whoever finishes the row block sees every other tile's stores.
        let done = dev.gemm0_done[counter].fetch_add(1, Ordering::AcqRel) + 1;
        if done == gemm0_cols(cfg) {
            for cb in 0..gemm1_cols(cfg) {
                let t = TaskDescriptor::gemm1(task.source, task.expert, task.row_block, cb, rows);
                let id = dev.queues.push(1 + self.processor, t)?;
                tracer.task(EventKind::Enqueue, id, &t);
            }
        }
        Ok(())
    }

    fn gemm1(&mut self, task: &TaskDescriptor, tracer: &mut Tracer<'_>) -> Result<(), RuntimeFault> {
        let dev = self.dev;
        let cfg = dev.cfg();
        let (h, d) = (cfg.hidden, cfg.ffn);
        let rows = task.rows;
        let slot0 = task.row_block * cfg.tile_m;
        self.input.clear();
        for r in 0..rows {
            let base = self.scratch_row(task.source, task.expert, slot0 + r);
            self.input
                .extend(dev.scratch[base..base + d].iter().map(|c| f32::from_bits(c.load(Ordering::Relaxed))));
        }
        let w = &dev.local[task.expert];
        let tile = Tile::at(0, task.col_block, cfg.tile_m, cfg.tile_n, rows, h);
        self.wide.resize(rows * h, 0.0);
        fused_gemm_epilogue(
            MatRef::new(&self.input, rows, d),
            MatRef::from(&w.w2),
            Addend::Bias(&w.b2),
            Activation::Identity,
            tile,
            &mut MatMut::new(&mut self.wide, rows, h),
        )?;
        self.tile.clear();
        for r in 0..rows {
            self.tile.extend_from_slice(&self.wide[r * h + tile.col0..r * h + tile.col0 + tile.cols]);
        }
        let stage = WriteDescriptor {
            source: dev.id,
            target: dev.id,
            coord: Coord::new(task.source, Round::Combine, Buffer::Outgoing, task.expert, slot0),
        };
        let payload = Payload {
            rows,
            cols: tile.cols,
            col0: tile.col0,
            data: &self.tile,
        };
        dev.ctx.fabric.write_rows(&stage, &payload)?;
        if dev.ctx.opts.mode == ScheduleMode::Overlapped {
            dev.send_combine(task, tile, &self.tile, tracer)?;
        }
        Ok(())
    }

    fn combine(&mut self, task: &TaskDescriptor) -> Result<(), RuntimeFault> {
        let dev = self.dev;
        let cfg = dev.cfg();
        let slot0 = task.row_block * cfg.tile_m;
        let tile = Tile::at(0, task.col_block, cfg.tile_m, cfg.tile_n, task.rows, cfg.hidden);
        let coord = Coord::new(task.source, Round::Combine, Buffer::Incoming, task.expert, slot0);
        dev.ctx
            .fabric
            .read_rows(dev.id, &coord, task.rows, tile.col0, tile.cols, &mut self.input);
        let global = task.source * cfg.local_experts() + task.expert;
        let routes: Vec<Option<Route>> = (0..task.rows).map(|i| dev.gate.routing.get(global, slot0 + i)).collect();
        let mut out = AtomicRows {
            data: &dev.output,
            cols: cfg.hidden,
        };
        combine_tile(MatRef::new(&self.input, task.rows, tile.cols), &routes, tile.col0, &mut out)?;
        Ok(())
    }
}

impl TaskExecutor for DeviceExecutor<'_, '_> {
    fn execute(&mut self, _id: TaskId, task: &TaskDescriptor, tracer: &mut Tracer<'_>) -> Result<(), RuntimeFault> {
        match task.kind {
            TaskKind::Gemm0 => self.gemm0(task, tracer),
            TaskKind::Gemm1 => self.gemm1(task, tracer),
            TaskKind::Combine => self.combine(task),
        }
    }
}

/// Scheduler policy for a device: combine exclusivity per output column
/// block, and in sequential mode a barrier plus flush before combines.
pub(crate) struct DeviceHooks<'s, 'a> {
    pub dev: &'s DeviceState<'a>,
    gemm_done: usize,
    staged: Vec<TaskDescriptor>,
    flushed: bool,
}

impl<'s, 'a> DeviceHooks<'s, 'a> {
    pub fn new(dev: &'s DeviceState<'a>) -> Self {
        DeviceHooks {
            dev,
            gemm_done: 0,
            staged: Vec::new(),
            flushed: dev.ctx.opts.mode == ScheduleMode::Overlapped,
        }
    }

    fn all_signals(&self, q: &DeviceQueues) -> bool {
        let cfg = self.dev.cfg();
        q.signals_seen() == cfg.devices * cfg.local_experts()
    }
}

impl SchedulerHooks for DeviceHooks<'_, '_> {
    fn exclusive_key(&self, task: &TaskDescriptor) -> Option<usize> {
        (task.kind == TaskKind::Combine).then_some(task.col_block)
    }

    fn may_finish(&self, q: &DeviceQueues) -> bool {
        self.all_signals(q) && self.flushed
    }

    fn on_complete(&mut self, _id: TaskId, task: &TaskDescriptor, _tracer: &mut Tracer<'_>) -> Result<(), RuntimeFault> {
        if task.kind != TaskKind::Combine {
            self.gemm_done += 1;
        }
        if task.kind == TaskKind::Gemm1 && !self.flushed {
            self.staged.push(*task);
        }
        Ok(())
    }

    fn tick(&mut self, q: &DeviceQueues, tracer: &mut Tracer<'_>) -> Result<bool, RuntimeFault> {
        if self.flushed || !self.all_signals(q) || self.gemm_done + self.dev.combine_count != q.task_bound() {
            return Ok(false);
        }
        tracer.emit(EventKind::Barrier);
        if !self.dev.ctx.flush_barrier.wait(|| self.dev.ctx.aborted()) {
            return Ok(false);
        }
        let cfg = self.dev.cfg();
        let mut data = Vec::new();
        for task in std::mem::take(&mut self.staged) {
            let tile = Tile::at(0, task.col_block, cfg.tile_m, cfg.tile_n, task.rows, cfg.hidden);
            let coord = Coord::new(task.source, Round::Combine, Buffer::Outgoing, task.expert, task.row_block * cfg.tile_m);
            self.dev
                .ctx
                .fabric
                .read_rows(self.dev.id, &coord, task.rows, tile.col0, tile.cols, &mut data);
            self.dev.send_combine(&task, tile, &data, tracer)?;
        }
        self.flushed = true;
        Ok(true)
    }

    fn aborted(&self) -> bool {
        self.dev.ctx.aborted()
    }
}

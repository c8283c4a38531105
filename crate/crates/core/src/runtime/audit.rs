//! Post-hoc checks of a forward pass against its trace.

use std::collections::HashMap;

use serde::Serialize;

use super::task::{combine_tasks, packet_tasks};
use super::trace::{EventKind, TileCoord, Worker};
use super::{ForwardOutput, TaskKind};
use crate::types::MoeConfig;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AuditReport {
    /// Every task enqueued, assigned, started and finished exactly once.
    pub exactly_once: bool,
    /// Tasks scheduled = final bound = count recomputed from the gate outputs.
    pub bound_exact: bool,
    /// DispatchPut ≺ GEMM0 ≺ GEMM1 ≺ CombinePut ≺ Combine for every tile.
    pub dependencies: bool,
    /// No sweep left a processor idle while an assignable task waited.
    pub work_conserving: bool,
    /// One launch and `N + 2` workers per device.
    pub single_launch: bool,
    pub problems: Vec<String>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.exactly_once && self.bound_exact && self.dependencies && self.work_conserving && self.single_launch
    }
}

/// Tasks device `device` must run, recomputed from every device's routing.
pub fn expected_tasks(out: &ForwardOutput, cfg: &MoeConfig, device: usize) -> usize {
    let el = cfg.local_experts();
    let gemm: usize = out
        .gates
        .iter()
        .flat_map(|g| (0..el).map(move |e| packet_tasks(g.routing.occupancy(device * el + e), cfg)))
        .sum();
    gemm + combine_tasks(&out.gates[device].routing, cfg)
}

pub fn audit(out: &ForwardOutput, cfg: &MoeConfig, processors: usize) -> AuditReport {
    let mut problems = Vec::new();
    let p = cfg.devices;

    // (device, task) → [enqueue, assign, start, end] counts.
    let mut counts: HashMap<(usize, usize), [usize; 4]> = HashMap::new();
    for e in &out.trace {
        let slot = match e.event {
            EventKind::Enqueue => 0,
            EventKind::Assign => 1,
            EventKind::TaskStart => 2,
            EventKind::TaskEnd => 3,
            _ => continue,
        };
        if let Some(t) = e.task {
            counts.entry((e.device, t)).or_default()[slot] += 1;
        }
    }
    let mut exactly_once = true;
    for (key, c) in &counts {
        if *c != [1, 1, 1, 1] {
            exactly_once = false;
            problems.push(format!("task {key:?} lifecycle counts {c:?}"));
        }
    }
    for (d, stats) in out.devices.iter().enumerate() {
        let seen = counts.keys().filter(|(dev, _)| *dev == d).count();
        if seen != stats.enqueued || stats.executed != stats.enqueued {
            exactly_once = false;
            problems.push(format!(
                "device {d}: {seen} traced tasks, {} enqueued, {} executed",
                stats.enqueued, stats.executed
            ));
        }
    }

    let mut bound_exact = true;
    for (d, stats) in out.devices.iter().enumerate() {
        let want = expected_tasks(out, cfg, d);
        if stats.scheduled != stats.final_bound || stats.final_bound != want {
            bound_exact = false;
            problems.push(format!(
                "device {d}: scheduled {} bound {} recount {want}",
                stats.scheduled, stats.final_bound
            ));
        }
    }

    let dependencies = check_dependencies(out, &mut problems);

    let idle_with_work = out
        .trace
        .iter()
        .filter(|e| e.event == EventKind::Sweep && e.idle.unwrap_or(0) > 0 && e.assignable.unwrap_or(0) > 0)
        .count();
    if idle_with_work > 0 {
        problems.push(format!("{idle_with_work} sweeps idle with assignable work"));
    }

    let mut single_launch = out.devices.len() == p;
    for d in 0..p {
        let launches = out.trace.iter().filter(|e| e.device == d && e.event == EventKind::Launch).count();
        let starts = out
            .trace
            .iter()
            .filter(|e| e.device == d && e.event == EventKind::WorkerStart)
            .count();
        let stats = out.devices.get(d).cloned().unwrap_or_default();
        if launches != 1 || stats.launches != 1 || starts != processors + 2 || stats.workers_spawned != processors + 2 {
            single_launch = false;
            problems.push(format!(
                "device {d}: {launches} launch events, {} launches, {starts} worker starts, {} spawned",
                stats.launches, stats.workers_spawned
            ));
        }
    }

    AuditReport {
        exactly_once,
        bound_exact,
        dependencies,
        work_conserving: idle_with_work == 0,
        single_launch,
        problems,
    }
}

fn check_dependencies(out: &ForwardOutput, problems: &mut Vec<String>) -> bool {
    // Keys are (executing device, tile); tile.source is the token owner for
    // GEMM tiles and the expert owner for combine tiles.
    let mut dispatch_put: HashMap<(usize, usize, usize), u64> = HashMap::new();
    let mut gemm0_start: HashMap<(usize, usize, usize), u64> = HashMap::new();
    let mut gemm0_end: HashMap<(usize, usize, usize, usize), u64> = HashMap::new();
    let mut gemm1_start: HashMap<(usize, usize, usize, usize), u64> = HashMap::new();
    let mut gemm1_tile_start: HashMap<(usize, TileCoord), u64> = HashMap::new();
    let mut combine_put: HashMap<(usize, TileCoord), u64> = HashMap::new();
    let mut combine_start: Vec<(usize, TileCoord, u64)> = Vec::new();

    for e in &out.trace {
        let Some(tile) = e.tile else { continue };
        match (e.event, e.kind) {
            (EventKind::DispatchPut, _) => {
                dispatch_put.insert((e.peer.unwrap_or(usize::MAX), e.device, tile.expert), e.seq);
            }
            (EventKind::TaskStart, Some(TaskKind::Gemm0)) => {
                let k = (e.device, tile.source, tile.expert);
                let v = gemm0_start.entry(k).or_insert(e.seq);
                *v = (*v).min(e.seq);
            }
            (EventKind::TaskEnd, Some(TaskKind::Gemm0)) => {
                let k = (e.device, tile.source, tile.expert, tile.row_block);
                let v = gemm0_end.entry(k).or_insert(e.seq);
                *v = (*v).max(e.seq);
            }
            (EventKind::TaskStart, Some(TaskKind::Gemm1)) => {
                let k = (e.device, tile.source, tile.expert, tile.row_block);
                let v = gemm1_start.entry(k).or_insert(e.seq);
                *v = (*v).min(e.seq);
                gemm1_tile_start.insert((e.device, tile), e.seq);
            }
            (EventKind::CombinePut, _) => {
                combine_put.insert((e.device, tile), e.seq);
            }
            (EventKind::TaskStart, Some(TaskKind::Combine)) => combine_start.push((e.device, tile, e.seq)),
            _ => {}
        }
    }

    let before = problems.len();
    for (&(dev, src, e), &start) in &gemm0_start {
        match dispatch_put.get(&(dev, src, e)) {
            Some(&put) if put < start => {}
            other => problems.push(format!("gemm0 on {dev} from {src}/{e} at {start} vs dispatch put {other:?}")),
        }
    }
    for (&(dev, src, e, rb), &start) in &gemm1_start {
        match gemm0_end.get(&(dev, src, e, rb)) {
            Some(&end) if end < start => {}
            other => problems.push(format!("gemm1 {dev}/{src}/{e}/{rb} at {start} vs last gemm0 end {other:?}")),
        }
    }
    for (&(dev, tile), &put) in &combine_put {
        // Overlapped puts are issued inside the GEMM1 task, sequential ones after it.
        match gemm1_tile_start.get(&(dev, tile)) {
            Some(&start) if start < put => {}
            other => problems.push(format!("combine put {dev}/{tile:?} at {put} vs gemm1 start {other:?}")),
        }
    }
    for &(origin, tile, start) in &combine_start {
        let key = (
            tile.source,
            TileCoord {
                source: origin,
                ..tile
            },
        );
        match combine_put.get(&key) {
            Some(&put) if put < start => {}
            other => problems.push(format!("combine on {origin} of {tile:?} at {start} vs put {other:?}")),
        }
    }
    problems.len() == before
}

/// Busy time of processors over the pass, as a fraction of `processors × makespan`.
pub fn busy_fraction(out: &ForwardOutput) -> f64 {
    let mut open: HashMap<(usize, Worker), u64> = HashMap::new();
    let mut busy = 0u64;
    let mut workers = std::collections::HashSet::new();
    for e in &out.trace {
        if let Worker::Processor(_) = e.worker {
            workers.insert((e.device, e.worker));
            match e.event {
                EventKind::TaskStart => {
                    open.insert((e.device, e.worker), e.time_ns);
                }
                EventKind::TaskEnd => {
                    if let Some(t0) = open.remove(&(e.device, e.worker)) {
                        busy += e.time_ns.saturating_sub(t0);
                    }
                }
                _ => {}
            }
        }
    }
    let span = out.trace.last().map_or(0, |e| e.time_ns);
    if span == 0 || workers.is_empty() {
        return 0.0;
    }
    busy as f64 / (span as f64 * workers.len() as f64)
}

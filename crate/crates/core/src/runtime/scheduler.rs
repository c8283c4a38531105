//! Scheduler actor: drains doorbells, keeps the ready queue of idle
//! processors and hands out tasks until `scheduled` reaches the task bound.

use std::collections::{HashSet, VecDeque};
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use super::queues::{Backoff, DeviceQueues};
use super::task::{TaskDescriptor, TaskId};
use super::trace::{EventKind, Tracer};
use crate::error::RuntimeFault;

/// Device-specific policy plugged into the generic scheduling loop.
pub trait SchedulerHooks {
    /// Tasks that share a key are never in flight at the same time.
    fn exclusive_key(&self, _task: &TaskDescriptor) -> Option<usize> {
        None
    }

    /// Extra condition, on top of `scheduled == bound`, for shutting down.
    fn may_finish(&self, _queues: &DeviceQueues) -> bool {
        true
    }

    fn on_complete(&mut self, _id: TaskId, _task: &TaskDescriptor, _tracer: &mut Tracer<'_>) -> Result<(), RuntimeFault> {
        Ok(())
    }

    /// Runs once per loop iteration; `true` if it made progress.
    fn tick(&mut self, _queues: &DeviceQueues, _tracer: &mut Tracer<'_>) -> Result<bool, RuntimeFault> {
        Ok(false)
    }

    /// Another worker has faulted; stop without finishing.
    fn aborted(&self) -> bool {
        false
    }
}

/// Hooks with no extra policy.
pub struct PlainHooks;

impl SchedulerHooks for PlainHooks {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SchedulerReport {
    pub scheduled: usize,
    pub final_bound: usize,
}

struct State {
    rq: VecDeque<usize>,
    in_flight: Vec<Option<(TaskId, Option<usize>)>>,
    busy_keys: HashSet<usize>,
    pending: VecDeque<TaskId>,
    cursor: usize,
    scheduled: usize,
}

impl State {
    fn dump(&self, q: &DeviceQueues) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "device {}: scheduled {} bound {} enqueued {} rung {} signals {} pending {:?} ready {:?} in_flight {:?}",
            q.device(),
            self.scheduled,
            q.task_bound(),
            q.enqueued(),
            q.rung(),
            q.signals_seen(),
            self.pending,
            self.rq,
            self.in_flight
        );
        s
    }
}

pub fn run_scheduler<H: SchedulerHooks>(
    q: &DeviceQueues,
    hooks: &mut H,
    tracer: &mut Tracer<'_>,
    stall_timeout: Duration,
) -> Result<SchedulerReport, RuntimeFault> {
    tracer.emit(EventKind::WorkerStart);
    let n = q.processors();
    let mut st = State {
        rq: (0..n).collect(),
        in_flight: vec![None; n],
        busy_keys: HashSet::new(),
        pending: VecDeque::new(),
        cursor: 0,
        scheduled: 0,
    };
    let result = schedule(q, hooks, tracer, stall_timeout, &mut st);
    q.interrupt_all();
    tracer.emit(EventKind::Interrupt).rows = Some(st.scheduled);
    tracer.emit(EventKind::WorkerExit);
    result.map(|()| SchedulerReport {
        scheduled: st.scheduled,
        final_bound: q.task_bound(),
    })
}

fn schedule<H: SchedulerHooks>(
    q: &DeviceQueues,
    hooks: &mut H,
    tracer: &mut Tracer<'_>,
    stall_timeout: Duration,
    st: &mut State,
) -> Result<(), RuntimeFault> {
    let mut backoff = Backoff::new();
    let mut watch = (tracer.progress(), Instant::now());
    loop {
        if hooks.aborted() {
            return Ok(());
        }
        let mut changed = false;

        // Repopulate rQ with processors that finished.
        for p in 0..st.in_flight.len() {
            if q.take_ready(p) {
                if let Some((id, key)) = st.in_flight[p].take() {
                    if let Some(k) = key {
                        st.busy_keys.remove(&k);
                    }
                    let task = *q.task(id).expect("completed task was published");
                    hooks.on_complete(id, &task, tracer)?;
                }
                st.rq.push_back(p);
                changed = true;
            }
        }

        // Sweep doorbells.
        if q.rung() > st.cursor {
            while let Some(_task) = q.task(st.cursor) {
                st.pending.push_back(st.cursor);
                st.cursor += 1;
                changed = true;
            }
        }

        // Assign in queue order, skipping tasks whose exclusive key is held.
        let mut i = 0;
        while !st.rq.is_empty() && i < st.pending.len() {
            let id = st.pending[i];
            let task = *q.task(id).expect("pending task was published");
            let key = hooks.exclusive_key(&task);
            if let Some(k) = key {
                if !st.busy_keys.insert(k) {
                    i += 1;
                    continue;
                }
            }
            st.pending.remove(i);
            let p = st.rq.pop_front().expect("rq non-empty");
            st.in_flight[p] = Some((id, key));
            tracer.task(EventKind::Assign, id, &task).peer = Some(p);
            q.assign(p, id);
            st.scheduled += 1;
            changed = true;
        }

        if changed {
            let assignable = st
                .pending
                .iter()
                .filter(|&&id| {
                    let t = q.task(id).expect("pending task was published");
                    hooks.exclusive_key(t).is_none_or(|k| !st.busy_keys.contains(&k))
                })
                .count();
            let e = tracer.emit(EventKind::Sweep);
            e.idle = Some(st.rq.len());
            e.assignable = Some(assignable);
        }

        if hooks.tick(q, tracer)? {
            changed = true;
        }

        let bound = q.task_bound();
        if st.scheduled > bound {
            return Err(RuntimeFault::BoundUnderflow {
                device: q.device(),
                bound,
                enqueued: st.scheduled,
            });
        }
        if st.scheduled == bound && st.pending.is_empty() && hooks.may_finish(q) {
            return Ok(());
        }

        if changed {
            backoff.reset();
            watch = (tracer.progress(), Instant::now());
        } else {
            let progress = tracer.progress();
            if progress != watch.0 {
                watch = (progress, Instant::now());
            } else if watch.1.elapsed() > stall_timeout {
                return Err(RuntimeFault::Deadlock {
                    stalled_ms: watch.1.elapsed().as_millis(),
                    dump: st.dump(q),
                });
            }
            backoff.snooze();
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::runtime::processor::{run_processor, TaskExecutor};
    use crate::runtime::queues::SUBSCRIBER_DOORBELL;
    use crate::runtime::trace::{PassClock, TraceEvent, Worker};
    use crate::types::Activation;

    fn t(i: usize) -> TaskDescriptor {
        TaskDescriptor::gemm0(0, 0, i, 0, 1, Activation::Relu)
    }

    struct Sleepy {
        durations: Vec<u64>,
        order: Vec<usize>,
    }

    impl TaskExecutor for Sleepy {
        fn execute(&mut self, _id: TaskId, task: &TaskDescriptor, _tracer: &mut Tracer<'_>) -> Result<(), RuntimeFault> {
            self.order.push(task.row_block);
            if let Some(&us) = self.durations.get(task.row_block) {
                std::thread::sleep(Duration::from_micros(us));
            }
            Ok(())
        }
    }

    fn run(processors: usize, tasks: usize, durations: Vec<u64>) -> (Vec<TraceEvent>, Vec<Vec<usize>>, SchedulerReport) {
        let clock = PassClock::new();
        let q = DeviceQueues::new(0, processors, tasks, tasks);
        for i in 0..tasks {
            q.push(SUBSCRIBER_DOORBELL, t(i)).unwrap();
        }
        std::thread::scope(|s| {
            let sched = s.spawn(|| {
                let mut tr = Tracer::new(&clock, 0, Worker::Scheduler);
                let rep = run_scheduler(&q, &mut PlainHooks, &mut tr, Duration::from_secs(10)).unwrap();
                (tr.into_events(), rep)
            });
            let procs: Vec<_> = (0..processors)
                .map(|p| {
                    let (q, clock, durations) = (&q, &clock, durations.clone());
                    s.spawn(move || {
                        let mut tr = Tracer::new(clock, 0, Worker::Processor(p));
                        let mut ex = Sleepy {
                            durations,
                            order: Vec::new(),
                        };
                        run_processor(q, p, &mut ex, &mut tr, &|| false).unwrap();
                        (tr.into_events(), ex.order)
                    })
                })
                .collect();
            let (mut events, rep) = sched.join().unwrap();
            let mut orders = Vec::new();
            for h in procs {
                let (ev, order) = h.join().unwrap();
                events.extend(ev);
                orders.push(order);
            }
            events.sort_by_key(|e| e.seq);
            (events, orders, rep)
        })
    }

    #[test]
    fn single_processor_preserves_order() {
        let (events, orders, rep) = run(1, 10, Vec::new());
        assert_eq!(orders[0], (0..10).collect::<Vec<_>>());
        assert_eq!(rep, SchedulerReport { scheduled: 10, final_bound: 10 });
        let assigned: Vec<usize> = events.iter().filter(|e| e.event == EventKind::Assign).map(|e| e.task.unwrap()).collect();
        assert_eq!(assigned, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn random_durations_never_idle_while_pending() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let durations: Vec<u64> = (0..100).map(|_| rng.random_range(0..300)).collect();
        let (events, orders, rep) = run(4, 100, durations);
        assert_eq!(rep.scheduled, 100);
        let mut all: Vec<usize> = orders.concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        let violations = events
            .iter()
            .filter(|e| e.event == EventKind::Sweep && e.idle > Some(0) && e.assignable > Some(0))
            .count();
        assert_eq!(violations, 0);
    }

    #[test]
    fn raised_bound_is_honoured() {
        // The scheduler must re-read the bound: it starts at 3, a producer raises
        // it to 6 and pushes three more tasks while the first three run.
        let clock = PassClock::new();
        let q = DeviceQueues::new(0, 1, 6, 3);
        for i in 0..3 {
            q.push(SUBSCRIBER_DOORBELL, t(i)).unwrap();
        }
        let executed = AtomicUsize::new(0);
        struct Gate<'a> {
            q: &'a DeviceQueues,
            executed: &'a AtomicUsize,
        }
        impl TaskExecutor for Gate<'_> {
            fn execute(&mut self, _id: TaskId, task: &TaskDescriptor, _tracer: &mut Tracer<'_>) -> Result<(), RuntimeFault> {
                if task.row_block == 0 {
                    self.q.set_task_bound(6);
                    for i in 3..6 {
                        self.q.push(1, t(i)).unwrap();
                    }
                }
                self.executed.fetch_add(1, Ordering::SeqCst);
                Ok(())
            }
        }
        let rep = std::thread::scope(|s| {
            let h = s.spawn(|| {
                let mut tr = Tracer::new(&clock, 0, Worker::Scheduler);
                run_scheduler(&q, &mut PlainHooks, &mut tr, Duration::from_secs(10)).unwrap()
            });
            s.spawn(|| {
                let mut tr = Tracer::new(&clock, 0, Worker::Processor(0));
                let mut g = Gate { q: &q, executed: &executed };
                run_processor(&q, 0, &mut g, &mut tr, &|| false).unwrap();
            });
            h.join().unwrap()
        });
        assert_eq!(rep.scheduled, 6);
        assert_eq!(executed.load(Ordering::SeqCst), 6);
    }

    #[test]
    fn exclusive_keys_serialize() {
        struct Keyed;
        impl SchedulerHooks for Keyed {
            fn exclusive_key(&self, _task: &TaskDescriptor) -> Option<usize> {
                Some(0)
            }
        }
        let clock = PassClock::new();
        let q = DeviceQueues::new(0, 3, 12, 12);
        for i in 0..12 {
            q.push(SUBSCRIBER_DOORBELL, t(i)).unwrap();
        }
        let live = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        struct Track<'a>(&'a AtomicUsize, &'a AtomicUsize);
        impl TaskExecutor for Track<'_> {
            fn execute(&mut self, _id: TaskId, _t: &TaskDescriptor, _tr: &mut Tracer<'_>) -> Result<(), RuntimeFault> {
                let now = self.0.fetch_add(1, Ordering::SeqCst) + 1;
                self.1.fetch_max(now, Ordering::SeqCst);
                std::thread::sleep(Duration::from_micros(200));
                self.0.fetch_sub(1, Ordering::SeqCst);
                Ok(())
            }
        }
        std::thread::scope(|s| {
            s.spawn(|| {
                let mut tr = Tracer::new(&clock, 0, Worker::Scheduler);
                run_scheduler(&q, &mut Keyed, &mut tr, Duration::from_secs(10)).unwrap();
            });
            for p in 0..3 {
                let (q, clock, live, peak) = (&q, &clock, &live, &peak);
                s.spawn(move || {
                    let mut tr = Tracer::new(clock, 0, Worker::Processor(p));
                    run_processor(q, p, &mut Track(live, peak), &mut tr, &|| false).unwrap();
                });
            }
        });
        assert_eq!(peak.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn stall_is_reported_as_deadlock() {
        let clock = PassClock::new();
        // Bound promises a task nobody will ever enqueue.
        let q = DeviceQueues::new(0, 1, 1, 1);
        let mut tr = Tracer::new(&clock, 0, Worker::Scheduler);
        let err = run_scheduler(&q, &mut PlainHooks, &mut tr, Duration::from_millis(50)).unwrap_err();
        match err {
            RuntimeFault::Deadlock { dump, .. } => assert!(dump.contains("bound 1")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(q.processors_interrupted());
    }
}

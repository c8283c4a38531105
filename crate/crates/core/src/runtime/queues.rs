//! Per-device task queue, doorbells, processor mailboxes and the task bound.
//!
//! `tQ` is an append-only array: producers reserve a slot with a fetch-add
//! on `tail`, publish the descriptor into it, then ring their own doorbell.
//! Only the scheduler consumes.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::OnceLock;
use std::time::Duration;

use super::task::{TaskDescriptor, TaskId};
use crate::error::RuntimeFault;

/// Doorbell index of the subscriber; processor `i` rings `1 + i`.
pub const SUBSCRIBER_DOORBELL: usize = 0;

pub struct DeviceQueues {
    device: usize,
    tasks: Box<[OnceLock<TaskDescriptor>]>,
    tail: AtomicUsize,
    doorbells: Box<[AtomicUsize]>,
    /// 0 = empty, otherwise `task id + 1`.
    mailboxes: Box<[AtomicUsize]>,
    ready: Box<[AtomicBool]>,
    interrupt_processors: AtomicBool,
    interrupt_subscriber: AtomicBool,
    task_bound: AtomicUsize,
    signals_seen: AtomicUsize,
}

impl DeviceQueues {
    pub fn new(device: usize, processors: usize, capacity: usize, initial_bound: usize) -> Self {
        DeviceQueues {
            device,
            tasks: (0..capacity).map(|_| OnceLock::new()).collect(),
            tail: AtomicUsize::new(0),
            doorbells: (0..=processors).map(|_| AtomicUsize::new(0)).collect(),
            mailboxes: (0..processors).map(|_| AtomicUsize::new(0)).collect(),
            ready: (0..processors).map(|_| AtomicBool::new(false)).collect(),
            interrupt_processors: AtomicBool::new(false),
            interrupt_subscriber: AtomicBool::new(false),
            task_bound: AtomicUsize::new(initial_bound),
            signals_seen: AtomicUsize::new(0),
        }
    }

    pub fn device(&self) -> usize {
        self.device
    }

    pub fn processors(&self) -> usize {
        self.mailboxes.len()
    }

    pub fn capacity(&self) -> usize {
        self.tasks.len()
    }

    /// Appends a task and rings `doorbell`.
    pub fn push(&self, doorbell: usize, task: TaskDescriptor) -> Result<TaskId, RuntimeFault> {
        let id = self.tail.fetch_add(1, Ordering::AcqRel);
        let slot = self.tasks.get(id).ok_or(RuntimeFault::QueueOverflow {
            device: self.device,
            capacity: self.tasks.len(),
        })?;
        slot.set(task).expect("task slot reserved exactly once");
        self.doorbells[doorbell].fetch_add(1, Ordering::Release);
        Ok(id)
    }

    /// Tasks reserved so far (published or about to be).
    pub fn enqueued(&self) -> usize {
        self.tail.load(Ordering::Acquire).min(self.tasks.len())
    }

    /// Sum of all doorbells: tasks fully published.
    pub fn rung(&self) -> usize {
        self.doorbells.iter().map(|d| d.load(Ordering::Acquire)).sum()
    }

    pub fn task(&self, id: TaskId) -> Option<&TaskDescriptor> {
        self.tasks.get(id)?.get()
    }

    pub fn assign(&self, processor: usize, id: TaskId) {
        let prev = self.mailboxes[processor].swap(id + 1, Ordering::Release);
        debug_assert_eq!(prev, 0, "processor {processor} assigned while busy");
    }

    /// Takes the processor's pending assignment, if any.
    pub fn take_assignment(&self, processor: usize) -> Option<TaskId> {
        match self.mailboxes[processor].swap(0, Ordering::Acquire) {
            0 => None,
            v => Some(v - 1),
        }
    }

    pub fn notify_ready(&self, processor: usize) {
        self.ready[processor].store(true, Ordering::Release);
    }

    pub fn take_ready(&self, processor: usize) -> bool {
        self.ready[processor].swap(false, Ordering::Acquire)
    }

    pub fn interrupt_all(&self) {
        self.interrupt_subscriber.store(true, Ordering::Release);
        self.interrupt_processors.store(true, Ordering::Release);
    }

    pub fn processors_interrupted(&self) -> bool {
        self.interrupt_processors.load(Ordering::Acquire)
    }

    pub fn subscriber_interrupted(&self) -> bool {
        self.interrupt_subscriber.load(Ordering::Acquire)
    }

    pub fn task_bound(&self) -> usize {
        self.task_bound.load(Ordering::Acquire)
    }

    pub fn set_task_bound(&self, bound: usize) {
        self.task_bound.store(bound, Ordering::Release);
    }

    pub fn record_signal(&self) -> usize {
        self.signals_seen.fetch_add(1, Ordering::AcqRel) + 1
    }

    pub fn signals_seen(&self) -> usize {
        self.signals_seen.load(Ordering::Acquire)
    }
}

/// Idle wait: a few yields, then sleeps growing up to a cap.
pub struct Backoff {
    step: u32,
}

impl Default for Backoff {
    fn default() -> Self {
        Self::new()
    }
}

impl Backoff {
    const YIELDS: u32 = 4;
    const MAX_SLEEP_US: u64 = 400;

    pub fn new() -> Self {
        Backoff { step: 0 }
    }

    pub fn reset(&mut self) {
        self.step = 0;
    }

    pub fn snooze(&mut self) {
        if self.step < Self::YIELDS {
            std::thread::yield_now();
        } else {
            let us = (10u64 << (self.step - Self::YIELDS).min(6)).min(Self::MAX_SLEEP_US);
            std::thread::sleep(Duration::from_micros(us));
        }
        self.step = self.step.saturating_add(1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Activation;

    fn t(i: usize) -> TaskDescriptor {
        TaskDescriptor::gemm0(0, 0, i, 0, 1, Activation::Relu)
    }

    #[test]
    fn push_rings_doorbell_and_overflows() {
        let q = DeviceQueues::new(3, 2, 2, 2);
        assert_eq!(q.push(SUBSCRIBER_DOORBELL, t(0)).unwrap(), 0);
        assert_eq!(q.push(2, t(1)).unwrap(), 1);
        assert_eq!(q.rung(), 2);
        assert_eq!(q.task(1), Some(&t(1)));
        assert!(matches!(q.push(1, t(2)), Err(RuntimeFault::QueueOverflow { device: 3, capacity: 2 })));
        assert_eq!(q.enqueued(), 2);
    }

    #[test]
    fn mailbox_hand_off() {
        let q = DeviceQueues::new(0, 1, 4, 4);
        assert_eq!(q.take_assignment(0), None);
        q.assign(0, 0);
        assert_eq!(q.take_assignment(0), Some(0));
        assert_eq!(q.take_assignment(0), None);
        q.notify_ready(0);
        assert!(q.take_ready(0));
        assert!(!q.take_ready(0));
    }

    #[test]
    fn concurrent_producers_fill_distinct_slots() {
        let q = DeviceQueues::new(0, 4, 4000, 4000);
        std::thread::scope(|s| {
            for p in 0..4 {
                let q = &q;
                s.spawn(move || {
                    for i in 0..1000 {
                        q.push(1 + p, t(p * 1000 + i)).unwrap();
                    }
                });
            }
        });
        assert_eq!(q.rung(), 4000);
        let mut rows: Vec<usize> = (0..4000).map(|i| q.task(i).unwrap().row_block).collect();
        rows.sort_unstable();
        assert!(rows.iter().enumerate().all(|(i, &r)| i == r));
    }
}

//! Processor actor: waits on its mailbox, runs one task at a time and
//! reports back through its ready flag.

use super::queues::{Backoff, DeviceQueues};
use super::task::{TaskDescriptor, TaskId};
use super::trace::{EventKind, Tracer};
use crate::error::RuntimeFault;

pub trait TaskExecutor {
    fn execute(&mut self, id: TaskId, task: &TaskDescriptor, tracer: &mut Tracer<'_>) -> Result<(), RuntimeFault>;
}

/// Runs assignments until interrupted; returns the number of tasks executed.
pub fn run_processor<X: TaskExecutor>(
    q: &DeviceQueues,
    processor: usize,
    exec: &mut X,
    tracer: &mut Tracer<'_>,
    aborted: &dyn Fn() -> bool,
) -> Result<usize, RuntimeFault> {
    tracer.emit(EventKind::WorkerStart);
    let mut executed = 0;
    let mut backoff = Backoff::new();
    let result = loop {
        let next = q.take_assignment(processor).or_else(|| {
            // An assignment may land between the interrupt and this check.
            if q.processors_interrupted() {
                q.take_assignment(processor)
            } else {
                None
            }
        });
        match next {
            Some(id) => {
                let task = *q.task(id).expect("assigned task was published");
                tracer.task(EventKind::TaskStart, id, &task);
                if let Err(e) = exec.execute(id, &task, tracer) {
                    break Err(e);
                }
                tracer.task(EventKind::TaskEnd, id, &task);
                executed += 1;
                q.notify_ready(processor);
                backoff.reset();
            }
            None if q.processors_interrupted() || aborted() => break Ok(executed),
            None => backoff.snooze(),
        }
    };
    tracer.emit(EventKind::WorkerExit);
    result
}

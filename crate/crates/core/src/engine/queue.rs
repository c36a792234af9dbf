use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::controller::AgentId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    GenerationComplete(AgentId),
    /// The device's prefill stage is free again.
    PrefillDone,
    ToolComplete(AgentId),
    ControlTick,
    AdmissionCheck,
}

impl EventKind {
    /// Same-instant priority: completions, then ticks, then admission checks.
    fn class(&self) -> u8 {
        match self {
            EventKind::GenerationComplete(_)
            | EventKind::ToolComplete(_)
            | EventKind::PrefillDone => 0,
            EventKind::ControlTick => 1,
            EventKind::AdmissionCheck => 2,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Event {
    pub time: f64,
    pub ordinal: u64,
    pub kind: EventKind,
}

impl Event {
    fn key(&self) -> (f64, u8, u64) {
        (self.time, self.kind.class(), self.ordinal)
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed so the max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        let (ta, ca, oa) = self.key();
        let (tb, cb, ob) = other.key();
        tb.total_cmp(&ta).then(cb.cmp(&ca)).then(ob.cmp(&oa))
    }
}

#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Event>,
    next_ordinal: u64,
}

impl EventQueue {
    pub fn push(&mut self, time: f64, kind: EventKind) {
        let ordinal = self.next_ordinal;
        self.next_ordinal += 1;
        self.heap.push(Event {
            time,
            ordinal,
            kind,
        });
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.heap.pop()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orders_by_time_class_then_ordinal() {
        let mut q = EventQueue::default();
        q.push(2.0, EventKind::AdmissionCheck);
        q.push(1.0, EventKind::AdmissionCheck);
        q.push(1.0, EventKind::ControlTick);
        q.push(1.0, EventKind::ToolComplete(4));
        q.push(1.0, EventKind::ToolComplete(3));
        let order: Vec<_> = std::iter::from_fn(|| q.pop()).map(|e| e.kind).collect();
        assert_eq!(
            order,
            vec![
                EventKind::ToolComplete(4),
                EventKind::ToolComplete(3),
                EventKind::ControlTick,
                EventKind::AdmissionCheck,
                EventKind::AdmissionCheck,
            ]
        );
    }
}

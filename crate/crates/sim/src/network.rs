// SPDX-License-Identifier: Apache-2.0

//! Deterministic virtual clock and link model.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::time::Duration;

/// Virtual time in nanoseconds.
pub type Nanos = u64;

pub fn nanos(d: Duration) -> Nanos {
    d.as_nanos() as Nanos
}

pub fn duration(t: Nanos) -> Duration {
    Duration::from_nanos(t)
}

pub fn seconds(t: Nanos) -> f64 {
    t as f64 / 1e9
}

/// Uniform point-to-point links. Each sender has one egress NIC that
/// serializes its outgoing frames; propagation delay is added on top.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkModel {
    pub latency: Nanos,
    /// Bytes per second; 0 disables the bandwidth term.
    pub bandwidth: u64,
}

impl LinkModel {
    pub fn new(latency: Duration, bandwidth: u64) -> Self {
        Self {
            latency: nanos(latency),
            bandwidth,
        }
    }

    pub fn ideal() -> Self {
        Self {
            latency: 0,
            bandwidth: 0,
        }
    }

    pub fn serialization(&self, bytes: usize) -> Nanos {
        if self.bandwidth == 0 {
            return 0;
        }
        let num = bytes as u128 * 1_000_000_000u128;
        num.div_ceil(self.bandwidth as u128) as Nanos
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transmission {
    pub sent: Nanos,
    /// When the first byte leaves the sender's NIC.
    pub start: Nanos,
    pub delivered: Nanos,
}

/// Tracks when each sender's NIC becomes free.
#[derive(Debug, Clone)]
pub struct Network<K: Ord + Clone> {
    model: LinkModel,
    nic_free: BTreeMap<K, Nanos>,
}

impl<K: Ord + Clone> Network<K> {
    pub fn new(model: LinkModel) -> Self {
        Self {
            model,
            nic_free: BTreeMap::new(),
        }
    }

    pub fn model(&self) -> LinkModel {
        self.model
    }

    /// Schedules `bytes` from `from` at time `now`. Control traffic that
    /// bypasses the egress queue (heartbeats) pays latency only.
    pub fn transmit(&mut self, from: &K, bytes: usize, now: Nanos, queued: bool) -> Transmission {
        if !queued {
            return Transmission {
                sent: now,
                start: now,
                delivered: now + self.model.latency,
            };
        }
        let free = self.nic_free.entry(from.clone()).or_insert(0);
        let start = now.max(*free);
        let done = start + self.model.serialization(bytes);
        *free = done;
        Transmission {
            sent: now,
            start,
            delivered: done + self.model.latency,
        }
    }

    pub fn nic_free_at(&self, node: &K) -> Nanos {
        self.nic_free.get(node).copied().unwrap_or(0)
    }
}

struct Entry<E> {
    at: Nanos,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    // min-heap on (time, insertion order)
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

/// Event queue ordered by time, ties broken by insertion order.
pub struct EventQueue<E> {
    heap: BinaryHeap<Entry<E>>,
    seq: u64,
    now: Nanos,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self {
            heap: BinaryHeap::new(),
            seq: 0,
            now: 0,
        }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> Nanos {
        self.now
    }

    /// Events in the past are clamped to the present.
    pub fn schedule(&mut self, at: Nanos, event: E) {
        let at = at.max(self.now);
        self.heap.push(Entry {
            at,
            seq: self.seq,
            event,
        });
        self.seq += 1;
    }

    pub fn pop(&mut self) -> Option<(Nanos, E)> {
        let e = self.heap.pop()?;
        self.now = e.at;
        Some((e.at, e.event))
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
    fn nic_serializes_back_to_back_frames() {
        let mut net: Network<u8> = Network::new(LinkModel::new(Duration::from_millis(1), 1000));
        let a = net.transmit(&0, 500, 0, true);
        let b = net.transmit(&0, 500, 0, true);
        let c = net.transmit(&1, 500, 0, true);
        assert_eq!(a.delivered, 500_000_000 + 1_000_000);
        assert_eq!(b.start, 500_000_000);
        assert_eq!(b.delivered, 1_000_000_000 + 1_000_000);
        assert_eq!(c, a);
        let hb = net.transmit(&0, 64, 10, false);
        assert_eq!(hb.delivered, 1_000_010);
    }

    #[test]
    fn queue_orders_by_time_then_insertion() {
        let mut q = EventQueue::new();
        q.schedule(5, 'a');
        q.schedule(1, 'b');
        q.schedule(5, 'c');
        q.schedule(1, 'd');
        let order: Vec<char> = std::iter::from_fn(|| q.pop().map(|(_, e)| e)).collect();
        assert_eq!(order, vec!['b', 'd', 'a', 'c']);
    }
}

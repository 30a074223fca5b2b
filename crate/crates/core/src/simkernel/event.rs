use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::BTreeMap;

use super::SimError;

/// Global (cycle, sequence)-ordered event queue.
#[derive(Debug, Clone, PartialEq)]
pub struct EventQueue<T> {
    events: BTreeMap<(u64, u64), T>,
    next_seq: u64,
    now: u64,
    delivered: u64,
}

impl<T> Default for EventQueue<T> {
    fn default() -> Self {
        EventQueue {
            events: BTreeMap::new(),
            next_seq: 0,
            now: 0,
            delivered: 0,
        }
    }
}

impl<T> EventQueue<T> {
    pub fn now(&self) -> u64 {
        self.now
    }

    /// Move the clock forward. Events scheduled before `cycle` must have
    /// been drained.
    pub fn advance_to(&mut self, cycle: u64) {
        debug_assert!(cycle >= self.now);
        debug_assert!(self.events.keys().next().is_none_or(|k| k.0 >= cycle));
        self.now = cycle;
    }

    /// Returns the sequence number assigned to the event.
    pub fn schedule(&mut self, fire_cycle: u64, payload: T) -> Result<u64, SimError> {
        if fire_cycle < self.now {
            return Err(SimError::SchedulingInPast {
                now: self.now,
                fire_cycle,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.events.insert((fire_cycle, seq), payload);
        Ok(seq)
    }

    /// Next event due at the current cycle, if any.
    pub fn pop_due(&mut self) -> Option<(u64, T)> {
        let (&(c, _), _) = self.events.first_key_value()?;
        if c > self.now {
            return None;
        }
        let ((_, seq), ev) = self.events.pop_first().unwrap();
        self.delivered += 1;
        Some((seq, ev))
    }

    pub fn next_cycle(&self) -> Option<u64> {
        self.events.keys().next().map(|k| k.0)
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &T)> {
        self.events.iter().map(|(k, v)| (k.0, v))
    }
}

#[derive(Serialize, Deserialize)]
struct Repr<T> {
    events: Vec<(u64, u64, T)>,
    next_seq: u64,
    now: u64,
    delivered: u64,
}

impl<T: Serialize + Clone> Serialize for EventQueue<T> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        Repr {
            events: self
                .events
                .iter()
                .map(|(k, v)| (k.0, k.1, v.clone()))
                .collect(),
            next_seq: self.next_seq,
            now: self.now,
            delivered: self.delivered,
        }
        .serialize(s)
    }
}

impl<'de, T: Deserialize<'de>> Deserialize<'de> for EventQueue<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = Repr::<T>::deserialize(d)?;
        Ok(EventQueue {
            events: r.events.into_iter().map(|(c, s, v)| ((c, s), v)).collect(),
            next_seq: r.next_seq,
            now: r.now,
            delivered: r.delivered,
        })
    }
}

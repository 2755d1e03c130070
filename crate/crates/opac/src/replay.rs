//! Fixed-capacity uniform-sampling transition buffer.

use rand::Rng;

/// One environment transition. `done` is the Bellman-terminal flag: episodes
/// cut off by the time limit set `truncated` instead, so the Q-target still
/// bootstraps through them.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
    pub truncated: bool,
}

/// FIFO ring buffer sampled uniformly with replacement.
#[derive(Debug)]
pub struct RingBuffer {
    capacity: usize,
    storage: Vec<Transition>,
    cursor: usize,
}

impl RingBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        RingBuffer {
            capacity,
            storage: Vec::with_capacity(capacity.min(1 << 20)),
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.storage.len() < self.capacity {
            self.storage.push(t);
        } else {
            self.storage[self.cursor] = t;
            self.cursor = (self.cursor + 1) % self.capacity;
        }
    }

    /// Uniform sample with replacement. Panics on an empty buffer: sampling
    /// before the first push is a caller bug.
    pub fn sample<'a, R: Rng>(&'a self, n: usize, rng: &mut R) -> Vec<&'a Transition> {
        assert!(!self.is_empty(), "sample from empty replay buffer");
        (0..n)
            .map(|_| &self.storage[rng.gen_range(0..self.storage.len())])
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.storage.iter()
    }
}

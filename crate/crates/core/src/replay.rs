//! Fixed-capacity experience replay with uniform sampling.

use rand::{Rng, RngCore};

use crate::env::Transition;
use crate::error::{CoreError, Result};

/// Ring buffer over transitions. After `capacity` insertions the oldest entry
/// is overwritten (exact FIFO order).
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    storage: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            storage: Vec::new(),
            cursor: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.storage.len() < self.capacity {
            self.storage.push(t);
        } else {
            self.storage[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    /// `batch_size` independent uniform draws with replacement over the live
    /// entries. Errors while the buffer holds fewer than `batch_size` items so
    /// callers can gate on their warmup period.
    pub fn sample_uniform(&self, batch_size: usize, rng: &mut dyn RngCore) -> Result<Vec<&Transition>> {
        if self.storage.len() < batch_size {
            return Err(CoreError::UnderfullBuffer {
                size: self.storage.len(),
                requested: batch_size,
            });
        }
        Ok((0..batch_size)
            .map(|_| &self.storage[rng.random_range(0..self.storage.len())])
            .collect())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.storage.iter()
    }

    /// Raw parts for checkpointing.
    pub fn to_parts(&self) -> (usize, usize, &[Transition]) {
        (self.capacity, self.cursor, &self.storage)
    }

    pub fn from_parts(capacity: usize, cursor: usize, storage: Vec<Transition>) -> Self {
        assert!(storage.len() <= capacity && cursor < capacity.max(1));
        ReplayBuffer {
            capacity,
            storage,
            cursor,
        }
    }
}

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Items that occupy a variable number of transition slots.
pub trait Weighted {
    fn weight(&self) -> usize;
}

/// FIFO ring bounded by the total weight of its items. Sampling is uniform
/// over items with replacement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: VecDeque<T>,
    weight: usize,
}

impl<T: Weighted> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::new(),
            weight: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Number of items held.
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total weight held; never exceeds the capacity.
    pub fn weight(&self) -> usize {
        self.weight
    }

    /// Appends `item`, evicting the oldest items until it fits. An item
    /// heavier than the whole buffer is rejected.
    pub fn push(&mut self, item: T) -> Result<()> {
        let w = item.weight();
        if w > self.capacity {
            return Err(Error::usage(format!(
                "item of weight {w} exceeds replay capacity {}",
                self.capacity
            )));
        }
        while self.weight + w > self.capacity {
            let old = self.items.pop_front().expect("weight implies items");
            self.weight -= old.weight();
        }
        self.weight += w;
        self.items.push_back(item);
        Ok(())
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = &T> + ExactSizeIterator {
        self.items.iter()
    }

    /// `count` uniform draws with replacement.
    pub fn sample<R: Rng>(&self, count: usize, rng: &mut R) -> Result<Vec<&T>> {
        if self.items.is_empty() {
            return Err(Error::usage("sampling from an empty replay buffer"));
        }
        Ok((0..count)
            .map(|_| &self.items[rng.gen_range(0..self.items.len())])
            .collect())
    }

    /// Uniform draws until their total weight reaches `target`.
    pub fn sample_weight<R: Rng>(&self, target: usize, rng: &mut R) -> Result<Vec<&T>> {
        if self.weight == 0 {
            return Err(Error::usage("sampling from an empty replay buffer"));
        }
        let mut out = Vec::new();
        let mut got = 0;
        while got < target {
            let item = &self.items[rng.gen_range(0..self.items.len())];
            got += item.weight();
            out.push(item);
        }
        Ok(out)
    }
}

//! Experience replay: FIFO transition storage with uniform sampling.
//!
//! A transition conceptually holds two four-crop stacks (state and
//! successor) that overlap in three frames; storing the five distinct
//! frames as shared `Arc`s keeps the default-sized buffer hundreds of
//! megabytes smaller than flat storage would.

use std::sync::Arc;

use crate::env::{EnvState, StepResult};
use crate::geometry::Action;
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct Transition {
    /// Crop frames oldest to newest; the state is frames 0..4, the
    /// successor frames 1..5.
    pub frames: [Arc<Vec<f32>>; 5],
    pub action: Action,
    pub reward: f32,
    pub terminal: bool,
}

impl Transition {
    pub fn from_step(prev: &EnvState, action: Action, result: &StepResult) -> Self {
        let h = prev.history();
        let frames = [
            h[0].clone(),
            h[1].clone(),
            h[2].clone(),
            h[3].clone(),
            result.state.history()[3].clone(),
        ];
        Transition { frames, action, reward: result.reward, terminal: result.terminal }
    }

    /// Appends the flattened state stack (frames 0..4) to `out`.
    pub fn state_input(&self, out: &mut Vec<f32>) {
        for f in &self.frames[..4] {
            out.extend_from_slice(f);
        }
    }

    /// Appends the flattened successor stack (frames 1..5) to `out`.
    pub fn next_input(&self, out: &mut Vec<f32>) {
        for f in &self.frames[1..] {
            out.extend_from_slice(f);
        }
    }
}

/// Fixed-capacity ring buffer; once full, each push evicts the oldest
/// transition.
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    write: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer { items: Vec::new(), capacity, write: 0 }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.write] = t;
        }
        self.write = (self.write + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, idx: usize) -> &Transition {
        &self.items[idx]
    }

    /// `k` indices drawn uniformly with replacement.
    pub fn sample_indices(&self, rng: &mut Rng, k: usize) -> Vec<usize> {
        assert!(!self.is_empty(), "cannot sample an empty buffer");
        (0..k).map(|_| rng.below(self.items.len())).collect()
    }
}

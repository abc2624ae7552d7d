//! Fixed-capacity FIFO replay buffer with uniform sampling.

use cnav_autodiff::{Real, Tensor};
use rand::Rng;
use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::model::{aux_features, Inputs};
use crate::nets::{ACTION_DIM, AUX_DIM};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Transition {
    /// Normalized depth, `H * W` values.
    pub depth: Vec<f32>,
    pub goal_body: [f32; 3],
    pub velocity: [f32; 3],
    pub action: [f32; ACTION_DIM],
    pub reward: f32,
    pub next_depth: Vec<f32>,
    pub next_goal_body: [f32; 3],
    pub next_velocity: [f32; 3],
    /// Terminal (arrival or collision); no bootstrap from the next state.
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<F: Real> {
    pub obs: Inputs<F>,
    pub action: Tensor<F>,
    pub reward: Tensor<F>,
    pub done: Tensor<F>,
    pub next: Inputs<F>,
}

impl<F: Real> Batch<F> {
    pub fn len(&self) -> usize {
        self.reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reward.is_empty()
    }

    pub fn cast<G: Real>(&self) -> Batch<G> {
        let c = |i: &Inputs<F>| Inputs { depth: i.depth.cast(), aux: i.aux.cast() };
        Batch {
            obs: c(&self.obs),
            action: self.action.cast(),
            reward: self.reward.cast(),
            done: self.done.cast(),
            next: c(&self.next),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    pixels: usize,
    items: Vec<Transition>,
    /// Slot the next insert overwrites once full.
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, pixels: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer { capacity, pixels, items: Vec::new(), head: 0 }
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

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.depth.len() != self.pixels || t.next_depth.len() != self.pixels {
            return Err(CoreError::Shape(format!("transition depth must have {} pixels", self.pixels)));
        }
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
        Ok(())
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    /// Index of the oldest stored transition.
    pub fn oldest(&self) -> usize {
        if self.items.len() < self.capacity {
            0
        } else {
            self.head
        }
    }

    /// Uniform sample with replacement of `n` stored indices.
    pub fn sample_indices(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if self.items.is_empty() || n == 0 {
            return Err(CoreError::EmptyBatch);
        }
        Ok((0..n).map(|_| rng.random_range(0..self.items.len())).collect())
    }

    pub fn batch<F: Real>(&self, idx: &[usize], image_hw: (usize, usize), goal_scale: f64) -> Result<Batch<F>> {
        let n = idx.len();
        if n == 0 {
            return Err(CoreError::EmptyBatch);
        }
        let (h, w) = image_hw;
        let f = |v: f32| F::of(v as f64);
        let mut depth = Vec::with_capacity(n * self.pixels);
        let mut next_depth = Vec::with_capacity(n * self.pixels);
        let mut aux = Vec::with_capacity(n * AUX_DIM);
        let mut next_aux = Vec::with_capacity(n * AUX_DIM);
        let mut action = Vec::with_capacity(n * ACTION_DIM);
        let mut reward = Vec::with_capacity(n);
        let mut done = Vec::with_capacity(n);
        for &i in idx {
            let t = &self.items[i];
            depth.extend(t.depth.iter().copied().map(f));
            next_depth.extend(t.next_depth.iter().copied().map(f));
            aux.extend(aux_features(t.goal_body, t.velocity, goal_scale).map(f));
            next_aux.extend(aux_features(t.next_goal_body, t.next_velocity, goal_scale).map(f));
            action.extend(t.action.map(f));
            reward.push(f(t.reward));
            done.push(if t.done { F::one() } else { F::zero() });
        }
        Ok(Batch {
            obs: Inputs { depth: Tensor::new(vec![n, 1, h, w], depth)?, aux: Tensor::new(vec![n, AUX_DIM], aux)? },
            action: Tensor::new(vec![n, ACTION_DIM], action)?,
            reward: Tensor::new(vec![n], reward)?,
            done: Tensor::new(vec![n], done)?,
            next: Inputs {
                depth: Tensor::new(vec![n, 1, h, w], next_depth)?,
                aux: Tensor::new(vec![n, AUX_DIM], next_aux)?,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(k: f32) -> Transition {
        Transition {
            depth: vec![k; 4],
            goal_body: [k, 1.0, 2.0],
            velocity: [0.1, 0.2, k],
            action: [k, -k, 0.5],
            reward: k * 0.25,
            next_depth: vec![k + 0.5; 4],
            next_goal_body: [k, 0.0, 0.0],
            next_velocity: [0.0; 3],
            done: k as i32 % 2 == 0,
        }
    }

    #[test]
    fn fifo_eviction() {
        let mut b = ReplayBuffer::new(3, 4);
        for k in 0..5 {
            b.push(tr(k as f32)).unwrap();
        }
        assert_eq!(b.len(), 3);
        let kept: Vec<f32> = (0..3).map(|i| b.get(i).reward / 0.25).collect();
        assert_eq!(kept, vec![3.0, 4.0, 2.0]);
        assert_eq!(b.get(b.oldest()).reward, 2.0 * 0.25);
    }

    #[test]
    fn empty_sample_fails() {
        let b = ReplayBuffer::new(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(b.sample_indices(2, &mut rng).is_err());
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let mut b = ReplayBuffer::new(10, 4);
        let t = Transition { depth: vec![0.1, 0.2, 0.3, 0.7], ..tr(3.3) };
        b.push(t.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let idx = b.sample_indices(1, &mut rng).unwrap();
        assert_eq!(b.get(idx[0]), &t);
        let batch: Batch<f32> = b.batch(&idx, (2, 2), 1.0).unwrap();
        assert_eq!(batch.obs.depth.data(), t.depth.as_slice());
        assert_eq!(batch.action.data(), t.action.as_slice());
        assert_eq!(batch.reward.data()[0].to_bits(), t.reward.to_bits());
    }

    #[test]
    fn wrong_pixel_count_rejected() {
        let mut b = ReplayBuffer::new(2, 5);
        assert!(b.push(tr(1.0)).is_err());
    }
}

//! Reservoir-sampled episode memory with per-slot feature snapshots.

use rand::seq::index::sample as index_sample;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::rng::Rng;
use crate::stream::Episode;

/// Embeddings of a stored episode's support and unlabeled-ID points, captured
/// with the model parameters current at storage time. Row `k < n_support`
/// maps to `episode.support[k]`; row `n_support + j` maps to
/// `episode.unlabeled[id_indices[j]]`. The ID split is frozen here: replay
/// re-embeds exactly these points, whatever a later detector pass would say.
#[derive(Clone, Debug)]
pub struct FeatureSnapshot {
    features: Mat,
    n_support: usize,
    id_indices: Vec<usize>,
}

impl FeatureSnapshot {
    pub fn new(features: Mat, n_support: usize, id_indices: Vec<usize>) -> Result<Self> {
        if features.rows() != n_support + id_indices.len() {
            return Err(Error::contract(format!(
                "snapshot has {} rows, expected {} support + {} id",
                features.rows(),
                n_support,
                id_indices.len()
            )));
        }
        Ok(FeatureSnapshot { features, n_support, id_indices })
    }

    pub fn features(&self) -> &Mat {
        &self.features
    }

    pub fn n_support(&self) -> usize {
        self.n_support
    }

    pub fn id_indices(&self) -> &[usize] {
        &self.id_indices
    }

    pub fn n_points(&self) -> usize {
        self.features.rows()
    }

    /// The stored points' raw inputs, in snapshot row order.
    pub fn gather_inputs(&self, episode: &Episode) -> Mat {
        let dims = episode.dims();
        let mut m = Mat::zeros(self.n_points(), dims);
        for k in 0..self.n_support {
            m.row_mut(k).copy_from_slice(&episode.support[k].0);
        }
        for (j, &u) in self.id_indices.iter().enumerate() {
            m.row_mut(self.n_support + j).copy_from_slice(&episode.unlabeled[u].0);
        }
        m
    }

    fn matches(&self, episode: &Episode) -> bool {
        self.n_support == episode.support.len()
            && self.id_indices.iter().all(|&u| u < episode.unlabeled.len())
    }
}

#[derive(Clone, Debug)]
pub struct MemorySlot {
    pub episode: Episode,
    pub snapshot: FeatureSnapshot,
}

/// Size-capped task memory. After `n >= capacity` offers every offered
/// episode resides in the buffer with probability exactly `capacity / n`.
#[derive(Clone, Debug)]
pub struct MemoryBuffer {
    capacity: usize,
    slots: Vec<MemorySlot>,
    seen_count: u64,
}

impl MemoryBuffer {
    pub fn new(capacity: usize) -> Self {
        MemoryBuffer { capacity, slots: Vec::new(), seen_count: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn seen_count(&self) -> u64 {
        self.seen_count
    }

    pub fn slots(&self) -> &[MemorySlot] {
        &self.slots
    }

    /// Reservoir offer: accept unconditionally while below capacity,
    /// afterwards with probability `capacity / seen_count`, evicting a
    /// uniformly random slot. Returns whether the episode was stored.
    pub fn offer(
        &mut self,
        episode: Episode,
        snapshot: FeatureSnapshot,
        rng: &mut Rng,
    ) -> Result<bool> {
        if !snapshot.matches(&episode) {
            return Err(Error::contract("snapshot does not match episode"));
        }
        self.seen_count += 1;
        if self.capacity == 0 {
            return Ok(false);
        }
        if self.slots.len() < self.capacity {
            self.slots.push(MemorySlot { episode, snapshot });
            return Ok(true);
        }
        // Item n is kept with probability k/n; a uniform draw over [0, n)
        // doubles as the uniform eviction choice when it lands below k.
        let j = rng.random_range(0..self.seen_count);
        if (j as usize) < self.capacity {
            self.slots[j as usize] = MemorySlot { episode, snapshot };
            Ok(true)
        } else {
            Ok(false)
        }
    }

    /// Uniform sample without replacement; returns the whole buffer when it
    /// holds fewer than `batch_size` slots.
    pub fn sample_batch(&self, batch_size: usize, rng: &mut Rng) -> Vec<&MemorySlot> {
        if batch_size >= self.slots.len() {
            return self.slots.iter().collect();
        }
        index_sample(rng, self.slots.len(), batch_size)
            .into_iter()
            .map(|i| &self.slots[i])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use crate::stream::HiddenTruth;

    fn toy_episode(tag: usize) -> Episode {
        Episode {
            domain_id: tag,
            support: vec![(vec![tag as f64, 0.0], 0)],
            unlabeled: vec![
                (vec![0.0, 1.0], HiddenTruth::Id(0)),
                (vec![9.0, 9.0], HiddenTruth::Ood(0)),
            ],
            query: vec![(vec![0.5, 0.5], 0)],
        }
    }

    fn toy_snapshot(ep: &Episode) -> FeatureSnapshot {
        let feats = Mat::zeros(2, 3);
        FeatureSnapshot::new(feats, ep.support.len(), vec![0]).unwrap()
    }

    #[test]
    fn fills_up_to_capacity() {
        let mut buf = MemoryBuffer::new(5);
        let mut rng = rng_from(0);
        for i in 0..3 {
            let ep = toy_episode(i);
            let snap = toy_snapshot(&ep);
            assert!(buf.offer(ep, snap, &mut rng).unwrap());
        }
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.seen_count(), 3);
    }

    #[test]
    fn snapshot_mismatch_is_contract_error() {
        let mut buf = MemoryBuffer::new(5);
        let mut rng = rng_from(0);
        let ep = toy_episode(0);
        let bad = FeatureSnapshot::new(Mat::zeros(3, 3), 1, vec![0, 7]).unwrap();
        assert!(buf.offer(ep, bad, &mut rng).is_err());
    }

    #[test]
    fn capacity_one_second_offer_accepted_half_the_time() {
        let trials = 20_000;
        let mut accepted = 0usize;
        for s in 0..trials {
            let mut rng = rng_from(s as u64);
            let mut buf = MemoryBuffer::new(1);
            let e0 = toy_episode(0);
            let s0 = toy_snapshot(&e0);
            buf.offer(e0, s0, &mut rng).unwrap();
            let e1 = toy_episode(1);
            let s1 = toy_snapshot(&e1);
            if buf.offer(e1, s1, &mut rng).unwrap() {
                accepted += 1;
            }
        }
        let freq = accepted as f64 / trials as f64;
        let se = (0.5 * 0.5 / trials as f64).sqrt();
        assert!((freq - 0.5).abs() < 3.0 * se, "freq = {freq}");
    }

    #[test]
    fn inclusion_probability_is_k_over_n() {
        // k = 5, n = 50: every item kept with probability 0.1.
        let (k, n, trials) = (5usize, 50usize, 4_000usize);
        let mut kept = vec![0usize; n];
        for s in 0..trials {
            let mut rng = rng_from(1_000 + s as u64);
            let mut buf = MemoryBuffer::new(k);
            for i in 0..n {
                let ep = toy_episode(i);
                let snap = toy_snapshot(&ep);
                buf.offer(ep, snap, &mut rng).unwrap();
            }
            for slot in buf.slots() {
                kept[slot.episode.domain_id] += 1;
            }
        }
        let p = k as f64 / n as f64;
        let se = (p * (1.0 - p) / trials as f64).sqrt();
        for (i, &count) in kept.iter().enumerate() {
            let freq = count as f64 / trials as f64;
            assert!((freq - p).abs() < 4.0 * se, "item {i}: freq = {freq}, expected {p}");
        }
    }

    #[test]
    fn never_exceeds_capacity_and_counts_offers() {
        let mut buf = MemoryBuffer::new(4);
        let mut rng = rng_from(3);
        for i in 0..100 {
            let ep = toy_episode(i);
            let snap = toy_snapshot(&ep);
            buf.offer(ep, snap, &mut rng).unwrap();
            assert!(buf.len() <= 4);
        }
        assert_eq!(buf.seen_count(), 100);
    }

    #[test]
    fn sample_batch_returns_all_when_small() {
        let mut buf = MemoryBuffer::new(10);
        let mut rng = rng_from(5);
        for i in 0..3 {
            let ep = toy_episode(i);
            let snap = toy_snapshot(&ep);
            buf.offer(ep, snap, &mut rng).unwrap();
        }
        assert_eq!(buf.sample_batch(5, &mut rng).len(), 3);
        let empty = MemoryBuffer::new(10);
        assert!(empty.sample_batch(2, &mut rng).is_empty());
    }

    #[test]
    fn sample_batch_is_uniform() {
        let mut buf = MemoryBuffer::new(20);
        let mut rng = rng_from(6);
        for i in 0..20 {
            let ep = toy_episode(i);
            let snap = toy_snapshot(&ep);
            buf.offer(ep, snap, &mut rng).unwrap();
        }
        let draws = 10_000usize;
        let mut counts = vec![0usize; 20];
        for _ in 0..draws {
            for slot in buf.sample_batch(2, &mut rng) {
                counts[slot.episode.domain_id] += 1;
            }
        }
        // P(slot in batch of 2 from 20) = 1/10
        let p = 0.1;
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / draws as f64;
            assert!((freq - p).abs() < 4.0 * se, "slot {i}: freq = {freq}");
        }
    }
}

//! Candidate-neighbor set: a fixed-capacity FIFO ring of unit-norm
//! projections with exact top-K cosine search.
//!
//! Entries are normalized once, at insertion, so a search is a plain dot
//! product against every valid slot. Ties on score go to the older entry.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, shape_err, Result};
use crate::numerics::{dot, l2_normalize, normalize_rows_in_place, Tensor};

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborStore {
    capacity: usize,
    dim: usize,
    /// Slot-major; grows up to `capacity * dim`, then is overwritten in place.
    entries: Vec<f64>,
    ages: Vec<u64>,
    /// Next slot to write once the ring is full.
    head: usize,
    next_age: u64,
}

/// One search result. `feature` is a detached copy of the stored vector.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborHit {
    pub slot: usize,
    pub age: u64,
    pub score: f64,
    pub feature: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStats {
    pub capacity: usize,
    pub fill: usize,
    pub dim: usize,
    pub bytes_estimate: usize,
}

impl StoreStats {
    pub fn estimate_bytes(capacity: usize, dim: usize, bytes_per_element: usize) -> usize {
        capacity * dim * bytes_per_element
    }
}

/// Raw ring contents, for checkpointing.
#[derive(Clone, Debug, PartialEq)]
pub struct StoreSnapshot {
    pub capacity: usize,
    pub dim: usize,
    pub entries: Vec<f64>,
    pub ages: Vec<u64>,
    pub head: usize,
    pub next_age: u64,
}

/// Orders hits best-first: higher score, then older.
fn rank(a_score: f64, a_age: u64, b_score: f64, b_age: u64) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then(a_age.cmp(&b_age))
}

impl NeighborStore {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(contract(format!(
                "store needs positive capacity and dim, got {capacity}×{dim}"
            )));
        }
        Ok(Self {
            capacity,
            dim,
            entries: Vec::new(),
            ages: Vec::new(),
            head: 0,
            next_age: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fill(&self) -> usize {
        self.ages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ages.is_empty()
    }

    pub fn entry(&self, slot: usize) -> &[f64] {
        &self.entries[slot * self.dim..(slot + 1) * self.dim]
    }

    pub fn age(&self, slot: usize) -> u64 {
        self.ages[slot]
    }

    /// Valid slots ordered oldest first.
    pub fn slots_by_age(&self) -> Vec<usize> {
        let mut slots: Vec<usize> = (0..self.fill()).collect();
        slots.sort_by_key(|&s| self.ages[s]);
        slots
    }

    /// Normalizes each row of `feats` and inserts it, evicting the oldest
    /// entries once the ring is full.
    pub fn push_batch(&mut self, feats: &Tensor) -> Result<()> {
        let n = feats.rows();
        if n == 0 || feats.is_empty() {
            return Ok(());
        }
        if feats.cols() != self.dim {
            return Err(shape_err("push_batch", feats.shape(), &[n, self.dim]));
        }
        if n > self.capacity {
            return Err(contract(format!(
                "batch of {n} exceeds store capacity {}",
                self.capacity
            )));
        }
        let mut rows = feats.data().to_vec();
        normalize_rows_in_place(&mut rows, self.dim, NORM_EPS);
        for row in rows.chunks_exact(self.dim) {
            if self.fill() < self.capacity {
                self.entries.extend_from_slice(row);
                self.ages.push(self.next_age);
            } else {
                let slot = self.head;
                self.entries[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(row);
                self.ages[slot] = self.next_age;
                self.head = (self.head + 1) % self.capacity;
            }
            self.next_age += 1;
        }
        Ok(())
    }

    /// The `min(k, fill)` entries with the highest cosine to `query`.
    pub fn top_k(&self, query: &[f64], k: usize) -> Vec<NeighborHit> {
        if query.len() != self.dim {
            return Vec::new();
        }
        let q = l2_normalize(query, NORM_EPS);
        self.search_normalized(&q, k)
    }

    fn search_normalized(&self, q: &[f64], k: usize) -> Vec<NeighborHit> {
        let k = k.min(self.fill());
        if k == 0 {
            return Vec::new();
        }
        // best-first buffer of (score, age, slot)
        let mut best: Vec<(f64, u64, usize)> = Vec::with_capacity(k + 1);
        for slot in 0..self.fill() {
            let score = dot(q, self.entry(slot));
            let age = self.ages[slot];
            if best.len() == k {
                let (ws, wa, _) = best[k - 1];
                if rank(score, age, ws, wa) != Ordering::Less {
                    continue;
                }
            }
            let pos = best.partition_point(|&(s, a, _)| rank(s, a, score, age) == Ordering::Less);
            best.insert(pos, (score, age, slot));
            best.truncate(k);
        }
        best.into_iter()
            .map(|(score, age, slot)| NeighborHit {
                slot,
                age,
                score,
                feature: self.entry(slot).to_vec(),
            })
            .collect()
    }

    /// Row-wise [`top_k`](Self::top_k); row `i` of the result equals
    /// `top_k(queries[i], k)` exactly.
    pub fn batched_top_k(&self, queries: &Tensor, k: usize) -> Result<Vec<Vec<NeighborHit>>> {
        if queries.rows() > 0 && queries.cols() != self.dim {
            return Err(shape_err("batched_top_k", queries.shape(), &[self.dim]));
        }
        Ok(queries
            .row_iter()
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|q| self.top_k(q, k))
            .collect())
    }

    pub fn stats(&self) -> StoreStats {
        StoreStats {
            capacity: self.capacity,
            fill: self.fill(),
            dim: self.dim,
            bytes_estimate: StoreStats::estimate_bytes(
                self.capacity,
                self.dim,
                std::mem::size_of::<f64>(),
            ),
        }
    }

    pub fn snapshot(&self) -> StoreSnapshot {
        StoreSnapshot {
            capacity: self.capacity,
            dim: self.dim,
            entries: self.entries.clone(),
            ages: self.ages.clone(),
            head: self.head,
            next_age: self.next_age,
        }
    }

    pub fn from_snapshot(s: StoreSnapshot) -> Result<Self> {
        let fill = s.ages.len();
        if s.capacity == 0
            || s.dim == 0
            || fill > s.capacity
            || s.entries.len() != fill * s.dim
            || s.head >= s.capacity.max(1)
            || (fill < s.capacity && s.head != 0)
        {
            return Err(crate::Error::Corrupt("inconsistent neighbor store".into()));
        }
        Ok(Self {
            capacity: s.capacity,
            dim: s.dim,
            entries: s.entries,
            ages: s.ages,
            head: s.head,
            next_age: s.next_age,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        let data = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(&[n, d], data).unwrap()
    }

    /// Exhaustive oracle: score every entry with a plain sum, sort all.
    fn argsort_oracle(store: &NeighborStore, query: &[f64], k: usize) -> Vec<usize> {
        let qn: f64 = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut all: Vec<(f64, u64, usize)> = (0..store.fill())
            .map(|s| {
                let e = store.entry(s);
                let sc: f64 = query.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() / qn;
                (sc, store.age(s), s)
            })
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|t| t.2).collect()
    }

    fn surviving(s: &NeighborStore) -> Vec<Vec<f64>> {
        s.slots_by_age().into_iter().map(|sl| s.entry(sl).to_vec()).collect()
    }

    #[test]
    fn fifo_keeps_newest_of_first_push() {
        let first = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]).unwrap();
        let second = Tensor::from_rows(&[[0.0, -1.0], [0.6, 0.8], [0.8, 0.6]]).unwrap();

        // 3 + 3 into 4 slots: one entry of the first push survives
        let mut s = NeighborStore::new(4, 2).unwrap();
        s.push_batch(&first).unwrap();
        s.push_batch(&second).unwrap();
        assert_eq!(s.fill(), 4);
        let kept = surviving(&s);
        assert_eq!(kept[0], vec![-1.0, 0.0]);
        assert_eq!(kept[1], vec![0.0, -1.0]);
        assert_eq!(kept[3], vec![0.8, 0.6]);

        // 3 + 2: the two newest of the first push survive
        let mut s = NeighborStore::new(4, 2).unwrap();
        s.push_batch(&first).unwrap();
        s.push_batch(&second.select_rows(&[0, 1])).unwrap();
        assert_eq!(s.fill(), 4);
        let kept = surviving(&s);
        assert_eq!(kept[0], vec![0.0, 1.0]);
        assert_eq!(kept[1], vec![-1.0, 0.0]);
    }

    #[test]
    fn empty_push_is_a_no_op() {
        let mut s = NeighborStore::new(4, 3).unwrap();
        s.push_batch(&Tensor::zeros(&[0, 3])).unwrap();
        assert_eq!(s.fill(), 0);
        assert_eq!(s, NeighborStore::new(4, 3).unwrap());
    }

    #[test]
    fn oversize_batch_is_rejected() {
        let mut s = NeighborStore::new(2, 1).unwrap();
        assert!(s.push_batch(&Tensor::full(&[3, 1], 1.0)).is_err());
    }

    #[test]
    fn large_capacity_is_accepted_lazily() {
        let mut s = NeighborStore::new(128_000, 256).unwrap();
        assert_eq!(s.stats().fill, 0);
        s.push_batch(&Tensor::full(&[2, 256], 1.0)).unwrap();
        assert_eq!(s.fill(), 2);
    }

    #[test]
    fn self_match_and_k_zero() {
        let mut s = NeighborStore::new(8, 2).unwrap();
        s.push_batch(&Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap())
            .unwrap();
        let hits = s.top_k(&[1.0, 0.0], 1);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].feature, vec![1.0, 0.0]);
        assert_eq!(hits[0].score, 1.0);
        assert!(s.top_k(&[1.0, 0.0], 0).is_empty());
        assert!(NeighborStore::new(3, 2).unwrap().top_k(&[1.0, 0.0], 2).is_empty());
    }

    #[test]
    fn k_clamps_to_fill() {
        let mut s = NeighborStore::new(8, 2).unwrap();
        s.push_batch(&Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap())
            .unwrap();
        assert_eq!(s.top_k(&[1.0, 1.0], 5).len(), 2);
    }

    #[test]
    fn ties_go_to_older_entry() {
        let mut s = NeighborStore::new(8, 2).unwrap();
        s.push_batch(&Tensor::from_rows(&[[0.0, 1.0], [2.0, 0.0], [5.0, 0.0]]).unwrap())
            .unwrap();
        let hits = s.top_k(&[1.0, 0.0], 2);
        assert_eq!(hits[0].age, 1);
        assert_eq!(hits[1].age, 2);
    }

    #[test]
    fn matches_argsort_on_random_store() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut s = NeighborStore::new(64, 16).unwrap();
        s.push_batch(&random_rows(&mut rng, 64, 16)).unwrap();
        for _ in 0..20 {
            let q: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got: Vec<usize> = s.top_k(&q, 8).into_iter().map(|h| h.slot).collect();
            assert_eq!(got, argsort_oracle(&s, &q, 8));
        }
    }

    #[test]
    fn batched_equals_row_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = NeighborStore::new(100, 8).unwrap();
        s.push_batch(&random_rows(&mut rng, 100, 8)).unwrap();
        let q = random_rows(&mut rng, 16, 8);
        let batched = s.batched_top_k(&q, 4).unwrap();
        for (i, row) in q.row_iter().enumerate() {
            assert_eq!(batched[i], s.top_k(row, 4));
        }
        let one = q.select_rows(&[3]);
        assert_eq!(s.batched_top_k(&one, 4).unwrap()[0], s.top_k(q.row(3), 4));
        let dup = q.select_rows(&[5, 5]);
        let r = s.batched_top_k(&dup, 4).unwrap();
        assert_eq!(r[0], r[1]);
    }

    #[test]
    fn hits_are_detached_copies() {
        let mut s = NeighborStore::new(4, 2).unwrap();
        s.push_batch(&Tensor::from_rows(&[[1.0, 0.0]]).unwrap()).unwrap();
        let before = s.clone();
        let mut hits = s.top_k(&[1.0, 0.0], 1);
        hits[0].feature[0] = 99.0;
        assert_eq!(s, before);
    }

    #[test]
    fn stats_report_size_estimates() {
        assert_eq!(NeighborStore::new(5, 3).unwrap().stats().fill, 0);
        assert_eq!(StoreStats::estimate_bytes(8000, 256, 4), 8_192_000);
        assert_eq!(StoreStats::estimate_bytes(128_000, 256, 4), 131_072_000);
        assert_eq!(
            NeighborStore::new(10, 4).unwrap().stats().bytes_estimate,
            10 * 4 * 8
        );
    }

    #[test]
    fn snapshot_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = NeighborStore::new(5, 3).unwrap();
        for _ in 0..4 {
            s.push_batch(&random_rows(&mut rng, 2, 3)).unwrap();
        }
        assert_eq!(NeighborStore::from_snapshot(s.snapshot()).unwrap(), s);
    }

    proptest! {
        #[test]
        fn fifo_law(capacity in 1usize..12, batches in prop::collection::vec(0usize..12, 0..10)) {
            let mut s = NeighborStore::new(capacity, 2).unwrap();
            let mut pushed: Vec<f64> = Vec::new();
            for n in batches {
                let n = n.min(capacity);
                let base = pushed.len();
                // vectors (1, id) normalized; id recoverable from the ratio
                let rows: Vec<[f64; 2]> = (0..n).map(|i| [1.0, (base + i) as f64]).collect();
                pushed.extend((0..n).map(|i| (base + i) as f64));
                if n > 0 {
                    s.push_batch(&Tensor::from_rows(&rows).unwrap()).unwrap();
                }
            }
            let expect: Vec<f64> = pushed.iter().rev().take(capacity).rev().copied().collect();
            let got: Vec<f64> = s.slots_by_age().into_iter().map(|sl| {
                let e = s.entry(sl);
                (e[1] / e[0]).round()
            }).collect();
            prop_assert_eq!(got, expect);
            for sl in 0..s.fill() {
                let n: f64 = s.entry(sl).iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() < 1e-5);
            }
        }
    }
}

//! Sequence priority buffer: informativeness scores, a capacity-bounded
//! store, proportional sampling and importance weights.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Leaves below this priority are sampled as if they had it, so a record
/// whose components are all zero stays reachable.
pub const PRIORITY_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub loss: f64,
    pub uncertainty: f64,
    pub diversity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub seq_id: usize,
    pub priority: f64,
    pub components: Option<Components>,
    pub embedding: Vec<f32>,
    pub last_updated: u64,
    pub sample_count: u64,
}

impl SequenceRecord {
    pub fn new(seq_id: usize, priority: f64) -> Self {
        Self {
            seq_id,
            priority,
            components: None,
            embedding: Vec::new(),
            last_updated: 0,
            sample_count: 0,
        }
    }
}

/// Which population size enters the importance weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImportanceN {
    /// Records currently stored.
    Count,
    /// The configured capacity.
    Capacity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorityWeights {
    pub loss: f64,
    pub uncertainty: f64,
    pub diversity: f64,
}

impl Default for PriorityWeights {
    fn default() -> Self {
        Self {
            loss: 0.5,
            uncertainty: 0.3,
            diversity: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BufferConfig {
    pub capacity: usize,
    pub alpha: f64,
    pub beta0: f64,
    pub beta_rate: f64,
    pub refresh_every: u64,
    pub importance_n: ImportanceN,
    pub weights: PriorityWeights,
}

impl Default for BufferConfig {
    fn default() -> Self {
        Self {
            capacity: 50_000,
            alpha: 0.6,
            beta0: 0.4,
            beta_rate: 0.001,
            refresh_every: 5,
            importance_n: ImportanceN::Count,
            weights: PriorityWeights::default(),
        }
    }
}

// ------------------------------------------------------------------ scores

/// `1 - mean(max prob)` over the real target tokens.
pub fn compute_uncertainty(max_probs: &[f64]) -> Result<f64> {
    if max_probs.is_empty() {
        return Err(Error::Empty("compute_uncertainty: no target tokens"));
    }
    let mean = max_probs.iter().sum::<f64>() / max_probs.len() as f64;
    Ok((1.0 - mean).clamp(0.0, 1.0))
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(invalid("compute_diversity", "zero sequence embedding"));
    }
    Ok(dot / (na * nb))
}

/// `1 - mean_{j != i} cos(s_i, s_j)`, clamped to [0, 1]; a batch of one is
/// maximally diverse.
pub fn compute_diversity(batch: &[Vec<f64>], i: usize) -> Result<f64> {
    if i >= batch.len() {
        return Err(invalid("compute_diversity", format!("index {i} outside batch of {}", batch.len())));
    }
    if batch.len() == 1 {
        cosine(&batch[0], &batch[0])?;
        return Ok(1.0);
    }
    let mut total = 0.0;
    for (j, e) in batch.iter().enumerate() {
        if j != i {
            total += cosine(&batch[i], e)?;
        }
    }
    Ok((1.0 - total / (batch.len() - 1) as f64).clamp(0.0, 1.0))
}

pub fn compute_priority(c: &Components, w: &PriorityWeights) -> Result<f64> {
    if w.loss < 0.0 || w.uncertainty < 0.0 || w.diversity < 0.0 {
        return Err(invalid("compute_priority", "negative component weight"));
    }
    Ok(w.loss * c.loss + w.uncertainty * c.uncertainty + w.diversity * c.diversity)
}

/// Min-max normalizes per-sequence losses within a batch; a flat batch maps
/// to 0.5.
pub fn normalize_losses(losses: &[f64]) -> Vec<f64> {
    let lo = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    losses
        .iter()
        .map(|&l| if hi > lo { (l - lo) / (hi - lo) } else { 0.5 })
        .collect()
}

// ------------------------------------------------------------- index tree

/// Segment tree over slots holding `sum(p^alpha)`, `min(p)` and `max(p)`.
/// Parents are always recomputed from their children, so the totals carry
/// no accumulated drift.
#[derive(Debug, Clone)]
struct SegmentTree {
    leaves: usize,
    sum: Vec<f64>,
    min: Vec<f64>,
    max: Vec<f64>,
}

impl SegmentTree {
    fn new(slots: usize) -> Self {
        let leaves = slots.max(1).next_power_of_two();
        Self {
            leaves,
            sum: vec![0.0; 2 * leaves],
            min: vec![f64::INFINITY; 2 * leaves],
            max: vec![f64::NEG_INFINITY; 2 * leaves],
        }
    }

    fn set(&mut self, slot: usize, mass: f64, priority: Option<f64>) {
        let mut i = slot + self.leaves;
        self.sum[i] = mass;
        self.min[i] = priority.unwrap_or(f64::INFINITY);
        self.max[i] = priority.unwrap_or(f64::NEG_INFINITY);
        while i > 1 {
            i /= 2;
            let (l, r) = (2 * i, 2 * i + 1);
            self.sum[i] = self.sum[l] + self.sum[r];
            self.min[i] = self.min[l].min(self.min[r]);
            self.max[i] = self.max[l].max(self.max[r]);
        }
    }

    fn total(&self) -> f64 {
        self.sum[1]
    }

    fn mass(&self, slot: usize) -> f64 {
        self.sum[slot + self.leaves]
    }

    /// Slot whose cumulative range contains `u` in `[0, total)`.
    fn find(&self, mut u: f64) -> usize {
        let mut i = 1;
        while i < self.leaves {
            let l = 2 * i;
            if u < self.sum[l] || self.sum[l + 1] == 0.0 {
                i = l;
            } else {
                u -= self.sum[l];
                i = l + 1;
            }
        }
        i - self.leaves
    }

    /// Leftmost slot holding the minimum priority.
    fn argmin(&self) -> Option<usize> {
        if self.min[1] == f64::INFINITY {
            return None;
        }
        let mut i = 1;
        while i < self.leaves {
            i = if self.min[2 * i] <= self.min[2 * i + 1] { 2 * i } else { 2 * i + 1 };
        }
        Some(i - self.leaves)
    }
}

// ------------------------------------------------------------------ buffer

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "BufferSnapshot", try_from = "BufferSnapshot")]
pub struct PriorityBuffer {
    pub cfg: BufferConfig,
    beta: f64,
    anneal_steps: u64,
    slots: Vec<Option<SequenceRecord>>,
    free: Vec<usize>,
    index: HashMap<usize, usize>,
    tree: SegmentTree,
    pending: HashMap<usize, (Components, Vec<f32>)>,
}

/// Serialized form: the stored records in slot order; the index and the
/// tree are rebuilt on load.
#[derive(Serialize, Deserialize)]
struct BufferSnapshot {
    cfg: BufferConfig,
    beta: f64,
    anneal_steps: u64,
    slots: Vec<Option<SequenceRecord>>,
    free: Vec<usize>,
    pending: Vec<(usize, Components, Vec<f32>)>,
}

impl From<PriorityBuffer> for BufferSnapshot {
    fn from(b: PriorityBuffer) -> Self {
        let mut pending: Vec<_> = b.pending.into_iter().map(|(id, (c, e))| (id, c, e)).collect();
        pending.sort_by_key(|p| p.0);
        Self {
            cfg: b.cfg,
            beta: b.beta,
            anneal_steps: b.anneal_steps,
            slots: b.slots,
            free: b.free,
            pending,
        }
    }
}

impl TryFrom<BufferSnapshot> for PriorityBuffer {
    type Error = Error;

    fn try_from(s: BufferSnapshot) -> Result<Self> {
        let mut b = PriorityBuffer::new(s.cfg)?;
        if s.slots.len() > s.cfg.capacity + 1 {
            return Err(invalid("PriorityBuffer", "more slots than capacity"));
        }
        b.beta = s.beta;
        b.anneal_steps = s.anneal_steps;
        b.slots = s.slots;
        b.free = s.free;
        for slot in 0..b.slots.len() {
            if let Some(r) = &b.slots[slot] {
                if b.index.insert(r.seq_id, slot).is_some() {
                    return Err(invalid("PriorityBuffer", format!("duplicate sequence {}", r.seq_id)));
                }
            }
            b.write_slot(slot);
        }
        b.pending = s.pending.into_iter().map(|(id, c, e)| (id, (c, e))).collect();
        Ok(b)
    }
}

/// One draw from the buffer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Draw {
    pub seq_id: usize,
    pub probability: f64,
}

impl PriorityBuffer {
    pub fn new(cfg: BufferConfig) -> Result<Self> {
        if cfg.capacity == 0 {
            return Err(invalid("PriorityBuffer", "capacity must be positive"));
        }
        if cfg.alpha < 0.0 || !(0.0..=1.0).contains(&cfg.beta0) || cfg.beta_rate < 0.0 {
            return Err(invalid("PriorityBuffer", "alpha >= 0, beta0 in [0, 1] and beta_rate >= 0 required"));
        }
        if cfg.refresh_every == 0 {
            return Err(invalid("PriorityBuffer", "refresh_every must be positive"));
        }
        Ok(Self {
            cfg,
            beta: cfg.beta0,
            anneal_steps: 0,
            slots: Vec::new(),
            free: Vec::new(),
            index: HashMap::new(),
            tree: SegmentTree::new(cfg.capacity + 1),
            pending: HashMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn get(&self, seq_id: usize) -> Option<&SequenceRecord> {
        self.index.get(&seq_id).and_then(|&s| self.slots[s].as_ref())
    }

    /// Records in descending priority, ties by id.
    pub fn records_by_priority(&self) -> Vec<&SequenceRecord> {
        let mut v: Vec<_> = self.slots.iter().flatten().collect();
        v.sort_by(|a, b| b.priority.total_cmp(&a.priority).then(a.seq_id.cmp(&b.seq_id)));
        v
    }

    /// Highest stored priority, 1 when empty.
    pub fn max_priority(&self) -> f64 {
        if self.is_empty() {
            1.0
        } else {
            self.tree.max[1]
        }
    }

    /// Sum of `p^alpha` as maintained by the sampling index.
    pub fn total_mass(&self) -> f64 {
        self.tree.total()
    }

    /// Sum recomputed from the stored records, for audits.
    pub fn recomputed_mass(&self) -> f64 {
        self.slots.iter().flatten().map(|r| self.mass(r.priority)).sum()
    }

    fn mass(&self, priority: f64) -> f64 {
        priority.max(PRIORITY_FLOOR).powf(self.cfg.alpha)
    }

    /// Exact sampling probability of a stored sequence.
    pub fn probability(&self, seq_id: usize) -> Option<f64> {
        let slot = *self.index.get(&seq_id)?;
        Some(self.tree.mass(slot) / self.tree.total())
    }

    fn write_slot(&mut self, slot: usize) {
        let (mass, p) = match &self.slots[slot] {
            Some(r) => (self.mass(r.priority), Some(r.priority)),
            None => (0.0, None),
        };
        self.tree.set(slot, mass, p);
    }

    fn remove_slot(&mut self, slot: usize) -> Option<SequenceRecord> {
        let rec = self.slots[slot].take()?;
        self.index.remove(&rec.seq_id);
        self.pending.remove(&rec.seq_id);
        self.free.push(slot);
        self.write_slot(slot);
        Some(rec)
    }

    /// Stores or replaces a record. Returns the record evicted to respect
    /// the capacity, which may be the one just inserted.
    pub fn insert_or_update(&mut self, rec: SequenceRecord) -> Result<Option<SequenceRecord>> {
        if !rec.priority.is_finite() || rec.priority < 0.0 {
            return Err(invalid("insert_or_update", format!("priority {} is not a finite non-negative value", rec.priority)));
        }
        if let Some(&slot) = self.index.get(&rec.seq_id) {
            self.slots[slot] = Some(rec);
            self.write_slot(slot);
            return Ok(None);
        }
        let slot = match self.free.pop() {
            Some(s) => s,
            None => {
                self.slots.push(None);
                self.slots.len() - 1
            }
        };
        self.index.insert(rec.seq_id, slot);
        self.slots[slot] = Some(rec);
        self.write_slot(slot);
        if self.len() > self.cfg.capacity {
            let victim = self.tree.argmin().expect("non-empty buffer");
            return Ok(self.remove_slot(victim));
        }
        Ok(None)
    }

    /// Inserts an unseen sequence at the current maximum priority.
    pub fn insert_fresh(&mut self, seq_id: usize) -> Result<Option<SequenceRecord>> {
        let p = self.max_priority();
        self.insert_or_update(SequenceRecord::new(seq_id, p))
    }

    /// `b` independent draws with probability proportional to `p^alpha`.
    pub fn sample(&mut self, b: usize, rng: &mut impl Rng) -> Result<Vec<Draw>> {
        if self.is_empty() {
            return Err(Error::Empty("sample: buffer is empty"));
        }
        let total = self.tree.total();
        let mut out = Vec::with_capacity(b);
        for _ in 0..b {
            let u = rng.random::<f64>() * total;
            let slot = self.tree.find(u);
            let rec = self.slots[slot].as_mut().expect("tree points at a stored record");
            rec.sample_count += 1;
            out.push(Draw {
                seq_id: rec.seq_id,
                probability: self.tree.mass(slot) / total,
            });
        }
        Ok(out)
    }

    /// Population size used by the importance weights.
    pub fn importance_population(&self) -> usize {
        match self.cfg.importance_n {
            ImportanceN::Count => self.len(),
            ImportanceN::Capacity => self.cfg.capacity,
        }
    }

    /// Unnormalized `((1/N)(1/P))^beta`.
    pub fn raw_importance_weights(&self, probs: &[f64]) -> Result<Vec<f64>> {
        let n = self.importance_population() as f64;
        probs
            .iter()
            .map(|&p| {
                if p > 0.0 {
                    Ok((1.0 / (n * p)).powf(self.beta))
                } else {
                    Err(invalid("importance_weights", format!("probability {p} is not positive")))
                }
            })
            .collect()
    }

    /// Importance weights divided by their batch maximum.
    pub fn importance_weights(&self, probs: &[f64]) -> Result<Vec<f64>> {
        let raw = self.raw_importance_weights(probs)?;
        let max = raw.iter().copied().fold(0.0, f64::max);
        Ok(raw.into_iter().map(|w| w / max).collect())
    }

    /// Steps after which beta is exactly 1.
    pub fn steps_to_full_beta(&self) -> u64 {
        if self.cfg.beta_rate == 0.0 {
            return u64::MAX;
        }
        // the small offset absorbs rounding in the quotient
        ((1.0 - self.cfg.beta0) / self.cfg.beta_rate - 1e-9).ceil().max(0.0) as u64
    }

    /// `beta <- min(1, beta + rate)`, computed from the step count so that 1
    /// is reached exactly.
    pub fn anneal_beta(&mut self) {
        self.anneal_steps += 1;
        self.beta = if self.anneal_steps >= self.steps_to_full_beta() {
            1.0
        } else {
            (self.cfg.beta0 + self.anneal_steps as f64 * self.cfg.beta_rate).min(1.0)
        };
    }

    /// Records the latest components of sampled sequences and, on steps that
    /// are multiples of the refresh period, rewrites their priorities.
    /// Returns whether a write happened.
    pub fn refresh_scores(&mut self, stats: &[(usize, Components, Vec<f32>)], step: u64) -> Result<bool> {
        for (id, c, e) in stats {
            self.pending.insert(*id, (*c, e.clone()));
        }
        if step % self.cfg.refresh_every != 0 {
            return Ok(false);
        }
        let mut ids: Vec<usize> = self.pending.keys().copied().collect();
        ids.sort_unstable();
        for id in ids {
            let (c, e) = self.pending.remove(&id).expect("key listed above");
            let Some(&slot) = self.index.get(&id) else { continue };
            let priority = compute_priority(&c, &self.cfg.weights)?;
            let rec = self.slots[slot].as_mut().expect("indexed slot holds a record");
            rec.priority = priority;
            rec.components = Some(c);
            rec.embedding = e;
            rec.last_updated = step;
            self.write_slot(slot);
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;
    use proptest::prelude::*;

    fn cfg(capacity: usize, alpha: f64) -> BufferConfig {
        BufferConfig {
            capacity,
            alpha,
            ..Default::default()
        }
    }

    #[test]
    fn serde_round_trip_preserves_sampling() {
        let mut b = PriorityBuffer::new(cfg(4, 0.6)).unwrap();
        for (id, p) in [(3, 0.2), (7, 0.9), (1, 0.5), (8, 0.0), (9, 0.4)] {
            b.insert_or_update(SequenceRecord::new(id, p)).unwrap();
        }
        let c = Components { loss: 0.1, uncertainty: 0.2, diversity: 0.3 };
        b.refresh_scores(&[(7, c, vec![1.0])], 1).unwrap();
        b.anneal_beta();
        let json = serde_json::to_string(&b).unwrap();
        let mut back: PriorityBuffer = serde_json::from_str(&json).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
        assert_eq!(back.len(), 4);
        assert_eq!(back.beta(), b.beta());
        assert_eq!(back.total_mass(), b.total_mass());
        for id in [3, 7, 1, 9] {
            assert_eq!(back.probability(id), b.probability(id));
        }
        let (mut r1, mut r2) = (seeded_rng(2), seeded_rng(2));
        assert_eq!(back.sample(20, &mut r1).unwrap(), b.sample(20, &mut r2).unwrap());
        assert!(back.refresh_scores(&[], 5).unwrap());
        assert!(b.refresh_scores(&[], 5).unwrap());
        assert_eq!(back.get(7).unwrap().priority, b.get(7).unwrap().priority);
    }

    #[test]
    fn uncertainty_examples() {
        assert_eq!(compute_uncertainty(&[1.0, 1.0]).unwrap(), 0.0);
        assert!((compute_uncertainty(&[0.9, 0.7]).unwrap() - 0.2).abs() < 1e-12);
        assert!((compute_uncertainty(&[0.1; 5]).unwrap() - 0.9).abs() < 1e-12);
        assert!(compute_uncertainty(&[]).is_err());
    }

    #[test]
    fn diversity_examples() {
        let a = vec![1.0, 0.0];
        let b = vec![0.0, 1.0];
        assert_eq!(compute_diversity(&[a.clone(), a.clone(), a.clone()], 0).unwrap(), 0.0);
        assert_eq!(compute_diversity(&[a.clone(), b.clone()], 0).unwrap(), 1.0);
        assert!((compute_diversity(&[a.clone(), b, a.clone()], 0).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(compute_diversity(&[a.clone()], 0).unwrap(), 1.0);
        assert_eq!(compute_diversity(&[a.clone(), vec![-1.0, 0.0]], 0).unwrap(), 1.0);
        assert!(compute_diversity(&[a, vec![0.0, 0.0]], 0).is_err());
    }

    #[test]
    fn priority_examples() {
        let w = PriorityWeights::default();
        let one = Components { loss: 1.0, uncertainty: 1.0, diversity: 1.0 };
        assert!((compute_priority(&one, &w).unwrap() - 1.0).abs() < 1e-12);
        let zero = Components { loss: 0.0, uncertainty: 0.0, diversity: 0.0 };
        assert_eq!(compute_priority(&zero, &w).unwrap(), 0.0);
        let bad = PriorityWeights { loss: -0.1, ..w };
        assert!(compute_priority(&one, &bad).is_err());
    }

    #[test]
    fn loss_normalization() {
        assert_eq!(normalize_losses(&[2.0, 4.0, 3.0]), vec![0.0, 1.0, 0.5]);
        assert_eq!(normalize_losses(&[1.0, 1.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn fresh_records_take_the_max() {
        let mut b = PriorityBuffer::new(cfg(10, 0.6)).unwrap();
        b.insert_fresh(7).unwrap();
        assert_eq!(b.get(7).unwrap().priority, 1.0);
        b.insert_or_update(SequenceRecord::new(8, 2.5)).unwrap();
        b.insert_fresh(9).unwrap();
        assert_eq!(b.get(9).unwrap().priority, 2.5);
    }

    #[test]
    fn lowest_priority_is_evicted() {
        let mut b = PriorityBuffer::new(cfg(3, 0.6)).unwrap();
        let mut evicted = Vec::new();
        for (id, p) in [0.9, 0.5, 0.7, 0.8].into_iter().enumerate() {
            evicted.extend(b.insert_or_update(SequenceRecord::new(id, p)).unwrap());
        }
        assert_eq!(evicted.len(), 1);
        assert_eq!(evicted[0].priority, 0.5);
        let mut kept: Vec<f64> = b.records_by_priority().iter().map(|r| r.priority).collect();
        kept.sort_by(f64::total_cmp);
        assert_eq!(kept, vec![0.7, 0.8, 0.9]);
    }

    #[test]
    fn two_record_distribution() {
        let mut b = PriorityBuffer::new(cfg(4, 1.0)).unwrap();
        b.insert_or_update(SequenceRecord::new(0, 1.0)).unwrap();
        b.insert_or_update(SequenceRecord::new(1, 3.0)).unwrap();
        assert!((b.probability(0).unwrap() - 0.25).abs() < 1e-15);
        let mut rng = seeded_rng(0);
        let draws = b.sample(100_000, &mut rng).unwrap();
        let ones = draws.iter().filter(|d| d.seq_id == 1).count() as f64 / 1e5;
        assert!((ones - 0.75).abs() < 0.01, "{ones}");
        assert_eq!(b.get(0).unwrap().sample_count + b.get(1).unwrap().sample_count, 100_000);
    }

    #[test]
    fn alpha_zero_is_uniform() {
        let mut b = PriorityBuffer::new(cfg(4, 0.0)).unwrap();
        for (i, p) in [0.1, 5.0, 2.0].into_iter().enumerate() {
            b.insert_or_update(SequenceRecord::new(i, p)).unwrap();
        }
        for i in 0..3 {
            assert!((b.probability(i).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn importance_weight_examples() {
        let mut b = PriorityBuffer::new(BufferConfig {
            beta0: 0.5,
            ..cfg(10, 0.6)
        })
        .unwrap();
        for i in 0..4 {
            b.insert_fresh(i).unwrap();
        }
        let raw = b.raw_importance_weights(&[0.5]).unwrap();
        assert!((raw[0] - 0.5f64.sqrt()).abs() < 1e-15);
        let w = b.importance_weights(&[0.25; 3]).unwrap();
        assert_eq!(w, vec![1.0; 3]);
        let w = b.importance_weights(&[0.1, 0.4, 0.2]).unwrap();
        assert_eq!(w.iter().copied().fold(0.0, f64::max), 1.0);
        assert!(b.importance_weights(&[0.0]).is_err());
    }

    #[test]
    fn importance_population_switch() {
        let mut b = PriorityBuffer::new(BufferConfig {
            importance_n: ImportanceN::Capacity,
            ..cfg(10, 0.6)
        })
        .unwrap();
        b.insert_fresh(0).unwrap();
        assert_eq!(b.importance_population(), 10);
    }

    #[test]
    fn beta_reaches_one_exactly() {
        let mut b = PriorityBuffer::new(cfg(4, 0.6)).unwrap();
        assert_eq!(b.steps_to_full_beta(), 600);
        let mut prev = b.beta();
        for step in 1..=700 {
            b.anneal_beta();
            assert!(b.beta() >= prev);
            prev = b.beta();
            if step < 600 {
                assert!(b.beta() < 1.0);
            } else {
                assert_eq!(b.beta(), 1.0);
            }
        }
    }

    #[test]
    fn refresh_writes_on_period_with_latest_values() {
        let mut b = PriorityBuffer::new(cfg(4, 0.6)).unwrap();
        b.insert_fresh(0).unwrap();
        let c = |l| Components { loss: l, uncertainty: 0.0, diversity: 0.0 };
        for step in 1..5 {
            let wrote = b.refresh_scores(&[(0, c(step as f64 * 0.1), vec![])], step).unwrap();
            assert!(!wrote);
            assert_eq!(b.get(0).unwrap().priority, 1.0);
        }
        assert!(b.refresh_scores(&[(0, c(0.8), vec![1.0])], 5).unwrap());
        let r = b.get(0).unwrap();
        assert!((r.priority - 0.4).abs() < 1e-15);
        assert_eq!(r.last_updated, 5);
        assert_eq!(r.embedding, vec![1.0]);
        assert!((b.total_mass() - b.recomputed_mass()).abs() < 1e-12);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Insert(usize, f64),
        Fresh(usize),
    }

    fn arb_ops() -> impl Strategy<Value = Vec<Op>> {
        prop::collection::vec(
            prop_oneof![
                (0usize..30, 0.0f64..2.0).prop_map(|(i, p)| Op::Insert(i, p)),
                (0usize..30).prop_map(Op::Fresh),
            ],
            1..80,
        )
    }

    proptest! {
        #[test]
        fn index_and_eviction_invariants(ops in arb_ops(), cap in 1usize..12) {
            let mut b = PriorityBuffer::new(cfg(cap, 0.6)).unwrap();
            for op in ops {
                let evicted = match op {
                    Op::Insert(i, p) => b.insert_or_update(SequenceRecord::new(i, p)).unwrap(),
                    Op::Fresh(i) => {
                        if b.get(i).is_some() { None } else { b.insert_fresh(i).unwrap() }
                    }
                };
                prop_assert!(b.len() <= cap);
                let total = b.total_mass();
                prop_assert!((total - b.recomputed_mass()).abs() <= 1e-9 * total.max(1.0));
                let psum: f64 = b.records_by_priority().iter().map(|r| b.probability(r.seq_id).unwrap()).sum();
                prop_assert!((psum - 1.0).abs() < 1e-9);
                if let Some(e) = evicted {
                    for r in b.records_by_priority() {
                        prop_assert!(e.priority <= r.priority);
                    }
                }
            }
        }

        #[test]
        fn priority_is_monotone_in_each_component(
            l in 0.0f64..1.0, u in 0.0f64..1.0, d in 0.0f64..1.0, bump in 0.0f64..1.0
        ) {
            let w = PriorityWeights::default();
            let base = compute_priority(&Components { loss: l, uncertainty: u, diversity: d }, &w).unwrap();
            prop_assert!(base >= 0.0 && base <= 1.0 + 1e-12);
            let up = Components { loss: (l + bump).min(1.0), uncertainty: u, diversity: d };
            prop_assert!(compute_priority(&up, &w).unwrap() >= base);
            let up = Components { loss: l, uncertainty: (u + bump).min(1.0), diversity: d };
            prop_assert!(compute_priority(&up, &w).unwrap() >= base);
            let up = Components { loss: l, uncertainty: u, diversity: (d + bump).min(1.0) };
            prop_assert!(compute_priority(&up, &w).unwrap() >= base);
        }

        #[test]
        fn weights_are_max_normalized(ps in prop::collection::vec(1e-4f64..1.0, 1..16), beta in 0.0f64..1.0) {
            let mut b = PriorityBuffer::new(BufferConfig { beta0: beta, ..cfg(100, 0.6) }).unwrap();
            for i in 0..20 { b.insert_fresh(i).unwrap(); }
            let w = b.importance_weights(&ps).unwrap();
            prop_assert_eq!(w.iter().copied().fold(0.0, f64::max), 1.0);
            prop_assert!(w.iter().all(|&x| x > 0.0 && x <= 1.0));
        }
    }
}

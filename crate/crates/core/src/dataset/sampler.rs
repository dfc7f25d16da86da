//! P x K batch schedule: every batch holds `P` classes with exactly `K` samples each,
//! so each anchor has same-class and neighbor-class positives as well as negatives.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::LabeledImageSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Dataset indices, grouped by class in `classes_present` order.
    pub indices: Vec<usize>,
    /// Sorted class ids present in the batch.
    pub classes_present: Vec<usize>,
    pub per_class_count: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Deterministic class-balanced batch schedule.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    by_class: Vec<Vec<usize>>,
    usable: Vec<usize>,
    classes_per_batch: usize,
    samples_per_class: usize,
    batches_per_epoch: usize,
    seed: u64,
}

impl BalancedSampler {
    pub fn new(set: &LabeledImageSet, classes_per_batch: usize, samples_per_class: usize, seed: u64) -> Result<Self> {
        if classes_per_batch < 1 || samples_per_class < 1 {
            return Err(Error::InvalidArgument(format!(
                "classes per batch ({classes_per_batch}) and samples per class ({samples_per_class}) must be at least 1"
            )));
        }
        let by_class = set.class_indices();
        let usable: Vec<usize> = (0..by_class.len()).filter(|&c| !by_class[c].is_empty()).collect();
        if classes_per_batch > usable.len() {
            return Err(Error::InvalidArgument(format!(
                "{classes_per_batch} classes per batch requested but only {} classes have samples",
                usable.len()
            )));
        }
        let batches_per_epoch = (set.len() / (classes_per_batch * samples_per_class)).max(1);
        Ok(Self {
            by_class,
            usable,
            classes_per_batch,
            samples_per_class,
            batches_per_epoch,
            seed,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.classes_per_batch * self.samples_per_class
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.batches_per_epoch
    }

    /// The batch sequence for `epoch`; a pure function of (data, P, K, seed, epoch).
    pub fn epoch(&self, epoch: usize) -> Vec<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);

        let mut queues: Vec<Vec<usize>> = self
            .by_class
            .iter()
            .map(|idx| {
                let mut q = idx.clone();
                q.shuffle(&mut rng);
                q
            })
            .collect();
        let mut deck: Vec<usize> = Vec::new();

        (0..self.batches_per_epoch)
            .map(|_| {
                let mut classes = self.pick_classes(&mut deck, &mut rng);
                classes.sort_unstable();
                let mut indices = Vec::with_capacity(self.batch_size());
                for &c in &classes {
                    self.draw(c, &mut queues[c], &mut indices, &mut rng);
                }
                Batch {
                    indices,
                    classes_present: classes,
                    per_class_count: self.samples_per_class,
                }
            })
            .collect()
    }

    fn pick_classes(&self, deck: &mut Vec<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if self.classes_per_batch == self.usable.len() {
            return self.usable.clone();
        }
        let mut chosen = Vec::with_capacity(self.classes_per_batch);
        while chosen.len() < self.classes_per_batch {
            if deck.is_empty() {
                *deck = self.usable.clone();
                deck.shuffle(rng);
            }
            // Skip classes already chosen for this batch; they return to the next deck.
            if let Some(pos) = deck.iter().rposition(|c| !chosen.contains(c)) {
                chosen.push(deck.remove(pos));
            } else {
                deck.clear();
            }
        }
        chosen
    }

    fn draw(&self, class: usize, queue: &mut Vec<usize>, out: &mut Vec<usize>, rng: &mut ChaCha8Rng) {
        let pool = &self.by_class[class];
        let start = out.len();
        let unique = pool.len() >= self.samples_per_class;
        while out.len() - start < self.samples_per_class {
            if queue.is_empty() {
                // A short class is resampled; members already in this batch are excluded when possible.
                queue.extend(pool.iter().copied().filter(|i| !unique || !out[start..].contains(i)));
                queue.shuffle(rng);
            }
            out.push(queue.pop().expect("refilled queue is nonempty"));
        }
    }
}

/// The first epoch of a [`BalancedSampler`].
pub fn make_balanced_batches(
    set: &LabeledImageSet,
    classes_per_batch: usize,
    samples_per_class: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    Ok(BalancedSampler::new(set, classes_per_batch, samples_per_class, seed)?.epoch(0))
}

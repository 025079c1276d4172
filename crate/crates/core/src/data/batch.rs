use std::collections::{HashSet, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::note::{NoteId, Pair};
use crate::error::{Error, Result};

/// `2B` distinct notes laid out as `[q0, r0, q1, r1, ...]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub notes: Vec<NoteId>,
    /// `partner[i]` is the index of note `i`'s related note.
    pub partner: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(pairs: &[(NoteId, NoteId)]) -> Result<Batch> {
        let mut seen = HashSet::new();
        let mut notes = Vec::with_capacity(2 * pairs.len());
        for &(q, r) in pairs {
            if !seen.insert(q) || !seen.insert(r) {
                return Err(Error::Batching(format!(
                    "duplicate note in pair ({q}, {r})"
                )));
            }
            notes.extend([q, r]);
        }
        Ok(Batch {
            partner: pair_partners(pairs.len()),
            notes,
        })
    }

    /// Number of pairs.
    pub fn pairs(&self) -> usize {
        self.notes.len() / 2
    }
}

/// Partner indices for the interleaved pair layout.
pub fn pair_partners(b: usize) -> Vec<usize> {
    (0..2 * b).map(|i| i ^ 1).collect()
}

/// Endless stream of batches. Each epoch reshuffles the pair list and hands
/// out every pair at most once; a pair that would repeat a note already in
/// the current batch is deferred to a later batch of the same epoch.
#[derive(Clone, Debug)]
pub struct BatchStream {
    pairs: Vec<(NoteId, NoteId)>,
    b: usize,
    rng: ChaCha8Rng,
    queue: VecDeque<usize>,
    epoch: usize,
}

impl BatchStream {
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn refill(&mut self) {
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        order.shuffle(&mut self.rng);
        self.queue = order.into();
        self.epoch += 1;
    }

    /// Single pass over the queue; returns the batch if it could be filled.
    fn try_fill(&mut self) -> Option<Batch> {
        let mut seen = HashSet::new();
        let mut chosen = Vec::with_capacity(self.b);
        let mut kept = VecDeque::with_capacity(self.queue.len());
        while let Some(idx) = self.queue.pop_front() {
            let (q, r) = self.pairs[idx];
            if chosen.len() < self.b && !seen.contains(&q) && !seen.contains(&r) {
                seen.insert(q);
                seen.insert(r);
                chosen.push(idx);
            } else {
                kept.push_back(idx);
            }
            if chosen.len() == self.b {
                break;
            }
        }
        kept.extend(self.queue.drain(..));
        if chosen.len() < self.b {
            // Put the partial selection back; the caller starts a new epoch.
            kept.extend(chosen);
            self.queue = kept;
            return None;
        }
        self.queue = kept;
        let picked: Vec<_> = chosen.iter().map(|&i| self.pairs[i]).collect();
        Some(Batch::from_pairs(&picked).expect("distinct by construction"))
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        if let Some(batch) = self.try_fill() {
            return Ok(batch);
        }
        self.refill();
        self.try_fill().ok_or_else(|| {
            Error::Batching(format!(
                "cannot assemble {} pairs with distinct notes from {} pairs",
                self.b,
                self.pairs.len()
            ))
        })
    }
}

impl Iterator for BatchStream {
    type Item = Result<Batch>;
    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}

/// Shuffled stream of `b`-pair batches drawn without replacement per epoch.
pub fn make_batches(pairs: &[Pair], b: usize, seed: u64) -> Result<BatchStream> {
    if b == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if pairs.len() < b {
        return Err(Error::Batching(format!(
            "need at least {b} pairs, got {}",
            pairs.len()
        )));
    }
    if let Some(p) = pairs.iter().find(|p| p.query == p.related) {
        return Err(Error::Batching(format!(
            "pair relates note {} to itself",
            p.query
        )));
    }
    let mut s = BatchStream {
        pairs: pairs.iter().map(|p| (p.query, p.related)).collect(),
        b,
        rng: ChaCha8Rng::seed_from_u64(seed),
        queue: VecDeque::new(),
        epoch: 0,
    };
    s.refill();
    Ok(s)
}

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::cooccur::{build_pairs, cooccurrence, PairConfig};
use super::note::{BehaviorEvent, Note, NoteId, Pair};
use crate::error::{Error, Result};

/// Held-out retrieval pool plus mined training, validation and test pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    /// Sorted ids of the retrieval pool; no training pair touches them.
    pub pool: Vec<NoteId>,
    pub train: Vec<Pair>,
    pub val: Vec<Pair>,
    /// Pairs whose query and related note both lie in the pool.
    pub test: Vec<Pair>,
}

/// Mines pairs from the full log, then partitions them by a random pool of
/// `pool_size` notes. One tenth of the training pairs become validation.
pub fn split_dataset(
    notes: &[Note],
    events: &[BehaviorEvent],
    cfg: &PairConfig,
    pool_size: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    if pool_size < 2 || pool_size >= notes.len() {
        return Err(Error::Config(format!(
            "pool size {pool_size} must be in [2, {})",
            notes.len()
        )));
    }
    let scores: BTreeMap<(NoteId, NoteId), f64> = cooccurrence(events)?;
    let pairs = build_pairs(&scores, cfg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<NoteId> = notes.iter().map(|n| n.id).collect();
    ids.shuffle(&mut rng);
    let pool: BTreeSet<NoteId> = ids[..pool_size].iter().copied().collect();

    let mut train = Vec::new();
    let mut test = Vec::new();
    for p in pairs {
        match (pool.contains(&p.query), pool.contains(&p.related)) {
            (true, true) => test.push(p),
            (false, false) => train.push(p),
            _ => {}
        }
    }
    train.shuffle(&mut rng);
    let n_val = train.len() / 10;
    let mut val = train.split_off(train.len() - n_val);
    let key = |p: &Pair| (p.query, p.related);
    train.sort_by_key(key);
    val.sort_by_key(key);
    Ok(DatasetSplit {
        pool: pool.into_iter().collect(),
        train,
        val,
        test,
    })
}

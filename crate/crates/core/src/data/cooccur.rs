use std::collections::{BTreeMap, HashMap, HashSet};
use std::ops::Add;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use serde::{Deserialize, Serialize};

use super::note::{BehaviorEvent, NoteId, Pair};
use crate::error::{Error, Result};

/// Accumulator type for co-occurrence scores: `f64` in production, exact
/// rationals for checking.
pub trait Weight: Clone + Zero + Add<Output = Self> {
    fn recip(n: usize) -> Self;
}

impl Weight for f64 {
    fn recip(n: usize) -> Self {
        1.0 / n as f64
    }
}

impl Weight for BigRational {
    fn recip(n: usize) -> Self {
        BigRational::new(BigInt::from(1), BigInt::from(n))
    }
}

/// Directional co-occurrence scores `s(A→B) = Σ_{u ∈ U(A→B)} 1/N_u`.
///
/// `N_u` counts the distinct notes user `u` clicked anywhere in the log, and a
/// user contributes once per ordered pair no matter how often it repeats.
/// Contributions are summed smallest first so the result does not depend on
/// event order.
pub fn cooccurrence<W: Weight>(events: &[BehaviorEvent]) -> Result<BTreeMap<(NoteId, NoteId), W>> {
    let mut clicked: HashMap<u64, HashSet<NoteId>> = HashMap::new();
    let mut users: BTreeMap<(NoteId, NoteId), HashSet<u64>> = BTreeMap::new();
    for e in events {
        if e.viewed == e.clicked {
            return Err(Error::Data(format!(
                "user {} viewed and clicked the same note {}",
                e.user_id, e.viewed
            )));
        }
        clicked.entry(e.user_id).or_default().insert(e.clicked);
        users
            .entry((e.viewed, e.clicked))
            .or_default()
            .insert(e.user_id);
    }
    Ok(users
        .into_iter()
        .map(|(pair, us)| {
            let mut counts: Vec<usize> = us.iter().map(|u| clicked[u].len()).collect();
            counts.sort_unstable_by(|a, b| b.cmp(a));
            let s = counts
                .into_iter()
                .fold(W::zero(), |acc, n| acc + W::recip(n));
            (pair, s)
        })
        .collect())
}

/// Outlier bounds and fan-out for related-pair mining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairConfig {
    pub up: f64,
    pub low: f64,
    pub t: usize,
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig {
            up: 30.0,
            low: 0.01,
            t: 3,
        }
    }
}

impl PairConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.low < self.up) || self.t < 1 {
            return Err(Error::Config(format!(
                "pair config needs low < up and t >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Keeps, per query, the `t` best scores strictly inside `(low, up)`.
///
/// Ties go to the smaller note id; queries left without candidates produce
/// no pairs.
pub fn build_pairs(
    scores: &BTreeMap<(NoteId, NoteId), f64>,
    cfg: &PairConfig,
) -> Result<Vec<Pair>> {
    cfg.validate()?;
    let mut by_query: BTreeMap<NoteId, Vec<(NoteId, f64)>> = BTreeMap::new();
    for (&(a, b), &s) in scores {
        if s > cfg.low && s < cfg.up {
            by_query.entry(a).or_default().push((b, s));
        }
    }
    let mut out = Vec::new();
    for (q, mut cands) in by_query {
        cands.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        out.extend(cands.into_iter().take(cfg.t).map(|(r, s)| Pair {
            query: q,
            related: r,
            score: s,
        }));
    }
    Ok(out)
}

use std::cmp::Ordering;

use super::table::EmbeddingTable;
use crate::data::{NoteId, Pair};
use crate::error::{Error, Result};

/// Cosine of two unit vectors, accumulated in `f64`.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Descending score, then ascending id.
fn rank_order(a: &(NoteId, f64), b: &(NoteId, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Exact `k` nearest notes to `query` (excluded from its own ranking).
pub fn topk(table: &EmbeddingTable, query: NoteId, k: usize) -> Result<Vec<(NoteId, f64)>> {
    let q = table.vector(query)?;
    if k == 0 || k > table.len() - 1 {
        return Err(Error::Config(format!(
            "k = {k} is outside 1..={} for a table of {} notes",
            table.len() - 1,
            table.len()
        )));
    }
    let mut scored: Vec<(NoteId, f64)> = table
        .ids()
        .iter()
        .enumerate()
        .filter(|&(_, &id)| id != query)
        .map(|(i, &id)| (id, dot(q, table.row(i))))
        .collect();
    scored.select_nth_unstable_by(k - 1, rank_order);
    scored.truncate(k);
    scored.sort_by(rank_order);
    Ok(scored)
}

/// 1-based position of `target` in the ranking of everything but `query`.
pub fn rank_of(scores: &[(NoteId, f64)], query: NoteId, target: NoteId) -> Result<usize> {
    let t = scores
        .iter()
        .find(|s| s.0 == target)
        .ok_or_else(|| Error::Data(format!("note {target} is not in the pool")))?;
    let ahead = scores
        .iter()
        .filter(|s| s.0 != query && s.0 != target && rank_order(s, t) == Ordering::Less)
        .count();
    Ok(ahead + 1)
}

/// Ranks of each pair's related note, given a scorer over the whole pool.
pub fn pair_ranks<F>(pairs: &[Pair], mut scores_for: F) -> Result<Vec<usize>>
where
    F: FnMut(NoteId) -> Result<Vec<(NoteId, f64)>>,
{
    if pairs.is_empty() {
        return Err(Error::Data(
            "recall over an empty pair list is undefined".into(),
        ));
    }
    let mut out = Vec::with_capacity(pairs.len());
    let mut cached: Option<(NoteId, Vec<(NoteId, f64)>)> = None;
    for p in pairs {
        if p.query == p.related {
            return Err(Error::Data(format!(
                "pair relates note {} to itself",
                p.query
            )));
        }
        if cached.as_ref().is_none_or(|c| c.0 != p.query) {
            cached = Some((p.query, scores_for(p.query)?));
        }
        out.push(rank_of(&cached.as_ref().unwrap().1, p.query, p.related)?);
    }
    Ok(out)
}

/// Cosine scores of `query` against every row.
pub fn embedding_scores(table: &EmbeddingTable, query: NoteId) -> Result<Vec<(NoteId, f64)>> {
    let q = table.vector(query)?;
    Ok(table
        .ids()
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, dot(q, table.row(i))))
        .collect())
}

/// Fraction of ranks within each cut-off.
pub fn recall_from_ranks(ranks: &[usize], ks: &[usize]) -> Vec<f64> {
    ks.iter()
        .map(|&k| ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
        .collect()
}

/// Recall@K of `pairs` under embedding retrieval, for each `K` in `ks`.
pub fn recall_at_k(pairs: &[Pair], table: &EmbeddingTable, ks: &[usize]) -> Result<Vec<f64>> {
    let ranks = pair_ranks(pairs, |q| embedding_scores(table, q))?;
    Ok(recall_from_ranks(&ranks, ks))
}

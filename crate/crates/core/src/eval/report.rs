use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bm25::Bm25;
use super::search::{embedding_scores, pair_ranks, recall_from_ranks};
use super::table::EmbeddingTable;
use super::EvalSlice;
use crate::data::{Note, NoteId, Pair};
use crate::error::{Error, Result};

/// What to measure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub ks: Vec<usize>,
    pub slices: Vec<EvalSlice>,
    /// One run per seed; each draws a pool of `pool_size` notes.
    pub seeds: Vec<u64>,
    /// Pool size per run; `None` keeps the whole pool.
    pub pool_size: Option<usize>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            ks: vec![1, 10, 100],
            slices: EvalSlice::EVERY.to_vec(),
            seeds: vec![42],
            pool_size: None,
        }
    }
}

impl EvalSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config(
                "K values must be positive and non-empty".into(),
            ));
        }
        if self.seeds.is_empty() || self.slices.is_empty() {
            return Err(Error::Config("need at least one seed and one slice".into()));
        }
        if self.pool_size.is_some_and(|p| p < 2) {
            return Err(Error::Config("pool size must be at least 2".into()));
        }
        Ok(())
    }
}

/// A ranking method over the pool.
pub enum Retriever<'a> {
    Embeddings(&'a EmbeddingTable),
    /// BM25 over the text of the given notes.
    Bm25,
}

/// One row of the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub variant: String,
    pub modality: String,
    pub slice: EvalSlice,
    /// Mean pair count per run.
    pub pairs: f64,
    /// Runs with at least one pair in the slice.
    pub runs: usize,
    /// Recall per K, averaged over runs; `None` when the slice was empty.
    pub recall: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub pool_size: usize,
    pub seeds: Vec<u64>,
    /// Expected recall of a random ranking, `K/(pool − 1)` capped at 1.
    pub random_baseline: Vec<f64>,
    pub rows: Vec<EvalRow>,
}

pub fn random_baseline(ks: &[usize], pool: usize) -> Vec<f64> {
    ks.iter()
        .map(|&k| (k as f64 / (pool - 1) as f64).min(1.0))
        .collect()
}

fn draw_pool(all: &[NoteId], size: Option<usize>, seed: u64) -> Result<Vec<NoteId>> {
    let size = size.unwrap_or(all.len());
    if size > all.len() {
        return Err(Error::Config(format!(
            "pool size {size} exceeds the {} available notes",
            all.len()
        )));
    }
    if size == all.len() {
        return Ok(all.to_vec());
    }
    let mut ids = all.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids.truncate(size);
    ids.sort_unstable();
    Ok(ids)
}

/// Recall rows for one retriever over the requested slices and seeds.
pub fn evaluate(
    variant: &str,
    modality: &str,
    retriever: &Retriever<'_>,
    pool: &[Note],
    pairs: &[Pair],
    spec: &EvalSpec,
) -> Result<Vec<EvalRow>> {
    spec.validate()?;
    if pairs.is_empty() {
        return Err(Error::Data(
            "recall over an empty pair list is undefined".into(),
        ));
    }
    let notes: HashMap<NoteId, Note> = pool.iter().map(|n| (n.id, n.clone())).collect();
    let all_ids: Vec<NoteId> = {
        let s: BTreeSet<NoteId> = notes.keys().copied().collect();
        s.into_iter().collect()
    };
    if let Retriever::Embeddings(t) = retriever {
        for &id in &all_ids {
            t.vector(id)?;
        }
    }
    for p in pairs {
        if !notes.contains_key(&p.query) || !notes.contains_key(&p.related) {
            return Err(Error::Data(format!(
                "pair ({}, {}) references a note outside the pool",
                p.query, p.related
            )));
        }
    }

    let mut sums: Vec<(Vec<f64>, f64, usize)> =
        vec![(vec![0.0; spec.ks.len()], 0.0, 0); spec.slices.len()];
    for &seed in &spec.seeds {
        let ids = draw_pool(&all_ids, spec.pool_size, seed)?;
        let members: BTreeSet<NoteId> = ids.iter().copied().collect();
        let run_pairs: Vec<Pair> = pairs
            .iter()
            .filter(|p| members.contains(&p.query) && members.contains(&p.related))
            .copied()
            .collect();
        let bm25;
        let table;
        let mut scorer: Box<dyn FnMut(NoteId) -> Result<Vec<(NoteId, f64)>>> = match retriever {
            Retriever::Embeddings(t) => {
                table = t.subset(&ids)?;
                Box::new(|q| embedding_scores(&table, q))
            }
            Retriever::Bm25 => {
                let docs: Vec<Note> = ids.iter().map(|id| notes[id].clone()).collect();
                bm25 = Bm25::new(&docs)?;
                Box::new(|q| bm25.scores_for(q))
            }
        };
        for (s, slice) in spec.slices.iter().enumerate() {
            let sel = slice.select(&run_pairs, &notes)?;
            if sel.is_empty() {
                continue;
            }
            let ranks = pair_ranks(&sel, &mut scorer)?;
            let r = recall_from_ranks(&ranks, &spec.ks);
            let acc = &mut sums[s];
            acc.0.iter_mut().zip(&r).for_each(|(a, b)| *a += b);
            acc.1 += sel.len() as f64;
            acc.2 += 1;
        }
    }
    Ok(spec
        .slices
        .iter()
        .zip(sums)
        .map(|(&slice, (r, n, runs))| EvalRow {
            variant: variant.to_string(),
            modality: modality.to_string(),
            slice,
            pairs: n / spec.seeds.len() as f64,
            runs,
            recall: r
                .iter()
                .map(|&x| (runs > 0).then(|| x / runs as f64))
                .collect(),
        })
        .collect())
}

impl EvalReport {
    pub fn new(spec: &EvalSpec, pool: usize, rows: Vec<EvalRow>) -> Self {
        let effective = spec.pool_size.unwrap_or(pool);
        EvalReport {
            ks: spec.ks.clone(),
            pool_size: effective,
            seeds: spec.seeds.clone(),
            random_baseline: random_baseline(&spec.ks, effective),
            rows,
        }
    }

    /// The row for `(variant, modality, slice)`.
    pub fn row(&self, variant: &str, modality: &str, slice: EvalSlice) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.modality == modality && r.slice == slice)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,modality,slice,pairs,runs");
        for k in &self.ks {
            write!(s, ",R@{k}").unwrap();
        }
        s.push('\n');
        let mut line =
            |v: &str, m: &str, sl: &str, pairs: f64, runs: usize, rec: &[Option<f64>]| {
                write!(s, "{v},{m},{sl},{pairs},{runs}").unwrap();
                for r in rec {
                    match r {
                        Some(x) => write!(s, ",{x}").unwrap(),
                        None => s.push(','),
                    }
                }
                s.push('\n');
            };
        for r in &self.rows {
            line(
                &r.variant,
                &r.modality,
                r.slice.name(),
                r.pairs,
                r.runs,
                &r.recall,
            );
        }
        let base: Vec<Option<f64>> = self.random_baseline.iter().map(|&x| Some(x)).collect();
        line("random", "-", "all", 0.0, 0, &base);
        s
    }
}

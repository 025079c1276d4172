//! Embedding export, exact top-k retrieval, recall@K with slicing and
//! modality ablations, and a BM25 baseline.

mod bm25;
mod report;
mod search;
mod table;

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use bm25::{bm25_terms, Bm25, BM25_B, BM25_K1};
pub use report::{evaluate, random_baseline, EvalReport, EvalRow, EvalSpec, Retriever};
pub use search::{
    dot, embedding_scores, pair_ranks, rank_of, recall_at_k, recall_from_ranks, topk,
};
pub use table::{EmbeddingTable, TABLE_MAGIC};

use crate::data::{LengthClass, Note, NoteId, Pair};
use crate::error::{Error, Result};
use crate::model::{Modality, Model};
use crate::scalar::Scalar;
use crate::text::Vocab;

/// Pair subsets defined by note length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSlice {
    All,
    ShortQuery,
    ShortTarget,
    LongQuery,
    LongTarget,
}

impl EvalSlice {
    pub const EVERY: [EvalSlice; 5] = [
        EvalSlice::All,
        EvalSlice::ShortQuery,
        EvalSlice::ShortTarget,
        EvalSlice::LongQuery,
        EvalSlice::LongTarget,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EvalSlice::All => "all",
            EvalSlice::ShortQuery => "short_query",
            EvalSlice::ShortTarget => "short_target",
            EvalSlice::LongQuery => "long_query",
            EvalSlice::LongTarget => "long_target",
        }
    }

    /// Whether a pair belongs to the slice.
    pub fn contains(self, query: LengthClass, target: LengthClass) -> bool {
        match self {
            EvalSlice::All => true,
            EvalSlice::ShortQuery => query == LengthClass::Short,
            EvalSlice::ShortTarget => target == LengthClass::Short,
            EvalSlice::LongQuery => query == LengthClass::Long,
            EvalSlice::LongTarget => target == LengthClass::Long,
        }
    }

    pub fn select(self, pairs: &[Pair], notes: &HashMap<NoteId, Note>) -> Result<Vec<Pair>> {
        let class = |id: NoteId| {
            notes
                .get(&id)
                .map(Note::length_class)
                .ok_or_else(|| Error::Data(format!("pair references unknown note {id}")))
        };
        let mut out = Vec::new();
        for p in pairs {
            if self.contains(class(p.query)?, class(p.related)?) {
                out.push(*p);
            }
        }
        Ok(out)
    }
}

/// Worker count from `MLRM_THREADS` (default 1).
pub fn thread_count() -> Result<usize> {
    match std::env::var("MLRM_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| {
                Error::Config(format!(
                    "MLRM_THREADS must be a positive integer, got {v:?}"
                ))
            }),
    }
}

/// Embeds every note under `modality`; output order follows `notes`.
pub fn build_table<S: Scalar>(
    model: &Model<S>,
    notes: &[Note],
    vocab: &Vocab,
    modality: Modality,
    threads: usize,
) -> Result<EmbeddingTable> {
    let embed = |n: &Note| -> Result<Vec<f64>> {
        let reps = model.embed_note(n, vocab, modality)?;
        Ok(reps.embedding().iter().map(|x| x.as_f64()).collect())
    };
    let vectors: Vec<Vec<f64>> = if threads <= 1 {
        notes.iter().map(embed).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {threads} threads: {e}")))?;
        pool.install(|| notes.par_iter().map(embed).collect::<Result<_>>())?
    };
    EmbeddingTable::from_vectors(notes.iter().map(|n| n.id).collect(), &vectors)
}

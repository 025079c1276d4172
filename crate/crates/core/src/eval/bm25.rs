use std::collections::{BTreeSet, HashMap};

use crate::data::{Note, NoteId};
use crate::error::{Error, Result};
use crate::text::tokenize;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

/// Lower-cased word tokens of title, topics and content.
pub fn bm25_terms(note: &Note) -> Vec<String> {
    [note.title.as_str(), &note.topic_text(), &note.content]
        .iter()
        .flat_map(|s| tokenize(s))
        .filter(|t| t.chars().any(char::is_alphanumeric))
        .map(|t| t.to_lowercase())
        .collect()
}

/// Okapi BM25 over a fixed document pool.
#[derive(Clone, Debug)]
pub struct Bm25 {
    ids: Vec<NoteId>,
    tf: Vec<HashMap<String, usize>>,
    len: Vec<usize>,
    avg_len: f64,
    df: HashMap<String, usize>,
    terms: HashMap<NoteId, Vec<String>>,
}

impl Bm25 {
    pub fn new(pool: &[Note]) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::Data("BM25 needs a non-empty pool".into()));
        }
        let mut bm = Bm25 {
            ids: Vec::new(),
            tf: Vec::new(),
            len: Vec::new(),
            avg_len: 0.0,
            df: HashMap::new(),
            terms: HashMap::new(),
        };
        for n in pool {
            let terms = bm25_terms(n);
            let mut tf = HashMap::new();
            for t in &terms {
                *tf.entry(t.clone()).or_insert(0) += 1;
            }
            for t in tf.keys() {
                *bm.df.entry(t.clone()).or_insert(0) += 1;
            }
            bm.ids.push(n.id);
            bm.len.push(terms.len());
            bm.tf.push(tf);
            bm.terms.insert(n.id, terms);
        }
        bm.avg_len = bm.len.iter().sum::<usize>() as f64 / pool.len() as f64;
        Ok(bm)
    }

    /// `ln((N − n + 0.5)/(n + 0.5) + 1)`, never negative.
    pub fn idf(&self, term: &str) -> f64 {
        let n = *self.df.get(term).unwrap_or(&0) as f64;
        let total = self.ids.len() as f64;
        ((total - n + 0.5) / (n + 0.5) + 1.0).ln()
    }

    /// Scores of every pool document for a bag of query terms (each
    /// distinct term counted once).
    pub fn scores(&self, query: &[String]) -> Vec<(NoteId, f64)> {
        let unique: BTreeSet<&String> = query.iter().collect();
        let idf: Vec<(&String, f64)> = unique.into_iter().map(|t| (t, self.idf(t))).collect();
        self.ids
            .iter()
            .enumerate()
            .map(|(d, &id)| {
                let norm = BM25_K1
                    * (1.0 - BM25_B + BM25_B * self.len[d] as f64 / self.avg_len.max(1e-12));
                let s = idf
                    .iter()
                    .map(|&(t, w)| {
                        let f = *self.tf[d].get(t.as_str()).unwrap_or(&0) as f64;
                        w * f * (BM25_K1 + 1.0) / (f + norm)
                    })
                    .sum();
                (id, s)
            })
            .collect()
    }

    /// Scores against a pool member's own text.
    pub fn scores_for(&self, query: NoteId) -> Result<Vec<(NoteId, f64)>> {
        let terms = self
            .terms
            .get(&query)
            .ok_or_else(|| Error::Data(format!("note {query} is not in the BM25 pool")))?;
        Ok(self.scores(terms))
    }

    /// Pool ids ranked for `query`, best first, ties by id; the query is excluded.
    pub fn rank(&self, query: NoteId) -> Result<Vec<(NoteId, f64)>> {
        let mut s: Vec<_> = self
            .scores_for(query)?
            .into_iter()
            .filter(|x| x.0 != query)
            .collect();
        s.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(s)
    }
}

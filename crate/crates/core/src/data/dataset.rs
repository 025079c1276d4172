use std::collections::HashSet;
use std::path::{Path, PathBuf};

use super::cooccur::{build_pairs, cooccurrence, PairConfig};
use super::io::{read_jsonl, write_jsonl};
use super::note::{BehaviorEvent, Note, NoteId, Pair};
use super::split::{split_dataset, DatasetSplit};
use super::synth::{generate_synthetic, SynthConfig};
use crate::error::{Error, Result};
use crate::text::Vocab;

pub const NOTES_FILE: &str = "notes.jsonl";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const TRAIN_PAIRS_FILE: &str = "train_pairs.jsonl";
pub const VAL_PAIRS_FILE: &str = "val_pairs.jsonl";
pub const TEST_PAIRS_FILE: &str = "test_pairs.jsonl";
pub const POOL_FILE: &str = "pool.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";

/// A generated corpus with its mined pairs, split and vocabulary.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub notes: Vec<Note>,
    pub events: Vec<BehaviorEvent>,
    /// Every mined pair, before splitting.
    pub pairs: Vec<Pair>,
    pub split: DatasetSplit,
    pub vocab: Vocab,
}

impl Dataset {
    /// Generates notes and behavior, mines pairs and holds out a pool.
    pub fn generate(synth: &SynthConfig, pairs: &PairConfig, pool_size: usize) -> Result<Self> {
        pairs.validate()?;
        if pool_size < 2 || pool_size >= synth.n_notes {
            return Err(Error::Config(format!(
                "pool size {pool_size} must be in [2, {})",
                synth.n_notes
            )));
        }
        let data = generate_synthetic(synth)?;
        let all = build_pairs(&cooccurrence(&data.events)?, pairs)?;
        let split = split_dataset(&data.notes, &data.events, pairs, pool_size, synth.seed)?;
        let vocab = vocab_for(&data.notes);
        Ok(Dataset {
            notes: data.notes,
            events: data.events,
            pairs: all,
            split,
            vocab,
        })
    }

    /// Notes of the retrieval pool.
    pub fn pool_notes(&self) -> Vec<Note> {
        let ids: HashSet<NoteId> = self.split.pool.iter().copied().collect();
        self.notes
            .iter()
            .filter(|n| ids.contains(&n.id))
            .cloned()
            .collect()
    }

    /// Writes every dataset file into `dir` (created if needed).
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let path = |f: &str| dir.join(f);
        write_jsonl(&path(NOTES_FILE), &self.notes)?;
        write_jsonl(&path(EVENTS_FILE), &self.events)?;
        write_jsonl(&path(PAIRS_FILE), &self.pairs)?;
        write_jsonl(&path(TRAIN_PAIRS_FILE), &self.split.train)?;
        write_jsonl(&path(VAL_PAIRS_FILE), &self.split.val)?;
        write_jsonl(&path(TEST_PAIRS_FILE), &self.split.test)?;
        write_jsonl(&path(POOL_FILE), &self.pool_notes())?;
        self.vocab.save(&path(VOCAB_FILE))?;
        Ok([
            NOTES_FILE,
            EVENTS_FILE,
            PAIRS_FILE,
            TRAIN_PAIRS_FILE,
            VAL_PAIRS_FILE,
            TEST_PAIRS_FILE,
            POOL_FILE,
            VOCAB_FILE,
        ]
        .iter()
        .map(|f| path(f))
        .collect())
    }

    /// Reads a directory written by [`Dataset::write`].
    pub fn load(dir: &Path) -> Result<Self> {
        let path = |f: &str| dir.join(f);
        let need = |f: &str| -> Result<PathBuf> {
            let p = path(f);
            if p.is_file() {
                Ok(p)
            } else {
                Err(Error::Data(format!(
                    "dataset file {} is missing",
                    p.display()
                )))
            }
        };
        let notes: Vec<Note> = read_jsonl(&need(NOTES_FILE)?)?;
        let pool: Vec<Note> = read_jsonl(&need(POOL_FILE)?)?;
        let mut pool_ids: Vec<NoteId> = pool.iter().map(|n| n.id).collect();
        pool_ids.sort_unstable();
        Ok(Dataset {
            events: read_jsonl(&need(EVENTS_FILE)?)?,
            pairs: read_jsonl(&need(PAIRS_FILE)?)?,
            split: DatasetSplit {
                pool: pool_ids,
                train: read_jsonl(&need(TRAIN_PAIRS_FILE)?)?,
                val: read_jsonl(&need(VAL_PAIRS_FILE)?)?,
                test: read_jsonl(&need(TEST_PAIRS_FILE)?)?,
            },
            vocab: Vocab::load(&need(VOCAB_FILE)?)?,
            notes,
        })
    }
}

/// Vocabulary covering every text field of `notes`.
pub fn vocab_for(notes: &[Note]) -> Vocab {
    let topics: Vec<String> = notes.iter().map(Note::topic_text).collect();
    Vocab::build(
        notes
            .iter()
            .zip(&topics)
            .flat_map(|(n, t)| [n.title.as_str(), t.as_str(), n.content.as_str()]),
    )
}

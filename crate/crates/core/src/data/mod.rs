//! Notes, behavior logs, co-occurrence mining and batching.

mod batch;
mod cooccur;
mod dataset;
mod io;
mod note;
mod split;
mod synth;

pub use batch::{make_batches, pair_partners, Batch, BatchStream};
pub use cooccur::{build_pairs, cooccurrence, PairConfig, Weight};
pub use dataset::{
    vocab_for, Dataset, EVENTS_FILE, NOTES_FILE, PAIRS_FILE, POOL_FILE, TEST_PAIRS_FILE,
    TRAIN_PAIRS_FILE, VAL_PAIRS_FILE, VOCAB_FILE,
};
pub use io::{read_jsonl, write_jsonl};
pub use note::{
    BehaviorEvent, LengthClass, Note, NoteId, Pair, LONG_NOTE_TOKENS, SHORT_NOTE_TOKENS,
};
pub use split::{split_dataset, DatasetSplit};
pub use synth::{generate_synthetic, SynthConfig, SynthData};

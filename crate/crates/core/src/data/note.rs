use serde::{Deserialize, Serialize};

use crate::text::tokenize;

/// Notes shorter than this many text tokens are "short".
pub const SHORT_NOTE_TOKENS: usize = 50;
/// Notes longer than this many text tokens are "long".
pub const LONG_NOTE_TOKENS: usize = 165;

pub type NoteId = u64;

/// One retrievable item: text fields plus a toy patch image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Note {
    pub id: NoteId,
    pub title: String,
    pub topics: Vec<String>,
    pub content: String,
    /// `P` patches of `d_raw` features each.
    pub image: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LengthClass {
    Short,
    Medium,
    Long,
}

impl Note {
    /// Topics as they appear inside a prompt.
    pub fn topic_text(&self) -> String {
        self.topics.join(", ")
    }

    /// Token count of title, topics and content, before truncation.
    pub fn token_len(&self) -> usize {
        tokenize(&self.title).len()
            + tokenize(&self.topic_text()).len()
            + tokenize(&self.content).len()
    }

    pub fn length_class(&self) -> LengthClass {
        let n = self.token_len();
        if n < SHORT_NOTE_TOKENS {
            LengthClass::Short
        } else if n > LONG_NOTE_TOKENS {
            LengthClass::Long
        } else {
            LengthClass::Medium
        }
    }

    /// Copy with empty text fields, keeping the image.
    pub fn image_only(&self) -> Note {
        Note {
            id: self.id,
            title: String::new(),
            topics: Vec::new(),
            content: String::new(),
            image: self.image.clone(),
        }
    }
}

/// A user viewed `viewed` and subsequently clicked `clicked`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorEvent {
    pub user_id: u64,
    pub viewed: NoteId,
    pub clicked: NoteId,
}

/// A mined related-note pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub query: NoteId,
    pub related: NoteId,
    pub score: f64,
}

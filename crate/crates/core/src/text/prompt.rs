use serde::{Deserialize, Serialize};

use super::tokenize;
use super::vocab::{Vocab, IMG, IMG_EMB};
use crate::data::Note;
use crate::error::{Error, Result};

pub const MAX_TITLE_WORDS: usize = 20;
pub const MAX_CONTENT_WORDS: usize = 80;
pub const MAX_PROMPT_TOKENS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    /// Single compression word for the whole note.
    Basic,
    /// Image segment with its own compression word, then the text segment.
    Micl,
}

/// A tokenized prompt with its placeholder positions.
///
/// The compressed word is always the last position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptLayout {
    pub token_ids: Vec<usize>,
    pub img_slot: usize,
    pub img_emb_pos: Option<usize>,
}

impl PromptLayout {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn compressed_pos(&self) -> usize {
        self.token_ids.len() - 1
    }

    pub fn kind(&self) -> PromptKind {
        if self.img_emb_pos.is_some() {
            PromptKind::Micl
        } else {
            PromptKind::Basic
        }
    }

    /// Checks the placeholder invariants against `vocab`.
    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        let img = vocab.id(IMG);
        let emb = vocab.id(IMG_EMB);
        let n_img = self.token_ids.iter().filter(|&&t| t == img).count();
        let n_emb = self.token_ids.iter().filter(|&&t| t == emb).count();
        if n_img != 1 || self.token_ids.get(self.img_slot) != Some(&img) {
            return Err(Error::Layout(
                "prompt must contain exactly one <IMG>".into(),
            ));
        }
        match self.img_emb_pos {
            Some(p) if n_emb == 1 && self.token_ids[p] == emb && p > self.img_slot => {}
            None if n_emb == 0 => {}
            _ => return Err(Error::Layout("misplaced <IMG_EMB>".into())),
        }
        if self.len() < 3 {
            return Err(Error::Layout("prompt shorter than 3 tokens".into()));
        }
        Ok(())
    }
}

enum Piece {
    Lit(&'static str),
    Img,
    ImgEmb,
    Title,
    Topic,
    Content,
}

const BASIC: &[Piece] = &[
    Piece::Lit("Note content: {'image': "),
    Piece::Img,
    Piece::Lit(", 'title': "),
    Piece::Title,
    Piece::Lit(", 'topic': "),
    Piece::Topic,
    Piece::Lit(", 'content': "),
    Piece::Content,
    Piece::Lit("}. Compress this note into one word:\""),
];

const MICL: &[Piece] = &[
    Piece::Lit("Note content: {'image': "),
    Piece::Img,
    Piece::Lit("}, Compress this note into one word:\""),
    Piece::ImgEmb,
    Piece::Lit("\". Note content: {'title': "),
    Piece::Title,
    Piece::Lit(", 'topic': "),
    Piece::Topic,
    Piece::Lit(", 'content': "),
    Piece::Content,
    Piece::Lit("}. Compress this note into one word:\""),
];

pub(crate) fn template_texts() -> impl Iterator<Item = &'static str> {
    BASIC.iter().chain(MICL).filter_map(|p| match p {
        Piece::Lit(s) => Some(*s),
        _ => None,
    })
}

fn truncate_words(s: &str, max: usize) -> String {
    if s.split_whitespace().count() <= max {
        s.to_string()
    } else {
        s.split_whitespace().take(max).collect::<Vec<_>>().join(" ")
    }
}

/// Caps the title at 20 words and the content at 80; topics are untouched.
pub fn truncate_note(note: &Note) -> Note {
    Note {
        title: truncate_words(&note.title, MAX_TITLE_WORDS),
        content: truncate_words(&note.content, MAX_CONTENT_WORDS),
        ..note.clone()
    }
}

fn build(pieces: &[Piece], note: &Note, vocab: &Vocab) -> Result<PromptLayout> {
    let mut ids = Vec::new();
    let mut img_slot = None;
    let mut img_emb_pos = None;
    let ids_of = |s: &str| -> Vec<usize> { tokenize(s).iter().map(|t| vocab.id(t)).collect() };
    for p in pieces {
        match p {
            Piece::Lit(s) => ids.extend(ids_of(s)),
            Piece::Img => {
                img_slot = Some(ids.len());
                ids.push(vocab.id(IMG));
            }
            Piece::ImgEmb => {
                img_emb_pos = Some(ids.len());
                ids.push(vocab.id(IMG_EMB));
            }
            Piece::Title => ids.extend(ids_of(&note.title)),
            Piece::Topic => ids.extend(ids_of(&note.topic_text())),
            Piece::Content => ids.extend(ids_of(&note.content)),
        }
    }
    if ids.len() > MAX_PROMPT_TOKENS {
        return Err(Error::Length {
            len: ids.len(),
            max: MAX_PROMPT_TOKENS,
        });
    }
    Ok(PromptLayout {
        token_ids: ids,
        img_slot: img_slot.expect("template has <IMG>"),
        img_emb_pos,
    })
}

/// `Note content: {'image': <IMG>, 'title': …, 'topic': …, 'content': …}. Compress this note into one word:"`
pub fn build_basic_prompt(note: &Note, vocab: &Vocab) -> Result<PromptLayout> {
    build(BASIC, note, vocab)
}

/// Two-segment prompt whose image segment ends in `one word:"<IMG_EMB>"`.
pub fn build_micl_prompt(note: &Note, vocab: &Vocab) -> Result<PromptLayout> {
    build(MICL, note, vocab)
}

pub fn build_prompt(kind: PromptKind, note: &Note, vocab: &Vocab) -> Result<PromptLayout> {
    match kind {
        PromptKind::Basic => build_basic_prompt(note, vocab),
        PromptKind::Micl => build_micl_prompt(note, vocab),
    }
}

/// Number of template tokens, placeholders included.
pub fn template_len(kind: PromptKind) -> usize {
    let pieces = match kind {
        PromptKind::Basic => BASIC,
        PromptKind::Micl => MICL,
    };
    pieces
        .iter()
        .map(|p| match p {
            Piece::Lit(s) => tokenize(s).len(),
            Piece::Img | Piece::ImgEmb => 1,
            _ => 0,
        })
        .sum()
}

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use super::tokenize;
use crate::error::{Error, Result};

pub const PAD: &str = "<PAD>";
pub const UNK: &str = "<UNK>";
pub const IMG: &str = "<IMG>";
pub const IMG_EMB: &str = "<IMG_EMB>";

/// Reserved tokens, always ids `0..RESERVED.len()` in this order.
pub const RESERVED: [&str; 6] = [PAD, UNK, IMG, IMG_EMB, "'", "\""];

/// Dense token ↔ id bijection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds from corpus strings plus the prompt templates. Non-reserved
    /// tokens are sorted so the id assignment is independent of corpus order.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for text in corpus {
            words.extend(tokenize(text));
        }
        for text in super::prompt::template_texts() {
            words.extend(tokenize(text));
        }
        for r in RESERVED {
            words.remove(r);
        }
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Self::from_tokens(tokens).expect("freshly built vocab is a bijection")
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Format(
                "vocab must start with the reserved tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Format(format!(
                    "invalid vocab token at line {}",
                    i + 1
                )));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocab token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(1)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let toks: Vec<&str> = ids.iter().map(|&i| self.token(i).unwrap_or(UNK)).collect();
        super::detokenize(&toks)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

//! Word-level tokenization, vocabulary and compression prompts.

mod prompt;
mod vocab;

pub use prompt::{
    build_basic_prompt, build_micl_prompt, build_prompt, template_len, truncate_note, PromptKind,
    PromptLayout, MAX_CONTENT_WORDS, MAX_PROMPT_TOKENS, MAX_TITLE_WORDS,
};
pub use vocab::{Vocab, IMG, IMG_EMB, PAD, RESERVED, UNK};

/// Splits on whitespace, then peels every punctuation character into its own
/// token.
pub fn tokenize(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in s.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_whitespace()) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Joins tokens with single spaces.
pub fn detokenize<T: AsRef<str>>(tokens: &[T]) -> String {
    tokens
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn punctuation_becomes_tokens() {
        assert_eq!(
            tokenize("{'image': x}, ok."),
            vec!["{", "'", "image", "'", ":", "x", "}", ",", "ok", "."]
        );
        assert!(tokenize("   ").is_empty());
    }

    proptest! {
        #[test]
        fn detokenize_round_trips_up_to_whitespace(s in "[a-z ,.:'{}]{0,60}") {
            let toks = tokenize(&s);
            let back = detokenize(&toks);
            prop_assert_eq!(tokenize(&back), toks);
            let squash = |x: &str| x.chars().filter(|c| !c.is_whitespace()).collect::<String>();
            prop_assert_eq!(squash(&back), squash(&s));
        }
    }
}

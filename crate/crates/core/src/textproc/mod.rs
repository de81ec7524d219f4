//! Text normalization, vocabularies and synthetic negative captions.

mod negative;
mod vocab;

pub use negative::{
    generate_negative, Draws, Negative, NegativeGenConfig, NegativeOp, ScriptedDraws, SwapEdit,
};
pub use vocab::{Vocabulary, BOS, EOS, NUM_SPECIAL, PAD, UNK};

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Lowercases, strips punctuation and collapses whitespace.
///
/// ```
/// # use capreward_core::textproc::normalize;
/// assert_eq!(normalize("A Blue  Car.").unwrap(), "a blue car");
/// ```
pub fn normalize(text: &str) -> Result<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    let out = cleaned.split_whitespace().collect::<Vec<_>>().join(" ");
    if out.is_empty() {
        Err(Error::EmptyText)
    } else {
        Ok(out)
    }
}

/// A normalized caption and its whitespace tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Caption {
    text: String,
    tokens: Vec<String>,
}

impl Caption {
    pub fn new(raw: &str) -> Result<Self> {
        let text = normalize(raw)?;
        let tokens = text.split(' ').map(str::to_owned).collect();
        Ok(Self { text, tokens })
    }

    /// Builds a caption from already-normalized tokens.
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> Result<Self> {
        let tokens: Vec<String> = tokens.iter().map(|t| t.as_ref().to_owned()).collect();
        if tokens.is_empty() || tokens.iter().any(|t| t.is_empty() || t.contains(char::is_whitespace)) {
            return Err(Error::EmptyText);
        }
        Ok(Self {
            text: tokens.join(" "),
            tokens,
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl fmt::Display for Caption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl Serialize for Caption {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.text)
    }
}

impl<'de> Deserialize<'de> for Caption {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        Caption::new(&raw).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize("A Blue  Car.").unwrap(), "a blue car");
        assert_eq!(normalize("dog").unwrap(), "dog");
        assert!(matches!(normalize("  !!  "), Err(Error::EmptyText)));
        assert_eq!(normalize("\tIt's\n a  DOG!").unwrap(), "its a dog");
    }

    #[test]
    fn caption_tokens_rejoin_to_text() {
        let c = Caption::new("  The cat,  sat ").unwrap();
        assert_eq!(c.tokens(), ["the", "cat", "sat"]);
        assert_eq!(c.tokens().join(" "), c.text());
        assert!(Caption::from_tokens::<&str>(&[]).is_err());
    }
}

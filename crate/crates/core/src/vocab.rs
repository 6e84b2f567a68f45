use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index into a [`Vocab`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub usize);

impl TokenId {
    pub const EOS: TokenId = TokenId(0);

    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

pub const EOS_TOKEN: &str = "<eos>";

const FUNCTION_WORDS: [&str; 15] = [
    ".", "?", "a", "the", "is", "there", "describe", "image", "what", "in", "this", "picture",
    "do", "you", "see",
];

const CATEGORY_WORDS: [&str; 32] = [
    "apple", "bag", "ball", "banana", "bench", "bike", "bird", "boat", "book", "bottle", "bus",
    "cake", "car", "cat", "chair", "clock", "cow", "cup", "dog", "frisbee", "hat", "horse",
    "kite", "lamp", "phone", "pizza", "sheep", "shoe", "table", "train", "tree", "vase",
];

const ATTRIBUTE_WORDS: [&str; 16] = [
    "black", "blue", "brown", "dark", "gold", "gray", "green", "orange", "pink", "purple", "red",
    "silver", "spotted", "striped", "white", "yellow",
];

/// Ordered token list with three designated subsets: object categories,
/// attribute (color) words and sentence terminators. Index 0 is always the
/// end-of-sequence token, which also serves as the start context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    categories: Vec<TokenId>,
    attributes: Vec<TokenId>,
    terminators: Vec<TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from its three word classes. Function words must
    /// include `"."`; `"?"` is treated as a terminator when present.
    pub fn new(function_words: &[&str], categories: &[&str], attributes: &[&str]) -> Result<Self> {
        let mut tokens = vec![EOS_TOKEN.to_string()];
        tokens.extend(function_words.iter().map(|s| s.to_string()));
        let cat_start = tokens.len();
        tokens.extend(categories.iter().map(|s| s.to_string()));
        let attr_start = tokens.len();
        tokens.extend(attributes.iter().map(|s| s.to_string()));

        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), TokenId(i)).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token `{tok}`")));
            }
        }
        let terminators: Vec<TokenId> = [".", "?"].iter().filter_map(|t| index.get(*t).copied()).collect();
        if !index.contains_key(".") {
            return Err(Error::Invalid("vocabulary needs a `.` terminator".into()));
        }
        if categories.is_empty() {
            return Err(Error::Invalid("vocabulary needs at least one category".into()));
        }
        Ok(Self {
            categories: (cat_start..attr_start).map(TokenId).collect(),
            attributes: (attr_start..tokens.len()).map(TokenId).collect(),
            tokens,
            index,
            terminators,
        })
    }

    /// Rebuilds a vocabulary from a flat token list, inferring the category
    /// and attribute subsets by membership in the built-in word lists.
    pub fn from_tokens(tokens: &[String]) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(EOS_TOKEN) {
            return Err(Error::Invalid("vocabulary must start with the end-of-sequence token".into()));
        }
        let rest = &tokens[1..];
        let function: Vec<&str> = rest
            .iter()
            .map(String::as_str)
            .filter(|t| !CATEGORY_WORDS.contains(t) && !ATTRIBUTE_WORDS.contains(t))
            .collect();
        let cats: Vec<&str> = rest.iter().map(String::as_str).filter(|t| CATEGORY_WORDS.contains(t)).collect();
        let attrs: Vec<&str> = rest.iter().map(String::as_str).filter(|t| ATTRIBUTE_WORDS.contains(t)).collect();
        let vocab = Self::new(&function, &cats, &attrs)?;
        if vocab.tokens != tokens {
            return Err(Error::Invalid("token order does not follow function/category/attribute layout".into()));
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn categories(&self) -> &[TokenId] {
        &self.categories
    }

    pub fn attributes(&self) -> &[TokenId] {
        &self.attributes
    }

    pub fn id(&self, token: &str) -> Result<TokenId> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn word(&self, id: TokenId) -> &str {
        &self.tokens[id.0]
    }

    pub fn check(&self, id: TokenId) -> Result<TokenId> {
        if id.0 < self.tokens.len() {
            Ok(id)
        } else {
            Err(Error::TokenOutOfRange(id.0))
        }
    }

    pub fn is_category(&self, id: TokenId) -> bool {
        self.category_slot(id).is_some()
    }

    pub fn is_terminator(&self, id: TokenId) -> bool {
        self.terminators.contains(&id)
    }

    /// Position of `id` within the category subset.
    pub fn category_slot(&self, id: TokenId) -> Option<usize> {
        let first = self.categories.first()?.0;
        (id.0 >= first && id.0 < first + self.categories.len()).then(|| id.0 - first)
    }

    /// Position of `id` within the attribute subset.
    pub fn attribute_slot(&self, id: TokenId) -> Option<usize> {
        let first = self.attributes.first()?.0;
        (id.0 >= first && id.0 < first + self.attributes.len()).then(|| id.0 - first)
    }

    pub fn encode(&self, words: &[&str]) -> Result<Vec<TokenId>> {
        words.iter().map(|w| self.id(w)).collect()
    }

    /// Space-separated words; convenient for tests and reports.
    pub fn encode_str(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&id| self.word(id).to_string()).collect()
    }

    pub fn render(&self, ids: &[TokenId]) -> String {
        self.decode(ids).join(" ")
    }
}

impl Default for Vocab {
    /// The 64-token vocabulary: end-of-sequence, 15 function words,
    /// 32 object categories and 16 color attributes.
    fn default() -> Self {
        Self::new(&FUNCTION_WORDS, &CATEGORY_WORDS, &ATTRIBUTE_WORDS).expect("built-in vocabulary is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout() {
        let v = Vocab::default();
        assert_eq!(v.len(), 64);
        assert_eq!(v.word(TokenId::EOS), EOS_TOKEN);
        assert_eq!(v.categories().len(), 32);
        assert_eq!(v.attributes().len(), 16);
        assert!(v.is_category(v.id("dog").unwrap()));
        assert!(!v.is_category(v.id("red").unwrap()));
        assert!(v.is_terminator(v.id(".").unwrap()));
        assert_eq!(v.attribute_slot(v.id("black").unwrap()), Some(0));
    }

    #[test]
    fn round_trip_from_tokens() {
        let v = Vocab::default();
        assert_eq!(Vocab::from_tokens(v.tokens()).unwrap(), v);
    }

    #[test]
    fn duplicates_rejected() {
        assert!(Vocab::new(&[".", "a"], &["dog", "dog"], &[]).is_err());
    }

    #[test]
    fn unknown_word() {
        assert!(matches!(Vocab::default().id("zebra"), Err(Error::UnknownToken(_))));
    }
}

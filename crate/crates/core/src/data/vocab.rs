use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const RESERVED_TOKENS: usize = 4;

const RESERVED: [&str; RESERVED_TOKENS] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Word-level vocabulary. Ids 0..4 are PAD, BOS, EOS, UNK; the rest follow
/// the lexicographic order of the corpus words.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

impl Vocabulary {
    /// Builds a vocabulary from every lowercased whitespace token in `texts`.
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = BTreeSet::new();
        for t in texts {
            set.extend(words(t));
        }
        Vocabulary::from_words(set)
    }

    /// Builds a vocabulary from the given words, sorted and deduplicated.
    pub fn from_words<S: Into<String>>(ws: impl IntoIterator<Item = S>) -> Self {
        let set: BTreeSet<String> = ws.into_iter().map(Into::into).collect();
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(set.into_iter().filter(|w| !RESERVED.contains(&w.as_str())))
            .collect::<Vec<_>>();
        Vocabulary::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Lowercased whitespace split; unknown words map to UNK.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        words(text).map(|w| self.id(&w).unwrap_or(UNK)).collect()
    }

    /// Joins tokens with single spaces, skipping PAD, BOS and EOS.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

//! Word-level vocabulary with the three identifier sampling spaces.
//!
//! Token order is fixed: specials, the ten digits, synthetic punctuation
//! symbols, then corpus words by descending frequency with lexicographic
//! tie-break. The digits and symbols are injected regardless of the corpus so
//! that every sampling space exists on any dataset.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{TokenId, TokenSeq};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";

/// Upper bound on the non-alphanumeric sampling space.
pub const NON_ALNUM_CAP: usize = 400;

const N_SPECIALS: usize = 3;
const N_DIGITS: usize = 10;
const SYMBOL_ALPHABET: &[char] = &[
    '!', '#', '$', '%', '&', '*', '+', '-', '/', ':', ';', '<', '=', '>', '?', '@', '^', '_', '~', '|',
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetKind {
    Digits,
    NonAlnum,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub pad: TokenId,
    pub unk: TokenId,
    pub cls: TokenId,
}

#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    specials: Specials,
    subsets: BTreeMap<SubsetKind, Vec<TokenId>>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    specials: Specials,
    subsets: BTreeMap<SubsetKind, Vec<TokenId>>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens && self.specials == other.specials && self.subsets == other.subsets
    }
}

/// The `n`-th synthetic symbol: all strings of length 2 over the alphabet in
/// lexicographic order, then length 3, and so on.
fn synthetic_symbol(mut n: usize) -> String {
    let base = SYMBOL_ALPHABET.len();
    let mut len = 2;
    let mut block = base * base;
    while n >= block {
        n -= block;
        len += 1;
        block *= base;
    }
    let mut chars = vec![SYMBOL_ALPHABET[0]; len];
    for slot in chars.iter_mut().rev() {
        *slot = SYMBOL_ALPHABET[n % base];
        n /= base;
    }
    chars.into_iter().collect()
}

fn is_non_alnum(token: &str) -> bool {
    token.chars().any(|c| !c.is_alphanumeric())
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Builds a vocabulary of at most `max_size` tokens from `corpus`.
pub fn build_vocab<I, S>(corpus: I, max_size: usize, extra_symbol_budget: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let required = N_SPECIALS + N_DIGITS;
    if max_size < required {
        return Err(Error::VocabTooSmall { max_size, required });
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut n_docs = 0;
    for doc in corpus {
        n_docs += 1;
        for w in words(doc.as_ref()) {
            *counts.entry(w).or_default() += 1;
        }
    }
    if n_docs == 0 {
        return Err(Error::EmptyCorpus);
    }

    let mut tokens: Vec<String> = vec![PAD.into(), UNK.into(), CLS.into()];
    tokens.extend((0..N_DIGITS).map(|d| d.to_string()));
    let n_symbols = extra_symbol_budget.min(max_size - required);
    tokens.extend((0..n_symbols).map(synthetic_symbol));

    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
    for (w, _) in ranked {
        if tokens.len() >= max_size {
            break;
        }
        if seen.insert(w.clone()) {
            tokens.push(w);
        }
    }
    Ok(Vocabulary::from_tokens(tokens))
}

impl Vocabulary {
    /// Indexes an ordered token list whose first entries are the specials and
    /// digits as laid out by [`build_vocab`].
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index: HashMap<String, TokenId> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), TokenId(i as u32)))
            .collect();
        let specials = Specials { pad: index[PAD], unk: index[UNK], cls: index[CLS] };
        let special_ids = [specials.pad, specials.unk, specials.cls];
        let all: Vec<TokenId> = (0..tokens.len() as u32)
            .map(TokenId)
            .filter(|id| !special_ids.contains(id))
            .collect();
        let digits: Vec<TokenId> = (0..N_DIGITS).map(|d| index[&d.to_string()]).collect();
        let non_alnum: Vec<TokenId> = all
            .iter()
            .copied()
            .filter(|id| is_non_alnum(&tokens[id.index()]))
            .take(NON_ALNUM_CAP)
            .collect();
        let subsets = BTreeMap::from([
            (SubsetKind::Digits, digits),
            (SubsetKind::NonAlnum, non_alnum),
            (SubsetKind::All, all),
        ]);
        Self { tokens, index, specials, subsets }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn specials(&self) -> Specials {
        self.specials
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id.index()).map(String::as_str)
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id == self.specials.pad || id == self.specials.unk || id == self.specials.cls
    }

    /// Whitespace split, lowercased; unknown words map to `[UNK]`.
    pub fn encode(&self, text: &str) -> TokenSeq {
        words(text)
            .map(|w| self.index.get(&w).copied().unwrap_or(self.specials.unk))
            .collect()
    }

    pub fn decode(&self, seq: &[TokenId]) -> Result<String> {
        let mut parts = Vec::with_capacity(seq.len());
        for &id in seq {
            let t = self
                .token(id)
                .ok_or(Error::TokenOutOfRange { id: id.index(), size: self.len() })?;
            parts.push(t);
        }
        Ok(parts.join(" "))
    }

    pub fn subset(&self, kind: SubsetKind) -> &[TokenId] {
        &self.subsets[&kind]
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabFile {
            tokens: self.tokens.clone(),
            specials: self.specials,
            subsets: self.subsets.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(s)?;
        let mut seen = std::collections::HashSet::new();
        if !file.tokens.iter().all(|t| seen.insert(t.as_str())) {
            return Err(Error::Invalid("duplicate token in vocabulary file".into()));
        }
        let index: HashMap<String, TokenId> = file
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), TokenId(i as u32)))
            .collect();
        let size = file.tokens.len();
        let in_range = |id: &TokenId| id.index() < size;
        let s = file.specials;
        if ![s.pad, s.unk, s.cls].iter().all(in_range)
            || !file.subsets.values().flatten().all(in_range)
        {
            return Err(Error::Invalid("vocabulary file references ids out of range".into()));
        }
        for kind in [SubsetKind::Digits, SubsetKind::NonAlnum, SubsetKind::All] {
            if !file.subsets.contains_key(&kind) {
                return Err(Error::Invalid(format!("vocabulary file lacks subset {kind:?}")));
            }
        }
        Ok(Self { tokens: file.tokens, index, specials: file.specials, subsets: file.subsets })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

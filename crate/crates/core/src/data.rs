//! Synthetic heterogeneous per-user datasets, the skew filter, per-user
//! splits and JSONL I/O.
//!
//! Every generated sample is filler words plus one cue. Unambiguous cues
//! name their class directly. The ambiguous cue is a single shared phrase
//! whose label is decided by the writer's persona, so a model that cannot
//! tell users apart is capped on those samples.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::Sample;
use crate::error::{Error, Result};
use crate::ids::UserId;
use crate::tokenizer::Vocabulary;

/// Words of the shared ambiguous cue.
pub const AMBIGUOUS_PHRASE: &str = "just great";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Persona {
    Literal,
    Sarcastic,
    Apathetic,
}

impl Persona {
    /// Class the ambiguous phrase carries for this persona. The top class is
    /// positive, class 0 negative, and the middle class neutral; with two
    /// classes neutral collapses onto negative.
    pub fn ambiguous_label(self, n_classes: usize) -> usize {
        match self {
            Persona::Literal => n_classes - 1,
            Persona::Sarcastic => 0,
            Persona::Apathetic => (n_classes - 1) / 2,
        }
    }
}

impl fmt::Display for Persona {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Persona::Literal => "literal",
            Persona::Sarcastic => "sarcastic",
            Persona::Apathetic => "apathetic",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user: UserId,
    pub persona: Persona,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub samples_per_user: usize,
    pub ambiguous_fraction: f64,
    pub n_classes: usize,
    /// Assigned to users round-robin, so the split is as even as possible.
    pub personas: Vec<Persona>,
    /// Filler words per sample, inclusive range.
    pub min_words: usize,
    pub max_words: usize,
    pub filler_vocab: usize,
    pub cues_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_users: 20,
            samples_per_user: 100,
            ambiguous_fraction: 0.5,
            n_classes: 2,
            personas: vec![Persona::Literal, Persona::Sarcastic],
            min_words: 4,
            max_words: 10,
            filler_vocab: 200,
            cues_per_class: 4,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn user_id(i: usize) -> UserId {
        UserId(format!("u{i:03}"))
    }

    pub fn users(&self) -> Vec<UserId> {
        (0..self.n_users).map(Self::user_id).collect()
    }

    fn filler_word(i: usize) -> String {
        format!("w{i:03}")
    }

    fn cue_word(class: usize, j: usize) -> String {
        format!("cue{class}x{j}")
    }

    /// Every word the generator may emit, plus the user ids so that
    /// username identifiers are representable.
    pub fn lexicon(&self) -> Vec<String> {
        let mut words: Vec<String> = (0..self.filler_vocab).map(Self::filler_word).collect();
        for c in 0..self.n_classes {
            words.extend((0..self.cues_per_class).map(|j| Self::cue_word(c, j)));
        }
        words.extend(AMBIGUOUS_PHRASE.split(' ').map(String::from));
        words.extend(self.users().into_iter().map(|u| u.0));
        words
    }

    fn validate(&self) -> Result<()> {
        if self.n_users < 2 {
            return Err(Error::Config("need at least 2 users".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.personas.is_empty() {
            return Err(Error::Config("need at least one persona".into()));
        }
        if !(0.0..=1.0).contains(&self.ambiguous_fraction) {
            return Err(Error::Config("ambiguous_fraction must lie in [0, 1]".into()));
        }
        if self.samples_per_user == 0 || self.min_words > self.max_words || self.filler_vocab == 0 {
            return Err(Error::Config("empty sample shape".into()));
        }
        if self.cues_per_class == 0 {
            return Err(Error::Config("cues_per_class must be positive".into()));
        }
        Ok(())
    }
}

/// Generated samples as text, before encoding.
pub fn gen_records(cfg: &SyntheticConfig) -> Result<(Vec<Record>, Vec<UserProfile>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_ambiguous = (cfg.ambiguous_fraction * cfg.samples_per_user as f64).round() as usize;
    let mut records = Vec::with_capacity(cfg.n_users * cfg.samples_per_user);
    let mut profiles = Vec::with_capacity(cfg.n_users);
    for (i, user) in cfg.users().into_iter().enumerate() {
        let persona = cfg.personas[i % cfg.personas.len()];
        let mut kinds: Vec<bool> = (0..cfg.samples_per_user).map(|k| k < n_ambiguous).collect();
        kinds.shuffle(&mut rng);
        for ambiguous in kinds {
            let n_words = rng.random_range(cfg.min_words..=cfg.max_words);
            let mut words: Vec<String> = (0..n_words)
                .map(|_| SyntheticConfig::filler_word(rng.random_range(0..cfg.filler_vocab)))
                .collect();
            let (label, cue) = if ambiguous {
                (persona.ambiguous_label(cfg.n_classes), AMBIGUOUS_PHRASE.to_string())
            } else {
                let class = rng.random_range(0..cfg.n_classes);
                (class, SyntheticConfig::cue_word(class, rng.random_range(0..cfg.cues_per_class)))
            };
            let at = rng.random_range(0..=n_words);
            words.insert(at, cue);
            records.push(Record { user: user.clone(), text: words.join(" "), label, ambiguous });
        }
        profiles.push(UserProfile { user, persona, n_samples: cfg.samples_per_user });
    }
    Ok((records, profiles))
}

pub fn gen_synthetic(cfg: &SyntheticConfig, vocab: &Vocabulary) -> Result<(Vec<Sample>, Vec<UserProfile>)> {
    let (records, profiles) = gen_records(cfg)?;
    Ok((records.iter().map(|r| r.encode(vocab)).collect(), profiles))
}

/// Keeps users whose majority class covers at least `threshold` of their
/// samples.
pub fn skew_filter(samples: &[Sample], threshold: f64) -> Result<Vec<Sample>> {
    if !(threshold > 0.5 && threshold <= 1.0) {
        return Err(Error::Config(format!("skew threshold {threshold} outside (0.5, 1]")));
    }
    let mut counts: BTreeMap<&UserId, [usize; 2]> = BTreeMap::new();
    for s in samples {
        if s.label > 1 {
            return Err(Error::Invalid(format!("skew filter needs binary labels, got {}", s.label)));
        }
        counts.entry(&s.user).or_default()[s.label] += 1;
    }
    let keep: BTreeSet<&UserId> = counts
        .into_iter()
        .filter(|(_, [neg, pos])| (*neg.max(pos) as f64) >= threshold * (neg + pos) as f64)
        .map(|(u, _)| u)
        .collect();
    Ok(samples.iter().filter(|s| keep.contains(&s.user)).cloned().collect())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitDataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl SplitDataset {
    pub fn users(&self) -> Vec<UserId> {
        let set: BTreeSet<&UserId> =
            self.train.iter().chain(&self.val).chain(&self.test).map(|s| &s.user).collect();
        set.into_iter().cloned().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty() && self.val.is_empty() && self.test.is_empty()
    }

    pub fn samples_per_user(&self) -> BTreeMap<UserId, usize> {
        let mut m = BTreeMap::new();
        for s in self.train.iter().chain(&self.val).chain(&self.test) {
            *m.entry(s.user.clone()).or_default() += 1;
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.8, val: 0.1, test: 0.1 }
    }
}

/// Sizes of the (train, val, test) parts for one user with `n` samples.
pub fn split_sizes(n: usize, ratios: SplitRatios) -> (usize, usize, usize) {
    if n < 3 {
        return (n, 0, 0);
    }
    let part = |r: f64| ((r * n as f64 + 1e-9).floor() as usize).max(1);
    let (val, test) = (part(ratios.val), part(ratios.test));
    (n - val - test, val, test)
}

/// Shuffles each user's samples and cuts them into train, val and test,
/// separately for ambiguous and clear samples so both keep their share.
pub fn split_per_user(samples: &[Sample], ratios: SplitRatios, seed: u64) -> Result<SplitDataset> {
    let total = ratios.train + ratios.val + ratios.test;
    if (total - 1.0).abs() > 1e-9 || ratios.train < 0.0 || ratios.val < 0.0 || ratios.test < 0.0 {
        return Err(Error::Config(format!("split ratios must sum to 1, got {total}")));
    }
    let mut by_user: BTreeMap<&UserId, Vec<&Sample>> = BTreeMap::new();
    for s in samples {
        by_user.entry(&s.user).or_default().push(s);
    }
    let mut out = SplitDataset::default();
    for (k, (_, mut group)) in by_user.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ k as u64);
        group.shuffle(&mut rng);
        let (ambiguous, clear): (Vec<&Sample>, Vec<&Sample>) = group.into_iter().partition(|s| s.ambiguous);
        for part in [clear, ambiguous] {
            let (tr, va, _) = split_sizes(part.len(), ratios);
            out.train.extend(part[..tr].iter().map(|s| (*s).clone()));
            out.val.extend(part[tr..tr + va].iter().map(|s| (*s).clone()));
            out.test.extend(part[tr + va..].iter().map(|s| (*s).clone()));
        }
    }
    Ok(out)
}

/// Users with at most `max_samples` samples overall; a reporting filter for
/// few-shot evaluation.
pub fn few_shot_users(dataset: &SplitDataset, max_samples: usize) -> BTreeSet<UserId> {
    dataset
        .samples_per_user()
        .into_iter()
        .filter(|&(_, n)| n <= max_samples)
        .map(|(u, _)| u)
        .collect()
}

/// One JSONL line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub user: UserId,
    pub text: String,
    pub label: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub ambiguous: bool,
}

impl Record {
    pub fn encode(&self, vocab: &Vocabulary) -> Sample {
        Sample {
            user: self.user.clone(),
            text: vocab.encode(&self.text),
            label: self.label,
            ambiguous: self.ambiguous,
        }
    }

    pub fn decode(sample: &Sample, vocab: &Vocabulary) -> Result<Self> {
        Ok(Self {
            user: sample.user.clone(),
            text: vocab.decode(&sample.text)?,
            label: sample.label,
            ambiguous: sample.ambiguous,
        })
    }
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_jsonl(path: &Path, vocab: &Vocabulary) -> Result<Vec<Sample>> {
    Ok(read_records(path)?.iter().map(|r| r.encode(vocab)).collect())
}

pub fn save_jsonl(path: &Path, samples: &[Sample], vocab: &Vocabulary) -> Result<()> {
    let records = samples.iter().map(|s| Record::decode(s, vocab)).collect::<Result<Vec<_>>>()?;
    write_records(path, &records)
}

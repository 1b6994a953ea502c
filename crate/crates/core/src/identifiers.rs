//! Per-user identifier sequences and their collision arithmetic.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{TokenId, TokenSeq, UserId};
use crate::tokenizer::{SubsetKind, Vocabulary};

pub const DEFAULT_MAX_RETRIES: usize = 100;

/// How an identifier is generated for each user.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// The user's own name, tokenized.
    Default,
    /// Decimal 1-based user index, one token per digit.
    Num,
    RandDig,
    RandNon,
    RandAll,
}

impl Scheme {
    pub const ALL: [Scheme; 5] =
        [Scheme::Default, Scheme::Num, Scheme::RandDig, Scheme::RandNon, Scheme::RandAll];

    /// Sampling space of the random schemes.
    pub fn subset(self) -> Option<SubsetKind> {
        match self {
            Scheme::RandDig => Some(SubsetKind::Digits),
            Scheme::RandNon => Some(SubsetKind::NonAlnum),
            Scheme::RandAll => Some(SubsetKind::All),
            Scheme::Default | Scheme::Num => None,
        }
    }

    pub fn is_random(self) -> bool {
        self.subset().is_some()
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Default => "default",
            Scheme::Num => "num",
            Scheme::RandDig => "rand_dig",
            Scheme::RandNon => "rand_non",
            Scheme::RandAll => "rand_all",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.name() == s || format!("{k:?}") == s)
            .ok_or_else(|| Error::Config(format!("unknown identifier scheme {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserIdentifier {
    pub user: UserId,
    pub scheme: Scheme,
    pub ids: TokenSeq,
}

impl UserIdentifier {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignOptions {
    pub scheme: Scheme,
    /// Sequence length for the random schemes; ignored by `Default` and `Num`.
    pub length: usize,
    pub seed: u64,
    /// Resample duplicates so no two users share a sequence.
    pub enforce_unique: bool,
    pub max_retries: usize,
}

impl AssignOptions {
    pub fn new(scheme: Scheme, length: usize, seed: u64) -> Self {
        Self { scheme, length, seed, enforce_unique: true, max_retries: DEFAULT_MAX_RETRIES }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentifierAssignment {
    pub scheme: Scheme,
    pub length: usize,
    pub seed: u64,
    by_user: BTreeMap<UserId, UserIdentifier>,
}

impl IdentifierAssignment {
    pub fn get(&self, user: &UserId) -> Option<&UserIdentifier> {
        self.by_user.get(user)
    }

    pub fn require(&self, user: &UserId) -> Result<&UserIdentifier> {
        self.get(user).ok_or_else(|| Error::MissingIdentifier(user.to_string()))
    }

    pub fn len(&self) -> usize {
        self.by_user.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_user.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &UserIdentifier> {
        self.by_user.values()
    }

    /// Longest identifier in the assignment.
    pub fn max_len(&self) -> usize {
        self.iter().map(UserIdentifier::len).max().unwrap_or(0)
    }

    /// Whether any two users share the same full sequence.
    pub fn has_duplicates(&self) -> bool {
        let mut seen = HashSet::new();
        !self.iter().all(|u| seen.insert(&u.ids))
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for u in self.iter() {
            serde_json::to_writer(&mut w, u)?;
            w.write_all(b"\n").map_err(|e| Error::io("<assignment>", e))?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut by_user = BTreeMap::new();
        let mut scheme = None;
        for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let u: UserIdentifier = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            scheme.get_or_insert(u.scheme);
            by_user.insert(u.user.clone(), u);
        }
        let scheme = scheme.unwrap_or(Scheme::RandAll);
        let mut a = Self { scheme, length: 0, seed: 0, by_user };
        a.length = a.max_len();
        Ok(a)
    }
}

/// Number of distinct length-`length` sequences over `size` symbols, as a
/// human-readable string for error messages.
fn space_label(size: usize, length: usize) -> String {
    match (size as u128).checked_pow(length as u32) {
        Some(m) => format!("{size}^{length} = {m}"),
        None => format!("{size}^{length}"),
    }
}

fn space_smaller_than(size: usize, length: usize, users: usize) -> bool {
    match (size as u128).checked_pow(length as u32) {
        Some(m) => m < users as u128,
        None => false,
    }
}

/// Gives every user in `users` an identifier under `opts.scheme`.
///
/// `usernames` is only consulted by [`Scheme::Default`].
pub fn assign(
    users: &[UserId],
    opts: &AssignOptions,
    vocab: &Vocabulary,
    usernames: Option<&BTreeMap<UserId, String>>,
) -> Result<IdentifierAssignment> {
    let mut by_user = BTreeMap::new();
    match opts.scheme {
        Scheme::Num => {
            for (i, u) in users.iter().enumerate() {
                let ids = (i + 1)
                    .to_string()
                    .chars()
                    .map(|c| vocab.id(&c.to_string()).expect("digit tokens are always present"))
                    .collect();
                by_user.insert(u.clone(), UserIdentifier { user: u.clone(), scheme: opts.scheme, ids });
            }
        }
        Scheme::Default => {
            let names = usernames.ok_or_else(|| {
                Error::MissingUsername(users.first().map(|u| u.to_string()).unwrap_or_default())
            })?;
            let mut seen = HashSet::new();
            for u in users {
                let name = names.get(u).ok_or_else(|| Error::MissingUsername(u.to_string()))?;
                let ids = vocab.encode(name);
                if ids.is_empty() || ids.contains(&vocab.specials().unk) {
                    return Err(Error::UnrepresentableUsername(name.clone()));
                }
                if opts.enforce_unique && !seen.insert(ids.clone()) {
                    return Err(Error::IdentifierSpaceTooSmall {
                        space: format!("usernames (duplicate {name:?})"),
                        users: users.len(),
                    });
                }
                by_user.insert(u.clone(), UserIdentifier { user: u.clone(), scheme: opts.scheme, ids });
            }
        }
        scheme => {
            let kind = scheme.subset().expect("random scheme");
            let pool = vocab.subset(kind);
            if opts.length == 0 {
                return Err(Error::Config("random identifiers need length >= 1".into()));
            }
            if pool.is_empty() {
                return Err(Error::IdentifierSpaceTooSmall { space: "empty subset".into(), users: users.len() });
            }
            if opts.enforce_unique && space_smaller_than(pool.len(), opts.length, users.len()) {
                return Err(Error::IdentifierSpaceTooSmall {
                    space: space_label(pool.len(), opts.length),
                    users: users.len(),
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut seen: HashSet<TokenSeq> = HashSet::new();
            for u in users {
                let mut ids = draw(&mut rng, pool, opts.length);
                if opts.enforce_unique {
                    let mut retries = 0;
                    while seen.contains(&ids) {
                        if retries == opts.max_retries {
                            return Err(Error::UniquenessRetriesExhausted {
                                user: u.to_string(),
                                retries,
                            });
                        }
                        retries += 1;
                        ids = draw(&mut rng, pool, opts.length);
                    }
                    seen.insert(ids.clone());
                }
                by_user.insert(u.clone(), UserIdentifier { user: u.clone(), scheme, ids });
            }
        }
    }
    let mut out = IdentifierAssignment { scheme: opts.scheme, length: opts.length, seed: opts.seed, by_user };
    if !opts.scheme.is_random() {
        out.length = out.max_len();
    }
    Ok(out)
}

fn draw(rng: &mut ChaCha8Rng, pool: &[TokenId], length: usize) -> TokenSeq {
    (0..length).map(|_| pool[rng.random_range(0..pool.len())]).collect()
}

/// Probability that at least two of `n_users` independent uniform draws from
/// the `space_size^length` sequences coincide.
///
/// Exact rational arithmetic is used while the numbers fit in 128 bits;
/// otherwise the product is accumulated in log space.
pub fn collision_probability(space_size: u64, length: u32, n_users: u64) -> f64 {
    assert!(space_size >= 1 && length >= 1 && n_users >= 1);
    if n_users == 1 {
        return 0.0;
    }
    if let Some(m) = (space_size as u128).checked_pow(length) {
        if n_users as u128 > m {
            return 1.0;
        }
        if let Some(exact) = exact_collision(m, n_users) {
            return exact;
        }
    }
    let ln_m = length as f64 * (space_size as f64).ln();
    let mut log_no_collision = 0.0;
    for i in 1..n_users {
        let frac = ((i as f64).ln() - ln_m).exp();
        log_no_collision += (-frac).ln_1p();
    }
    -log_no_collision.exp_m1()
}

fn exact_collision(m: u128, n: u64) -> Option<f64> {
    let total = m.checked_pow(u32::try_from(n).ok()?)?;
    let mut distinct: u128 = 1;
    for i in 0..n as u128 {
        distinct = distinct.checked_mul(m - i)?;
    }
    Some((total - distinct) as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::build_vocab;

    fn vocab() -> Vocabulary {
        build_vocab(["alpha beta gamma delta u1 u2 u3"], 600, 400).unwrap()
    }

    fn users(n: usize) -> Vec<UserId> {
        (0..n).map(|i| UserId(format!("u{i:03}"))).collect()
    }

    #[test]
    fn numbers_are_one_based_digit_tokens() {
        let v = vocab();
        let us = users(12);
        let a = assign(&us, &AssignOptions::new(Scheme::Num, 0, 0), &v, None).unwrap();
        assert_eq!(v.decode(&a.get(&us[0]).unwrap().ids).unwrap(), "1");
        assert_eq!(v.decode(&a.get(&us[2]).unwrap().ids).unwrap(), "3");
        assert_eq!(v.decode(&a.get(&us[11]).unwrap().ids).unwrap(), "1 2");
        assert_eq!(a.max_len(), 2);
    }

    #[test]
    fn pigeonhole_rejected() {
        let err = assign(&users(11), &AssignOptions::new(Scheme::RandDig, 1, 0), &vocab(), None)
            .unwrap_err();
        assert!(err.to_string().contains("10"), "{err}");
    }

    #[test]
    fn random_ids_come_from_subset_and_are_unique() {
        let v = vocab();
        for scheme in [Scheme::RandDig, Scheme::RandNon, Scheme::RandAll] {
            let a = assign(&users(10), &AssignOptions::new(scheme, 1, 3), &v, None).unwrap();
            let pool = v.subset(scheme.subset().unwrap());
            assert!(a.iter().all(|u| u.len() == 1 && pool.contains(&u.ids[0])));
            assert!(!a.has_duplicates());
        }
    }

    #[test]
    fn default_needs_usernames() {
        let v = vocab();
        let us: Vec<UserId> = ["u1", "u2"].map(UserId::from).to_vec();
        let opts = AssignOptions::new(Scheme::Default, 0, 0);
        assert!(matches!(assign(&us, &opts, &v, None), Err(Error::MissingUsername(_))));
        let mut names = BTreeMap::new();
        names.insert(us[0].clone(), "u1".to_string());
        assert!(matches!(assign(&us, &opts, &v, Some(&names)), Err(Error::MissingUsername(_))));
        names.insert(us[1].clone(), "u2".to_string());
        let a = assign(&us, &opts, &v, Some(&names)).unwrap();
        assert_eq!(a.get(&us[1]).unwrap().ids, v.encode("u2"));
        names.insert(us[1].clone(), "nobody".to_string());
        assert!(matches!(
            assign(&us, &opts, &v, Some(&names)),
            Err(Error::UnrepresentableUsername(_))
        ));
    }

    #[test]
    fn deterministic_given_seed() {
        let v = vocab();
        let opts = AssignOptions::new(Scheme::RandAll, 6, 9);
        assert_eq!(assign(&users(30), &opts, &v, None).unwrap(), assign(&users(30), &opts, &v, None).unwrap());
    }

    #[test]
    fn collision_closed_forms() {
        assert_eq!(collision_probability(10, 1, 2), 0.1);
        assert_eq!(collision_probability(10, 1, 11), 1.0);
        assert_eq!(collision_probability(10, 1, 1), 0.0);
        assert!((collision_probability(10, 2, 3) - 0.0298).abs() < 1e-15);
    }

    #[test]
    fn log_space_path_matches_exact_path() {
        // (47_400^2)^8 overflows u128, so this takes the log-space path.
        let exact = collision_probability(47_400, 2, 8);
        let logp = {
            let m = 47_400f64 * 47_400f64;
            1.0 - (1..8).map(|i| 1.0 - i as f64 / m).product::<f64>()
        };
        assert!((exact - logp).abs() < 1e-15);
        let big = collision_probability(47_400, 10, 1_000);
        assert!(big > 0.0 && big < 1e-40);
    }

    #[test]
    fn jsonl_round_trip() {
        let v = vocab();
        let a = assign(&users(5), &AssignOptions::new(Scheme::RandAll, 3, 1), &v, None).unwrap();
        let dir = std::env::temp_dir().join(format!("uid-assign-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("a.jsonl");
        a.save_jsonl(&p).unwrap();
        let b = IdentifierAssignment::load_jsonl(&p).unwrap();
        assert_eq!(a.iter().collect::<Vec<_>>(), b.iter().collect::<Vec<_>>());
        let line = std::fs::read_to_string(&p).unwrap().lines().next().unwrap().to_string();
        let rec: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert!(rec.get("user").is_some() && rec.get("scheme").is_some() && rec.get("ids").is_some());
    }
}

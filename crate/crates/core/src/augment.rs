//! Identifier insertion and the sequence-length budget.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::identifiers::UserIdentifier;
use crate::ids::{TokenId, TokenSeq, UserId};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub user: UserId,
    pub text: TokenSeq,
    pub label: usize,
    /// The label of this sample depends on who wrote it.
    pub ambiguous: bool,
}

/// Where identifier copies go relative to the content.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// `[CLS, u, x]`
    Prefix,
    /// `[CLS, u, x, u]`
    #[default]
    Both,
}

impl Placement {
    pub fn copies(self) -> usize {
        match self {
            Placement::Prefix => 1,
            Placement::Both => 2,
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Placement::Prefix => "prefix",
            Placement::Both => "both",
        })
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefix" => Ok(Placement::Prefix),
            "both" => Ok(Placement::Both),
            _ => Err(Error::Config(format!("unknown placement {s:?}"))),
        }
    }
}

/// Model-ready sequence: `CLS`, identifier copies and (possibly truncated)
/// content.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentedSample {
    pub user: UserId,
    pub ids: TokenSeq,
    pub label: usize,
    pub ambiguous: bool,
    pub content_kept: usize,
    /// Positions in `ids` holding identifier tokens, one range per copy.
    pub ident_spans: Vec<Range<usize>>,
}

impl AugmentedSample {
    pub fn ident_len(&self) -> usize {
        self.ident_spans.first().map_or(0, |r| r.len())
    }

    /// Identifier slot index at `pos`, when `pos` falls inside a copy.
    pub fn ident_slot(&self, pos: usize) -> Option<usize> {
        self.ident_spans.iter().find(|r| r.contains(&pos)).map(|r| pos - r.start)
    }
}

/// Content tokens that fit once `CLS` and every identifier copy are placed.
pub fn content_budget(max_seq_len: usize, ident_len: usize, placement: Placement) -> usize {
    max_seq_len.saturating_sub(1 + placement.copies() * ident_len)
}

/// Inserts `ident` according to `placement`, truncating content from the end.
pub fn augment(
    sample: &Sample,
    ident: &UserIdentifier,
    placement: Placement,
    max_seq_len: usize,
    cls: TokenId,
) -> Result<AugmentedSample> {
    let copies = placement.copies();
    if 1 + copies * ident.len() > max_seq_len {
        return Err(Error::IdentifierTooLong { ident: ident.len(), copies, max_seq_len });
    }
    let budget = content_budget(max_seq_len, ident.len(), placement);
    let kept = sample.text.len().min(budget);
    let mut ids = Vec::with_capacity(1 + copies * ident.len() + kept);
    ids.push(cls);
    let mut spans = Vec::with_capacity(copies);
    spans.push(ids.len()..ids.len() + ident.len());
    ids.extend_from_slice(&ident.ids);
    ids.extend_from_slice(&sample.text[..kept]);
    if placement == Placement::Both {
        spans.push(ids.len()..ids.len() + ident.len());
        ids.extend_from_slice(&ident.ids);
    }
    Ok(AugmentedSample {
        user: sample.user.clone(),
        ids,
        label: sample.label,
        ambiguous: sample.ambiguous,
        content_kept: kept,
        ident_spans: spans,
    })
}

/// `[CLS, x]` without any identifier, leaving `reserved` positions free for
/// vectors the model inserts itself.
pub fn plain(sample: &Sample, max_seq_len: usize, reserved: usize, cls: TokenId) -> Result<AugmentedSample> {
    if 1 + reserved > max_seq_len {
        return Err(Error::IdentifierTooLong { ident: reserved, copies: 1, max_seq_len });
    }
    let kept = sample.text.len().min(max_seq_len - 1 - reserved);
    let mut ids = Vec::with_capacity(1 + kept);
    ids.push(cls);
    ids.extend_from_slice(&sample.text[..kept]);
    Ok(AugmentedSample {
        user: sample.user.clone(),
        ids,
        label: sample.label,
        ambiguous: sample.ambiguous,
        content_kept: kept,
        ident_spans: Vec::new(),
    })
}

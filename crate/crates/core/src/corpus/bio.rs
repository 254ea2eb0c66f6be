use std::fmt;

use serde::{Deserialize, Serialize};

use super::instance::Span;
use crate::error::{DifdError, Result};

/// Aspect-detection tag. The discriminant is the tagger's class index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BioTag {
    B = 0,
    I = 1,
    O = 2,
}

impl BioTag {
    pub const ALL: [BioTag; 3] = [BioTag::B, BioTag::I, BioTag::O];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "B" => Some(BioTag::B),
            "I" => Some(BioTag::I),
            "O" => Some(BioTag::O),
            _ => None,
        }
    }
}

impl fmt::Display for BioTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BioTag::B => "B",
            BioTag::I => "I",
            BioTag::O => "O",
        })
    }
}

/// Tags for disjoint spans over a sentence of `len` tokens.
pub fn encode_bio(spans: &[Span], len: usize) -> Result<Vec<BioTag>> {
    let mut tags = vec![BioTag::O; len];
    let mut sorted = spans.to_vec();
    sorted.sort();
    for (k, s) in sorted.iter().enumerate() {
        if s.is_empty() || s.end > len {
            return Err(DifdError::InvalidInstance(format!(
                "span ({}, {}) invalid for length {len}",
                s.start, s.end
            )));
        }
        if k > 0 && sorted[k - 1].overlaps(s) {
            let p = sorted[k - 1];
            return Err(DifdError::InvalidInstance(format!(
                "overlapping spans ({}, {}) and ({}, {})",
                p.start, p.end, s.start, s.end
            )));
        }
        tags[s.start] = BioTag::B;
        for t in &mut tags[s.start + 1..s.end] {
            *t = BioTag::I;
        }
    }
    Ok(tags)
}

/// Spans of a valid tag sequence, in order.
pub fn decode_bio(tags: &[BioTag]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &t) in tags.iter().enumerate() {
        match t {
            BioTag::B => {
                if let Some(s) = open.take() {
                    spans.push(Span::new(s, i));
                }
                open = Some(i);
            }
            BioTag::I => {
                if open.is_none() {
                    open = Some(i);
                }
            }
            BioTag::O => {
                if let Some(s) = open.take() {
                    spans.push(Span::new(s, i));
                }
            }
        }
    }
    if let Some(s) = open {
        spans.push(Span::new(s, tags.len()));
    }
    spans
}

/// Rejects an `I` at sentence start or directly after `O`.
pub fn validate_bio(tags: &[BioTag]) -> std::result::Result<(), String> {
    let mut prev = BioTag::O;
    for (i, &t) in tags.iter().enumerate() {
        if t == BioTag::I && prev == BioTag::O {
            return Err(format!("I without preceding B at position {i}"));
        }
        prev = t;
    }
    Ok(())
}

/// Promotes every `I` that starts a span to `B`.
pub fn repair_bio(tags: &mut [BioTag]) {
    let mut prev = BioTag::O;
    for t in tags.iter_mut() {
        if *t == BioTag::I && prev == BioTag::O {
            *t = BioTag::B;
        }
        prev = *t;
    }
}

use std::fmt;

use serde::{Deserialize, Serialize};

use super::bio::{decode_bio, validate_bio, BioTag};
use crate::error::{DifdError, Result};

/// Sentiment polarity. The discriminant is the class index used by the
/// sentiment head, so ties in argmax resolve toward `Positive`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive = 0,
    Negative = 1,
    Neutral = 2,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Positive, Polarity::Negative, Polarity::Neutral];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
            Polarity::Neutral => "neutral",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "positive" => Some(Polarity::Positive),
            "negative" => Some(Polarity::Negative),
            "neutral" => Some(Polarity::Neutral),
            _ => None,
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn index(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Half-open token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "[usize; 2]", from = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i < self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

impl From<[usize; 2]> for Span {
    fn from([start, end]: [usize; 2]) -> Self {
        Self { start, end }
    }
}

/// One (sentence, focal aspect) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    /// Identity of the underlying sentence; instances built from the same
    /// sentence share it.
    pub sentence_id: String,
    pub tokens: Vec<String>,
    pub aspect_span: Span,
    /// Tags for every aspect of the sentence, not only the focal one.
    pub bio_tags: Vec<BioTag>,
    pub polarity: Option<Polarity>,
    pub domain: Domain,
}

impl Instance {
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        let Span { start, end } = self.aspect_span;
        if n == 0 {
            return Err(DifdError::InvalidInstance("tokens: empty sentence".into()));
        }
        if !(start < end && end <= n) {
            return Err(DifdError::InvalidInstance(format!(
                "aspect_span: ({start}, {end}) outside 0 <= start < end <= {n}"
            )));
        }
        if self.bio_tags.len() != n {
            return Err(DifdError::InvalidInstance(format!(
                "bio_tags: {} tags for {n} tokens",
                self.bio_tags.len()
            )));
        }
        validate_bio(&self.bio_tags).map_err(|e| DifdError::InvalidInstance(format!("bio_tags: {e}")))?;
        if !decode_bio(&self.bio_tags).contains(&self.aspect_span) {
            return Err(DifdError::InvalidInstance(format!(
                "aspect_span: ({start}, {end}) is not one of the BIO-encoded spans"
            )));
        }
        Ok(())
    }

    pub fn aspect_tokens(&self) -> &[String] {
        &self.tokens[self.aspect_span.start..self.aspect_span.end]
    }

    pub fn is_labeled(&self) -> bool {
        self.polarity.is_some()
    }
}

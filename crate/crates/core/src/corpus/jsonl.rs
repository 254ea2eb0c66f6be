//! Canonical one-instance-per-line JSON interchange format.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bio::{encode_bio, BioTag};
use super::instance::{Domain, Instance, Polarity, Span};
use super::tokenize::tokenize_words;
use crate::error::{DifdError, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sentence_id: Option<String>,
    tokens: Vec<String>,
    aspect_span: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bio_tags: Option<Vec<String>>,
    /// All aspect spans of the sentence; used to derive `bio_tags` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    aspects: Option<Vec<[usize; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    polarity: Option<Polarity>,
    domain: Domain,
}

fn record_to_instance(rec: Record) -> std::result::Result<Instance, String> {
    let n = rec.tokens.len();
    let aspect_span = Span::from(rec.aspect_span);
    let bio_tags = match (rec.bio_tags, rec.aspects) {
        (Some(tags), _) => tags
            .iter()
            .map(|t| BioTag::parse(t).ok_or_else(|| format!("bio_tags: unknown tag `{t}`")))
            .collect::<std::result::Result<Vec<_>, _>>()?,
        (None, Some(aspects)) => {
            let spans: Vec<Span> = aspects.into_iter().map(Span::from).collect();
            encode_bio(&spans, n).map_err(|e| format!("aspects: {e}"))?
        }
        (None, None) => {
            if aspect_span.is_empty() || aspect_span.end > n {
                return Err(format!("aspect_span: ({}, {}) invalid for {n} tokens", aspect_span.start, aspect_span.end));
            }
            encode_bio(&[aspect_span], n).map_err(|e| format!("aspect_span: {e}"))?
        }
    };
    let sentence_id = rec.sentence_id.unwrap_or_else(|| rec.tokens.join(" "));
    let inst = Instance {
        sentence_id,
        tokens: rec.tokens,
        aspect_span,
        bio_tags,
        polarity: rec.polarity,
        domain: rec.domain,
    };
    inst.validate().map_err(|e| match e {
        DifdError::InvalidInstance(m) => m,
        other => other.to_string(),
    })?;
    Ok(inst)
}

pub fn parse_jsonl(text: &str, path: &Path) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| DifdError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let rec: Record = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        out.push(record_to_instance(rec).map_err(err)?);
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Instance>> {
    let text = fs::read_to_string(path).map_err(|e| DifdError::io(path, e))?;
    parse_jsonl(&text, path)
}

pub fn instance_to_json(inst: &Instance) -> String {
    let rec = Record {
        sentence_id: Some(inst.sentence_id.clone()),
        tokens: inst.tokens.clone(),
        aspect_span: inst.aspect_span.into(),
        bio_tags: Some(inst.bio_tags.iter().map(|t| t.to_string()).collect()),
        aspects: None,
        polarity: inst.polarity,
        domain: inst.domain,
    };
    serde_json::to_string(&rec).expect("record serializes")
}

pub fn write_jsonl(path: &Path, instances: &[Instance]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| DifdError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for inst in instances {
        writeln!(w, "{}", instance_to_json(inst)).map_err(|e| DifdError::io(path, e))?;
    }
    w.flush().map_err(|e| DifdError::io(path, e))
}

/// Converts the three-lines-per-example Twitter format (sentence with a
/// `$T$` placeholder, aspect, polarity in {-1, 0, 1}) into instances.
pub fn convert_twitter(text: &str, domain: Domain, path: &Path) -> Result<Vec<Instance>> {
    let lines: Vec<&str> = text.lines().map(str::trim_end).filter(|l| !l.trim().is_empty()).collect();
    if lines.len() % 3 != 0 {
        return Err(DifdError::Parse {
            path: path.to_path_buf(),
            line: lines.len(),
            msg: "expected groups of three lines".into(),
        });
    }
    let mut out = Vec::new();
    for (k, chunk) in lines.chunks(3).enumerate() {
        let line = k * 3 + 1;
        let err = |msg: String| DifdError::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let (before, after) = chunk[0]
            .split_once("$T$")
            .ok_or_else(|| err("sentence has no $T$ placeholder".into()))?;
        let left = tokenize_words(before);
        let aspect = tokenize_words(chunk[1]);
        if aspect.is_empty() {
            return Err(err("empty aspect".into()));
        }
        let right = tokenize_words(after);
        let polarity = match chunk[2].trim() {
            "1" => Polarity::Positive,
            "-1" => Polarity::Negative,
            "0" => Polarity::Neutral,
            other => return Err(err(format!("unknown polarity `{other}`"))),
        };
        let span = Span::new(left.len(), left.len() + aspect.len());
        let tokens: Vec<String> = left.into_iter().chain(aspect).chain(right).collect();
        let bio_tags = encode_bio(&[span], tokens.len())?;
        out.push(Instance {
            sentence_id: format!("t{k}"),
            tokens,
            aspect_span: span,
            bio_tags,
            polarity: Some(polarity),
            domain,
        });
    }
    Ok(out)
}

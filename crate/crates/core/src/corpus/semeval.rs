//! SemEval-2014 Task 4 aspect-term XML.

use std::fs;
use std::path::Path;

use serde::Serialize;

use super::bio::encode_bio;
use super::instance::{Domain, Instance, Polarity, Span};
use super::tokenize::{tokenize, tokenize_with_breaks};
use crate::error::{DifdError, Result};

/// Counters collected while loading one file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SemEvalReport {
    pub sentences: usize,
    pub sentences_without_aspects: usize,
    pub aspect_terms: usize,
    pub instances: usize,
    pub positive: usize,
    pub negative: usize,
    pub neutral: usize,
    pub dropped_conflict: usize,
    /// Terms whose offsets fell inside a token and forced a split.
    pub retokenized: usize,
    /// Terms whose offsets matched no token at all.
    pub unaligned: usize,
}

struct RawTerm {
    from: usize,
    to: usize,
    polarity: String,
}

pub fn load_semeval_xml(path: &Path, domain: Domain) -> Result<(Vec<Instance>, SemEvalReport)> {
    let text = fs::read_to_string(path).map_err(|e| DifdError::io(path, e))?;
    parse_semeval_xml(&text, domain, path)
}

pub fn parse_semeval_xml(xml: &str, domain: Domain, path: &Path) -> Result<(Vec<Instance>, SemEvalReport)> {
    let doc = roxmltree::Document::parse(xml).map_err(|e| DifdError::Parse {
        path: path.to_path_buf(),
        line: e.pos().row as usize,
        msg: e.to_string(),
    })?;
    let mut report = SemEvalReport::default();
    let mut out = Vec::new();

    for (sent_no, sentence) in doc.descendants().filter(|n| n.has_tag_name("sentence")).enumerate() {
        report.sentences += 1;
        let line = doc.text_pos_at(sentence.range().start).row as usize;
        let parse_err = |msg: String| DifdError::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let id = sentence
            .attribute("id")
            .map(str::to_string)
            .unwrap_or_else(|| format!("s{sent_no}"));
        let text = sentence
            .children()
            .find(|n| n.has_tag_name("text"))
            .and_then(|n| n.text())
            .ok_or_else(|| parse_err(format!("sentence {id} has no <text>")))?;

        let mut terms = Vec::new();
        for term in sentence.descendants().filter(|n| n.has_tag_name("aspectTerm")) {
            let attr = |k: &str| term.attribute(k).ok_or_else(|| parse_err(format!("aspectTerm missing `{k}`")));
            let from: usize = attr("from")?.parse().map_err(|_| parse_err("bad `from` offset".into()))?;
            let to: usize = attr("to")?.parse().map_err(|_| parse_err("bad `to` offset".into()))?;
            let polarity = attr("polarity")?.to_string();
            terms.push(RawTerm { from, to, polarity });
        }
        if terms.is_empty() {
            report.sentences_without_aspects += 1;
            continue;
        }
        report.aspect_terms += terms.len();

        let plain = tokenize(text);
        let breaks: Vec<usize> = terms.iter().flat_map(|t| [t.from, t.to]).collect();
        for &b in &breaks {
            let inside = plain.iter().any(|tok| tok.start < b && b < tok.end);
            if inside {
                report.retokenized += 1;
            }
        }
        let tokens = tokenize_with_breaks(text, &breaks);
        let words: Vec<String> = tokens.iter().map(|t| t.text.clone()).collect();

        let spans: Vec<Option<Span>> = terms
            .iter()
            .map(|t| {
                let covered: Vec<usize> = tokens
                    .iter()
                    .enumerate()
                    .filter(|(_, tok)| tok.start >= t.from && tok.end <= t.to)
                    .map(|(i, _)| i)
                    .collect();
                match (covered.first(), covered.last()) {
                    (Some(&a), Some(&b)) => Some(Span::new(a, b + 1)),
                    _ => None,
                }
            })
            .collect();

        for (k, term) in terms.iter().enumerate() {
            let Some(focal) = spans[k] else {
                report.unaligned += 1;
                continue;
            };
            let polarity = match Polarity::parse(&term.polarity) {
                Some(p) => p,
                None if term.polarity == "conflict" => {
                    report.dropped_conflict += 1;
                    continue;
                }
                None => return Err(parse_err(format!("unknown polarity `{}`", term.polarity))),
            };
            // focal span first, then every other aspect that does not collide
            let mut kept = vec![focal];
            for s in spans.iter().flatten() {
                if !kept.iter().any(|k| k.overlaps(s)) {
                    kept.push(*s);
                }
            }
            let bio_tags = encode_bio(&kept, words.len())?;
            match polarity {
                Polarity::Positive => report.positive += 1,
                Polarity::Negative => report.negative += 1,
                Polarity::Neutral => report.neutral += 1,
            }
            let inst = Instance {
                sentence_id: id.clone(),
                tokens: words.clone(),
                aspect_span: focal,
                bio_tags,
                polarity: Some(polarity),
                domain,
            };
            inst.validate()?;
            out.push(inst);
        }
    }
    report.instances = out.len();
    Ok((out, report))
}

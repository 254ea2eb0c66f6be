use std::collections::BTreeMap;

use serde::Serialize;

use super::instance::{Instance, Polarity};
use super::synthetic::aspect_types;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SplitStats {
    pub instances: usize,
    pub sentences: usize,
    pub positive: usize,
    pub negative: usize,
    pub neutral: usize,
    pub unlabeled: usize,
    pub aspect_types: usize,
}

impl SplitStats {
    pub fn of(instances: &[Instance]) -> Self {
        let mut s = SplitStats {
            instances: instances.len(),
            ..Default::default()
        };
        let mut sentences = std::collections::HashSet::new();
        for i in instances {
            sentences.insert(i.sentence_id.as_str());
            match i.polarity {
                Some(Polarity::Positive) => s.positive += 1,
                Some(Polarity::Negative) => s.negative += 1,
                Some(Polarity::Neutral) => s.neutral += 1,
                None => s.unlabeled += 1,
            }
        }
        s.sentences = sentences.len();
        s.aspect_types = aspect_types(instances).len();
        s
    }
}

/// Corpus report written next to generated or converted data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub splits: BTreeMap<String, SplitStats>,
    /// Percentage of target aspect types that also occur in the source.
    pub aspect_overlap_pct: f64,
    /// Percentage of source aspect types that also occur in the target.
    pub source_aspect_overlap_pct: f64,
}

pub fn corpus_stats(splits: &[(&str, &[Instance])], source: &[&[Instance]], target: &[&[Instance]]) -> CorpusStats {
    let collect = |parts: &[&[Instance]]| {
        parts
            .iter()
            .flat_map(|p| aspect_types(p))
            .collect::<std::collections::BTreeSet<_>>()
    };
    let s = collect(source);
    let t = collect(target);
    let shared = s.intersection(&t).count() as f64;
    let pct = |n: usize| if n == 0 { 0.0 } else { 100.0 * shared / n as f64 };
    CorpusStats {
        splits: splits
            .iter()
            .map(|(name, inst)| (name.to_string(), SplitStats::of(inst)))
            .collect(),
        aspect_overlap_pct: pct(t.len()),
        source_aspect_overlap_pct: pct(s.len()),
    }
}

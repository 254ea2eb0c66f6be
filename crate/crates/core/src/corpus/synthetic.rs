//! Synthetic two-domain corpora: disjoint aspect vocabularies, a shared
//! opinion lexicon, and opinion words placed next to the aspect they rate.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bio::encode_bio;
use super::instance::{Domain, Instance, Polarity, Span};
use crate::error::{DifdError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpinionWord {
    pub word: String,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub source_train: usize,
    pub source_test: usize,
    pub target_unlabeled: usize,
    pub target_gold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    /// Aspect terms; multi-word terms are whitespace separated.
    pub source_aspects: Vec<String>,
    pub target_aspects: Vec<String>,
    /// Shared across both domains.
    pub opinions: Vec<OpinionWord>,
    /// Filler shared by both domains.
    pub filler: Vec<String>,
    #[serde(default)]
    pub source_filler: Vec<String>,
    #[serde(default)]
    pub target_filler: Vec<String>,
    /// Probability that a filler slot draws from the domain's own filler list.
    #[serde(default)]
    pub domain_filler_prob: f64,
    /// Fraction of target aspect types replaced by source aspect types.
    pub overlap: f64,
    /// Sampling weights for positive, negative, neutral.
    pub polarity_weights: [f64; 3],
    /// Inclusive range of filler tokens per sentence.
    pub min_filler: usize,
    pub max_filler: usize,
    pub two_aspect_prob: f64,
    /// Probability that an aspect takes its own preferred polarity instead of
    /// a fresh draw. Each aspect type gets a preferred polarity once, sampled
    /// from `polarity_weights`.
    #[serde(default)]
    pub aspect_polarity_bias: f64,
    pub counts: SplitCounts,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl SyntheticSpec {
    /// Restaurant-like source, laptop-like target, shared opinion lexicon.
    pub fn desk(seed: u64) -> Self {
        let op = |w: &str, p: Polarity| OpinionWord {
            word: w.to_string(),
            polarity: p,
        };
        use Polarity::*;
        Self {
            seed,
            source_aspects: words(&[
                "pizza", "sushi", "waiter", "service", "pasta", "wine list", "dessert", "menu", "staff", "ambience",
                "fried rice", "bread", "steak", "salad", "coffee", "decor", "chef", "portions", "burger", "noodles",
            ]),
            target_aspects: words(&[
                "battery", "screen", "keyboard", "battery life", "trackpad", "processor", "hard drive", "speakers",
                "memory", "charger", "touchpad", "graphics", "fan", "webcam", "operating system", "display", "warranty",
                "ports", "software", "hinge",
            ]),
            opinions: vec![
                op("great", Positive),
                op("excellent", Positive),
                op("amazing", Positive),
                op("wonderful", Positive),
                op("fantastic", Positive),
                op("superb", Positive),
                op("terrible", Negative),
                op("awful", Negative),
                op("horrible", Negative),
                op("poor", Negative),
                op("bad", Negative),
                op("disappointing", Negative),
                op("average", Neutral),
                op("okay", Neutral),
                op("ordinary", Neutral),
                op("standard", Neutral),
                op("typical", Neutral),
                op("normal", Neutral),
            ],
            filler: words(&[
                "the", "a", "was", "is", "and", "it", "but", "really", "very", "i", "we", "think", "this", "that",
                "with", "of", "so", "quite", "overall", "honestly",
            ]),
            source_filler: words(&[
                "restaurant", "dinner", "table", "ordered", "night", "friends", "ate", "lunch", "place", "reservation",
            ]),
            target_filler: words(&[
                "laptop", "computer", "bought", "use", "work", "machine", "model", "install", "boot", "upgrade",
            ]),
            domain_filler_prob: 0.3,
            overlap: 0.0,
            polarity_weights: [0.4, 0.3, 0.3],
            min_filler: 4,
            max_filler: 9,
            two_aspect_prob: 0.35,
            aspect_polarity_bias: 0.6,
            counts: SplitCounts {
                source_train: 2000,
                source_test: 400,
                target_unlabeled: 2000,
                target_gold: 1000,
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DifdError::io(path, e))?;
        let spec: Self = serde_json::from_str(&text)
            .map_err(|e| DifdError::Config(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DifdError::Config(format!("synthetic spec: {m}")));
        if self.source_aspects.is_empty() || self.target_aspects.is_empty() {
            return bad("aspect vocabularies must be non-empty");
        }
        if self.opinions.is_empty() || self.filler.is_empty() {
            return bad("opinion lexicon and filler must be non-empty");
        }
        for p in Polarity::ALL {
            if self.polarity_weights[p.index()] > 0.0 && !self.opinions.iter().any(|o| o.polarity == p) {
                return bad(&format!("no opinion word for polarity {p}"));
            }
        }
        if self.polarity_weights.iter().any(|&w| w < 0.0) || self.polarity_weights.iter().sum::<f64>() <= 0.0 {
            return bad("polarity weights must be non-negative with a positive sum");
        }
        for (name, p) in [
            ("overlap", self.overlap),
            ("two_aspect_prob", self.two_aspect_prob),
            ("aspect_polarity_bias", self.aspect_polarity_bias),
            ("domain_filler_prob", self.domain_filler_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if self.min_filler > self.max_filler {
            return bad("min_filler exceeds max_filler");
        }
        if self.two_aspect_prob > 0.0 && self.source_aspects.len().min(self.target_aspects.len()) < 2 {
            return bad("two-aspect sentences need at least two aspect terms per domain");
        }
        let c = self.counts;
        if c.source_train == 0 || c.target_unlabeled == 0 {
            return bad("source_train and target_unlabeled counts must be positive");
        }
        Ok(())
    }

    /// Target aspect vocabulary after applying `overlap`.
    pub fn effective_target_aspects(&self) -> Vec<String> {
        let shared = (self.overlap * self.target_aspects.len() as f64).round() as usize;
        let shared = shared.min(self.source_aspects.len());
        let mut out = self.target_aspects.clone();
        for (i, slot) in out.iter_mut().take(shared).enumerate() {
            *slot = self.source_aspects[i].clone();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpora {
    pub source_train: Vec<Instance>,
    pub source_test: Vec<Instance>,
    /// Target training view: aspects only, polarity stripped.
    pub target_unlabeled: Vec<Instance>,
    /// Held-out labeled target sentences for evaluation.
    pub target_gold: Vec<Instance>,
}

impl SyntheticCorpora {
    pub fn splits(&self) -> [(&'static str, &[Instance]); 4] {
        [
            ("source_train", &self.source_train),
            ("source_test", &self.source_test),
            ("target_unlabeled", &self.target_unlabeled),
            ("target_gold", &self.target_gold),
        ]
    }
}

struct DomainLexicon<'a> {
    domain: Domain,
    aspects: Vec<Vec<String>>,
    preferred: Vec<Polarity>,
    filler: &'a [String],
    own_filler: &'a [String],
}

fn sample_polarity<R: Rng>(rng: &mut R, weights: &[f64; 3]) -> Polarity {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    for p in Polarity::ALL {
        x -= weights[p.index()];
        if x < 0.0 {
            return p;
        }
    }
    Polarity::ALL
        .into_iter()
        .rev()
        .find(|p| weights[p.index()] > 0.0)
        .expect("validated: some weight is positive")
}

struct Generator<'a> {
    spec: &'a SyntheticSpec,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn filler_word(&mut self, lex: &DomainLexicon) -> String {
        let own = !lex.own_filler.is_empty() && self.rng.gen::<f64>() < self.spec.domain_filler_prob;
        let list = if own { lex.own_filler } else { lex.filler };
        list.choose(&mut self.rng).expect("non-empty filler").clone()
    }

    fn opinion(&mut self, p: Polarity) -> String {
        let choices: Vec<&OpinionWord> = self.spec.opinions.iter().filter(|o| o.polarity == p).collect();
        choices.choose(&mut self.rng).expect("validated: lexicon covers polarity").word.clone()
    }

    /// One sentence with its aspect spans and polarities.
    fn sentence(&mut self, lex: &DomainLexicon) -> (Vec<String>, Vec<(Span, Polarity)>) {
        let two = self.rng.gen::<f64>() < self.spec.two_aspect_prob;
        let mut picks: Vec<usize> = (0..lex.aspects.len()).collect();
        picks.shuffle(&mut self.rng);
        picks.truncate(if two { 2 } else { 1 });

        // chunk = aspect with its opinion at distance 1 or 2
        let mut chunks: Vec<(Vec<String>, usize, usize, Polarity)> = Vec::new();
        for &a in &picks {
            let polarity = if self.rng.gen::<f64>() < self.spec.aspect_polarity_bias {
                lex.preferred[a]
            } else {
                sample_polarity(&mut self.rng, &self.spec.polarity_weights)
            };
            let opinion = self.opinion(polarity);
            let aspect = &lex.aspects[a];
            let gap = self.rng.gen_bool(0.5);
            let opinion_first = self.rng.gen_bool(0.5);
            let mut toks = Vec::new();
            let (a_start, a_end);
            if opinion_first {
                toks.push(opinion);
                if gap {
                    toks.push(self.filler_word(lex));
                }
                a_start = toks.len();
                toks.extend(aspect.iter().cloned());
                a_end = toks.len();
            } else {
                a_start = 0;
                toks.extend(aspect.iter().cloned());
                a_end = toks.len();
                if gap {
                    toks.push(self.filler_word(lex));
                }
                toks.push(opinion);
            }
            chunks.push((toks, a_start, a_end, polarity));
        }

        let n_filler = self.rng.gen_range(self.spec.min_filler..=self.spec.max_filler);
        // gaps before, between and after chunks; at least 3 between two chunks
        let slots = chunks.len() + 1;
        let min_between = 3;
        let reserved = min_between * (chunks.len() - 1);
        let free = n_filler.max(reserved) - reserved;
        let mut gaps = vec![0usize; slots];
        for _ in 0..free {
            let s = self.rng.gen_range(0..slots);
            gaps[s] += 1;
        }
        for g in gaps.iter_mut().take(chunks.len()).skip(1) {
            *g += min_between;
        }

        let mut tokens = Vec::new();
        let mut aspects = Vec::new();
        for (k, (toks, a_start, a_end, polarity)) in chunks.into_iter().enumerate() {
            for _ in 0..gaps[k] {
                let w = self.filler_word(lex);
                tokens.push(w);
            }
            let base = tokens.len();
            aspects.push((Span::new(base + a_start, base + a_end), polarity));
            tokens.extend(toks);
        }
        for _ in 0..gaps[slots - 1] {
            let w = self.filler_word(lex);
            tokens.push(w);
        }
        (tokens, aspects)
    }

    fn split(&mut self, lex: &DomainLexicon, name: &str, count: usize, labeled: bool) -> Result<Vec<Instance>> {
        let mut out = Vec::with_capacity(count);
        let mut k = 0;
        while out.len() < count {
            let (tokens, aspects) = self.sentence(lex);
            let spans: Vec<Span> = aspects.iter().map(|(s, _)| *s).collect();
            let bio_tags = encode_bio(&spans, tokens.len())?;
            let sentence_id = format!("{}-{name}-{k}", lex.domain);
            for (span, polarity) in aspects {
                if out.len() == count {
                    break;
                }
                out.push(Instance {
                    sentence_id: sentence_id.clone(),
                    tokens: tokens.clone(),
                    aspect_span: span,
                    bio_tags: bio_tags.clone(),
                    polarity: labeled.then_some(polarity),
                    domain: lex.domain,
                });
            }
            k += 1;
        }
        Ok(out)
    }
}

/// Generates source (train/test) and target (unlabeled/gold) corpora.
/// Byte-identical output for identical specs.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpora> {
    spec.validate()?;
    let mut g = Generator {
        spec,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
    };
    let split_words = |list: &[String]| -> Vec<Vec<String>> {
        list.iter()
            .map(|a| a.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>())
            .collect()
    };
    let src_aspects = split_words(&spec.source_aspects);
    let tgt_aspects = split_words(&spec.effective_target_aspects());
    if src_aspects.iter().chain(&tgt_aspects).any(Vec::is_empty) {
        return Err(DifdError::Config("synthetic spec: blank aspect term".into()));
    }
    let src_pref: Vec<Polarity> = (0..src_aspects.len())
        .map(|_| sample_polarity(&mut g.rng, &spec.polarity_weights))
        .collect();
    let tgt_pref: Vec<Polarity> = (0..tgt_aspects.len())
        .map(|_| sample_polarity(&mut g.rng, &spec.polarity_weights))
        .collect();
    let source = DomainLexicon {
        domain: Domain::Source,
        aspects: src_aspects,
        preferred: src_pref,
        filler: &spec.filler,
        own_filler: &spec.source_filler,
    };
    let target = DomainLexicon {
        domain: Domain::Target,
        aspects: tgt_aspects,
        preferred: tgt_pref,
        filler: &spec.filler,
        own_filler: &spec.target_filler,
    };
    let c = spec.counts;
    Ok(SyntheticCorpora {
        source_train: g.split(&source, "train", c.source_train, true)?,
        source_test: g.split(&source, "test", c.source_test, true)?,
        target_unlabeled: g.split(&target, "unlabeled", c.target_unlabeled, false)?,
        target_gold: g.split(&target, "gold", c.target_gold, true)?,
    })
}

/// Distinct aspect strings (tokens joined by a space).
pub fn aspect_types(instances: &[Instance]) -> BTreeSet<String> {
    instances.iter().map(|i| i.aspect_tokens().join(" ")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::decode_bio;

    fn small(seed: u64) -> SyntheticSpec {
        let mut s = SyntheticSpec::desk(seed);
        s.counts = SplitCounts {
            source_train: 300,
            source_test: 50,
            target_unlabeled: 300,
            target_gold: 50,
        };
        s
    }

    #[test]
    fn zero_overlap_means_disjoint_aspects() {
        let c = generate_synthetic(&small(3)).unwrap();
        let src = aspect_types(&c.source_train);
        let tgt = aspect_types(&c.target_unlabeled);
        assert!(src.is_disjoint(&tgt));
    }

    #[test]
    fn full_overlap_shares_aspects() {
        let mut s = small(3);
        s.overlap = 1.0;
        let c = generate_synthetic(&s).unwrap();
        let src = aspect_types(&c.source_train);
        let tgt = aspect_types(&c.target_unlabeled);
        assert!(tgt.is_subset(&src));
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(generate_synthetic(&small(9)).unwrap(), generate_synthetic(&small(9)).unwrap());
        assert_ne!(
            generate_synthetic(&small(9)).unwrap().source_train,
            generate_synthetic(&small(10)).unwrap().source_train
        );
    }

    #[test]
    fn opinion_within_two_tokens_and_polarity_matches() {
        let s = small(5);
        let c = generate_synthetic(&s).unwrap();
        for inst in &c.source_train {
            inst.validate().unwrap();
            let p = inst.polarity.unwrap();
            let span = inst.aspect_span;
            let lo = span.start.saturating_sub(2);
            let hi = (span.end + 2).min(inst.tokens.len());
            let near = (lo..hi).any(|t| {
                !span.contains(t) && s.opinions.iter().any(|o| o.word == inst.tokens[t] && o.polarity == p)
            });
            assert!(near, "{:?}", inst);
        }
    }

    #[test]
    fn target_views_are_split_correctly() {
        let c = generate_synthetic(&small(5)).unwrap();
        assert!(c.target_unlabeled.iter().all(|i| i.polarity.is_none() && i.domain == Domain::Target));
        assert!(c.target_gold.iter().all(|i| i.polarity.is_some()));
        assert_eq!(c.source_test.len(), 50);
        // two-aspect sentences tag both aspects
        assert!(c.source_train.iter().any(|i| decode_bio(&i.bio_tags).len() == 2));
    }

    #[test]
    fn empty_vocabulary_rejected() {
        let mut s = small(1);
        s.target_aspects.clear();
        assert!(generate_synthetic(&s).is_err());
    }

    #[test]
    fn polarity_histogram_tracks_weights() {
        let mut s = small(11);
        s.aspect_polarity_bias = 0.0;
        s.counts.source_train = 10_000;
        let c = generate_synthetic(&s).unwrap();
        let mut hist = [0usize; 3];
        for i in &c.source_train {
            hist[i.polarity.unwrap().index()] += 1;
        }
        for p in 0..3 {
            let frac = hist[p] as f64 / 10_000.0;
            assert!((frac - s.polarity_weights[p]).abs() < 0.02, "{p}: {frac}");
        }
    }
}

//! Evaluation metrics, feature extraction for the two feature kinds, and
//! the proxy A-distance probe.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ad_head::{decode_tags, predicted_tags, tag_logits};
use crate::allocation::{export_beta, BetaRecord};
use crate::asc_head::predict;
use crate::corpus::{make_batches, BioTag, Domain, Instance, Polarity, Span, Vocabulary};
use crate::error::{DifdError, Result};
use crate::model::{forward, forward_logits, mean_hd, ModelConfig};
use crate::ndgrad::{ParamStore, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Keyed by polarity name.
    pub per_class: std::collections::BTreeMap<String, ClassScore>,
    /// `confusion[gold][predicted]` in class-index order.
    pub confusion: [[usize; 3]; 3],
    pub count: usize,
}

/// Accuracy, per-class scores and macro-F1. A class with a zero
/// denominator gets F1 = 0.
pub fn metric_report(gold: &[Polarity], predicted: &[Polarity]) -> Result<MetricReport> {
    if gold.len() != predicted.len() {
        return Err(DifdError::Data(format!("{} gold labels but {} predictions", gold.len(), predicted.len())));
    }
    if gold.is_empty() {
        return Err(DifdError::Data("no instances to score".into()));
    }
    let mut confusion = [[0usize; 3]; 3];
    for (g, p) in gold.iter().zip(predicted) {
        confusion[g.index()][p.index()] += 1;
    }
    let correct: usize = (0..3).map(|k| confusion[k][k]).sum();
    let mut per_class = std::collections::BTreeMap::new();
    let mut f1_sum = 0.0;
    for p in Polarity::ALL {
        let k = p.index();
        let tp = confusion[k][k] as f64;
        let pred_k: usize = (0..3).map(|g| confusion[g][k]).sum();
        let gold_k: usize = confusion[k].iter().sum();
        let precision = if pred_k == 0 { 0.0 } else { tp / pred_k as f64 };
        let recall = if gold_k == 0 { 0.0 } else { tp / gold_k as f64 };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        f1_sum += f1;
        per_class.insert(p.as_str().to_string(), ClassScore { precision, recall, f1, support: gold_k });
    }
    Ok(MetricReport {
        accuracy: correct as f64 / gold.len() as f64,
        macro_f1: f1_sum / 3.0,
        per_class,
        confusion,
        count: gold.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionRow {
    pub instance: usize,
    pub sentence_id: String,
    pub gold: Option<Polarity>,
    pub predicted: Polarity,
    pub logits: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpanRow {
    pub sentence_id: String,
    pub predicted: Vec<Span>,
    pub gold: Vec<Span>,
}

/// Read-only view of a trained model for batched inference.
#[derive(Debug, Clone, Copy)]
pub struct Inference<'a> {
    pub store: &'a ParamStore,
    pub config: &'a ModelConfig,
    pub vocab: &'a Vocabulary,
    pub batch_size: usize,
}

impl<'a> Inference<'a> {
    pub fn new(store: &'a ParamStore, config: &'a ModelConfig, vocab: &'a Vocabulary) -> Self {
        Self { store, config, vocab, batch_size: 64 }
    }

    /// One prediction per instance, in input order.
    pub fn predictions(&self, instances: &[Instance]) -> Result<Vec<PredictionRow>> {
        let mut rows = Vec::with_capacity(instances.len());
        for batch in make_batches(instances, self.vocab, self.batch_size, 0, false)? {
            let mut tape = Tape::new();
            let (_, logits) = forward_logits(&mut tape, self.store, self.config, &batch)?;
            let lv = tape.value(logits);
            for (b, pred) in predict(lv).into_iter().enumerate() {
                let i = batch.source_index[b];
                let l = lv.row(b);
                rows.push(PredictionRow {
                    instance: i,
                    sentence_id: instances[i].sentence_id.clone(),
                    gold: instances[i].polarity,
                    predicted: pred,
                    logits: [l[0], l[1], l[2]],
                });
            }
        }
        Ok(rows)
    }

    /// Metric report over a gold-labelled corpus.
    pub fn evaluate(&self, instances: &[Instance]) -> Result<MetricReport> {
        let rows = self.predictions(instances)?;
        let mut gold = Vec::with_capacity(rows.len());
        for r in &rows {
            gold.push(r.gold.ok_or_else(|| {
                DifdError::Data(format!("instance {} ({}) has no gold polarity", r.instance, r.sentence_id))
            })?);
        }
        let pred: Vec<Polarity> = rows.iter().map(|r| r.predicted).collect();
        metric_report(&gold, &pred)
    }

    /// Tagger of `domain` applied to each distinct sentence.
    pub fn decoded_spans(&self, instances: &[Instance], domain: Domain) -> Result<Vec<SpanRow>> {
        let unique = unique_sentences(instances);
        let mut out = Vec::with_capacity(unique.len());
        for batch in make_batches(&unique, self.vocab, self.batch_size, 0, false)? {
            let mut tape = Tape::new();
            let pass = forward(&mut tape, self.store, self.config, &batch)?;
            let logits = tag_logits(&mut tape, self.store, pass.alloc.hd, domain)?;
            for (b, spans) in decode_tags(tape.value(logits), &batch).into_iter().enumerate() {
                let inst = &unique[batch.source_index[b]];
                out.push(SpanRow {
                    sentence_id: inst.sentence_id.clone(),
                    predicted: spans,
                    gold: crate::corpus::decode_bio(&inst.bio_tags),
                });
            }
        }
        Ok(out)
    }

    /// Fraction of real tokens whose argmax tag matches gold, over distinct
    /// sentences.
    pub fn tag_accuracy(&self, instances: &[Instance], domain: Domain) -> Result<f64> {
        let unique = unique_sentences(instances);
        let (mut hit, mut total) = (0usize, 0usize);
        for batch in make_batches(&unique, self.vocab, self.batch_size, 0, false)? {
            let mut tape = Tape::new();
            let pass = forward(&mut tape, self.store, self.config, &batch)?;
            let logits = tag_logits(&mut tape, self.store, pass.alloc.hd, domain)?;
            for (b, tags) in predicted_tags(tape.value(logits), &batch).into_iter().enumerate() {
                let gold: &[BioTag] = &unique[batch.source_index[b]].bio_tags;
                hit += tags.iter().zip(gold).filter(|(p, g)| p == g).count();
                total += tags.len();
            }
        }
        Ok(hit as f64 / total.max(1) as f64)
    }

    /// Allocation weights of every real token.
    pub fn beta(&self, instances: &[Instance]) -> Result<Vec<BetaRecord>> {
        if !self.config.allocation().has_gate() {
            return Err(DifdError::Config("no allocation weights in this variant".into()));
        }
        let mut out = Vec::new();
        for batch in make_batches(instances, self.vocab, self.batch_size, 0, false)? {
            let mut tape = Tape::new();
            let pass = forward(&mut tape, self.store, self.config, &batch)?;
            let beta = pass.alloc.beta.expect("gated variant produces beta");
            out.extend(export_beta(&batch, instances, tape.value(beta))?);
        }
        Ok(out)
    }

    pub fn features(&self, instances: &[Instance], kind: FeatureKind) -> Result<FeatureMatrix> {
        let owned;
        let items: &[Instance] = match kind {
            FeatureKind::Invariant => instances,
            FeatureKind::Specific => {
                owned = unique_sentences(instances);
                &owned
            }
        };
        let mut rows = vec![Vec::new(); items.len()];
        for batch in make_batches(items, self.vocab, self.batch_size, 0, false)? {
            let mut tape = Tape::new();
            let pass = forward(&mut tape, self.store, self.config, &batch)?;
            let v = match kind {
                FeatureKind::Invariant => pass.f,
                FeatureKind::Specific => mean_hd(&mut tape, &pass)?,
            };
            let t = tape.value(v);
            for b in 0..batch.size {
                rows[batch.source_index[b]] = t.row(b).to_vec();
            }
        }
        Ok(FeatureMatrix { domains: items.iter().map(|i| i.domain).collect(), rows, kind })
    }
}

/// First instance of each sentence id, in input order.
pub fn unique_sentences(instances: &[Instance]) -> Vec<Instance> {
    let mut seen = HashSet::new();
    instances.iter().filter(|i| seen.insert(i.sentence_id.as_str())).cloned().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// `f` per instance.
    Invariant,
    /// Mean `H^d` (or `H`) per sentence.
    Specific,
}

impl FromStr for FeatureKind {
    type Err = DifdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "invariant" => Ok(FeatureKind::Invariant),
            "specific" => Ok(FeatureKind::Specific),
            other => Err(DifdError::Config(format!("unknown feature kind '{other}' (expected invariant or specific)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: Vec<Vec<f64>>,
    pub domains: Vec<Domain>,
    pub kind: FeatureKind,
}

impl FeatureMatrix {
    pub fn append(&mut self, other: FeatureMatrix) {
        self.rows.extend(other.rows);
        self.domains.extend(other.domains);
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let d = self.rows.first().map_or(0, Vec::len);
        let header: Vec<String> = (0..d).map(|k| format!("x{k}")).collect();
        writeln!(w, "domain,{}", header.join(","))?;
        for (row, dom) in self.rows.iter().zip(&self.domains) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{}", dom.as_str(), cells.join(","))?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).map_err(|e| DifdError::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| DifdError::io(path, e))
    }
}

/// Fixed probe recipe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    pub epochs: usize,
    pub reg: f64,
    pub train_fraction: f64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self { epochs: 500, reg: 1e-3, train_fraction: 0.8 }
    }
}

/// Linear classifier on standardized features; the last weight is the
/// bias (its input is a constant 1).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
}

impl LinearProbe {
    fn augmented(&self, x: &[f64]) -> Vec<f64> {
        let mut z: Vec<f64> = x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect();
        z.push(1.0);
        z
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        self.augmented(x).iter().zip(&self.weights).map(|(a, b)| a * b).sum()
    }

    /// `true` means target.
    pub fn predict(&self, x: &[f64]) -> bool {
        self.score(x) > 0.0
    }

    /// Misclassification rate.
    pub fn error(&self, rows: &[&[f64]], labels: &[bool]) -> f64 {
        let wrong = rows.iter().zip(labels).filter(|(x, &y)| self.predict(x) != y).count();
        wrong as f64 / rows.len().max(1) as f64
    }

    /// Hinge loss + L2 by stochastic subgradient steps with rate
    /// `1 / (reg · t)`.
    pub fn fit<R: Rng>(rows: &[&[f64]], labels: &[bool], settings: &ProbeSettings, rng: &mut R) -> Self {
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for x in rows {
            for k in 0..d {
                mean[k] += x[k] / n;
            }
        }
        let mut scale = vec![0.0; d];
        for x in rows {
            for k in 0..d {
                scale[k] += (x[k] - mean[k]).powi(2) / n;
            }
        }
        for s in scale.iter_mut() {
            *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
        }
        let mut probe = LinearProbe { mean, scale, weights: vec![0.0; d + 1] };
        let data: Vec<Vec<f64>> = rows.iter().map(|x| probe.augmented(x)).collect();
        let mut order: Vec<usize> = (0..rows.len()).collect();
        let mut t = 0usize;
        for _ in 0..settings.epochs {
            order.shuffle(rng);
            for &i in &order {
                t += 1;
                let eta = 1.0 / (settings.reg * t as f64);
                let y = if labels[i] { 1.0 } else { -1.0 };
                let margin: f64 = y * data[i].iter().zip(&probe.weights).map(|(a, b)| a * b).sum::<f64>();
                let shrink = 1.0 - eta * settings.reg;
                for w in probe.weights.iter_mut() {
                    *w *= shrink;
                }
                if margin < 1.0 {
                    for (w, a) in probe.weights.iter_mut().zip(&data[i]) {
                        *w += eta * y * a;
                    }
                }
            }
        }
        probe
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub repeats: usize,
    pub epsilon: Vec<f64>,
    pub a_distance: Vec<f64>,
    pub mean_epsilon: f64,
    pub mean: f64,
    pub std: f64,
}

pub fn a_distance(epsilon: f64) -> f64 {
    2.0 * (1.0 - 2.0 * epsilon)
}

/// Stratified split of `0..labels.len()` into train/held-out indices.
fn stratified_split<R: Rng>(labels: &[bool], fraction: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(rng);
        let k = ((idx.len() as f64) * fraction).round() as usize;
        let k = k.clamp(1, idx.len().saturating_sub(1).max(1));
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Proxy A-distance `2(1 − 2ε)` with ε the held-out error of a linear
/// hinge-loss probe, per repeat. Labels: `true` = target.
pub fn proxy_a_distance(
    features: &[Vec<f64>],
    labels: &[bool],
    repeats: usize,
    seed: u64,
    settings: &ProbeSettings,
) -> Result<ProbeResult> {
    if features.len() != labels.len() {
        return Err(DifdError::Data(format!("{} feature rows but {} labels", features.len(), labels.len())));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives < 2 || labels.len() - positives < 2 {
        return Err(DifdError::Data("proxy A-distance needs at least two rows from each domain".into()));
    }
    if repeats == 0 {
        return Err(DifdError::Config("repeats must be at least 1".into()));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|r| r.len() != d) {
        return Err(DifdError::Data("feature rows must share a nonzero width".into()));
    }
    let mut epsilon = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
        let (train, test) = stratified_split(labels, settings.train_fraction, &mut rng);
        let xs: Vec<&[f64]> = train.iter().map(|&i| features[i].as_slice()).collect();
        let ys: Vec<bool> = train.iter().map(|&i| labels[i]).collect();
        let probe = LinearProbe::fit(&xs, &ys, settings, &mut rng);
        let hx: Vec<&[f64]> = test.iter().map(|&i| features[i].as_slice()).collect();
        let hy: Vec<bool> = test.iter().map(|&i| labels[i]).collect();
        epsilon.push(probe.error(&hx, &hy));
    }
    let a: Vec<f64> = epsilon.iter().map(|&e| a_distance(e)).collect();
    let n = repeats as f64;
    let mean = a.iter().sum::<f64>() / n;
    let std = (a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(ProbeResult { repeats, mean_epsilon: epsilon.iter().sum::<f64>() / n, epsilon, a_distance: a, mean, std })
}

/// Probe over a feature matrix, target rows labelled `true`.
pub fn probe_features(m: &FeatureMatrix, repeats: usize, seed: u64) -> Result<ProbeResult> {
    let labels: Vec<bool> = m.domains.iter().map(|&d| d == Domain::Target).collect();
    proxy_a_distance(&m.rows, &labels, repeats, seed, &ProbeSettings::default())
}

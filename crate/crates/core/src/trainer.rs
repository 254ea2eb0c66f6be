//! Objective composition, alternating updates, and the epoch loop with
//! early stopping.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ad_head::ad_loss;
use crate::allocation::AllocationMode;
use crate::analysis::Inference;
use crate::asc_head::{predict, sentiment_loss, AscOptions, AspectPooling};
use crate::corpus::{build_vocab_and_embeddings, make_batches, DEFAULT_EMBEDDING_SCALE, Batch, Domain, Instance, Vocabulary};
use crate::domain_align::{coral_loss, domain_loss_flipped, domain_loss_true, mmd_loss};
use crate::error::{DifdError, Result};
use crate::model::{forward, forward_logits, init_params, Alignment, ModelConfig, Variant};
use crate::ndgrad::{
    finite_diff_check_with, load_checkpoint, save_checkpoint, GradCheckOptions, GradCheckReport, OpKind, ParamStore, Partition, Sgd,
    Tape, Tensor, Var,
};

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub embedding_dim: usize,
    pub hidden: usize,
    pub variant: Variant,
    /// Stand-in for the gate in `difd-ca`.
    pub ca_ablation: AllocationMode,
    pub aspect_pooling: AspectPooling,
    pub length_normalize: bool,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub lambda_a: f64,
    pub lambda_d: f64,
    pub clip_norm: Option<f64>,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub embedding_file: Option<PathBuf>,
    /// Uniform init half-width for words not in `embedding_file`.
    pub embedding_init_scale: f64,
    pub paths: DataPaths,
}

/// Where a run's corpora came from; recorded, never read by the trainer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub source: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub target_eval: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Small dimensions for CPU-scale experiments.
    pub fn desk() -> Self {
        Self {
            embedding_dim: 16,
            hidden: 8,
            variant: Variant::Difd,
            ca_ablation: AllocationMode::Full,
            aspect_pooling: AspectPooling::Sum,
            length_normalize: false,
            lr: 0.01,
            momentum: 0.0,
            batch_size: 32,
            lambda_a: 1.0,
            lambda_d: 1.0,
            clip_norm: Some(5.0),
            patience: 10,
            max_epochs: 50,
            seed: 0,
            embedding_file: None,
            embedding_init_scale: DEFAULT_EMBEDDING_SCALE,
            paths: DataPaths::default(),
        }
    }

    /// Full-size dimensions.
    pub fn full() -> Self {
        Self { embedding_dim: 100, hidden: 64, ..Self::desk() }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            embedding_dim: self.embedding_dim,
            hidden: self.hidden,
            variant: self.variant,
            ca_ablation: self.ca_ablation,
            asc: AscOptions { aspect_pooling: self.aspect_pooling, length_normalize: self.length_normalize },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(DifdError::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("lr", self.lr)?;
        positive("embedding_init_scale", self.embedding_init_scale)?;
        if let Some(c) = self.clip_norm {
            positive("clip_norm", c)?;
        }
        for (name, v) in [("lambda_a", self.lambda_a), ("lambda_d", self.lambda_d)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(DifdError::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(DifdError::Config("batch_size, patience and max_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Independent 64-bit seed for (`stream`, `index`) under a run seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_INIT: u64 = 1;
const STREAM_SOURCE: u64 = 2;
const STREAM_TARGET: u64 = 3;
const STREAM_HOLDOUT: u64 = 4;

/// Graph handles of one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossGraph {
    pub total: Var,
    pub sentiment: Var,
    pub alignment: Option<Var>,
    pub ad_source: Option<Var>,
    pub ad_target: Option<Var>,
    pub sentiment_logits: Var,
}

/// Scalar values of the objective's parts; absent terms are 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub sentiment: f64,
    pub alignment: f64,
    pub ad_source: f64,
    pub ad_target: f64,
    pub total: f64,
}

impl LossTerms {
    /// `sentiment + λa·alignment + λd·(ad_source + ad_target)`.
    pub fn recombine(&self, lambda_a: f64, lambda_d: f64) -> f64 {
        self.sentiment + lambda_a * self.alignment + lambda_d * (self.ad_source + self.ad_target)
    }

    fn accumulate(&mut self, other: &LossTerms) {
        self.sentiment += other.sentiment;
        self.alignment += other.alignment;
        self.ad_source += other.ad_source;
        self.ad_target += other.ad_target;
        self.total += other.total;
    }

    fn scaled(mut self, s: f64) -> Self {
        self.sentiment *= s;
        self.alignment *= s;
        self.ad_source *= s;
        self.ad_target *= s;
        self.total *= s;
        self
    }

    pub fn is_finite(&self) -> bool {
        [self.sentiment, self.alignment, self.ad_source, self.ad_target, self.total].iter().all(|v| v.is_finite())
    }
}

impl LossGraph {
    pub fn terms(&self, tape: &Tape) -> LossTerms {
        let v = |x: Option<Var>| x.map_or(0.0, |x| tape.value(x).item());
        LossTerms {
            sentiment: tape.value(self.sentiment).item(),
            alignment: v(self.alignment),
            ad_source: v(self.ad_source),
            ad_target: v(self.ad_target),
            total: tape.value(self.total).item(),
        }
    }
}

/// The full objective for one source batch and (if the variant uses target
/// data) one target batch, with terms gated by the variant.
pub fn total_loss(
    tape: &mut Tape,
    store: &ParamStore,
    run: &RunConfig,
    source: &Batch,
    target: Option<&Batch>,
) -> Result<LossGraph> {
    let cfg = run.model_config();
    let variant = run.variant;
    let (ps, logits) = forward_logits(tape, store, &cfg, source)?;
    let sentiment = sentiment_loss(tape, logits, &source.polarity)?;
    let mut total = sentiment;

    let ad_source = if variant.has_source_tagger() {
        Some(ad_loss(tape, store, ps.alloc.hd, source, Domain::Source)?)
    } else {
        None
    };

    let pt = if variant.uses_target() {
        let t = target.ok_or_else(|| DifdError::Config(format!("variant {variant} needs a target batch")))?;
        Some(forward(tape, store, &cfg, t)?)
    } else {
        None
    };

    let ad_target = match (&pt, variant.has_target_tagger(), target) {
        (Some(p), true, Some(t)) => Some(ad_loss(tape, store, p.alloc.hd, t, Domain::Target)?),
        _ => None,
    };

    let alignment = match (variant.alignment(), &pt) {
        (Alignment::None, _) | (_, None) => None,
        (Alignment::Adversarial, Some(p)) => Some(domain_loss_flipped(tape, store, ps.f, p.f)?),
        (Alignment::Mmd, Some(p)) => Some(mmd_loss(tape, ps.f, p.f)?),
        (Alignment::Coral, Some(p)) => Some(coral_loss(tape, ps.f, p.f)?),
    };

    if let Some(a) = alignment {
        let w = tape.scalar_mul(a, run.lambda_a);
        total = tape.add(total, w)?;
    }
    let ad = match (ad_source, ad_target) {
        (Some(s), Some(t)) => Some(tape.add(s, t)?),
        (s, t) => s.or(t),
    };
    if let Some(d) = ad {
        let w = tape.scalar_mul(d, run.lambda_d);
        total = tape.add(total, w)?;
    }
    Ok(LossGraph { total, sentiment, alignment, ad_source, ad_target, sentiment_logits: logits })
}

/// Result of one alternating update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub terms: LossTerms,
    /// Domain-classifier loss `λa·L_a^{θ_D}` from sub-step (b), when run.
    pub discriminator_loss: Option<f64>,
    pub correct: usize,
    pub count: usize,
}

/// One epoch's record in `history.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossTerms,
    pub discriminator_loss: Option<f64>,
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
    pub validation_macro_f1: f64,
    /// Only when a labelled target monitor set is supplied; never used for
    /// model selection.
    pub target_accuracy: Option<f64>,
    pub improved: bool,
}

/// Patience counter over validation accuracy. Ties do not count as
/// improvement, so the earliest best epoch is kept.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub since_improvement: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, best_epoch: 0, since_improvement: 0 }
    }

    /// Records an epoch; returns whether it improved on the best so far.
    pub fn observe(&mut self, epoch: usize, accuracy: f64) -> bool {
        if self.best.map_or(true, |b| accuracy > b) {
            self.best = Some(accuracy);
            self.best_epoch = epoch;
            self.since_improvement = 0;
            true
        } else {
            self.since_improvement += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_improvement >= self.patience
    }
}

/// Corpora for [`Trainer::fit`].
#[derive(Debug, Clone, Copy)]
pub struct FitData<'a> {
    pub source_train: &'a [Instance],
    pub source_valid: &'a [Instance],
    /// Unlabelled target instances (also contributes to the vocabulary).
    pub target: Option<&'a [Instance]>,
    /// Labelled target instances reported per epoch, not used for selection.
    pub target_eval: Option<&'a [Instance]>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_accuracy: f64,
    pub best_store: ParamStore,
}

/// Contents of a checkpoint's metadata block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub epoch: usize,
    pub validation_accuracy: f64,
}

/// A loaded checkpoint, ready for inference.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub store: ParamStore,
    pub meta: CheckpointMeta,
    pub model: ModelConfig,
}

impl LoadedModel {
    pub fn load(path: &Path) -> Result<Self> {
        let (store, meta) = load_checkpoint(path)?;
        let meta: CheckpointMeta = serde_json::from_str(&meta)
            .map_err(|e| DifdError::Checkpoint(format!("{}: bad metadata: {e}", path.display())))?;
        let model = meta.config.model_config();
        check_store(&store, &model, meta.vocab.len())?;
        Ok(Self { store, meta, model })
    }

    pub fn inference(&self) -> Inference<'_> {
        Inference::new(&self.store, &self.model, &self.meta.vocab)
    }
}

/// Errors unless `store` has exactly the parameters and shapes `model`
/// would register for a vocabulary of `vocab_len`.
pub fn check_store(store: &ParamStore, model: &ModelConfig, vocab_len: usize) -> Result<()> {
    let reference = init_params(model, Tensor::zeros(&[vocab_len, model.embedding_dim]), &mut ChaCha8Rng::seed_from_u64(0))?;
    for p in reference.iter() {
        let got = store
            .get(&p.name)
            .map_err(|_| DifdError::Checkpoint(format!("checkpoint lacks parameter {}", p.name)))?;
        if got.value.shape() != p.value.shape() {
            return Err(DifdError::Checkpoint(format!(
                "parameter {} has shape {:?}, config implies {:?}",
                p.name,
                got.value.shape(),
                p.value.shape()
            )));
        }
    }
    if let Some(extra) = store.names().find(|n| !reference.contains(n)) {
        return Err(DifdError::Checkpoint(format!("checkpoint has unexpected parameter {extra}")));
    }
    Ok(())
}

/// Model, optimizers and counters of one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub run: RunConfig,
    pub model: ModelConfig,
    pub store: ParamStore,
    pub vocab: Vocabulary,
    opt_f: Sgd,
    opt_d: Sgd,
    /// Forward passes over target batches so far.
    pub target_forward_passes: usize,
}

impl Trainer {
    pub fn new(run: RunConfig, vocab: Vocabulary, embedding: Tensor) -> Result<Self> {
        run.validate()?;
        let model = run.model_config();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(run.seed, STREAM_INIT, 1));
        let store = init_params(&model, embedding, &mut rng)?;
        let opt_f = Sgd::new(run.lr, run.momentum, run.clip_norm)?;
        let opt_d = Sgd::new(run.lr, run.momentum, run.clip_norm)?;
        Ok(Self { run, model, store, vocab, opt_f, opt_d, target_forward_passes: 0 })
    }

    /// Vocabulary over source training and target instances, embedding
    /// table from `run.embedding_file` or random init.
    pub fn from_corpora(run: RunConfig, source_train: &[Instance], target: Option<&[Instance]>) -> Result<Self> {
        run.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(run.seed, STREAM_INIT, 0));
        let all = source_train.iter().chain(target.unwrap_or(&[]).iter());
        let (vocab, table, _) = build_vocab_and_embeddings(all, run.embedding_file.as_deref(), run.embedding_dim, run.embedding_init_scale, &mut rng)?;
        Self::new(run, vocab, table)
    }

    pub fn inference(&self) -> Inference<'_> {
        Inference::new(&self.store, &self.model, &self.vocab)
    }

    /// Sub-step (a) updates everything but the domain classifier on the
    /// full objective; sub-step (b) re-runs the features and updates only
    /// the domain classifier on `λa·L_a^{θ_D}`.
    pub fn train_step(&mut self, source: &Batch, target: Option<&Batch>) -> Result<StepReport> {
        let (terms, correct) = self.feature_substep(source, target)?;
        let discriminator_loss = self.discriminator_substep(source, target)?;
        Ok(StepReport { terms, discriminator_loss, correct, count: source.size })
    }

    /// Sub-step (a). Returns the loss terms and the number of correct
    /// source predictions.
    pub fn feature_substep(&mut self, source: &Batch, target: Option<&Batch>) -> Result<(LossTerms, usize)> {
        let target = if self.run.variant.uses_target() { target } else { None };
        let mut tape = Tape::new();
        let graph = total_loss(&mut tape, &self.store, &self.run, source, target)?;
        if target.is_some() {
            self.target_forward_passes += 1;
        }
        let terms = graph.terms(&tape);
        if !terms.is_finite() {
            return Err(DifdError::NonFinite(format!(
                "loss components: sentiment={} alignment={} ad_source={} ad_target={} total={}",
                terms.sentiment, terms.alignment, terms.ad_source, terms.ad_target, terms.total
            )));
        }
        let preds = predict(tape.value(graph.sentiment_logits));
        let correct = preds.iter().zip(&source.polarity).filter(|(p, g)| Some(**p) == **g).count();
        tape.backward(graph.total, &mut self.store, &[Partition::DomainClassifier])?;
        self.opt_f.step(&mut self.store, &[Partition::FeatureExtractor])?;
        Ok((terms, correct))
    }

    /// Sub-step (b); `None` for variants without a domain classifier.
    pub fn discriminator_substep(&mut self, source: &Batch, target: Option<&Batch>) -> Result<Option<f64>> {
        if !self.run.variant.has_domain_classifier() {
            return Ok(None);
        }
        let t = target.ok_or_else(|| DifdError::Config("adversarial variant needs a target batch".into()))?;
        let mut tape = Tape::new();
        let fs = forward(&mut tape, &self.store, &self.model, source)?.f;
        let ft = forward(&mut tape, &self.store, &self.model, t)?.f;
        self.target_forward_passes += 1;
        let ld = domain_loss_true(&mut tape, &self.store, fs, ft)?;
        let loss = tape.scalar_mul(ld, self.run.lambda_a);
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(DifdError::NonFinite(format!("domain classifier loss = {v}")));
        }
        tape.backward(loss, &mut self.store, &[Partition::FeatureExtractor])?;
        self.opt_d.step(&mut self.store, &[Partition::DomainClassifier])?;
        Ok(Some(v))
    }

    /// One pass over the shuffled source batches, each paired with the next
    /// target batch (cycled).
    pub fn train_epoch(&mut self, epoch: usize, source: &[Instance], target: Option<&[Instance]>) -> Result<(LossTerms, Option<f64>, f64)> {
        let bs = self.run.batch_size;
        let seed = self.run.seed;
        let sb = make_batches(source, &self.vocab, bs, derive_seed(seed, STREAM_SOURCE, epoch as u64), true)?;
        let tb = match target {
            Some(t) if self.run.variant.uses_target() => {
                make_batches(t, &self.vocab, bs, derive_seed(seed, STREAM_TARGET, epoch as u64), true)?
            }
            _ => Vec::new(),
        };
        if self.run.variant.uses_target() && tb.is_empty() {
            return Err(DifdError::Data(format!("variant {} needs target instances", self.run.variant)));
        }
        let mut sum = LossTerms::default();
        let mut disc = 0.0;
        let (mut correct, mut count) = (0, 0);
        for (i, b) in sb.iter().enumerate() {
            let t = if tb.is_empty() { None } else { Some(&tb[i % tb.len()]) };
            let r = self.train_step(b, t)?;
            sum.accumulate(&r.terms);
            disc += r.discriminator_loss.unwrap_or(0.0);
            correct += r.correct;
            count += r.count;
        }
        let n = sb.len() as f64;
        let disc = self.run.variant.has_domain_classifier().then_some(disc / n);
        Ok((sum.scaled(1.0 / n), disc, correct as f64 / count as f64))
    }

    /// Trains until patience runs out or `max_epochs`, keeping the store of
    /// the best validation epoch. `self.store` ends as the final state.
    pub fn fit(&mut self, data: &FitData<'_>) -> Result<FitOutcome> {
        if data.source_train.is_empty() || data.source_valid.is_empty() {
            return Err(DifdError::Data("source training and validation sets must be non-empty".into()));
        }
        if self.run.variant.uses_target() && data.target.map_or(true, |t| t.is_empty()) {
            return Err(DifdError::Data(format!("variant {} needs target instances", self.run.variant)));
        }
        let mut stop = EarlyStopping::new(self.run.patience);
        let mut history = Vec::new();
        let mut best_store = self.store.clone();
        for epoch in 1..=self.run.max_epochs {
            let (train, disc, train_acc) = self.train_epoch(epoch, data.source_train, data.target)?;
            let report = self.inference().evaluate(data.source_valid)?;
            let target_accuracy = match data.target_eval {
                Some(t) => Some(self.inference().evaluate(t)?.accuracy),
                None => None,
            };
            let improved = stop.observe(epoch, report.accuracy);
            if improved {
                best_store = self.store.clone();
            }
            history.push(EpochRecord {
                epoch,
                train,
                discriminator_loss: disc,
                train_accuracy: train_acc,
                validation_accuracy: report.accuracy,
                validation_macro_f1: report.macro_f1,
                target_accuracy,
                improved,
            });
            if stop.should_stop() {
                break;
            }
        }
        Ok(FitOutcome {
            history,
            best_epoch: stop.best_epoch,
            best_accuracy: stop.best.unwrap_or(0.0),
            best_store,
        })
    }

    pub fn checkpoint_meta(&self, epoch: usize, validation_accuracy: f64) -> CheckpointMeta {
        CheckpointMeta { config: self.run.clone(), vocab: self.vocab.clone(), epoch, validation_accuracy }
    }

    pub fn save(&self, path: &Path, store: &ParamStore, epoch: usize, validation_accuracy: f64) -> Result<()> {
        let meta = serde_json::to_string(&self.checkpoint_meta(epoch, validation_accuracy))?;
        save_checkpoint(path, store, &meta)
    }

    /// Runs [`Trainer::fit`] and writes `config.json`, `history.jsonl`,
    /// `best.ckpt` and `final.ckpt` into `out`.
    pub fn fit_to_dir(&mut self, data: &FitData<'_>, out: &Path) -> Result<FitOutcome> {
        fs::create_dir_all(out).map_err(|e| DifdError::io(out, e))?;
        write_atomic(&out.join("config.json"), serde_json::to_string_pretty(&self.run)?.as_bytes())?;
        let outcome = self.fit(data)?;
        write_atomic(&out.join("history.jsonl"), history_jsonl(&outcome.history)?.as_bytes())?;
        let best_acc = outcome.best_accuracy;
        self.save(&out.join("best.ckpt"), &outcome.best_store, outcome.best_epoch, best_acc)?;
        let last = outcome.history.last().expect("at least one epoch");
        self.save(&out.join("final.ckpt"), &self.store, last.epoch, last.validation_accuracy)?;
        Ok(outcome)
    }
}

/// Central-difference check of the whole objective on a tiny fixed model
/// (`d_e = 4`, `d_h = 3`, two source and two target sentences of at most
/// five tokens). `fault` corrupts one op's backward rule.
pub fn full_model_gradcheck(variant: Variant, fault: Option<OpKind>, tolerance: f64) -> Result<GradCheckReport> {
    let (source, target) = gradcheck_fixture();
    let run = RunConfig { embedding_dim: 4, hidden: 3, variant, embedding_init_scale: 0.5, seed: 7, ..RunConfig::desk() };
    let mut tr = Trainer::from_corpora(run, &source, Some(&target))?;
    let sb = make_batches(&source, &tr.vocab, 2, 0, false)?.remove(0);
    let tb = make_batches(&target, &tr.vocab, 2, 0, false)?.remove(0);
    let run = tr.run.clone();
    let opts = GradCheckOptions { fault, ..GradCheckOptions::default() };
    finite_diff_check_with(|tape, store| Ok(total_loss(tape, store, &run, &sb, Some(&tb))?.total), &mut tr.store, tolerance, &opts)
}

fn gradcheck_fixture() -> (Vec<Instance>, Vec<Instance>) {
    use crate::corpus::{encode_bio, Polarity, Span};
    let mk = |id: &str, words: &[&str], span: (usize, usize), pol: Option<Polarity>, domain: Domain| {
        let span = Span::new(span.0, span.1);
        Instance {
            sentence_id: id.into(),
            tokens: words.iter().map(|w| w.to_string()).collect(),
            aspect_span: span,
            bio_tags: encode_bio(&[span], words.len()).expect("valid fixture span"),
            polarity: pol,
            domain,
        }
    };
    let source = vec![
        mk("s1", &["the", "wine", "list", "was", "great"], (1, 3), Some(Polarity::Positive), Domain::Source),
        mk("s2", &["rude", "waiter"], (1, 2), Some(Polarity::Negative), Domain::Source),
    ];
    let target = vec![
        mk("t1", &["screen", "is", "dim"], (0, 1), None, Domain::Target),
        mk("t2", &["the", "battery", "life", "is", "fine"], (1, 3), None, Domain::Target),
    ];
    (source, target)
}

/// Splits off roughly `fraction` of the distinct sentences (all their
/// instances together) as a validation set. Returns (train, valid).
pub fn holdout_split(instances: &[Instance], fraction: f64, seed: u64) -> Result<(Vec<Instance>, Vec<Instance>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DifdError::Config(format!("holdout fraction must lie in (0, 1), got {fraction}")));
    }
    let mut ids: Vec<&str> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for i in instances {
        if seen.insert(i.sentence_id.as_str()) {
            ids.push(&i.sentence_id);
        }
    }
    if ids.len() < 2 {
        return Err(DifdError::Data("need at least two sentences to hold out a validation set".into()));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_HOLDOUT, 0)));
    let k = ((ids.len() as f64 * fraction).round() as usize).clamp(1, ids.len() - 1);
    let valid: std::collections::HashSet<&str> = ids[..k].iter().copied().collect();
    let (v, t): (Vec<Instance>, Vec<Instance>) = instances.iter().cloned().partition(|i| valid.contains(i.sentence_id.as_str()));
    Ok((t, v))
}

pub fn history_jsonl(history: &[EpochRecord]) -> Result<String> {
    let mut s = String::new();
    for r in history {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

/// Write to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| DifdError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| DifdError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{encode_bio, Polarity, Span};

    fn inst(id: &str, words: &[&str], span: (usize, usize), pol: Option<Polarity>, domain: Domain) -> Instance {
        let span = Span::new(span.0, span.1);
        Instance {
            sentence_id: id.into(),
            tokens: words.iter().map(|w| w.to_string()).collect(),
            aspect_span: span,
            bio_tags: encode_bio(&[span], words.len()).unwrap(),
            polarity: pol,
            domain,
        }
    }

    fn toy() -> (Vec<Instance>, Vec<Instance>) {
        use Polarity::*;
        let s = vec![
            inst("s1", &["the", "food", "was", "great"], (1, 2), Some(Positive), Domain::Source),
            inst("s2", &["awful", "service", "today"], (1, 2), Some(Negative), Domain::Source),
            inst("s3", &["the", "menu", "is", "long"], (1, 2), Some(Neutral), Domain::Source),
            inst("s4", &["great", "wine"], (1, 2), Some(Positive), Domain::Source),
        ];
        let t = vec![
            inst("t1", &["the", "screen", "is", "great"], (1, 2), None, Domain::Target),
            inst("t2", &["bad", "keyboard"], (1, 2), None, Domain::Target),
            inst("t3", &["battery", "life", "ok"], (0, 2), None, Domain::Target),
        ];
        (s, t)
    }

    fn tiny(variant: Variant) -> RunConfig {
        RunConfig { embedding_dim: 4, hidden: 3, variant, batch_size: 2, max_epochs: 3, ..RunConfig::desk() }
    }

    fn batches(tr: &Trainer, s: &[Instance], t: &[Instance]) -> (Batch, Batch) {
        let sb = make_batches(s, &tr.vocab, 4, 0, false).unwrap().remove(0);
        let tb = make_batches(t, &tr.vocab, 4, 0, false).unwrap().remove(0);
        (sb, tb)
    }

    #[test]
    fn zero_lambdas_leave_sentiment_only() {
        let (s, t) = toy();
        for v in Variant::ALL {
            let run = RunConfig { lambda_a: 0.0, lambda_d: 0.0, ..tiny(v) };
            let tr = Trainer::from_corpora(run.clone(), &s, Some(&t)).unwrap();
            let (sb, tb) = batches(&tr, &s, &t);
            let mut tape = Tape::new();
            let g = total_loss(&mut tape, &tr.store, &run, &sb, Some(&tb)).unwrap();
            assert_eq!(tape.value(g.total).item(), tape.value(g.sentiment).item(), "{v}");
        }
    }

    #[test]
    fn terms_recombine_and_are_gated() {
        let (s, t) = toy();
        for v in Variant::ALL {
            let run = RunConfig { lambda_a: 0.7, lambda_d: 1.3, ..tiny(v) };
            let tr = Trainer::from_corpora(run.clone(), &s, Some(&t)).unwrap();
            let (sb, tb) = batches(&tr, &s, &t);
            let mut tape = Tape::new();
            let g = total_loss(&mut tape, &tr.store, &run, &sb, Some(&tb)).unwrap();
            let terms = g.terms(&tape);
            assert!((terms.recombine(0.7, 1.3) - terms.total).abs() < 1e-12, "{v}");
            assert_eq!(g.alignment.is_some(), v.alignment() != Alignment::None, "{v}");
            assert_eq!(g.ad_source.is_some(), v.has_source_tagger(), "{v}");
            assert_eq!(g.ad_target.is_some(), v.has_target_tagger(), "{v}");
        }
    }

    #[test]
    fn asc_at_objective() {
        let (s, t) = toy();
        let run = tiny(Variant::AscAt);
        let tr = Trainer::from_corpora(run.clone(), &s, Some(&t)).unwrap();
        let (sb, tb) = batches(&tr, &s, &t);
        let mut tape = Tape::new();
        let g = total_loss(&mut tape, &tr.store, &run, &sb, Some(&tb)).unwrap();
        let fs = forward(&mut tape, &tr.store, &tr.model, &sb).unwrap().f;
        let ft = forward(&mut tape, &tr.store, &tr.model, &tb).unwrap().f;
        let la = domain_loss_flipped(&mut tape, &tr.store, fs, ft).unwrap();
        let expect = tape.value(g.sentiment).item() + tape.value(la).item();
        assert!((tape.value(g.total).item() - expect).abs() < 1e-12);
    }

    fn partition_bits(store: &ParamStore, p: Partition) -> Vec<(String, Vec<u64>)> {
        store.snapshot(p)
    }

    #[test]
    fn substeps_touch_one_partition_each() {
        let (s, t) = toy();
        let mut tr = Trainer::from_corpora(tiny(Variant::Difd), &s, Some(&t)).unwrap();
        let (sb, tb) = batches(&tr, &s, &t);
        for _ in 0..5 {
            let d0 = partition_bits(&tr.store, Partition::DomainClassifier);
            let f0 = partition_bits(&tr.store, Partition::FeatureExtractor);
            tr.feature_substep(&sb, Some(&tb)).unwrap();
            assert_eq!(partition_bits(&tr.store, Partition::DomainClassifier), d0);
            assert_ne!(partition_bits(&tr.store, Partition::FeatureExtractor), f0);
            let f1 = partition_bits(&tr.store, Partition::FeatureExtractor);
            tr.discriminator_substep(&sb, Some(&tb)).unwrap();
            assert_ne!(partition_bits(&tr.store, Partition::DomainClassifier), d0);
            assert_eq!(partition_bits(&tr.store, Partition::FeatureExtractor), f1);
        }
    }

    #[test]
    fn source_only_variants_never_see_target() {
        let (s, t) = toy();
        for v in [Variant::DifdS, Variant::SourceOnly] {
            let mut tr = Trainer::from_corpora(tiny(v), &s, Some(&t)).unwrap();
            let data = FitData { source_train: &s, source_valid: &s, target: Some(&t), target_eval: None };
            tr.fit(&data).unwrap();
            assert_eq!(tr.target_forward_passes, 0, "{v}");
            assert!(!tr.store.contains("ad.target.w"));
            assert!(!tr.store.contains("dc.out.w"));
        }
        let mut tr = Trainer::from_corpora(tiny(Variant::Difd), &s, Some(&t)).unwrap();
        let (sb, tb) = batches(&tr, &s, &t);
        tr.train_step(&sb, Some(&tb)).unwrap();
        assert_eq!(tr.target_forward_passes, 2);
    }

    #[test]
    fn patience_stops_after_ten_flat_epochs() {
        let mut es = EarlyStopping::new(10);
        let mut stopped = None;
        for epoch in 1..=50 {
            es.observe(epoch, 1.0 - epoch as f64 * 0.01);
            if es.should_stop() {
                stopped = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped, Some(11));
        assert_eq!(es.best_epoch, 1);
    }

    #[test]
    fn ties_keep_earlier_epoch() {
        let mut es = EarlyStopping::new(3);
        assert!(es.observe(1, 0.5));
        assert!(es.observe(2, 0.7));
        assert!(!es.observe(3, 0.7));
        assert_eq!(es.best_epoch, 2);
    }

    #[test]
    fn fit_is_deterministic_and_checkpoints_roundtrip() {
        let (s, t) = toy();
        let dir = tempfile::tempdir().unwrap();
        let data = FitData { source_train: &s, source_valid: &s, target: Some(&t), target_eval: None };
        let mut outs = Vec::new();
        for k in 0..2 {
            let out = dir.path().join(format!("run{k}"));
            let mut tr = Trainer::from_corpora(tiny(Variant::Difd), &s, Some(&t)).unwrap();
            let o = tr.fit_to_dir(&data, &out).unwrap();
            assert_eq!(o.history.len(), 3);
            outs.push(out);
        }
        for f in ["history.jsonl", "best.ckpt", "final.ckpt", "config.json"] {
            assert_eq!(fs::read(outs[0].join(f)).unwrap(), fs::read(outs[1].join(f)).unwrap(), "{f}");
        }
        let m = LoadedModel::load(&outs[0].join("best.ckpt")).unwrap();
        assert_eq!(m.meta.config, tiny(Variant::Difd));
        let first = history_jsonl(&[]).unwrap();
        assert!(first.is_empty());
        let acc = m.inference().evaluate(&s).unwrap().accuracy;
        assert_eq!(acc, m.meta.validation_accuracy);
    }

    #[test]
    fn store_check_rejects_mismatch() {
        let (s, t) = toy();
        let tr = Trainer::from_corpora(tiny(Variant::Difd), &s, Some(&t)).unwrap();
        assert!(check_store(&tr.store, &tr.model, tr.vocab.len()).is_ok());
        let mut other = tr.model;
        other.hidden = 4;
        assert!(check_store(&tr.store, &other, tr.vocab.len()).is_err());
        other = tr.model;
        other.variant = Variant::DifdS;
        assert!(check_store(&tr.store, &other, tr.vocab.len()).is_err());
    }

    #[test]
    fn config_json_roundtrip_and_validation() {
        let run = RunConfig::full();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&run).unwrap()).unwrap();
        assert_eq!(back, run);
        let partial: RunConfig = serde_json::from_str(r#"{"variant":"asc-at","seed":3}"#).unwrap();
        assert_eq!(partial.hidden, 8);
        assert!(serde_json::from_str::<RunConfig>(r#"{"hiden":3}"#).is_err());
        assert!(RunConfig { lr: 0.0, ..RunConfig::desk() }.validate().is_err());
        assert!(RunConfig { embedding_dim: 5, ..RunConfig::desk() }.validate().is_err());
        assert_ne!(derive_seed(1, 2, 3), derive_seed(1, 3, 2));
    }

    #[test]
    fn full_model_gradients_match_differences() {
        for v in [Variant::Difd, Variant::DifdAtCoral, Variant::SourceOnly] {
            let r = full_model_gradcheck(v, None, 1e-4).unwrap();
            assert!(r.passed, "{v}: {:?}", r.failures().collect::<Vec<_>>());
        }
        let bad = full_model_gradcheck(Variant::Difd, Some(OpKind::Mul), 1e-4).unwrap();
        assert!(!bad.passed);
    }

    #[test]
    fn holdout_keeps_sentences_whole() {
        let (s, _) = toy();
        let mut data = s.clone();
        data.push(Instance { aspect_span: Span::new(0, 1), ..s[0].clone() });
        let (t, v) = holdout_split(&data, 0.25, 3).unwrap();
        assert_eq!(t.len() + v.len(), data.len());
        assert!(!v.is_empty() && !t.is_empty());
        for i in &v {
            assert!(t.iter().all(|j| j.sentence_id != i.sentence_id));
        }
        assert_eq!(holdout_split(&data, 0.25, 3).unwrap(), (t, v));
    }

    #[test]
    fn missing_target_is_an_error_for_adversarial_variants() {
        let (s, t) = toy();
        let mut tr = Trainer::from_corpora(tiny(Variant::Difd), &s, Some(&t)).unwrap();
        let data = FitData { source_train: &s, source_valid: &s, target: None, target_eval: None };
        assert!(matches!(tr.fit(&data), Err(DifdError::Data(_))));
    }
}

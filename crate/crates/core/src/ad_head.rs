//! Aspect detection: per-token B/I/O tagging over the aspect-dominant
//! context with batch-balanced label weights. Source and target each own a
//! tagger.

use rand::Rng;
use serde::Serialize;

use crate::corpus::{decode_bio, repair_bio, Batch, BioTag, Domain, Span};
use crate::error::{DifdError, Result};
use crate::ndgrad::{ParamStore, Partition, Tape, Tensor, Var};
use crate::nn::{affine, uniform, weighted_nll, SeqLayout};

pub fn tagger_names(domain: Domain) -> (&'static str, &'static str) {
    match domain {
        Domain::Source => ("ad.source.w", "ad.source.b"),
        Domain::Target => ("ad.target.w", "ad.target.b"),
    }
}

pub fn register_tagger<R: Rng>(store: &mut ParamStore, domain: Domain, hidden: usize, rng: &mut R) -> Result<()> {
    let d = 2 * hidden;
    let (w, b) = tagger_names(domain);
    store.register(w, uniform(rng, &[d, 3], 1.0 / (d as f64).sqrt()), Partition::FeatureExtractor)?;
    store.register(b, Tensor::zeros(&[3]), Partition::FeatureExtractor)?;
    Ok(())
}

/// Per-label weights indexed by [`BioTag::index`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LabelWeights {
    pub weights: [f64; 3],
    pub counts: [usize; 3],
}

impl LabelWeights {
    pub fn of(&self, tag: BioTag) -> f64 {
        self.weights[tag.index()]
    }
}

/// `λ_l = T / (K · c_l)` over unmasked tokens, where `K` counts the labels
/// that occur; absent labels get 0.
pub fn compute_label_weights(labels: &[BioTag], mask: &[u8]) -> Result<LabelWeights> {
    if labels.len() != mask.len() {
        return Err(DifdError::shape("compute_label_weights", format!("{} mask cells", labels.len()), mask.len().to_string()));
    }
    let mut counts = [0usize; 3];
    for (l, &m) in labels.iter().zip(mask) {
        if m != 0 {
            counts[l.index()] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(DifdError::Data("label weights need at least one unmasked token".into()));
    }
    let present = counts.iter().filter(|&&c| c > 0).count() as f64;
    let mut weights = [0.0; 3];
    for k in 0..3 {
        if counts[k] > 0 {
            weights[k] = total as f64 / (present * counts[k] as f64);
        }
    }
    Ok(LabelWeights { weights, counts })
}

/// Tag logits `[rows, 3]` from `H^d` with the tagger of `domain`.
pub fn tag_logits(tape: &mut Tape, store: &ParamStore, hd: Var, domain: Domain) -> Result<Var> {
    let (w, b) = tagger_names(domain);
    affine(tape, store, hd, w, b)
}

/// Mask that keeps each sentence once: rows repeating an earlier row's
/// sentence id are blanked.
fn dedup_mask(batch: &Batch) -> Vec<u8> {
    let first = batch.first_occurrence();
    let mut mask = batch.mask.clone();
    for (b, keep) in first.iter().enumerate() {
        if !keep {
            mask[b * batch.max_len..(b + 1) * batch.max_len].fill(0);
        }
    }
    mask
}

/// Weight matrix for [`weighted_nll`]: mean over unique sentences of
/// `(1/n) Σ_t λ_gold`, placed at the gold column.
fn ad_weight_matrix(batch: &Batch, layout: &SeqLayout) -> Result<(Tensor, LabelWeights)> {
    let mask = dedup_mask(batch);
    let lw = compute_label_weights(&batch.bio_labels, &mask)?;
    let sentences = batch.first_occurrence().iter().filter(|&&k| k).count() as f64;
    let mut w = vec![0.0; layout.rows() * 3];
    for b in 0..batch.size {
        let n = batch.lengths[b] as f64;
        for t in 0..batch.max_len {
            let cell = batch.cell(b, t);
            if mask[cell] == 0 {
                continue;
            }
            let tag = batch.bio_labels[cell];
            w[layout.row(t, b) * 3 + tag.index()] = lw.of(tag) / (n * sentences);
        }
    }
    Ok((Tensor::matrix(layout.rows(), 3, w)?, lw))
}

/// Class-weighted tagging loss of the batch on its domain's tagger.
pub fn ad_loss(tape: &mut Tape, store: &ParamStore, hd: Var, batch: &Batch, domain: Domain) -> Result<Var> {
    let layout = SeqLayout::of(batch);
    let logits = tag_logits(tape, store, hd, domain)?;
    let (w, _) = ad_weight_matrix(batch, &layout)?;
    weighted_nll(tape, logits, w)
}

/// Per-token argmax (ties to the lowest index), leading-I repair, then span
/// extraction; one span list per batch row.
pub fn decode_tags(logits: &Tensor, batch: &Batch) -> Vec<Vec<Span>> {
    predicted_tags(logits, batch)
        .into_iter()
        .map(|mut tags| {
            repair_bio(&mut tags);
            decode_bio(&tags)
        })
        .collect()
}

/// Raw per-token argmax tags for each row, real tokens only.
pub fn predicted_tags(logits: &Tensor, batch: &Batch) -> Vec<Vec<BioTag>> {
    let layout = SeqLayout::of(batch);
    (0..batch.size)
        .map(|b| {
            (0..batch.lengths[b])
                .map(|t| {
                    let row = logits.row(layout.row(t, b));
                    let mut best = 0;
                    for k in 1..3 {
                        if row[k] > row[best] {
                            best = k;
                        }
                    }
                    BioTag::from_index(best).expect("three tags")
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpanScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Exact-match span precision/recall/F1 summed over sentences.
pub fn span_f1(predicted: &[Vec<Span>], gold: &[Vec<Span>]) -> SpanScore {
    let (mut tp, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (p, g) in predicted.iter().zip(gold) {
        np += p.len();
        ng += g.len();
        tp += p.iter().filter(|s| g.contains(s)).count();
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, np);
    let recall = ratio(tp, ng);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    SpanScore { precision, recall, f1 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{encode_bio, make_batches, Instance, Polarity, Vocabulary};
    use crate::ndgrad::{finite_diff_check, Sgd};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use BioTag::{B, I, O};

    fn inst(id: &str, spans: &[(usize, usize)], len: usize, domain: Domain) -> Instance {
        let spans: Vec<Span> = spans.iter().map(|&(s, e)| Span::new(s, e)).collect();
        Instance {
            sentence_id: id.into(),
            tokens: (0..len).map(|i| format!("{id}{i}")).collect(),
            aspect_span: spans[0],
            bio_tags: encode_bio(&spans, len).unwrap(),
            polarity: Some(Polarity::Positive),
            domain,
        }
    }

    fn batch_of(data: &[Instance]) -> Batch {
        let vocab = Vocabulary::from_instances(data);
        make_batches(data, &vocab, data.len(), 0, false).unwrap().remove(0)
    }

    #[test]
    fn weights_hand_case() {
        let mut labels = vec![O; 8];
        labels.push(B);
        labels.push(I);
        let lw = compute_label_weights(&labels, &[1; 10]).unwrap();
        assert!((lw.of(O) - 10.0 / 24.0).abs() < 1e-15);
        assert!((lw.of(B) - 10.0 / 3.0).abs() < 1e-15);
        assert!((lw.of(I) - 10.0 / 3.0).abs() < 1e-15);
        let recon: f64 = (0..3).map(|k| lw.weights[k] * lw.counts[k] as f64).sum();
        assert!((recon - 10.0).abs() < 1e-12);
    }

    #[test]
    fn weights_balanced_absent_and_masked() {
        let labels: Vec<BioTag> = [B, I, O].iter().flat_map(|&t| std::iter::repeat(t).take(5)).collect();
        let lw = compute_label_weights(&labels, &[1; 15]).unwrap();
        assert_eq!(lw.weights, [1.0, 1.0, 1.0]);

        let lw = compute_label_weights(&[B, O, O, O], &[1; 4]).unwrap();
        assert_eq!(lw.of(I), 0.0);
        assert_eq!(lw.of(B), 4.0 / 2.0);
        assert_eq!(lw.of(O), 4.0 / 6.0);

        assert!(compute_label_weights(&[B, O], &[0, 0]).is_err());
    }

    fn tagger_store(hidden: usize, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        register_tagger(&mut s, Domain::Source, hidden, &mut rng).unwrap();
        register_tagger(&mut s, Domain::Target, hidden, &mut rng).unwrap();
        s
    }

    #[test]
    fn uniform_logits_balanced_weights_give_ln3() {
        let mut s = tagger_store(2, 0);
        for p in s.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        // B I O: one of each label
        let balanced = batch_of(&[inst("a", &[(0, 2)], 3, Domain::Source)]);
        let lay = SeqLayout::of(&balanced);
        let mut tape = Tape::new();
        let hd = tape.constant(Tensor::zeros(&[lay.rows(), 4]));
        let loss = ad_loss(&mut tape, &s, hd, &balanced, Domain::Source).unwrap();
        assert!((tape.value(loss).item() - 3f64.ln()).abs() < 1e-15);

        // unbalanced: mean over sentences of (1/n) Σ λ ln 3
        let batch = batch_of(&[inst("a", &[(0, 2)], 3, Domain::Source), inst("b", &[(1, 3)], 4, Domain::Source)]);
        let lay = SeqLayout::of(&batch);
        let mut tape = Tape::new();
        let hd = tape.constant(Tensor::zeros(&[lay.rows(), 4]));
        let loss = ad_loss(&mut tape, &s, hd, &batch, Domain::Source).unwrap();
        let lw = compute_label_weights(&batch.bio_labels, &batch.mask).unwrap();
        let per = |tags: &[BioTag]| tags.iter().map(|&t| lw.of(t)).sum::<f64>() / tags.len() as f64;
        let expect = 3f64.ln() * (per(&[B, I, O]) + per(&[O, B, I, O])) / 2.0;
        assert!((tape.value(loss).item() - expect).abs() < 1e-14);
    }

    #[test]
    fn perfect_logits_near_zero() {
        let batch = batch_of(&[inst("a", &[(1, 2)], 3, Domain::Target)]);
        let lay = SeqLayout::of(&batch);
        let mut s = ParamStore::new();
        let (w, b) = tagger_names(Domain::Target);
        s.register(w, Tensor::identity(3), Partition::FeatureExtractor).unwrap();
        s.register(b, Tensor::zeros(&[3]), Partition::FeatureExtractor).unwrap();
        let mut rows = vec![vec![0.0; 3]; lay.rows()];
        for t in 0..3 {
            rows[lay.row(t, 0)][batch.bio_labels[t].index()] = 50.0;
        }
        let mut tape = Tape::new();
        let hd = tape.constant(Tensor::from_rows(&rows).unwrap());
        let loss = ad_loss(&mut tape, &s, hd, &batch, Domain::Target).unwrap();
        assert!(tape.value(loss).item() < 1e-6);
    }

    /// Direct double loop over unique sentences and their tokens.
    fn brute_force(batch: &Batch, logits: &Tensor) -> f64 {
        let lay = SeqLayout::of(batch);
        let mut seen = Vec::new();
        let mut labels = Vec::new();
        for b in 0..batch.size {
            if seen.contains(&batch.sentence_ids[b]) {
                continue;
            }
            seen.push(batch.sentence_ids[b].clone());
            for t in 0..batch.lengths[b] {
                labels.push(batch.bio_labels[batch.cell(b, t)]);
            }
        }
        let mut counts = [0.0f64; 3];
        for l in &labels {
            counts[l.index()] += 1.0;
        }
        let total: f64 = counts.iter().sum();
        let k = counts.iter().filter(|&&c| c > 0.0).count() as f64;
        let mut seen = Vec::new();
        let mut acc = 0.0;
        for b in 0..batch.size {
            if seen.contains(&batch.sentence_ids[b]) {
                continue;
            }
            seen.push(batch.sentence_ids[b].clone());
            let mut sent = 0.0;
            for t in 0..batch.lengths[b] {
                let row = logits.row(lay.row(t, b));
                let g = batch.bio_labels[batch.cell(b, t)].index();
                let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
                sent += total / (k * counts[g]) * (lse - row[g]);
            }
            acc += sent / batch.lengths[b] as f64;
        }
        acc / seen.len() as f64
    }

    #[test]
    fn matches_direct_loop_with_duplicate_sentence() {
        let data = [
            inst("s", &[(0, 1), (2, 4)], 5, Domain::Source),
            inst("t", &[(1, 2)], 3, Domain::Source),
            inst("s", &[(2, 4), (0, 1)], 5, Domain::Source),
        ];
        let batch = batch_of(&data);
        let lay = SeqLayout::of(&batch);
        let s = tagger_store(2, 3);
        let hdv = uniform(&mut ChaCha8Rng::seed_from_u64(8), &[lay.rows(), 4], 1.0);
        let mut tape = Tape::new();
        let hd = tape.constant(hdv);
        let loss = ad_loss(&mut tape, &s, hd, &batch, Domain::Source).unwrap();
        let logits = tag_logits(&mut tape, &s, hd, Domain::Source).unwrap();
        let expect = brute_force(&batch, tape.value(logits));
        assert!((tape.value(loss).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn equal_weights_reduce_to_plain_mean() {
        // one sentence with B I O: all weights 1, loss = token-mean CE
        let batch = batch_of(&[inst("a", &[(0, 2)], 3, Domain::Source)]);
        let lay = SeqLayout::of(&batch);
        let s = tagger_store(2, 4);
        let hdv = uniform(&mut ChaCha8Rng::seed_from_u64(2), &[lay.rows(), 4], 1.0);
        let mut tape = Tape::new();
        let hd = tape.constant(hdv);
        let loss = ad_loss(&mut tape, &s, hd, &batch, Domain::Source).unwrap();
        let logits = tag_logits(&mut tape, &s, hd, Domain::Source).unwrap();
        let lv = tape.value(logits);
        let plain: f64 = (0..3)
            .map(|t| {
                let row = lv.row(t);
                let g = batch.bio_labels[t].index();
                row.iter().map(|v| v.exp()).sum::<f64>().ln() - row[g]
            })
            .sum::<f64>()
            / 3.0;
        assert!((tape.value(loss).item() - plain).abs() < 1e-12);
    }

    #[test]
    fn decode_and_repair() {
        let batch = batch_of(&[inst("a", &[(1, 3)], 4, Domain::Source), inst("b", &[(0, 1)], 2, Domain::Source)]);
        let lay = SeqLayout::of(&batch);
        let mut logits = Tensor::zeros(&[lay.rows(), 3]);
        let mut set = |t: usize, b: usize, tag: BioTag| {
            let r = lay.row(t, b);
            logits.data_mut()[r * 3 + tag.index()] = 1.0;
        };
        for (t, tag) in [O, B, I, O].into_iter().enumerate() {
            set(t, 0, tag);
        }
        set(0, 1, I);
        set(1, 1, O);
        let spans = decode_tags(&logits, &batch);
        assert_eq!(spans, vec![vec![Span::new(1, 3)], vec![Span::new(0, 1)]]);
    }

    #[test]
    fn span_scores() {
        let g = vec![vec![Span::new(0, 1), Span::new(2, 3)]];
        assert_eq!(span_f1(&g, &g).f1, 1.0);
        let p = vec![vec![Span::new(0, 1)]];
        let s = span_f1(&p, &g);
        assert_eq!((s.precision, s.recall), (1.0, 0.5));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(span_f1(&[vec![]], &[vec![]]).f1, 0.0);
    }

    #[test]
    fn gradient_check_through_tagger() {
        let data = [inst("s", &[(0, 1), (2, 4)], 5, Domain::Source), inst("t", &[(1, 2)], 3, Domain::Source)];
        let batch = batch_of(&data);
        let lay = SeqLayout::of(&batch);
        let mut s = tagger_store(2, 5);
        s.register("hd", uniform(&mut ChaCha8Rng::seed_from_u64(1), &[lay.rows(), 4], 1.0), Partition::FeatureExtractor)
            .unwrap();
        let report = finite_diff_check(
            |tape, store| {
                let hd = tape.param(store, "hd")?;
                ad_loss(tape, store, hd, &batch, Domain::Source)
            },
            &mut s,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{:#?}", report.failures().collect::<Vec<_>>());
        // the target tagger gets nothing from a source loss
        let mut tape = Tape::new();
        let hd = tape.param(&s, "hd").unwrap();
        let loss = ad_loss(&mut tape, &s, hd, &batch, Domain::Source).unwrap();
        let grads = tape.backward(loss, &mut s, &[]).unwrap();
        assert!(grads["ad.target.w"].data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_batch_overfit_decreases_loss() {
        let mut monotone = 0;
        let seeds = 20;
        for seed in 0..seeds {
            let data = [inst("s", &[(0, 1), (2, 4)], 5, Domain::Source), inst("t", &[(1, 2)], 3, Domain::Source)];
            let batch = batch_of(&data);
            let lay = SeqLayout::of(&batch);
            let mut s = tagger_store(2, seed);
            let hdv = uniform(&mut ChaCha8Rng::seed_from_u64(seed + 100), &[lay.rows(), 4], 1.0);
            let mut opt = Sgd::new(0.01, 0.0, Some(5.0)).unwrap();
            let mut last = f64::INFINITY;
            let mut ok = true;
            for _ in 0..50 {
                let mut tape = Tape::new();
                let hd = tape.constant(hdv.clone());
                let loss = ad_loss(&mut tape, &s, hd, &batch, Domain::Source).unwrap();
                let v = tape.value(loss).item();
                ok &= v < last;
                last = v;
                tape.backward(loss, &mut s, &[]).unwrap();
                opt.step(&mut s, &[Partition::FeatureExtractor]).unwrap();
            }
            monotone += ok as usize;
        }
        assert!(monotone as f64 >= 0.95 * seeds as f64, "{monotone}/{seeds}");
    }
}

//! Aspect-level sentiment head: aspect position representation,
//! aspect-opinion attention producing the domain-invariant feature `f`, and
//! the shared 3-way sentiment classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, Polarity};
use crate::error::{DifdError, Result};
use crate::ndgrad::{ParamStore, Partition, Tape, Tensor, Var};
use crate::nn::{affine, uniform, weighted_nll, SeqLayout};

pub const W_P: &str = "asc.w_p";
pub const B_P: &str = "asc.b_p";
/// Starting value of `b_p`. At 0, `f` is cubic in `H^c` near the origin and
/// small-scale training stalls.
pub const B_P_INIT: f64 = 1.0;
pub const CLS_W: &str = "asc.classifier.w";
pub const CLS_B: &str = "asc.classifier.b";

/// Pooling of the aspect's `H^c` rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AspectPooling {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AscOptions {
    pub aspect_pooling: AspectPooling,
    /// Divide `f` by the sentence length.
    pub length_normalize: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// `[rows, 1]`, zero at padding.
    pub gamma: Var,
    /// `[size, 2h]`.
    pub f: Var,
}

pub fn register_asc<R: Rng>(store: &mut ParamStore, hidden: usize, rng: &mut R) -> Result<()> {
    let d = 2 * hidden;
    let bound = 1.0 / (d as f64).sqrt();
    store.register(W_P, uniform(rng, &[d, d], bound), Partition::FeatureExtractor)?;
    store.register(B_P, Tensor::filled(&[1], B_P_INIT), Partition::FeatureExtractor)?;
    store.register(CLS_W, uniform(rng, &[d, 3], bound), Partition::FeatureExtractor)?;
    store.register(CLS_B, Tensor::zeros(&[3]), Partition::FeatureExtractor)?;
    Ok(())
}

/// `h^a = Σ_{i : x^a_i = 1} h^c_i` (or the mean under [`AspectPooling::Mean`]).
pub fn aspect_position_rep(tape: &mut Tape, hc: Var, batch: &Batch, pooling: AspectPooling) -> Result<Var> {
    let layout = SeqLayout::of(batch);
    let mut counts = vec![0usize; batch.size];
    for (b, c) in counts.iter_mut().enumerate() {
        *c = (0..batch.max_len).filter(|&t| batch.aspect_indicator[batch.cell(b, t)] == 1).count();
        if *c == 0 {
            return Err(DifdError::InvalidInstance(format!("row {b}: empty aspect indicator")));
        }
    }
    let pool = layout.pooling_matrix(|b, t| {
        let on = f64::from(batch.aspect_indicator[batch.cell(b, t)]);
        match pooling {
            AspectPooling::Sum => on,
            AspectPooling::Mean => on / counts[b] as f64,
        }
    });
    let pool = tape.constant(pool);
    tape.matmul(pool, hc)
}

/// `γ_i = tanh(h^c_i W_p h^a + b_p)` (zero at padding), `f = Σ_i γ_i h^c_i`.
pub fn aspect_opinion_attention(
    tape: &mut Tape,
    store: &ParamStore,
    hc: Var,
    layout: &SeqLayout,
    ha: Var,
    length_normalize: bool,
) -> Result<AttentionOutput> {
    let w_p = tape.param(store, W_P)?;
    let b_p = tape.param(store, B_P)?;
    let spread: Vec<usize> = (0..layout.len).flat_map(|_| 0..layout.size).collect();
    let ha_rows = tape.row_gather(ha, &spread)?;
    let proj = tape.matmul(hc, w_p)?;
    let prod = tape.mul(proj, ha_rows)?;
    let score = tape.sum_last_dim(prod);
    let score = tape.add(score, b_p)?;
    let gamma = tape.tanh(score);
    let mask = tape.constant(layout.mask_column());
    let gamma = tape.mul(gamma, mask)?;
    let weighted = tape.mul(hc, gamma)?;
    let lengths = layout.lengths();
    let pool = layout.pooling_matrix(|b, t| {
        let m = layout.mask[layout.row(t, b)];
        if length_normalize {
            m / lengths[b].max(1) as f64
        } else {
            m
        }
    });
    let pool = tape.constant(pool);
    let f = tape.matmul(pool, weighted)?;
    Ok(AttentionOutput { gamma, f })
}

/// Classifier logits `[size, 3]` for features `f`.
pub fn sentiment_logits(tape: &mut Tape, store: &ParamStore, f: Var) -> Result<Var> {
    affine(tape, store, f, CLS_W, CLS_B)
}

/// Mean cross-entropy at the gold polarities.
pub fn sentiment_loss(tape: &mut Tape, logits: Var, labels: &[Option<Polarity>]) -> Result<Var> {
    let n = tape.value(logits).rows();
    if labels.len() != n {
        return Err(DifdError::shape("sentiment_loss", format!("{n} labels"), format!("{} labels", labels.len())));
    }
    let mut w = vec![0.0; n * 3];
    for (r, label) in labels.iter().enumerate() {
        let p = label.ok_or_else(|| DifdError::Data(format!("sentiment loss on unlabeled row {r}")))?;
        w[r * 3 + p.index()] = 1.0 / n as f64;
    }
    weighted_nll(tape, logits, Tensor::matrix(n, 3, w)?)
}

/// Argmax per row; ties go to the lowest class index
/// (positive, then negative, then neutral).
pub fn predict(logits: &Tensor) -> Vec<Polarity> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            Polarity::from_index(best).expect("three classes")
        })
        .collect()
}

//! Context allocation: a per-token two-way softmax gate that splits each
//! contextual state into a sentiment-dominant part `H^c` and an
//! aspect-dominant part `H^d`.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, Instance};
use crate::encoder::ContextStates;
use crate::error::{DifdError, Result};
use crate::ndgrad::{ParamStore, Partition, Tape, Tensor, Var};
use crate::nn::{uniform, SeqLayout};

pub const W_A: &str = "allocation.w_a";
pub const W_B: &str = "allocation.w_b";

pub const BETA_CSV_HEADER: &str = "sentence_id,position,token,beta_c,beta_d";

/// How `H` reaches the two heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationMode {
    /// Learned gate.
    #[default]
    Split,
    /// No split: both heads read the full `H`.
    Full,
    /// Fixed `β = (0.5, 0.5)`.
    Half,
}

impl AllocationMode {
    pub fn has_gate(self) -> bool {
        self == AllocationMode::Split
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AllocationOutput {
    /// `[rows, 2]`, columns `(β^c, β^d)`; zero at padding. Only present for
    /// the learned gate.
    pub beta: Option<Var>,
    pub hc: Var,
    pub hd: Var,
}

/// `W_a` is `[2h, 2h]`; `W_b` is stored input-major as `[2h, 2]`.
pub fn register_allocation<R: Rng>(store: &mut ParamStore, hidden: usize, rng: &mut R) -> Result<()> {
    let d = 2 * hidden;
    let bound = 1.0 / (d as f64).sqrt();
    store.register(W_A, uniform(rng, &[d, d], bound), Partition::FeatureExtractor)?;
    store.register(W_B, uniform(rng, &[d, 2], bound), Partition::FeatureExtractor)?;
    Ok(())
}

/// `β_i = softmax(W_b tanh(W_a h_i))`, `H^c = β^c ⊙ H`, `H^d = β^d ⊙ H`.
pub fn allocate(tape: &mut Tape, store: &ParamStore, states: &ContextStates, mode: AllocationMode) -> Result<AllocationOutput> {
    let h = states.h;
    if !tape.value(h).is_finite() {
        return Err(DifdError::NonFinite("allocation input".into()));
    }
    match mode {
        AllocationMode::Full => Ok(AllocationOutput { beta: None, hc: h, hd: h }),
        AllocationMode::Half => {
            let half = tape.scalar_mul(h, 0.5);
            Ok(AllocationOutput { beta: None, hc: half, hd: half })
        }
        AllocationMode::Split => {
            let rows = states.layout.rows();
            let w_a = tape.param(store, W_A)?;
            let w_b = tape.param(store, W_B)?;
            let pre = tape.matmul(h, w_a)?;
            let act = tape.tanh(pre);
            let logits = tape.matmul(act, w_b)?;
            let beta = tape.masked_softmax(logits, &vec![1.0; rows * 2])?;
            let mask = tape.constant(states.layout.mask_column());
            let beta = tape.mul(beta, mask)?;
            let bc = tape.slice_last_dim(beta, 0, 1)?;
            let bd = tape.slice_last_dim(beta, 1, 1)?;
            let hc = tape.mul(h, bc)?;
            let hd = tape.mul(h, bd)?;
            Ok(AllocationOutput { beta: Some(beta), hc, hd })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BetaRecord {
    pub sentence_id: String,
    pub position: usize,
    pub token: String,
    pub beta_c: f64,
    pub beta_d: f64,
}

/// One record per real token. `instances[batch.source_index[b]]` must be
/// the instance of batch row `b`.
pub fn export_beta(batch: &Batch, instances: &[Instance], beta: &Tensor) -> Result<Vec<BetaRecord>> {
    let layout = SeqLayout::of(batch);
    if beta.shape() != [layout.rows(), 2] {
        return Err(DifdError::shape("export_beta", format!("[{}, 2]", layout.rows()), beta.shape_str()));
    }
    let mut out = Vec::with_capacity(batch.num_tokens());
    for b in 0..batch.size {
        let inst = instances
            .get(batch.source_index[b])
            .ok_or_else(|| DifdError::Data(format!("batch row {b} has no source instance")))?;
        for t in 0..batch.lengths[b] {
            let r = layout.row(t, b);
            out.push(BetaRecord {
                sentence_id: inst.sentence_id.clone(),
                position: t,
                token: inst.tokens[t].clone(),
                beta_c: beta.at(r, 0),
                beta_d: beta.at(r, 1),
            });
        }
    }
    Ok(out)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_beta_csv<W: Write>(mut w: W, records: &[BetaRecord]) -> std::io::Result<()> {
    writeln!(w, "{BETA_CSV_HEADER}")?;
    for r in records {
        writeln!(w, "{},{},{},{},{}", csv_field(&r.sentence_id), r.position, csv_field(&r.token), r.beta_c, r.beta_d)?;
    }
    Ok(())
}

pub fn save_beta_csv(path: &Path, records: &[BetaRecord]) -> Result<()> {
    let mut buf = Vec::new();
    write_beta_csv(&mut buf, records).map_err(|e| DifdError::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| DifdError::io(path, e))
}

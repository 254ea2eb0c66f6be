//! Shared sentence encoder: embedding lookup plus sinusoidal position
//! encoding, followed by a single-layer bidirectional LSTM.
//!
//! Every domain and every task reads the same encoder parameters.

use rand::Rng;

use crate::corpus::{Batch, PAD_ID};
use crate::error::{DifdError, Result};
use crate::ndgrad::{ParamStore, Partition, Tape, Tensor, Var};
use crate::nn::{uniform, SeqLayout};

pub const EMBEDDING: &str = "encoder.embedding";

/// Gate blocks inside the fused `4 * hidden` projection.
const GATE_I: usize = 0;
const GATE_F: usize = 1;
const GATE_G: usize = 2;
const GATE_O: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    fn prefix(self) -> &'static str {
        match self {
            Direction::Forward => "encoder.lstm_fwd",
            Direction::Backward => "encoder.lstm_bwd",
        }
    }

    pub fn w_input(self) -> String {
        format!("{}.w_x", self.prefix())
    }

    pub fn w_hidden(self) -> String {
        format!("{}.w_h", self.prefix())
    }

    pub fn bias(self) -> String {
        format!("{}.b", self.prefix())
    }
}

/// Contextual states `H`, time-major `[len * size, 2 * hidden]`; rows at
/// padded positions are exactly zero.
#[derive(Debug, Clone)]
pub struct ContextStates {
    pub h: Var,
    pub layout: SeqLayout,
    pub hidden: usize,
}

/// `PE(pos, 2i) = sin(pos / 10000^(2i/d))`, `PE(pos, 2i+1) = cos(...)`, with
/// 0-based positions.
pub fn position_encoding(n: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(DifdError::Config(format!("position encoding needs an even dimension, got {dim}")));
    }
    if n == 0 {
        return Err(DifdError::Config("position encoding needs at least one position".into()));
    }
    let mut data = vec![0.0; n * dim];
    for pos in 0..n {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / dim as f64);
            data[pos * dim + 2 * i] = angle.sin();
            data[pos * dim + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::matrix(n, dim, data)
}

/// Registers the embedding table (PAD row pinned at zero) and both LSTM
/// directions. Gate order is i, f, g, o; forget bias starts at 1.
pub fn register_encoder<R: Rng>(store: &mut ParamStore, embedding: Tensor, hidden: usize, rng: &mut R) -> Result<()> {
    if embedding.shape().len() != 2 {
        return Err(DifdError::shape("register_encoder", "[vocab, dim] table", embedding.shape_str()));
    }
    let dim = embedding.cols();
    let mut embedding = embedding;
    embedding.data_mut()[PAD_ID * dim..(PAD_ID + 1) * dim].fill(0.0);
    store.register(EMBEDDING, embedding, Partition::FeatureExtractor)?;
    store.freeze_rows(EMBEDDING, &[PAD_ID])?;
    let bound = 1.0 / (hidden as f64).sqrt();
    for dir in [Direction::Forward, Direction::Backward] {
        store.register(dir.w_input(), uniform(rng, &[dim, 4 * hidden], bound), Partition::FeatureExtractor)?;
        store.register(dir.w_hidden(), uniform(rng, &[hidden, 4 * hidden], bound), Partition::FeatureExtractor)?;
        let mut b = vec![0.0; 4 * hidden];
        b[GATE_F * hidden..(GATE_F + 1) * hidden].fill(1.0);
        store.register(dir.bias(), Tensor::vector(b), Partition::FeatureExtractor)?;
    }
    Ok(())
}

/// `E = lookup(ids) + PE`, with the PE zeroed on padding. Returns
/// `[len * size, dim]` in time-major order.
pub fn embed(tape: &mut Tape, store: &ParamStore, batch: &Batch) -> Result<(Var, SeqLayout)> {
    let table = store.value(EMBEDDING)?;
    let vocab = table.rows();
    let dim = table.cols();
    let layout = SeqLayout::of(batch);
    let mut ids = Vec::with_capacity(layout.rows());
    for t in 0..layout.len {
        for b in 0..layout.size {
            let id = batch.token_ids[batch.cell(b, t)];
            if id >= vocab {
                return Err(DifdError::Data(format!("token id {id} out of range for vocabulary of {vocab}")));
            }
            ids.push(id);
        }
    }
    let pe = position_encoding(layout.len, dim)?;
    let mut pe_rows = vec![0.0; layout.rows() * dim];
    for t in 0..layout.len {
        for b in 0..layout.size {
            let r = layout.row(t, b);
            if layout.mask[r] != 0.0 {
                pe_rows[r * dim..(r + 1) * dim].copy_from_slice(pe.row(t));
            }
        }
    }
    let emb = tape.param(store, EMBEDDING)?;
    let looked_up = tape.row_gather(emb, &ids)?;
    let pe = tape.constant(Tensor::matrix(layout.rows(), dim, pe_rows)?);
    let e = tape.add(looked_up, pe)?;
    Ok((e, layout))
}

fn lstm_direction(tape: &mut Tape, store: &ParamStore, e: Var, layout: &SeqLayout, dir: Direction) -> Result<Vec<Var>> {
    let w_x = tape.param(store, &dir.w_input())?;
    let w_h = tape.param(store, &dir.w_hidden())?;
    let bias = tape.param(store, &dir.bias())?;
    let hidden = tape.value(w_h).rows();
    let projected = tape.matmul(e, w_x)?;

    let mut outputs: Vec<Option<Var>> = vec![None; layout.len];
    let mut state: Option<(Var, Var)> = None;
    let steps: Vec<usize> = match dir {
        Direction::Forward => (0..layout.len).collect(),
        Direction::Backward => (0..layout.len).rev().collect(),
    };
    for t in steps {
        let x_t = tape.slice_rows(projected, t * layout.size, layout.size)?;
        let mut gates = tape.add(x_t, bias)?;
        if let Some((h_prev, _)) = state {
            let rec = tape.matmul(h_prev, w_h)?;
            gates = tape.add(gates, rec)?;
        }
        let block = |tape: &mut Tape, k: usize| tape.slice_last_dim(gates, k * hidden, hidden);
        let i_pre = block(tape, GATE_I)?;
        let f_pre = block(tape, GATE_F)?;
        let g_pre = block(tape, GATE_G)?;
        let o_pre = block(tape, GATE_O)?;
        let i = tape.sigmoid(i_pre);
        let f = tape.sigmoid(f_pre);
        let g = tape.tanh(g_pre);
        let o = tape.sigmoid(o_pre);
        let mut c = tape.mul(i, g)?;
        if let Some((_, c_prev)) = state {
            let keep = tape.mul(f, c_prev)?;
            c = tape.add(c, keep)?;
        }
        // padded steps carry a zero state, so the backward pass starts fresh
        // at each sequence's last real token
        let m = tape.constant(layout.step_mask(t));
        let c = tape.mul(c, m)?;
        let c_act = tape.tanh(c);
        let h = tape.mul(o, c_act)?;
        let h = tape.mul(h, m)?;
        outputs[t] = Some(h);
        state = Some((h, c));
    }
    Ok(outputs.into_iter().map(|h| h.expect("every step visited")).collect())
}

/// Runs both LSTM directions over `e` and concatenates their states.
pub fn bilstm(tape: &mut Tape, store: &ParamStore, e: Var, layout: SeqLayout) -> Result<ContextStates> {
    if !tape.value(e).is_finite() {
        return Err(DifdError::NonFinite("encoder input".into()));
    }
    let fwd = lstm_direction(tape, store, e, &layout, Direction::Forward)?;
    let bwd = lstm_direction(tape, store, e, &layout, Direction::Backward)?;
    let hidden = tape.value(fwd[0]).cols();
    let hf = tape.concat_rows(&fwd)?;
    let hb = tape.concat_rows(&bwd)?;
    let h = tape.concat_last_dim(&[hf, hb])?;
    Ok(ContextStates { h, layout, hidden })
}

pub fn encode(tape: &mut Tape, store: &ParamStore, batch: &Batch) -> Result<ContextStates> {
    let (e, layout) = embed(tape, store, batch)?;
    bilstm(tape, store, e, layout)
}

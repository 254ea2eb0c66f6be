//! Domain classifier over `f` with true-label and flipped-label losses,
//! plus the MMD and CORAL alignment terms used by the ablations.

use rand::Rng;

use crate::error::{DifdError, Result};
use crate::ndgrad::{ParamStore, Partition, Tape, Tensor, Var};
use crate::nn::{affine, uniform, weighted_nll};

pub const HIDDEN_W: &str = "dc.hidden.w";
pub const HIDDEN_B: &str = "dc.hidden.b";
pub const OUT_W: &str = "dc.out.w";
pub const OUT_B: &str = "dc.out.b";

/// Source rows are labelled 0, target rows 1.
pub const SOURCE_LABEL: usize = 0;
pub const TARGET_LABEL: usize = 1;

pub fn register_domain_classifier<R: Rng>(store: &mut ParamStore, hidden: usize, rng: &mut R) -> Result<()> {
    let d = 2 * hidden;
    let bound = 1.0 / (d as f64).sqrt();
    store.register(HIDDEN_W, uniform(rng, &[d, d], bound), Partition::DomainClassifier)?;
    store.register(HIDDEN_B, Tensor::zeros(&[d]), Partition::DomainClassifier)?;
    store.register(OUT_W, uniform(rng, &[d, 2], bound), Partition::DomainClassifier)?;
    store.register(OUT_B, Tensor::zeros(&[2]), Partition::DomainClassifier)?;
    Ok(())
}

/// `[n, 2]` logits of the one-hidden-layer ReLU classifier.
pub fn domain_logits(tape: &mut Tape, store: &ParamStore, f: Var) -> Result<Var> {
    let h = affine(tape, store, f, HIDDEN_W, HIDDEN_B)?;
    let h = tape.relu(h);
    affine(tape, store, h, OUT_W, OUT_B)
}

fn rows_of(tape: &Tape, v: Var, side: &str) -> Result<usize> {
    let n = tape.value(v).rows();
    if n == 0 {
        return Err(DifdError::Data(format!("no {side} feature rows")));
    }
    Ok(n)
}

/// Per-domain mean cross-entropy, summed over the two domains. With
/// `flipped`, source rows are scored against the target label and vice
/// versa.
pub fn domain_loss(tape: &mut Tape, store: &ParamStore, fs: Var, ft: Var, flipped: bool) -> Result<Var> {
    let ns = rows_of(tape, fs, "source")?;
    let nt = rows_of(tape, ft, "target")?;
    let (ls, lt) = if flipped { (TARGET_LABEL, SOURCE_LABEL) } else { (SOURCE_LABEL, TARGET_LABEL) };
    let both = tape.concat_rows(&[fs, ft])?;
    let logits = domain_logits(tape, store, both)?;
    let mut w = vec![0.0; (ns + nt) * 2];
    for r in 0..ns {
        w[r * 2 + ls] = 1.0 / ns as f64;
    }
    for r in ns..ns + nt {
        w[r * 2 + lt] = 1.0 / nt as f64;
    }
    weighted_nll(tape, logits, Tensor::matrix(ns + nt, 2, w)?)
}

pub fn domain_loss_true(tape: &mut Tape, store: &ParamStore, fs: Var, ft: Var) -> Result<Var> {
    domain_loss(tape, store, fs, ft, false)
}

pub fn domain_loss_flipped(tape: &mut Tape, store: &ParamStore, fs: Var, ft: Var) -> Result<Var> {
    domain_loss(tape, store, fs, ft, true)
}

/// `[1, d]` column means.
fn column_mean(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape.value(x).rows();
    let ones = tape.constant(Tensor::filled(&[1, n], 1.0 / n as f64));
    tape.matmul(ones, x)
}

/// Linear-kernel MMD: `‖mean(f_s) − mean(f_t)‖²`.
pub fn mmd_loss(tape: &mut Tape, fs: Var, ft: Var) -> Result<Var> {
    rows_of(tape, fs, "source")?;
    rows_of(tape, ft, "target")?;
    let ms = column_mean(tape, fs)?;
    let mt = column_mean(tape, ft)?;
    let diff = tape.sub(ms, mt)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.sum(sq))
}

/// Sample covariance with denominator `n − 1`; a single row gives zeros.
fn covariance(tape: &mut Tape, x: Var) -> Result<Var> {
    let (n, d) = (tape.value(x).rows(), tape.value(x).cols());
    if n < 2 {
        return Ok(tape.constant(Tensor::zeros(&[d, d])));
    }
    let mean = column_mean(tape, x)?;
    let centered = tape.sub(x, mean)?;
    let ct = tape.transpose(centered)?;
    let gram = tape.matmul(ct, centered)?;
    Ok(tape.scalar_mul(gram, 1.0 / (n - 1) as f64))
}

/// `‖C_s − C_t‖_F² / (4 d²)`.
pub fn coral_loss(tape: &mut Tape, fs: Var, ft: Var) -> Result<Var> {
    rows_of(tape, fs, "source")?;
    rows_of(tape, ft, "target")?;
    let d = tape.value(fs).cols();
    if tape.value(ft).cols() != d {
        return Err(DifdError::shape("coral_loss", format!("{d} feature columns"), tape.value(ft).shape_str()));
    }
    let cs = covariance(tape, fs)?;
    let ct = covariance(tape, ft)?;
    let diff = tape.sub(cs, ct)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scalar_mul(total, 1.0 / (4.0 * (d * d) as f64)))
}

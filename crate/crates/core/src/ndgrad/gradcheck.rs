use serde::Serialize;

use super::params::ParamStore;
use super::tape::{OpKind, Tape, Var};
use crate::error::{DifdError, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor: gradients smaller than this are compared on an
    /// absolute scale.
    pub floor: f64,
    /// Corrupt the backward rule of one op (negative control).
    pub fault: Option<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-3,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub loss: f64,
    pub params: Vec<ParamCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }
}

fn eval_loss<F>(loss_fn: &mut F, store: &ParamStore) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = loss_fn(&mut tape, store)?;
    let l = tape.value(v).item();
    if !l.is_finite() {
        return Err(DifdError::NonFinite(format!("loss = {l}")));
    }
    Ok(l)
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of `loss_fn` against central differences for every
/// trainable, non-frozen scalar in `store`. The store is restored on return.
pub fn finite_diff_check<F>(loss_fn: F, store: &mut ParamStore, tolerance: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    finite_diff_check_with(loss_fn, store, tolerance, &GradCheckOptions::default())
}

pub fn finite_diff_check_with<F>(
    mut loss_fn: F,
    store: &mut ParamStore,
    tolerance: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grads();
    let base = eval_loss(&mut loss_fn, store)?;
    let analytic = {
        let mut tape = Tape::new();
        tape.inject_fault(opts.fault);
        let v = loss_fn(&mut tape, store)?;
        tape.backward(v, store, &[])?
    };
    store.zero_grads();

    let mut params = Vec::new();
    for i in 0..store.len() {
        let (name, numel, cols, frozen) = {
            let p = store.by_index(i);
            if !p.trainable {
                continue;
            }
            (p.name.clone(), p.value.numel(), p.value.cols(), p.frozen_rows.clone())
        };
        let grad = analytic.get(&name).expect("backward populates every live parameter");
        let mut check = ParamCheck {
            name: name.clone(),
            entries: 0,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            passed: true,
        };
        for j in 0..numel {
            if frozen.contains(&(j / cols)) {
                continue;
            }
            let orig = store.by_index(i).value.data()[j];
            store.by_index_mut(i).value.data_mut()[j] = orig + opts.step;
            let plus = eval_loss(&mut loss_fn, store);
            store.by_index_mut(i).value.data_mut()[j] = orig - opts.step;
            let minus = eval_loss(&mut loss_fn, store);
            store.by_index_mut(i).value.data_mut()[j] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.step);
            let a = grad.data()[j];
            let err = relative_error(a, numeric, opts.floor);
            check.entries += 1;
            if check.entries == 1 || err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = j;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        check.passed = check.max_rel_error < tolerance;
        params.push(check);
    }
    let passed = params.iter().all(|p| p.passed);
    Ok(GradCheckReport {
        tolerance,
        loss: base,
        params,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::{Partition, Tensor};

    fn regression_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.register("w", Tensor::matrix(3, 1, vec![0.2, -0.4, 0.1]).unwrap(), Partition::FeatureExtractor)
            .unwrap();
        s.register("b", Tensor::scalar(0.3), Partition::FeatureExtractor).unwrap();
        s
    }

    fn regression_loss(tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        let x = tape.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0])?);
        let y = tape.constant(Tensor::matrix(2, 1, vec![1.0, -1.0])?);
        let w = tape.param(store, "w")?;
        let b = tape.param(store, "b")?;
        let xw = tape.matmul(x, w)?;
        let pred = tape.add(xw, b)?;
        let r = tape.sub(pred, y)?;
        let sq = tape.mul(r, r)?;
        Ok(tape.mean(sq))
    }

    #[test]
    fn linear_regression_passes() {
        let mut s = regression_store();
        let before = s.clone();
        let report = finite_diff_check(regression_loss, &mut s, 1e-6).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(s, before);
    }

    #[test]
    fn corrupted_gradient_names_parameter() {
        let mut s = regression_store();
        let opts = GradCheckOptions {
            fault: Some(OpKind::MatMul),
            ..Default::default()
        };
        let report = finite_diff_check_with(regression_loss, &mut s, 1e-6, &opts).unwrap();
        assert!(!report.passed);
        let failed: Vec<_> = report.failures().map(|p| p.name.as_str()).collect();
        assert_eq!(failed, ["w"]);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut s = regression_store();
        let err = finite_diff_check(
            |tape: &mut Tape, store: &ParamStore| {
                let w = tape.param(store, "b")?;
                Ok(tape.scalar_mul(w, f64::INFINITY))
            },
            &mut s,
            1e-6,
        )
        .unwrap_err();
        assert!(matches!(err, DifdError::NonFinite(_)));
    }
}

use std::collections::HashMap;

use super::params::{ParamStore, Partition};
use crate::error::{DifdError, Result};

/// Outcome of one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// Global gradient norm of the updated partitions before clipping.
    pub grad_norm: f64,
    /// Factor the gradients were multiplied by (1.0 when not clipped).
    pub scale: f64,
}

/// Plain SGD: `p <- p - lr * g`, after optional global-norm clipping of the
/// selected partitions' gradients. Parameters outside `partitions` are not
/// touched; the consumed gradients are cleared.
pub fn sgd_step(store: &mut ParamStore, lr: f64, partitions: &[Partition], clip_norm: Option<f64>) -> Result<StepInfo> {
    Sgd::new(lr, 0.0, clip_norm)?.step(store, partitions)
}

/// SGD with optional heavy-ball momentum. Momentum 0 reproduces [`sgd_step`].
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, clip_norm: Option<f64>) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(DifdError::Config(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(DifdError::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        if let Some(c) = clip_norm {
            if !(c > 0.0) {
                return Err(DifdError::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        Ok(Self {
            lr,
            momentum,
            clip_norm,
            velocity: HashMap::new(),
        })
    }

    pub fn step(&mut self, store: &mut ParamStore, partitions: &[Partition]) -> Result<StepInfo> {
        let selected = |p: &super::params::Param| p.trainable && partitions.contains(&p.partition);
        let missing: Vec<String> = store
            .iter()
            .filter(|p| selected(p) && p.grad.is_none())
            .map(|p| p.name.clone())
            .collect();
        if !missing.is_empty() {
            return Err(DifdError::MissingGradients(missing));
        }

        let mut sq = 0.0;
        for p in store.iter().filter(|p| selected(p)) {
            sq += p.grad.as_ref().expect("checked above").iter().map(|g| g * g).sum::<f64>();
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(DifdError::NonFinite(format!("gradient norm = {grad_norm}")));
        }
        let scale = match self.clip_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };

        for p in store.iter_mut() {
            if !selected(p) {
                continue;
            }
            let grad = p.grad.take().expect("checked above");
            let cols = p.value.cols();
            let frozen = std::mem::take(&mut p.frozen_rows);
            let data = p.value.data_mut();
            if self.momentum > 0.0 {
                let v = self
                    .velocity
                    .entry(p.name.clone())
                    .or_insert_with(|| vec![0.0; grad.len()]);
                for i in 0..data.len() {
                    v[i] = self.momentum * v[i] + scale * grad[i];
                    if !frozen.contains(&(i / cols)) {
                        data[i] -= self.lr * v[i];
                    }
                }
            } else {
                for i in 0..data.len() {
                    if !frozen.contains(&(i / cols)) {
                        data[i] -= self.lr * scale * grad[i];
                    }
                }
            }
            p.frozen_rows = frozen;
        }
        Ok(StepInfo { grad_norm, scale })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::Tensor;

    fn store_with(value: f64, grad: f64, partition: Partition) -> ParamStore {
        let mut s = ParamStore::new();
        s.register("p", Tensor::scalar(value), partition).unwrap();
        s.get_mut("p").unwrap().grad = Some(vec![grad]);
        s
    }

    #[test]
    fn plain_update() {
        let mut s = store_with(1.0, 0.5, Partition::FeatureExtractor);
        sgd_step(&mut s, 0.01, &[Partition::FeatureExtractor], None).unwrap();
        assert!((s.value("p").unwrap().item() - 0.995).abs() < 1e-15);
        assert!(s.get("p").unwrap().grad.is_none());
    }

    #[test]
    fn clipping_halves_gradient() {
        let mut s = ParamStore::new();
        s.register("p", Tensor::vector(vec![0.0, 0.0]), Partition::FeatureExtractor).unwrap();
        // norm 2
        s.get_mut("p").unwrap().grad = Some(vec![2.0 * 0.6, 2.0 * 0.8]);
        let info = sgd_step(&mut s, 1.0, &[Partition::FeatureExtractor], Some(1.0)).unwrap();
        assert!((info.grad_norm - 2.0).abs() < 1e-12);
        assert!((info.scale - 0.5).abs() < 1e-15);
        let v = s.value("p").unwrap().data();
        assert!((v[0] + 0.6).abs() < 1e-12 && (v[1] + 0.8).abs() < 1e-12);
    }

    #[test]
    fn two_steps_equal_summed_delta() {
        let mut a = store_with(1.0, 0.3, Partition::FeatureExtractor);
        sgd_step(&mut a, 0.1, &[Partition::FeatureExtractor], None).unwrap();
        a.get_mut("p").unwrap().grad = Some(vec![0.3]);
        sgd_step(&mut a, 0.1, &[Partition::FeatureExtractor], None).unwrap();
        let mut b = store_with(1.0, 0.6, Partition::FeatureExtractor);
        sgd_step(&mut b, 0.1, &[Partition::FeatureExtractor], None).unwrap();
        assert!((a.value("p").unwrap().item() - b.value("p").unwrap().item()).abs() < 1e-15);
    }

    #[test]
    fn missing_gradients_are_named() {
        let mut s = ParamStore::new();
        s.register("w1", Tensor::scalar(1.0), Partition::DomainClassifier).unwrap();
        s.register("w2", Tensor::scalar(1.0), Partition::DomainClassifier).unwrap();
        let err = sgd_step(&mut s, 0.1, &[Partition::DomainClassifier], None).unwrap_err();
        match err {
            DifdError::MissingGradients(names) => assert_eq!(names, ["w1", "w2"]),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn other_partition_untouched() {
        let mut s = ParamStore::new();
        s.register("f", Tensor::scalar(1.0), Partition::FeatureExtractor).unwrap();
        s.register("d", Tensor::scalar(2.0), Partition::DomainClassifier).unwrap();
        s.get_mut("f").unwrap().grad = Some(vec![1.0]);
        s.get_mut("d").unwrap().grad = Some(vec![1.0]);
        let before = s.snapshot(Partition::DomainClassifier);
        sgd_step(&mut s, 0.1, &[Partition::FeatureExtractor], None).unwrap();
        assert_eq!(before, s.snapshot(Partition::DomainClassifier));
    }

    #[test]
    fn frozen_rows_stay_put() {
        let mut s = ParamStore::new();
        s.register("emb", Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap(), Partition::FeatureExtractor)
            .unwrap();
        s.freeze_rows("emb", &[0]).unwrap();
        s.get_mut("emb").unwrap().grad = Some(vec![1.0; 4]);
        sgd_step(&mut s, 0.5, &[Partition::FeatureExtractor], None).unwrap();
        assert_eq!(s.value("emb").unwrap().data(), &[0.0, 0.0, 0.5, 0.5]);
    }
}

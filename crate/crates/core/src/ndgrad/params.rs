use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{DifdError, Result};

/// Which player of the adversarial game owns a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    /// Encoder, allocation gate, sentiment and aspect heads.
    FeatureExtractor,
    /// The domain discriminator.
    DomainClassifier,
}

impl Partition {
    pub const ALL: [Partition; 2] = [Partition::FeatureExtractor, Partition::DomainClassifier];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::FeatureExtractor => "feature_extractor",
            Partition::DomainClassifier => "domain_classifier",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "feature_extractor" => Some(Partition::FeatureExtractor),
            "domain_classifier" => Some(Partition::DomainClassifier),
            _ => None,
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub partition: Partition,
    pub trainable: bool,
    /// Rows pinned to their current value (the PAD embedding row).
    pub frozen_rows: Vec<usize>,
    pub grad: Option<Vec<f64>>,
}

/// Named trainable parameters, kept in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor, partition: Partition) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(DifdError::DuplicateParam(name));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            partition,
            trainable: true,
            frozen_rows: Vec::new(),
            grad: None,
        });
        Ok(())
    }

    pub fn freeze_rows(&mut self, name: &str, rows: &[usize]) -> Result<()> {
        let p = self.get_mut(name)?;
        p.frozen_rows.extend_from_slice(rows);
        p.frozen_rows.sort_unstable();
        p.frozen_rows.dedup();
        Ok(())
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.get_mut(name)?.trainable = trainable;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| DifdError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(DifdError::UnknownParam(name.to_string())),
        }
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        Ok(&mut self.get_mut(name)?.value)
    }

    pub fn by_index(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub(crate) fn by_index_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn in_partition(&self, partition: Partition) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(move |p| p.partition == partition)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Flattened copy of every value in one partition, for bit-exact comparisons.
    pub fn snapshot(&self, partition: Partition) -> Vec<(String, Vec<u64>)> {
        self.in_partition(partition)
            .map(|p| (p.name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

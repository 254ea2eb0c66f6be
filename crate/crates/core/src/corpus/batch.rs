use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::bio::BioTag;
use super::instance::{Domain, Instance, Polarity};
use super::vocab::{Vocabulary, PAD_ID};
use crate::error::{DifdError, Result};

/// Padded mini-batch. Per-token fields are `size x max_len`, row-major by
/// instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub max_len: usize,
    pub token_ids: Vec<usize>,
    /// 1 at real tokens, 0 at padding.
    pub mask: Vec<u8>,
    /// 1 at the focal aspect's tokens.
    pub aspect_indicator: Vec<u8>,
    pub polarity: Vec<Option<Polarity>>,
    /// Padding positions carry `O`; they are excluded by the mask.
    pub bio_labels: Vec<BioTag>,
    pub domains: Vec<Domain>,
    pub sentence_ids: Vec<String>,
    pub lengths: Vec<usize>,
    /// Position of each row in the list the batch was built from.
    pub source_index: Vec<usize>,
}

impl Batch {
    pub fn from_instances(instances: &[&Instance], indices: &[usize], vocab: &Vocabulary) -> Result<Self> {
        if instances.is_empty() {
            return Err(DifdError::Data("cannot batch zero instances".into()));
        }
        let size = instances.len();
        let max_len = instances.iter().map(|i| i.tokens.len()).max().unwrap_or(0);
        let cells = size * max_len;
        let mut b = Batch {
            size,
            max_len,
            token_ids: vec![PAD_ID; cells],
            mask: vec![0; cells],
            aspect_indicator: vec![0; cells],
            polarity: Vec::with_capacity(size),
            bio_labels: vec![BioTag::O; cells],
            domains: Vec::with_capacity(size),
            sentence_ids: Vec::with_capacity(size),
            lengths: Vec::with_capacity(size),
            source_index: indices.to_vec(),
        };
        for (r, inst) in instances.iter().enumerate() {
            let base = r * max_len;
            for (t, tok) in inst.tokens.iter().enumerate() {
                b.token_ids[base + t] = vocab.id(tok);
                b.mask[base + t] = 1;
                b.bio_labels[base + t] = inst.bio_tags[t];
            }
            for t in inst.aspect_span.start..inst.aspect_span.end {
                b.aspect_indicator[base + t] = 1;
            }
            b.polarity.push(inst.polarity);
            b.domains.push(inst.domain);
            b.sentence_ids.push(inst.sentence_id.clone());
            b.lengths.push(inst.tokens.len());
        }
        Ok(b)
    }

    #[inline]
    pub fn cell(&self, row: usize, t: usize) -> usize {
        row * self.max_len + t
    }

    pub fn is_labeled(&self) -> bool {
        self.polarity.iter().all(Option::is_some)
    }

    pub fn num_tokens(&self) -> usize {
        self.mask.iter().map(|&m| m as usize).sum()
    }

    /// Rows whose sentence id has not appeared earlier in the batch.
    pub fn first_occurrence(&self) -> Vec<bool> {
        let mut seen = std::collections::HashSet::new();
        self.sentence_ids.iter().map(|s| seen.insert(s.as_str())).collect()
    }

    /// Checks the structural invariants (mask marks exactly the unpadded
    /// prefix, aspect indicator is a contiguous non-empty run inside it).
    pub fn validate(&self) -> Result<()> {
        for r in 0..self.size {
            let len = self.lengths[r];
            let row_mask = &self.mask[r * self.max_len..(r + 1) * self.max_len];
            if row_mask.iter().enumerate().any(|(t, &m)| (m == 1) != (t < len)) {
                return Err(DifdError::Data(format!("row {r}: mask does not mark the first {len} positions")));
            }
            if self.token_ids[r * self.max_len..(r + 1) * self.max_len]
                .iter()
                .zip(row_mask)
                .any(|(&id, &m)| m == 0 && id != PAD_ID)
            {
                return Err(DifdError::Data(format!("row {r}: non-PAD token in padding")));
            }
            let ind = &self.aspect_indicator[r * self.max_len..(r + 1) * self.max_len];
            let on: Vec<usize> = ind.iter().enumerate().filter(|(_, &v)| v == 1).map(|(t, _)| t).collect();
            if on.is_empty() {
                return Err(DifdError::Data(format!("row {r}: empty aspect indicator")));
            }
            if on.last().unwrap() - on[0] + 1 != on.len() {
                return Err(DifdError::Data(format!("row {r}: aspect indicator not contiguous")));
            }
            if on.iter().any(|&t| row_mask[t] == 0) {
                return Err(DifdError::Data(format!("row {r}: aspect indicator outside mask")));
            }
        }
        Ok(())
    }
}

/// Splits `instances` into batches of at most `batch_size`, optionally in a
/// seeded random order. The trailing partial batch is kept.
pub fn make_batches(
    instances: &[Instance],
    vocab: &Vocabulary,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(DifdError::Config("batch size must be at least 1".into()));
    }
    if instances.is_empty() {
        return Err(DifdError::Data("cannot batch an empty instance list".into()));
    }
    let mut order: Vec<usize> = (0..instances.len()).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }
    order
        .chunks(batch_size)
        .map(|idx| {
            let refs: Vec<&Instance> = idx.iter().map(|&i| &instances[i]).collect();
            Batch::from_instances(&refs, idx, vocab)
        })
        .collect()
}

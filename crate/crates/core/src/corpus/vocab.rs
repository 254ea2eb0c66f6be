use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::instance::Instance;
use crate::error::{DifdError, Result};
use crate::ndgrad::Tensor;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
/// Half-width of the uniform init for words without a pretrained vector.
pub const DEFAULT_EMBEDDING_SCALE: f64 = 0.1;

/// Token to id map with ids assigned in first-seen order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from(vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()])
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_instances<'a>(instances: impl IntoIterator<Item = &'a Instance>) -> Self {
        let mut v = Self::new();
        for inst in instances {
            for t in &inst.tokens {
                v.add(t);
            }
        }
        v
    }

    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddingReport {
    pub vocab_size: usize,
    pub dim: usize,
    /// Vocabulary entries (excluding PAD/UNK) found in the embedding file.
    pub found: usize,
    pub coverage: f64,
    /// Repeated words in the file; the first occurrence wins.
    pub duplicates: usize,
}

/// Vocabulary over `instances` plus an embedding table of `vocab x dim`.
///
/// Known words copy their pretrained vector; every other row is drawn
/// uniformly from `[-init_scale, init_scale]`; the PAD row is zero.
pub fn build_vocab_and_embeddings<'a, R: Rng>(
    instances: impl IntoIterator<Item = &'a Instance>,
    embedding_file: Option<&Path>,
    dim: usize,
    init_scale: f64,
    rng: &mut R,
) -> Result<(Vocabulary, Tensor, EmbeddingReport)> {
    if dim == 0 {
        return Err(DifdError::Config("embedding dimension must be positive".into()));
    }
    if !(init_scale > 0.0 && init_scale.is_finite()) {
        return Err(DifdError::Config(format!("embedding init scale must be positive, got {init_scale}")));
    }
    let vocab = Vocabulary::from_instances(instances);
    let mut data = vec![0.0; vocab.len() * dim];
    for v in data.iter_mut().skip(dim) {
        *v = rng.gen_range(-init_scale..=init_scale);
    }

    let mut found = 0;
    let mut duplicates = 0;
    if let Some(path) = embedding_file {
        let f = File::open(path).map_err(|e| DifdError::io(path, e))?;
        let mut seen = vec![false; vocab.len()];
        let mut seen_other = std::collections::HashSet::new();
        for (lineno, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| DifdError::io(path, e))?;
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let values: Vec<&str> = parts.collect();
            if values.len() != dim {
                return Err(DifdError::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: format!("embedding dimension mismatch: expected {dim}, found {}", values.len()),
                });
            }
            match vocab.get(word) {
                Some(id) if id != PAD_ID && id != UNK_ID => {
                    if seen[id] {
                        duplicates += 1;
                        continue;
                    }
                    seen[id] = true;
                    found += 1;
                    for (k, v) in values.iter().enumerate() {
                        data[id * dim + k] = v.parse().map_err(|_| DifdError::Parse {
                            path: path.to_path_buf(),
                            line: lineno + 1,
                            msg: format!("bad number `{v}`"),
                        })?;
                    }
                }
                _ => {
                    if !seen_other.insert(word.to_string()) {
                        duplicates += 1;
                    }
                }
            }
        }
    }
    let real = vocab.len() - 2;
    let report = EmbeddingReport {
        vocab_size: vocab.len(),
        dim,
        found,
        coverage: if real == 0 { 0.0 } else { found as f64 / real as f64 },
        duplicates,
    };
    let table = Tensor::matrix(vocab.len(), dim, data)?;
    Ok((vocab, table, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{encode_bio, Domain, Span};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    fn inst(words: &[&str]) -> Instance {
        Instance {
            sentence_id: words.join(" "),
            tokens: words.iter().map(|s| s.to_string()).collect(),
            aspect_span: Span::new(0, 1),
            bio_tags: encode_bio(&[Span::new(0, 1)], words.len()).unwrap(),
            polarity: None,
            domain: Domain::Source,
        }
    }

    #[test]
    fn cold_start_rows() {
        let data = [inst(&["good", "food"]), inst(&["bad", "food"])];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (vocab, table, report) = build_vocab_and_embeddings(&data, None, 4, DEFAULT_EMBEDDING_SCALE, &mut rng).unwrap();
        assert_eq!(vocab.len(), 5);
        assert_eq!(vocab.id("good"), 2);
        assert_eq!(vocab.id("never-seen"), UNK_ID);
        assert!(table.row(PAD_ID).iter().all(|&v| v == 0.0));
        for r in 1..vocab.len() {
            assert!(table.row(r).iter().all(|v| (-0.1..=0.1).contains(v)));
            assert!(table.row(r).iter().any(|&v| v != 0.0));
        }
        assert_eq!(report.coverage, 0.0);
    }

    #[test]
    fn pretrained_rows_copied_and_duplicates_counted() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "good 0.1 0.2 0.3 0.4").unwrap();
        writeln!(f, "good 9 9 9 9").unwrap();
        writeln!(f, "unrelated 1 1 1 1").unwrap();
        let data = [inst(&["good", "food"])];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (vocab, table, report) = build_vocab_and_embeddings(&data, Some(f.path()), 4, DEFAULT_EMBEDDING_SCALE, &mut rng).unwrap();
        assert_eq!(table.row(vocab.id("good")), &[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(report.duplicates, 1);
        assert_eq!(report.found, 1);
        assert!((0.0..=1.0).contains(&report.coverage));
        assert_eq!(report.coverage, 0.5);
    }

    #[test]
    fn dimension_mismatch() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "good 0.1 0.2").unwrap();
        let data = [inst(&["good"])];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = build_vocab_and_embeddings(&data, Some(f.path()), 4, DEFAULT_EMBEDDING_SCALE, &mut rng).unwrap_err();
        assert!(err.to_string().contains("dimension mismatch"));
    }
}

//! Instances, file formats, vocabulary bootstrap, batching, and the
//! synthetic two-domain generator.

mod batch;
mod bio;
mod instance;
mod jsonl;
mod semeval;
mod stats;
mod synthetic;
mod tokenize;
mod vocab;

pub use batch::{make_batches, Batch};
pub use bio::{decode_bio, encode_bio, repair_bio, validate_bio, BioTag};
pub use instance::{Domain, Instance, Polarity, Span};
pub use jsonl::{convert_twitter, instance_to_json, load_jsonl, parse_jsonl, write_jsonl};
pub use semeval::{load_semeval_xml, parse_semeval_xml, SemEvalReport};
pub use stats::{corpus_stats, CorpusStats, SplitStats};
pub use synthetic::{aspect_types, generate_synthetic, OpinionWord, SplitCounts, SyntheticCorpora, SyntheticSpec};
pub use tokenize::{tokenize, tokenize_with_breaks, tokenize_words, Token};
pub use vocab::{build_vocab_and_embeddings, EmbeddingReport, Vocabulary, DEFAULT_EMBEDDING_SCALE, PAD_ID, PAD_TOKEN, UNK_ID, UNK_TOKEN};

/// Round trip through the BIO encoding.
pub fn bio_spans_roundtrip(spans: &[Span], len: usize) -> crate::Result<Vec<Span>> {
    Ok(decode_bio(&encode_bio(spans, len)?))
}

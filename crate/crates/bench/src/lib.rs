//! Fixtures shared by the benchmarks.

use difd_core::corpus::{generate_synthetic, make_batches, Batch, SplitCounts, SyntheticSpec};
use difd_core::{RunConfig, Trainer, Variant};

/// A freshly initialized trainer plus one source and one target batch of
/// `batch_size` synthetic instances.
pub fn step_fixture(variant: Variant, batch_size: usize) -> (Trainer, Batch, Batch) {
    let mut spec = SyntheticSpec::desk(11);
    spec.counts = SplitCounts { source_train: batch_size, source_test: 1, target_unlabeled: batch_size, target_gold: 1 };
    let corpora = generate_synthetic(&spec).expect("desk spec is valid");
    let run = RunConfig { variant, batch_size, ..RunConfig::desk() };
    let trainer = Trainer::from_corpora(run, &corpora.source_train, Some(&corpora.target_unlabeled)).expect("trainer");
    let source = make_batches(&corpora.source_train, &trainer.vocab, batch_size, 0, false).expect("batches").remove(0);
    let target = make_batches(&corpora.target_unlabeled, &trainer.vocab, batch_size, 0, false).expect("batches").remove(0);
    (trainer, source, target)
}

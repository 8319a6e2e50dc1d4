//! Fixtures shared by the benchmarks.

use rationale_core::session::LoopConfig;
use rationale_core::synth::{synth_spurious_corpus, SynthConfig, SynthCorpus};
use rationale_core::{LinearTextModel, ModelConfig};

/// The default synthetic corpus.
pub fn corpus() -> SynthCorpus {
    synth_spurious_corpus(&SynthConfig::default()).expect("default synthetic corpus")
}

/// A model trained on the first 400 pool documents.
pub fn trained_model(c: &SynthCorpus) -> LinearTextModel {
    let mut train = c.train_pool.clone();
    train.documents.truncate(400);
    rationale_core::model::train(&train, &c.val, &ModelConfig::default(), 0)
        .expect("training succeeds")
        .0
}

/// A loop config small enough to run end to end inside a benchmark.
pub fn small_loop() -> LoopConfig {
    let mut config = LoopConfig::default();
    if let rationale_core::session::DataSource::Synthetic(s) = &mut config.data {
        s.n = 200;
        s.n_val = 100;
        s.n_test = 100;
    }
    config.n_gold = 20;
    if let Some(r2) = &mut config.round2 {
        r2.k_new = 20;
    }
    config
}

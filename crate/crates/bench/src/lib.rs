//! Fixtures shared by the benchmarks in `benches/`.

use std::sync::Arc;

use lst_core::corpus::{SynthConfig, Synthesizer, Utterance};
use lst_core::interleave::PackedRow;
use lst_core::model::{Architecture, Model, ModelConfig};
use lst_core::rng::seeded;
use lst_core::tensor::Tensor;
use lst_core::trainer::{BatchStream, TrainConfig};
use rand::Rng as _;

pub fn corpus(n: usize) -> Arc<Vec<Utterance>> {
    Arc::new(Synthesizer::new(SynthConfig::default()).expect("default synth config").corpus(17, n))
}

/// Uniform entries in [-1, 1).
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = seeded(seed);
    let data = (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect();
    Tensor::from_rows(rows, cols, data).expect("shape matches data")
}

pub fn bench_model_config() -> ModelConfig {
    ModelConfig {
        d_local: 32,
        d_global: 64,
        n_layers_enc: 1,
        n_layers_global: 2,
        n_layers_dec: 1,
        n_heads: 4,
        ..ModelConfig::default()
    }
}

/// A model and one packed training batch for it.
pub fn model_and_batch(arch: Architecture, rows: usize, context_len: usize) -> (Model, Vec<PackedRow>) {
    let model = Model::new(arch, bench_model_config(), 0).expect("valid model config");
    let cfg = TrainConfig {
        batch_rows: rows,
        context_len,
        ..TrainConfig::default()
    };
    let stream = lst_core::trainer::StreamConfig {
        rows,
        context_len,
        ratio: cfg.ratio,
        patching: cfg.patching,
        interleave: cfg.interleave,
        seed: 0,
        max_tokens: None,
    };
    let mut s = BatchStream::new(corpus(64), &model, stream).expect("valid stream");
    let batch = s.next_batch().expect("batch").expect("no budget");
    (model, batch.rows)
}

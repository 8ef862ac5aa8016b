//! Fixtures shared by the benchmarks.

use cleft_core::data::{generate, load_batches, BatchMode, Dataset, PairBatch, Split};
use cleft_core::{ClipModel, ParameterStore, RunConfig, Tensor};

/// Deterministic pseudo-random matrix with entries in [-1, 1).
pub fn matrix(rows: usize, cols: usize, seed: u32) -> Tensor {
    let data = (0..rows * cols)
        .map(|i| {
            let h = (i as u32).wrapping_mul(2_654_435_761).wrapping_add(seed.wrapping_mul(97));
            (h % 2000) as f32 / 1000.0 - 1.0
        })
        .collect();
    Tensor::new(vec![rows, cols], data).expect("positive dims")
}

/// The toy preset with its corpus, model and one training batch.
pub struct ToySetup {
    pub cfg: RunConfig,
    pub data: Dataset,
    pub model: ClipModel,
    pub store: ParameterStore,
    pub batch: PairBatch,
}

pub fn toy_setup() -> ToySetup {
    let cfg = RunConfig::toy();
    let data = generate(&cfg.synth_spec()).expect("toy spec is valid");
    let (model, mut store) =
        ClipModel::build(&cfg.model_config(data.vocab.len()).expect("toy config"), 0).expect("toy model");
    cfg.freeze().expect("policy").apply(&mut store).expect("apply");
    let batch = load_batches(&data, Split::Train, cfg.batch_size, 0, BatchMode::Train, cfg.max_seq_len)
        .expect("batches")
        .next()
        .expect("one batch")
        .expect("tokenised");
    ToySetup {
        cfg,
        data,
        model,
        store,
        batch,
    }
}

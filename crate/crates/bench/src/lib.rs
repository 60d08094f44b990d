//! Shared fixtures for the benchmark targets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shrink_core::matrix::Matrix;
use shrink_core::model::{ModelCheckpoint, ModelConfig};
use shrink_core::tokenizer;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::random(rows, cols, 0.1, &mut rng(seed))
}

pub fn bench_model() -> ModelCheckpoint {
    let cfg = ModelConfig {
        vocab_size: tokenizer::VOCAB_SIZE,
        d_model: 64,
        n_layers: 4,
        n_heads: 4,
        d_ff: 128,
        max_seq_len: 128,
    };
    ModelCheckpoint::random(cfg, &mut rng(11)).expect("valid config")
}

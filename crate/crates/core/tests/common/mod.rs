#![allow(dead_code)]

use mabsrec::corpus::{parse_csv_events, Corpus};
use mabsrec::dataset::{DataSettings, PreparedData};
use mabsrec::numeric::Tensor;
use mabsrec::synthetic::memorization_csv;
use mabsrec::trainer::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn corpus_from_csv(text: &str) -> Corpus {
    let log = parse_csv_events(text.as_bytes(), "fixture").unwrap();
    Corpus::from_log(&log, 5, None).unwrap()
}

/// Small cyclic-walk corpus that covers every one of `n_items` items.
pub fn cyclic_corpus(n_users: usize, n_items: u32) -> Corpus {
    corpus_from_csv(&memorization_csv(n_users, n_items, 6, 10))
}

/// |I|=20, L=8, d=8, h=2, one transformer layer, two graph layers, no dropout.
pub fn toy_config() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        learning_rate: 0.01,
        max_seq_len: 8,
        dropout_rate: 0.0,
        graph_dropout_rate: 0.0,
        n_transformer_layers: 1,
        n_heads: 2,
        n_graph_layers: 2,
        embed_dim: 8,
        max_epochs: 3,
        seed: 5,
        ..TrainConfig::default()
    }
}

pub fn prepare(corpus: &Corpus, config: &TrainConfig) -> PreparedData {
    PreparedData::build(corpus, DataSettings::from_config(config)).unwrap()
}

pub fn toy_data() -> (PreparedData, TrainConfig) {
    let config = toy_config();
    let corpus = cyclic_corpus(30, 20);
    assert_eq!(corpus.n_items(), 20);
    (prepare(&corpus, &config), config)
}

/// Configuration used on the 50-user memorization fixture.
pub fn memorization_config() -> TrainConfig {
    TrainConfig {
        batch_size: 64,
        learning_rate: 0.01,
        max_seq_len: 12,
        dropout_rate: 0.0,
        graph_dropout_rate: 0.0,
        n_transformer_layers: 1,
        n_heads: 2,
        embed_dim: 32,
        max_epochs: 300,
        patience: 300,
        ..TrainConfig::default()
    }
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dense `A · B` by triple loop.
pub fn dense_mm(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    (0..n)
        .map(|i| (0..m).map(|j| (0..k).map(|t| a[i][t] * b[t][j]).sum()).collect())
        .collect()
}

pub fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

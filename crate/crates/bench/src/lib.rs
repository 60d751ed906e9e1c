//! Input generators shared by the benchmarks.

use demopick_core::{seeded_rng, EmbeddingIndex, EmbeddingVector};
use rand::Rng;

pub fn unit_vectors(n: usize, dim: usize, seed: u64) -> Vec<EmbeddingVector> {
    let mut rng = seeded_rng(seed);
    (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            EmbeddingVector::normalize(raw).expect("random vector is nonzero")
        })
        .collect()
}

pub fn index(n: usize, dim: usize, seed: u64) -> EmbeddingIndex {
    let ids = (0..n).map(|i| format!("e{i}")).collect();
    EmbeddingIndex::from_parts(ids, unit_vectors(n, dim, seed)).expect("consistent dimensions")
}

/// `k` blobs of `per` points around scaled axis directions.
pub fn blobs(k: usize, per: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeded_rng(seed);
    (0..k * per)
        .map(|i| {
            let mut p: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect();
            p[(i / per) % dim] += 10.0;
            p
        })
        .collect()
}

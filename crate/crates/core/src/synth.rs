//! Synthetic knowledge graphs for smoke runs, tests and benchmarks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kg::{KnowledgeGraph, SplitFamily, SplitLabel, Triple};

/// Uniformly random distinct triples (no self loops).
pub fn random_kg(num_entities: usize, num_relations: usize, num_triples: usize, seed: u64) -> KnowledgeGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let capacity = num_entities * num_relations * num_entities.saturating_sub(1);
    let target = num_triples.min(capacity);
    let mut set = std::collections::BTreeSet::new();
    while set.len() < target {
        let h = rng.random_range(0..num_entities);
        let t = rng.random_range(0..num_entities);
        if h == t {
            continue;
        }
        set.insert(Triple::new(h, rng.random_range(0..num_relations), t));
    }
    KnowledgeGraph::new(num_entities, num_relations, set, SplitLabel::Full).expect("ids in range")
}

/// Splits a random graph into nested train / train+valid / full graphs.
pub fn random_splits(
    num_entities: usize,
    num_relations: usize,
    num_triples: usize,
    valid_frac: f64,
    test_frac: f64,
    seed: u64,
) -> SplitFamily {
    let full = random_kg(num_entities, num_relations, num_triples, seed);
    let mut triples = full.triples().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    triples.shuffle(&mut rng);
    let n_valid = (triples.len() as f64 * valid_frac).round() as usize;
    let n_test = (triples.len() as f64 * test_frac).round() as usize;
    let test: Vec<Triple> = triples.drain(..n_test).collect();
    let valid: Vec<Triple> = triples.drain(..n_valid).collect();
    let mk = |ts: Vec<Triple>, split| {
        KnowledgeGraph::new(num_entities, num_relations, ts, split).expect("ids in range")
    };
    SplitFamily::from_parts(
        mk(triples, SplitLabel::Train),
        &mk(valid, SplitLabel::Train),
        &mk(test, SplitLabel::Train),
    )
    .expect("same vocabulary")
}

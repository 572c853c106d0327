//! Shared fixtures for the criterion benchmarks.

use ktbench::models::{DktConfig, Model, ModelConfig, SaktConfig};
use ktbench::preprocess::{expand_dataset, ExpandedSequence};
use ktbench::synth::{generate, SimConfig};

/// Expanded simulator sequences with two KCs per question on average.
pub fn sequences(n_students: usize, steps: usize) -> (usize, Vec<ExpandedSequence>) {
    let ds = generate(&SimConfig {
        n_students,
        steps_per_student: steps,
        n_questions: 100,
        n_kcs: 20,
        seed: 7,
        ..SimConfig::default()
    })
    .expect("valid simulator config");
    (ds.num_items(), expand_dataset(&ds).expect("simulated data expands"))
}

pub fn dkt(num_items: usize) -> Model {
    let cfg = ModelConfig::Dkt(DktConfig {
        emb_size: 32,
        hidden_size: 32,
        ..DktConfig::default()
    });
    Model::new(&cfg, num_items, 1).expect("valid model config")
}

pub fn sakt(num_items: usize) -> Model {
    let cfg = ModelConfig::Sakt(SaktConfig {
        emb_size: 32,
        num_heads: 4,
        num_blocks: 1,
        max_len: 200,
    });
    Model::new(&cfg, num_items, 1).expect("valid model config")
}

#![allow(dead_code)]

use fedsel::config::ExperimentConfig;
use fedsel::model::Batch;
use fedsel::rng::{self, StreamRng};
use rand::Rng;
use rand_distr::StandardNormal;
use serde_json::{json, Value};

pub fn gaussian_vec(r: &mut StreamRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

pub fn random_batch(seed: u64, n: usize, dim: usize, classes: usize) -> Batch {
    let mut r = rng::stream(seed, "test-batch");
    let features = gaussian_vec(&mut r, n * dim);
    let labels = (0..n).map(|_| r.random_range(0..classes)).collect();
    Batch::new(features, labels, dim).unwrap()
}

/// A small synthetic experiment; `overrides` is merged over the defaults.
pub fn config(overrides: Value) -> ExperimentConfig {
    let mut base = json!({
        "num_clients": 4,
        "rounds": 4,
        "clients_per_round": 2,
        "learning_rate": {"schedule": "constant", "eta": 0.1},
        "policy": {"kind": "pncs", "p": 4, "queue_len": 2},
        "partition": {"mode": "shard", "shards_per_client": 1},
        "model": {"arch": "linear"},
        "data": {"source": "synthetic", "classes": 4, "dim": 6, "per_class": 30, "spread": 0.5},
        "seeds": [0]
    });
    for (k, v) in overrides.as_object().expect("object").iter() {
        base[k] = v.clone();
    }
    ExperimentConfig::from_json(&base.to_string()).unwrap()
}

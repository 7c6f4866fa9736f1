#![allow(dead_code)]

use ndarray::Array2;
use unibrain::config::RunConfig;
use unibrain::embedder::{ModelConfig, ModelInput};
use unibrain::nn::{self, Params, Real};
use unibrain::seed;

/// The gradient-check configuration.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        groups: 8,
        group_size: 4,
        local_dim: 4,
        width: 16,
        tokens: 8,
        image_tokens: 5,
        text_tokens: 3,
        depth: 1,
        heads: 2,
        ffn_mult: 4,
        dropout: 0.0,
        ..ModelConfig::desk()
    }
}

/// Random grouped input for the given subjects.
pub fn random_input<F: Real>(cfg: &ModelConfig, subjects: &[u32], seed: u64) -> ModelInput<F> {
    let mut rng = seed::rng(seed, "test.input", 0);
    ModelInput {
        grouped: nn::gaussian(&mut rng, subjects.len() * cfg.groups, cfg.group_size, 1.0),
        subjects: subjects.to_vec(),
    }
}

pub fn random_matrix<F: Real>(rows: usize, cols: usize, seed: u64) -> Array2<F> {
    nn::gaussian(&mut seed::rng(seed, "test.matrix", 0), rows, cols, 1.0)
}

/// A run small enough to train in a second or two.
pub fn small_run() -> RunConfig {
    let mut c = RunConfig::desk();
    c.model = ModelConfig {
        groups: 16,
        group_size: 4,
        local_dim: 4,
        width: 16,
        tokens: 8,
        image_tokens: 5,
        text_tokens: 3,
        depth: 1,
        ..c.model
    };
    c.data.subjects = 3;
    c.data.samples_per_subject = 120;
    c.data.voxel_min = 100;
    c.data.voxel_max = 160;
    c.data.test_fraction = 0.2;
    c.train.epochs = 2;
    c.train.batch_size = 8;
    c.train.val_fraction = 0.1;
    c.eval.batch_size = 16;
    c.sync_teacher();
    c
}

/// Central-difference gradient of `loss` with respect to every parameter.
pub fn numeric_grad<M: Params<f64> + Clone>(model: &M, h: f64, loss: impl Fn(&M) -> f64) -> Vec<f64> {
    let base = nn::flatten(model);
    let mut m = model.clone();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + h;
        nn::unflatten(&mut m, &p);
        let up = loss(&m);
        p[i] = base[i] - h;
        nn::unflatten(&mut m, &p);
        let down = loss(&m);
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// ‖a − b‖ / max(‖a‖, ‖b‖)
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    n(&d) / n(a).max(n(b)).max(1e-300)
}

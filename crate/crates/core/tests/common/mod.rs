#![allow(dead_code)]

use dhicm_core::autodiff::{Tape, Var};
use dhicm_core::gradcheck::{numeric_gradient, rel_error};
use dhicm_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Row-major `[r, k] x [k, c]` by triple loop.
pub fn matmul(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            for t in 0..k {
                out[i * c + j] += a[i * k + t] * b[t * c + j];
            }
        }
    }
    out
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest relative error between tape gradients and central differences of
/// `sum(f(inputs) * R)` for a fixed random weighting `R`.
pub fn grad_error(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> dhicm_core::Result<Var>) -> f64 {
    let weights = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&mut tape, &vars).unwrap();
        uniform(&mut rng(99), tape.shape(y), -1.0, 1.0)
    };
    let loss = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&mut tape, &vars).unwrap();
        let w = tape.mul_const(y, &weights).unwrap();
        let s = tape.sum(w);
        tape.value(s).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let y = f(&mut tape, &vars).unwrap();
    let w = tape.mul_const(y, &weights).unwrap();
    let s = tape.sum(w);
    tape.backward(s).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.numel()]);
        let numeric = numeric_gradient(input.data(), 1e-5, |x| {
            let mut vals = inputs.to_vec();
            vals[i] = Tensor::new(input.shape().to_vec(), x.to_vec()).unwrap();
            loss(&vals)
        });
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(rel_error(*a, *n));
        }
    }
    worst
}

/// A small experiment that trains in well under a second per epoch.
pub fn tiny_experiment(placement: bool, symbols: usize) -> dhicm_core::config::ExperimentConfig {
    use dhicm_core::config::{default_placement, ExperimentConfig, ModelConfig, TrainConfig};
    ExperimentConfig {
        model: ModelConfig {
            d_model: 16,
            heads: 2,
            d_m: 16,
            enc_layers: 1,
            dec_layers: 1,
            ffn_dim: 32,
            vocab_size: symbols + 4,
            max_len: 16,
            placement: if placement { default_placement() } else { vec![] },
            ..ModelConfig::default()
        },
        train: TrainConfig {
            lr: 2e-3,
            warmup: 20,
            max_tokens: 128,
            max_epochs: 3,
            ..TrainConfig::default()
        },
    }
}

pub fn tiny_splits(kind: dhicm_core::data::TaskKind, symbols: usize, train: usize) -> dhicm_core::data::Splits {
    let spec = dhicm_core::data::TaskSpec { kind, symbols, min_len: 3, max_len: 8, size: train, seed: 5 };
    dhicm_core::data::gen_splits(&spec, train, 30, 30).unwrap()
}

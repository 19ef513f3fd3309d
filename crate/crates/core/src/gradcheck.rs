//! Central finite-difference verification of tape gradients.

use serde::{Deserialize, Serialize};

use crate::config::{default_placement, ModelConfig};
use crate::data::{Batch, Pair};
use crate::error::Result;
use crate::losses::total_loss;
use crate::model::{ForwardOptions, Model};
use crate::autodiff::Tape;
use crate::training::compute_gradients;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central difference `(f(x + h) − f(x − h)) / 2h` for every coordinate.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Worst discrepancy found in one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Total training loss of `model` on `batch` with fixed dropout masks.
pub fn model_loss(model: &Model, batch: &Batch, opts: &ForwardOptions) -> Result<f64> {
    let cfg = model.config();
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let g = model.forward_graph(&mut tape, &vars, batch, opts)?;
    let loss = total_loss(&mut tape, g.logits, &batch.tgt_out, &g.records, cfg.label_smoothing, cfg.lambda)?;
    Ok(tape.value(loss.total).data()[0])
}

/// Compares analytic and finite-difference gradients of the total loss for
/// every element of every parameter.
pub fn check_model(model: &Model, batch: &Batch, opts: &ForwardOptions, h: f64, tolerance: f64) -> Result<GradCheckReport> {
    let (_, grads) = compute_gradients(model, batch, opts)?;
    let mut work = model.clone();
    let mut params = Vec::new();
    for (i, analytic) in grads.iter().enumerate() {
        let name = model.params().names()[i].clone();
        let base = model.params().get(i).data().to_vec();
        let mut failure = None;
        let numeric = numeric_gradient(&base, h, |x| {
            work.params_mut().get_mut(i).data_mut().copy_from_slice(x);
            match model_loss(&work, batch, opts) {
                Ok(v) => v,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        });
        work.params_mut().get_mut(i).data_mut().copy_from_slice(&base);
        if let Some(e) = failure {
            return Err(e);
        }
        let (mut worst, mut worst_index) = (0.0, 0);
        for (j, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
            let r = rel_error(a, n);
            if r > worst || r.is_nan() {
                worst = r;
                worst_index = j;
            }
        }
        params.push(ParamCheck {
            name,
            elements: base.len(),
            max_rel_error: worst,
            worst_index,
            analytic: analytic[worst_index],
            numeric: numeric[worst_index],
        });
    }
    let max_rel_error = params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error < tolerance,
        params,
        max_rel_error,
        tolerance,
    })
}

/// Tiny model with the head-importance layer at the default sites.
pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        heads: 2,
        d_m: 16,
        enc_layers: 1,
        dec_layers: 1,
        ffn_dim: 32,
        vocab_size: 12,
        max_len: 12,
        lambda: 0.1,
        placement: default_placement(),
        seed,
        ..ModelConfig::default()
    }
}

/// Two-sentence batch with padding on both sides.
pub fn tiny_batch(seed: u64) -> Batch {
    let pairs: [Pair; 2] = [
        (vec![4, 5 + (seed % 6) as usize, 6, 7], vec![8, 9, 10]),
        (vec![11, 4], vec![5, 6, 7, 8, 9]),
    ];
    Batch::from_pairs(&[&pairs[0], &pairs[1]], vec![0, 1])
}

/// Finite-difference check of the tiny model in training mode with fixed
/// dropout masks.
pub fn run_suite(seed: u64) -> Result<GradCheckReport> {
    let model = Model::new(tiny_config(seed))?;
    check_model(&model, &tiny_batch(seed), &ForwardOptions::train(seed), 1e-5, 1e-4)
}

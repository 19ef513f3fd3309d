//! Optimization loop: Adam with inverse-square-root warmup, gradient
//! clipping, per-epoch validation, early stopping, and resumable
//! checkpoints.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::HeadPruning;
use crate::autodiff::Tape;
use crate::bleu::corpus_bleu;
use crate::checkpoint::{Checkpoint, TrainState};
use crate::config::{ExperimentConfig, TrainConfig};
use crate::data::{batchify, Batch, ParallelCorpus, PAD};
use crate::decoding::{translate_corpus, DecodeOptions};
use crate::error::{Error, Result};
use crate::losses::{aggregate_kl, cross_entropy, total_loss, LossBreakdown};
use crate::model::{ForwardOptions, Model, ParamStore};
use crate::rng::{derive_index, derive_seed};

/// `base · min(step / warmup, √(warmup / step))` for 1-based `step`.
pub fn lr_schedule(step: u64, base: f64, warmup: u64) -> Result<f64> {
    if step == 0 || warmup == 0 {
        return Err(Error::Config("learning-rate step and warmup are 1-based".into()));
    }
    let (s, w) = (step as f64, warmup as f64);
    Ok(base * (s / w).min((w / s).sqrt()))
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping. A non-positive `max_norm` disables clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    norm
}

/// One bias-corrected Adam update; advances `state.step`. Parameters are
/// left untouched if any gradient is non-finite.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Vec<f64>],
    state: &mut TrainState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    for (name, g) in params.names().iter().zip(grads) {
        if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("{name} has gradient entry {bad}")));
        }
    }
    state.step += 1;
    let step = state.step;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    for (i, g) in grads.iter().enumerate() {
        let m = state.adam_m[i].data_mut();
        let v = state.adam_v[i].data_mut();
        let p = params.get_mut(i).data_mut();
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Outcome of feeding one validation score to [`EarlyStopping`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    NotImproved,
    Stop,
}

/// Stops after `patience` consecutive epochs without a strictly lower score.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: None, bad_epochs: 0 }
    }

    pub fn observe(&mut self, value: f64) -> Verdict {
        if self.best.map_or(true, |b| value < b) {
            self.best = Some(value);
            self.bad_epochs = 0;
            return Verdict::Improved;
        }
        self.bad_epochs += 1;
        if self.patience > 0 && self.bad_epochs >= self.patience {
            Verdict::Stop
        } else {
            Verdict::NotImproved
        }
    }
}

/// Teacher-forced evaluation summary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    /// Unsmoothed cross-entropy per target token.
    pub ce: f64,
    pub token_accuracy: f64,
    /// Token-weighted mean divergence of importances from uniform.
    pub kl: f64,
    pub tokens: usize,
}

/// Evaluates `model` on `corpus` without dropout.
pub fn evaluate(
    model: &Model,
    corpus: &ParallelCorpus,
    max_tokens: usize,
    pruning: Option<&HeadPruning>,
) -> Result<EvalStats> {
    let opts = ForwardOptions {
        pruning: pruning.cloned(),
        ..ForwardOptions::eval()
    };
    let (mut ce, mut kl, mut correct, mut tokens) = (0.0, 0.0, 0usize, 0usize);
    for batch in batchify(corpus, max_tokens)? {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        let g = model.forward_graph(&mut tape, &vars, &batch, &opts)?;
        let n = batch.target_tokens();
        let loss = cross_entropy(&mut tape, g.logits, &batch.tgt_out, 0.0)?;
        ce += tape.value(loss).data()[0] * n as f64;
        if let Some(k) = aggregate_kl(&mut tape, &g.records)? {
            kl += tape.value(k.mean).data()[0] * n as f64;
        }
        let logits = tape.value(g.logits);
        for (r, &t) in batch.tgt_out.iter().enumerate() {
            if t != PAD {
                let row = logits.row(r);
                let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                correct += usize::from(best == t);
            }
        }
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::Empty("evaluation corpus has no target tokens".into()));
    }
    Ok(EvalStats {
        ce: ce / tokens as f64,
        token_accuracy: correct as f64 / tokens as f64,
        kl: kl / tokens as f64,
        tokens,
    })
}

/// Loss and per-parameter gradients for one batch.
pub fn compute_gradients(
    model: &Model,
    batch: &Batch,
    opts: &ForwardOptions,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    let cfg = model.config();
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let g = model.forward_graph(&mut tape, &vars, batch, opts)?;
    let loss = total_loss(&mut tape, g.logits, &batch.tgt_out, &g.records, cfg.label_smoothing, cfg.lambda)?;
    let values = loss.values(&tape);
    tape.backward(loss.total)?;
    let grads = vars
        .iter()
        .zip(model.params().iter())
        .map(|(&v, (_, t))| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    Ok((values, grads))
}

/// Per-step training log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Per-epoch validation log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    #[serde(rename = "valid_L_c")]
    pub valid_ce: f64,
    #[serde(rename = "valid_L_KL")]
    pub valid_kl: f64,
    pub valid_accuracy: f64,
    pub bleu: Option<f64>,
    pub best_so_far: f64,
    pub improved: bool,
}

/// One line of `train_log.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepLog),
    Epoch(EpochLog),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    MaxSteps,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation cross-entropy seen.
    pub best: Model,
    /// Parameters after the final step.
    pub last: Model,
    pub best_valid: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
    pub steps: u64,
    pub stop: StopReason,
    /// Validation records of the epochs run in this call.
    pub epochs: Vec<EpochLog>,
}

/// File names inside a run directory.
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

/// Where and how a run is persisted.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    /// Continue from `last.ckpt` in `out_dir`.
    pub resume: bool,
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    dir: Option<&'a Path>,
}

impl Run<'_> {
    fn save(&self, name: &str, model: &Model, state: Option<&TrainState>) -> Result<()> {
        if let Some(dir) = self.dir {
            Checkpoint::from_model(self.cfg, model, state.cloned()).save(&dir.join(name))?;
        }
        Ok(())
    }

    fn log(&self, lines: &[LogRecord]) -> Result<()> {
        if let Some(dir) = self.dir {
            let mut text = String::new();
            for rec in lines {
                text.push_str(&serde_json::to_string(rec)?);
                text.push('\n');
            }
            let mut f = OpenOptions::new().create(true).append(true).open(dir.join(TRAIN_LOG))?;
            f.write_all(text.as_bytes())?;
        }
        Ok(())
    }
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_index(derive_seed(seed, "shuffle"), epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// Trains a model from scratch or resumes a saved run.
///
/// With an output directory, `best.ckpt` is rewritten whenever validation
/// improves and `last.ckpt` (with optimizer state) after every epoch and at a
/// step cap. Non-finite losses or gradients abort with
/// [`Error::Diverged`] after the best checkpoint has been kept.
pub fn train(
    cfg: &ExperimentConfig,
    train_set: &ParallelCorpus,
    valid_set: &ParallelCorpus,
    run: &RunOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    train_set.validate(cfg.model.vocab_size)?;
    valid_set.validate(cfg.model.vocab_size)?;
    let tc = &cfg.train;
    if let Some(dir) = &run.out_dir {
        fs::create_dir_all(dir)?;
    }
    let ctx = Run { cfg, dir: run.out_dir.as_deref() };

    let (mut model, mut state, mut best_model) = match (&run.out_dir, run.resume) {
        (Some(dir), true) => {
            let last = Checkpoint::load(&dir.join(LAST_CHECKPOINT))?;
            if last.config.model != cfg.model {
                return Err(Error::Config("model config differs from the checkpoint being resumed".into()));
            }
            let state = last
                .state
                .clone()
                .ok_or_else(|| Error::Checkpoint("checkpoint has no training state".into()))?;
            let model = last.model()?;
            let best_path = dir.join(BEST_CHECKPOINT);
            let best = if best_path.exists() { Checkpoint::load(&best_path)?.model()? } else { model.clone() };
            (model, state, best)
        }
        (dir, _) => {
            if let Some(dir) = dir {
                let _ = fs::remove_file(dir.join(TRAIN_LOG));
            }
            let model = Model::new(cfg.model.clone())?;
            let state = TrainState::fresh(&model);
            (model.clone(), state, model)
        }
    };

    let batches = batchify(train_set, tc.max_tokens)?;
    let seed = cfg.model.seed;
    let dropout_base = derive_seed(seed, "dropout");
    let mut stopper = EarlyStopping {
        patience: tc.patience,
        best: state.best_valid,
        bad_epochs: state.bad_epochs,
    };
    let mut epochs = Vec::new();
    let mut epochs_run = state.epoch;
    let mut stop = StopReason::MaxEpochs;

    'epochs: while state.epoch < tc.max_epochs {
        let order = epoch_order(seed, state.epoch, batches.len());
        let mut pending: Vec<LogRecord> = Vec::new();
        while state.batch_in_epoch < order.len() {
            if tc.max_steps > 0 && state.step >= tc.max_steps {
                stop = StopReason::MaxSteps;
                ctx.log(&pending)?;
                ctx.save(LAST_CHECKPOINT, &model, Some(&state))?;
                break 'epochs;
            }
            let batch = &batches[order[state.batch_in_epoch]];
            let step = state.step + 1;
            let opts = ForwardOptions::train(derive_index(dropout_base, step));
            let (loss, mut grads) = compute_gradients(&model, batch, &opts)?;
            let grad_norm = clip_grad_norm(&mut grads, tc.clip_norm);
            if !loss.total.is_finite() || !grad_norm.is_finite() {
                ctx.log(&pending)?;
                return Err(Error::Diverged { step, loss: loss.total });
            }
            let lr = lr_schedule(step, tc.lr, tc.warmup)?;
            adam_step(model.params_mut(), &grads, &mut state, tc, lr)?;
            state.batch_in_epoch += 1;
            pending.push(LogRecord::Step(StepLog {
                step,
                epoch: state.epoch,
                loss,
                lr,
                grad_norm,
            }));
        }

        let valid = evaluate(&model, valid_set, tc.max_tokens, None)?;
        let bleu = if tc.valid_bleu {
            let opts = DecodeOptions { beam: 1, alpha: tc.length_penalty, pruning: None };
            let hyps = translate_corpus(&model, valid_set, &opts)?;
            let refs: Vec<Vec<usize>> = valid_set.pairs.iter().map(|(_, t)| t.clone()).collect();
            Some(corpus_bleu(&hyps, &refs, 4)?.bleu)
        } else {
            None
        };
        let verdict = stopper.observe(valid.ce);
        if verdict == Verdict::Improved {
            best_model = model.clone();
            state.best_epoch = Some(state.epoch);
            ctx.save(BEST_CHECKPOINT, &model, None)?;
        }
        let rec = EpochLog {
            epoch: state.epoch,
            step: state.step,
            valid_ce: valid.ce,
            valid_kl: valid.kl,
            valid_accuracy: valid.token_accuracy,
            bleu,
            best_so_far: stopper.best.unwrap_or(valid.ce),
            improved: verdict == Verdict::Improved,
        };
        log::info!(
            "epoch {} step {} valid_L_c {:.4} acc {:.4}",
            rec.epoch,
            rec.step,
            rec.valid_ce,
            rec.valid_accuracy
        );
        pending.push(LogRecord::Epoch(rec.clone()));
        ctx.log(&pending)?;
        epochs.push(rec);
        state.epoch += 1;
        state.batch_in_epoch = 0;
        state.best_valid = stopper.best;
        state.bad_epochs = stopper.bad_epochs;
        epochs_run = state.epoch;
        ctx.save(LAST_CHECKPOINT, &model, Some(&state))?;
        if verdict == Verdict::Stop {
            stop = StopReason::Patience;
            break;
        }
    }

    Ok(TrainOutcome {
        best: best_model,
        last: model,
        best_valid: state.best_valid,
        best_epoch: state.best_epoch,
        epochs_run,
        steps: state.step,
        stop,
        epochs,
    })
}

/// Reads a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

//! Two-phase grid search: architecture first with regularization at its
//! base values, then regularization at the best architecture.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::bleu::corpus_bleu;
use crate::config::ExperimentConfig;
use crate::data::ParallelCorpus;
use crate::decoding::{translate_corpus, DecodeOptions};
use crate::error::{Error, Result};
use crate::training::{train, RunOptions};

/// Candidate values per phase. Empty regularization lists fall back to the
/// base config's value.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub ffn_dim: Vec<usize>,
    pub heads: Vec<usize>,
    pub dropout: Vec<f64>,
    pub attention_dropout: Vec<f64>,
    pub activation_dropout: Vec<f64>,
    pub dhicm_dropout: Vec<f64>,
    pub label_smoothing: Vec<f64>,
    /// Maximum number of trials; `None` means exactly what the grid needs.
    pub budget: Option<usize>,
    /// Per-trial epoch cap.
    pub epochs: usize,
    pub seed: u64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            ffn_dim: vec![64, 128, 256],
            heads: vec![2, 4, 8],
            dropout: vec![0.0, 0.1, 0.3, 0.5],
            attention_dropout: vec![],
            activation_dropout: vec![],
            dhicm_dropout: vec![],
            label_smoothing: vec![0.1, 0.4],
            budget: None,
            epochs: 30,
            seed: 1,
        }
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`"))))
        .collect()
}

impl GridSpec {
    /// Parses `key = v1,v2,...` lines; unspecified keys keep their defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut g = GridSpec::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "ffn_dim" => g.ffn_dim = parse_list(k, v)?,
                "heads" => g.heads = parse_list(k, v)?,
                "dropout" => g.dropout = parse_list(k, v)?,
                "attention_dropout" => g.attention_dropout = parse_list(k, v)?,
                "activation_dropout" => g.activation_dropout = parse_list(k, v)?,
                "dhicm_dropout" => g.dhicm_dropout = parse_list(k, v)?,
                "label_smoothing" => g.label_smoothing = parse_list(k, v)?,
                "budget" => g.budget = Some(parse_list(k, v)?.pop().unwrap_or(0)),
                "epochs" => g.epochs = parse_list(k, v)?.pop().unwrap_or(0),
                "seed" => g.seed = parse_list(k, v)?.pop().unwrap_or(0),
                _ => return Err(Error::Config(format!("line {}: unknown grid key `{k}`", n + 1))),
            }
        }
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&fs::read_to_string(path)?)
    }

    pub fn validate(&self, base: &ExperimentConfig) -> Result<()> {
        if self.ffn_dim.is_empty() || self.heads.is_empty() {
            return Err(Error::Config("architecture grid must be non-empty".into()));
        }
        if let Some(&h) = self.heads.iter().find(|&&h| h == 0 || base.model.d_model % h != 0) {
            return Err(Error::Config(format!("{h} heads do not divide d_model {}", base.model.d_model)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("per-trial epoch cap must be >= 1".into()));
        }
        let needed = self.phase1_len() + self.phase2_len();
        if let Some(b) = self.budget {
            if b < needed {
                return Err(Error::Config(format!("budget {b} is below the {needed} trials the grid needs")));
            }
        }
        Ok(())
    }

    pub fn phase1_len(&self) -> usize {
        self.ffn_dim.len() * self.heads.len()
    }

    pub fn phase2_len(&self) -> usize {
        [
            &self.dropout,
            &self.attention_dropout,
            &self.activation_dropout,
            &self.dhicm_dropout,
            &self.label_smoothing,
        ]
        .iter()
        .map(|l| l.len().max(1))
        .product()
    }
}

/// Hyperparameters that vary across trials, in results-table order.
pub const HYPER_KEYS: [&str; 7] = [
    "ffn_dim",
    "heads",
    "dropout",
    "attention_dropout",
    "activation_dropout",
    "dhicm_dropout",
    "label_smoothing",
];

fn hyper_values(cfg: &ExperimentConfig) -> Vec<String> {
    let m = &cfg.model;
    vec![
        m.ffn_dim.to_string(),
        m.heads.to_string(),
        format!("{:?}", m.dropout),
        format!("{:?}", m.attention_dropout),
        format!("{:?}", m.activation_dropout),
        format!("{:?}", m.dhicm_dropout),
        format!("{:?}", m.label_smoothing),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub id: String,
    pub phase: u8,
    pub config: ExperimentConfig,
}

/// Metrics a finished trial reports.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrialMetrics {
    pub valid_ce: f64,
    pub valid_bleu: Option<f64>,
    pub epochs_run: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Ok,
    Failed,
}

/// One row of the results table.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialRecord {
    pub id: String,
    pub phase: u8,
    pub hyper: Vec<String>,
    pub valid_ce: f64,
    pub valid_bleu: Option<f64>,
    pub epochs_run: usize,
    pub status: TrialStatus,
}

/// Runs one trial. Implementations must be callable from several threads.
pub trait TrialRunner: Sync {
    fn run(&self, trial: &Trial) -> Result<TrialMetrics>;
}

/// Trains each trial on a corpus pair and scores it on the validation set.
pub struct TrainRunner<'a> {
    pub train: &'a ParallelCorpus,
    pub valid: &'a ParallelCorpus,
    /// Per-trial run directories are created under this path when set.
    pub out_dir: Option<PathBuf>,
    /// Also decode the validation set greedily and report BLEU.
    pub bleu: bool,
}

impl TrialRunner for TrainRunner<'_> {
    fn run(&self, trial: &Trial) -> Result<TrialMetrics> {
        let run = RunOptions {
            out_dir: self.out_dir.as_ref().map(|d| d.join(&trial.id)),
            resume: false,
        };
        let out = train(&trial.config, self.train, self.valid, &run)?;
        let valid_bleu = if self.bleu {
            let opts = DecodeOptions { beam: 1, ..DecodeOptions::default() };
            let hyps = translate_corpus(&out.best, self.valid, &opts)?;
            let refs: Vec<Vec<usize>> = self.valid.pairs.iter().map(|(_, t)| t.clone()).collect();
            Some(corpus_bleu(&hyps, &refs, 4)?.bleu)
        } else {
            None
        };
        Ok(TrialMetrics {
            valid_ce: out.best_valid.unwrap_or(f64::INFINITY),
            valid_bleu,
            epochs_run: out.epochs_run,
        })
    }
}

/// Phase-1 trials: every (ffn_dim, heads) pair with base regularization.
pub fn phase1_trials(base: &ExperimentConfig, spec: &GridSpec) -> Vec<Trial> {
    let mut out = Vec::new();
    for &ffn in &spec.ffn_dim {
        for &heads in &spec.heads {
            let mut config = base.clone();
            config.model.ffn_dim = ffn;
            config.model.heads = heads;
            config.model.seed = spec.seed;
            config.train.max_epochs = spec.epochs;
            out.push(Trial {
                id: format!("p1-{:03}", out.len()),
                phase: 1,
                config,
            });
        }
    }
    out
}

/// Phase-2 trials: the regularization grid on top of `arch`.
pub fn phase2_trials(arch: &ExperimentConfig, spec: &GridSpec) -> Vec<Trial> {
    let or_base = |l: &[f64], v: f64| if l.is_empty() { vec![v] } else { l.to_vec() };
    let m = &arch.model;
    let mut out = Vec::new();
    for &dropout in &or_base(&spec.dropout, m.dropout) {
        for &attention_dropout in &or_base(&spec.attention_dropout, m.attention_dropout) {
            for &activation_dropout in &or_base(&spec.activation_dropout, m.activation_dropout) {
                for &dhicm_dropout in &or_base(&spec.dhicm_dropout, m.dhicm_dropout) {
                    for &label_smoothing in &or_base(&spec.label_smoothing, m.label_smoothing) {
                        let mut config = arch.clone();
                        let c = &mut config.model;
                        c.dropout = dropout;
                        c.attention_dropout = attention_dropout;
                        c.activation_dropout = activation_dropout;
                        c.dhicm_dropout = dhicm_dropout;
                        c.label_smoothing = label_smoothing;
                        out.push(Trial {
                            id: format!("p2-{:03}", out.len()),
                            phase: 2,
                            config,
                        });
                    }
                }
            }
        }
    }
    out
}

/// Results-table file name inside the search directory.
pub const RESULTS_FILE: &str = "results.csv";

fn header() -> String {
    let mut cols = vec!["trial_id", "phase"];
    cols.extend(HYPER_KEYS);
    cols.extend(["valid_L_c", "valid_BLEU", "epochs_run", "status"]);
    cols.join(",")
}

fn format_row(r: &TrialRecord) -> String {
    let mut cols = vec![r.id.clone(), r.phase.to_string()];
    cols.extend(r.hyper.iter().cloned());
    cols.push(format!("{:?}", r.valid_ce));
    cols.push(r.valid_bleu.map_or_else(String::new, |b| format!("{b:?}")));
    cols.push(r.epochs_run.to_string());
    cols.push(match r.status {
        TrialStatus::Ok => "ok".into(),
        TrialStatus::Failed => "failed".into(),
    });
    cols.join(",")
}

/// Reads a results table written by [`grid_search`].
pub fn read_results(path: &Path) -> Result<Vec<TrialRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let f: Vec<&str> = rec.iter().collect();
        let n = HYPER_KEYS.len();
        if f.len() != n + 6 {
            return Err(Error::Data(format!("malformed results row in {}", path.display())));
        }
        let bad = || Error::Data(format!("malformed results row in {}", path.display()));
        out.push(TrialRecord {
            id: f[0].to_string(),
            phase: f[1].parse().map_err(|_| bad())?,
            hyper: f[2..2 + n].iter().map(|s| s.to_string()).collect(),
            valid_ce: f[2 + n].parse().map_err(|_| bad())?,
            valid_bleu: if f[3 + n].is_empty() { None } else { Some(f[3 + n].parse().map_err(|_| bad())?) },
            epochs_run: f[4 + n].parse().map_err(|_| bad())?,
            status: match f[5 + n] {
                "ok" => TrialStatus::Ok,
                "failed" => TrialStatus::Failed,
                _ => return Err(bad()),
            },
        });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub best: ExperimentConfig,
    pub best_trial: String,
    /// Every trial of both phases in id order.
    pub trials: Vec<TrialRecord>,
    /// Trials taken from an existing results table instead of being run.
    pub reused: usize,
}

struct Table {
    path: Option<PathBuf>,
    cached: HashMap<String, TrialRecord>,
    lock: Mutex<()>,
}

impl Table {
    fn append(&self, r: &TrialRecord) -> Result<()> {
        if let Some(p) = &self.path {
            let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
            let mut f = OpenOptions::new().append(true).open(p)?;
            f.write_all(format!("{}\n", format_row(r)).as_bytes())?;
            f.sync_data()?;
        }
        Ok(())
    }
}

fn run_phase(trials: &[Trial], runner: &dyn TrialRunner, table: &Table, workers: usize) -> Result<(Vec<TrialRecord>, usize)> {
    let slots: Vec<Mutex<Option<TrialRecord>>> = trials.iter().map(|_| Mutex::new(None)).collect();
    let mut todo = Vec::new();
    let mut reused = 0;
    for (i, t) in trials.iter().enumerate() {
        let hyper = hyper_values(&t.config);
        match table.cached.get(&t.id) {
            Some(r) if r.hyper == hyper && r.phase == t.phase => {
                *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(r.clone());
                reused += 1;
            }
            _ => todo.push(i),
        }
    }
    let next = AtomicUsize::new(0);
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..workers.max(1).min(todo.len().max(1)) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&i) = todo.get(k) else { break };
                let t = &trials[i];
                let rec = match runner.run(t) {
                    Ok(m) if m.valid_ce.is_finite() => TrialRecord {
                        id: t.id.clone(),
                        phase: t.phase,
                        hyper: hyper_values(&t.config),
                        valid_ce: m.valid_ce,
                        valid_bleu: m.valid_bleu,
                        epochs_run: m.epochs_run,
                        status: TrialStatus::Ok,
                    },
                    other => {
                        if let Err(e) = &other {
                            log::warn!("trial {} failed: {e}", t.id);
                        }
                        TrialRecord {
                            id: t.id.clone(),
                            phase: t.phase,
                            hyper: hyper_values(&t.config),
                            valid_ce: f64::INFINITY,
                            valid_bleu: None,
                            epochs_run: other.map_or(0, |m| m.epochs_run),
                            status: TrialStatus::Failed,
                        }
                    }
                };
                if let Err(e) = table.append(&rec) {
                    *failure.lock().unwrap_or_else(|e| e.into_inner()) = Some(e);
                }
                *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(rec);
            });
        }
    });
    if let Some(e) = failure.into_inner().unwrap_or_else(|e| e.into_inner()) {
        return Err(e);
    }
    let records = slots
        .into_iter()
        .map(|m| m.into_inner().unwrap_or_else(|e| e.into_inner()).expect("every trial ran"))
        .collect();
    Ok((records, reused))
}

/// Index of the lowest validation loss; ties go to the earlier trial.
fn argmin(records: &[TrialRecord]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in records.iter().enumerate() {
        if r.status == TrialStatus::Ok && best.map_or(true, |b| r.valid_ce < records[b].valid_ce) {
            best = Some(i);
        }
    }
    best
}

/// Runs the two-phase search. With `out_dir`, results are appended to
/// `results.csv` as trials finish and completed trials found there are
/// reused instead of rerun.
pub fn grid_search(
    base: &ExperimentConfig,
    spec: &GridSpec,
    runner: &dyn TrialRunner,
    out_dir: Option<&Path>,
    workers: usize,
) -> Result<SearchOutcome> {
    spec.validate(base)?;
    let path = out_dir.map(|d| d.join(RESULTS_FILE));
    let mut cached = HashMap::new();
    if let Some(p) = &path {
        fs::create_dir_all(p.parent().expect("results path has a parent"))?;
        if p.exists() {
            for r in read_results(p)? {
                cached.insert(r.id.clone(), r);
            }
        } else {
            fs::write(p, header() + "\n")?;
        }
    }
    let table = Table {
        path,
        cached,
        lock: Mutex::new(()),
    };

    let p1 = phase1_trials(base, spec);
    let (r1, reused1) = run_phase(&p1, runner, &table, workers)?;
    let a = argmin(&r1).ok_or_else(|| Error::Config("every architecture trial failed".into()))?;
    let p2 = phase2_trials(&p1[a].config, spec);
    let (r2, reused2) = run_phase(&p2, runner, &table, workers)?;
    let b = argmin(&r2).ok_or_else(|| Error::Config("every regularization trial failed".into()))?;
    let mut trials = r1;
    trials.extend(r2);
    Ok(SearchOutcome {
        best: p2[b].config.clone(),
        best_trial: p2[b].id.clone(),
        trials,
        reused: reused1 + reused2,
    })
}

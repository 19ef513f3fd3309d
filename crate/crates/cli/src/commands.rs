//! Subcommand implementations. Each returns the process exit code.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use dhicm_core::analysis::{
    dump_encdec_attention, dump_head_importance, mean_importance_entropy, prune_and_eval, rank_heads_on_corpus,
    HeadSelection,
};
use dhicm_core::attention::{AttentionKind, HeadPruning, SiteId};
use dhicm_core::checkpoint::Checkpoint;
use dhicm_core::config::{default_placement, ExperimentConfig};
use dhicm_core::data::{gen_splits, ParallelCorpus, Split, TaskKind, TaskSpec, Vocab};
use dhicm_core::decoding::{bleu_on_corpus, translate, DecodeOptions};
use dhicm_core::gradcheck::run_suite;
use dhicm_core::hypersearch::{grid_search, GridSpec, TrainRunner, RESULTS_FILE};
use dhicm_core::model::Model;
use dhicm_core::training::{evaluate as teacher_forced, train as train_model, RunOptions, BEST_CHECKPOINT, LAST_CHECKPOINT, TRAIN_LOG};
use serde_json::json;

use crate::manifest::{manifest_path, refuse_completed, write_atomic, RunManifest, RunStatus};
use crate::{ConfigArgs, EXIT_CHECK_FAILED};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const TASK_FILE: &str = "task.txt";
pub const CONFIG_FILE: &str = "config.txt";

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse().map_err(|_| anyhow!("invalid list element `{v}`")))
        .collect()
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        _ => bail!("unknown split `{s}` (train|valid|test)"),
    }
}

fn split_for(name: &str) -> Split {
    match name {
        "valid" => Split::Valid,
        "test" => Split::Test,
        _ => Split::Train,
    }
}

/// Base config from file and overrides, before data-dependent fields.
fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    for s in &args.set {
        cfg.apply_override(s)?;
    }
    if let Some(seed) = args.seed {
        cfg.model.seed = seed;
    }
    Ok(cfg)
}

fn read_task_file(dir: &Path) -> BTreeMap<String, String> {
    fs::read_to_string(dir.join(TASK_FILE))
        .map(|text| {
            text.lines()
                .filter_map(|l| l.split_once('='))
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .collect()
        })
        .unwrap_or_default()
}

/// A corpus directory: vocabulary plus `<name>.src/.tgt` files.
struct DataDir {
    dir: PathBuf,
    vocab: Vocab,
}

impl DataDir {
    fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(VOCAB_FILE);
        let vocab = Vocab::load(&path).with_context(|| format!("loading {}", path.display()))?;
        Ok(DataDir { dir: dir.to_path_buf(), vocab })
    }

    fn corpus(&self, name: &str, m: &mut RunManifest) -> Result<ParallelCorpus> {
        let c = ParallelCorpus::load(&self.dir, name, split_for(name), &self.vocab)
            .with_context(|| format!("loading corpus `{name}` from {}", self.dir.display()))?;
        m.input(&self.dir.join(format!("{name}.src")))?;
        m.input(&self.dir.join(format!("{name}.tgt")))?;
        Ok(c)
    }

    fn record(&self, m: &mut RunManifest) -> Result<()> {
        m.input(&self.dir.join(VOCAB_FILE))?;
        m.corpus_spec = read_task_file(&self.dir);
        Ok(())
    }
}

/// A loaded checkpoint with the vocabulary stored beside it, if any.
struct Loaded {
    ckpt: Checkpoint,
    model: Model,
    vocab: Option<Vocab>,
}

fn load_checkpoint(path: &Path, m: &mut RunManifest) -> Result<Loaded> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let model = ckpt.model()?;
    m.input(path)?;
    m.checkpoints.push(path.display().to_string());
    m.config = Some(ckpt.config.to_kv());
    m.seed = Some(ckpt.config.model.seed);
    let side = path.parent().unwrap_or(Path::new(".")).join(VOCAB_FILE);
    let vocab = if side.exists() { Some(Vocab::load(&side)?) } else { None };
    Ok(Loaded { ckpt, model, vocab })
}

fn decode_options(cfg: &ExperimentConfig, beam: Option<usize>) -> DecodeOptions {
    DecodeOptions {
        beam: beam.unwrap_or(cfg.train.beam),
        alpha: cfg.train.length_penalty,
        pruning: None,
    }
}

/// Writes a JSON result file, records it in the manifest, and echoes it.
fn emit_json(value: &serde_json::Value, out: &Path, m: &mut RunManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    write_atomic(out, text.as_bytes())?;
    m.output(out)?;
    print!("{text}");
    Ok(())
}

fn finish(mut m: RunManifest, path: &Path, summary: serde_json::Value) -> Result<u8> {
    m.status = RunStatus::Complete;
    m.summary = Some(summary);
    m.save(path)?;
    Ok(0)
}

fn default_out(ckpt: &Path, name: &str) -> PathBuf {
    ckpt.parent().unwrap_or(Path::new(".")).join(name)
}

// ---------------------------------------------------------------- gen-data

#[derive(Args, Debug)]
pub struct GenData {
    #[arg(long, value_parser = |s: &str| s.parse::<TaskKind>().map_err(|e| e.to_string()))]
    pub task: TaskKind,
    /// Nested training-set sizes; `train` is the largest.
    #[arg(long, default_value = "500,1000,2000,5000")]
    pub sizes: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Content symbols in the vocabulary.
    #[arg(long, default_value_t = 32)]
    pub symbols: usize,
    #[arg(long, default_value_t = 3)]
    pub min_len: usize,
    #[arg(long, default_value_t = 10)]
    pub max_len: usize,
    #[arg(long, default_value_t = 200)]
    pub valid: usize,
    #[arg(long, default_value_t = 200)]
    pub test: usize,
}

/// Generated corpus directory layout shared by `gen-data` and `size-sweep`.
fn write_corpora(a: &GenData, m: &mut RunManifest) -> Result<Vec<usize>> {
    let mut sizes: Vec<usize> = parse_list(&a.sizes)?;
    sizes.sort_unstable();
    sizes.dedup();
    let largest = *sizes.last().ok_or_else(|| anyhow!("--sizes is empty"))?;
    let spec = TaskSpec {
        kind: a.task,
        symbols: a.symbols,
        min_len: a.min_len,
        max_len: a.max_len,
        size: largest,
        seed: a.seed,
    };
    spec.validate()?;
    let splits = gen_splits(&spec, largest, a.valid, a.test)?;
    let vocab = spec.vocab();
    fs::create_dir_all(&a.out)?;
    vocab.save(&a.out.join(VOCAB_FILE))?;
    let mut task = String::new();
    let mut put = |k: &str, v: String| {
        let _ = writeln!(task, "{k} = {v}");
        m.corpus_spec.insert(k.to_string(), v);
    };
    put("task", a.task.to_string());
    put("symbols", a.symbols.to_string());
    put("min_len", a.min_len.to_string());
    put("max_len", a.max_len.to_string());
    put("seed", a.seed.to_string());
    put("sizes", sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
    put("valid", a.valid.to_string());
    put("test", a.test.to_string());
    write_atomic(&a.out.join(TASK_FILE), task.as_bytes())?;
    let mut names = vec![("train".to_string(), splits.train.clone())];
    names.extend(sizes.iter().map(|&n| (format!("train-{n}"), splits.train.prefix(n))));
    names.push(("valid".into(), splits.valid));
    names.push(("test".into(), splits.test));
    for (name, corpus) in &names {
        corpus.save(&a.out, name, &vocab)?;
        m.output(&a.out.join(format!("{name}.src")))?;
        m.output(&a.out.join(format!("{name}.tgt")))?;
    }
    m.output(&a.out.join(VOCAB_FILE))?;
    m.seed = Some(a.seed);
    Ok(sizes)
}

pub fn gen_data(a: GenData) -> Result<u8> {
    let mpath = manifest_path(&a.out, true);
    refuse_completed(&mpath, "choose a new --out directory")?;
    let mut m = RunManifest::new("gen-data");
    m.save(&mpath)?;
    let sizes = write_corpora(&a, &mut m)?;
    log::info!("wrote {} corpus into {}", a.task, a.out.display());
    finish(m, &mpath, json!({ "sizes": sizes, "valid": a.valid, "test": a.test }))
}

// ------------------------------------------------------------------- train

#[derive(Args, Debug)]
pub struct Train {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Plain multi-head attention everywhere.
    #[arg(long, conflicts_with = "dhicm")]
    pub baseline: bool,
    /// Head-importance layer at the default sites unless a placement is set.
    #[arg(long)]
    pub dhicm: bool,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Training corpus name inside the data directory.
    #[arg(long, default_value = "train")]
    pub train_name: String,
    /// Continue an interrupted run from its last checkpoint.
    #[arg(long)]
    pub resume: bool,
}

pub fn train(a: Train) -> Result<u8> {
    let mpath = manifest_path(&a.out, true);
    let mut cfg = if a.resume {
        let saved = a.out.join(CONFIG_FILE);
        let mut cfg = ExperimentConfig::load(&saved).with_context(|| format!("resuming needs {}", saved.display()))?;
        for s in &a.config.set {
            cfg.apply_override(s)?;
        }
        cfg
    } else {
        refuse_completed(&mpath, "pass --resume to continue it or choose a new --out")?;
        load_config(&a.config)?
    };
    if a.baseline {
        cfg.model.placement.clear();
    } else if a.dhicm && cfg.model.placement.is_empty() {
        cfg.model.placement = default_placement();
    }
    if let Some(l) = a.lambda {
        cfg.model.lambda = l;
    }
    let data = DataDir::open(&a.data)?;
    cfg.model.vocab_size = data.vocab.len();
    cfg.validate()?;

    let mut m = RunManifest::new("train");
    data.record(&mut m)?;
    let train_c = data.corpus(&a.train_name, &mut m)?;
    let valid_c = data.corpus("valid", &mut m)?;
    m.seed = Some(cfg.model.seed);
    m.config = Some(cfg.to_kv());
    fs::create_dir_all(&a.out)?;
    write_atomic(&a.out.join(CONFIG_FILE), cfg.to_kv().as_bytes())?;
    data.vocab.save(&a.out.join(VOCAB_FILE))?;
    m.save(&mpath)?;

    let run = RunOptions { out_dir: Some(a.out.clone()), resume: a.resume };
    let outcome = match train_model(&cfg, &train_c, &valid_c, &run) {
        Ok(o) => o,
        Err(e) => {
            m.status = RunStatus::Failed;
            m.summary = Some(json!({ "error": e.to_string() }));
            m.save(&mpath)?;
            return Err(e.into());
        }
    };
    for name in [BEST_CHECKPOINT, LAST_CHECKPOINT] {
        let p = a.out.join(name);
        if p.exists() {
            m.checkpoints.push(p.display().to_string());
            m.output(&p)?;
        }
    }
    let log = a.out.join(TRAIN_LOG);
    m.logs.push(log.display().to_string());
    m.output(&log)?;
    let summary = json!({
        "best_valid_L_c": outcome.best_valid,
        "best_epoch": outcome.best_epoch,
        "epochs_run": outcome.epochs_run,
        "steps": outcome.steps,
        "stop": outcome.stop,
        "params": outcome.best.param_count(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    finish(m, &mpath, summary)
}

// ---------------------------------------------------------------- evaluate

#[derive(Args, Debug)]
pub struct Evaluate {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Beam width; defaults to the checkpoint config.
    #[arg(long)]
    pub beam: Option<usize>,
    /// Split decoded for BLEU.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Result JSON; defaults to `eval-<split>.json` beside the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn evaluate(a: Evaluate) -> Result<u8> {
    parse_split(&a.split)?;
    let out = a.out.clone().unwrap_or_else(|| default_out(&a.ckpt, &format!("eval-{}.json", a.split)));
    let mpath = manifest_path(&out, false);
    let mut m = RunManifest::new("evaluate");
    let l = load_checkpoint(&a.ckpt, &mut m)?;
    let data = DataDir::open(&a.data)?;
    data.record(&mut m)?;
    let valid = data.corpus("valid", &mut m)?;
    let scored = data.corpus(&a.split, &mut m)?;
    let cfg = &l.ckpt.config;
    let stats = teacher_forced(&l.model, &valid, cfg.train.max_tokens, None)?;
    let opts = decode_options(cfg, a.beam);
    let bleu = bleu_on_corpus(&l.model, &scored, &opts)?;
    let result = json!({
        "checkpoint": a.ckpt.display().to_string(),
        "split": a.split,
        "beam": opts.beam,
        "bleu": bleu.bleu,
        "bleu_detail": bleu,
        "valid_L_c": stats.ce,
        "valid_L_KL": stats.kl,
        "valid_accuracy": stats.token_accuracy,
    });
    emit_json(&result, &out, &mut m)?;
    finish(m, &mpath, result)
}

// ------------------------------------------------------------------ decode

#[derive(Args, Debug)]
pub struct Decode {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// One space-separated source sentence per line.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub beam: Option<usize>,
    /// Hypotheses file; defaults to `<input>.hyp`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Vocabulary file when none is stored beside the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

pub fn decode(a: Decode) -> Result<u8> {
    let out = a.out.clone().unwrap_or_else(|| {
        let mut s = a.input.as_os_str().to_os_string();
        s.push(".hyp");
        PathBuf::from(s)
    });
    let mpath = manifest_path(&out, false);
    let mut m = RunManifest::new("decode");
    let l = load_checkpoint(&a.ckpt, &mut m)?;
    let vocab = match (&a.vocab, l.vocab) {
        (Some(p), _) => Vocab::load(p)?,
        (None, Some(v)) => v,
        (None, None) => bail!("no {VOCAB_FILE} beside {}; pass --vocab", a.ckpt.display()),
    };
    let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    m.input(&a.input)?;
    let opts = decode_options(&l.ckpt.config, a.beam);
    let mut hyps = String::new();
    for line in text.lines() {
        let src = vocab.encode(&line.split_whitespace().collect::<Vec<_>>());
        let hyp = if src.is_empty() { Vec::new() } else { translate(&l.model, &src, &opts)?.tokens };
        hyps.push_str(&vocab.detokenize(&hyp));
        hyps.push('\n');
    }
    write_atomic(&out, hyps.as_bytes())?;
    m.output(&out)?;
    let n = text.lines().count();
    log::info!("decoded {n} sentences into {}", out.display());
    finish(m, &mpath, json!({ "sentences": n, "beam": opts.beam }))
}

// ---------------------------------------------------------- dump-attention

#[derive(Args, Debug)]
pub struct DumpAttention {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 0)]
    pub sentence_id: usize,
    /// Site such as `dec.0.cross` or `enc.1.self`.
    #[arg(long)]
    pub site: String,
    #[arg(long)]
    pub out: PathBuf,
    /// `importance`, `attention`, or `auto` (importance where the site has it).
    #[arg(long, default_value = "auto")]
    pub kind: String,
    /// Attention head to export, or `avg`.
    #[arg(long, default_value = "avg")]
    pub head: String,
}

pub fn dump_attention(a: DumpAttention) -> Result<u8> {
    parse_split(&a.split)?;
    let site: SiteId = a.site.parse()?;
    let mpath = manifest_path(&a.out, false);
    let mut m = RunManifest::new("dump-attention");
    let l = load_checkpoint(&a.ckpt, &mut m)?;
    let data = DataDir::open(&a.data)?;
    data.record(&mut m)?;
    let corpus = data.corpus(&a.split, &mut m)?;
    let (src, tgt) = corpus
        .pairs
        .get(a.sentence_id)
        .ok_or_else(|| anyhow!("sentence {} out of range ({} in {})", a.sentence_id, corpus.len(), a.split))?;
    let has_importance = l.model.dhicm_sites().contains(&site);
    let importance = match a.kind.as_str() {
        "importance" => true,
        "attention" => false,
        "auto" => has_importance,
        k => bail!("unknown dump kind `{k}` (auto|importance|attention)"),
    };
    let mut dump = if importance {
        dump_head_importance(&l.model, src, tgt, Some(&data.vocab), site)?
    } else {
        if site.kind != AttentionKind::DecoderCross {
            bail!("attention dumps are defined for encoder-decoder sites (dec.N.cross), got {site}");
        }
        let heads = match a.head.as_str() {
            "avg" => HeadSelection::Average,
            h => HeadSelection::Head(h.parse().map_err(|_| anyhow!("invalid head `{h}`"))?),
        };
        dump_encdec_attention(&l.model, src, tgt, Some(&data.vocab), site.layer, heads)?
    };
    dump.checkpoint = Some(a.ckpt.display().to_string());
    dump.sentence = Some(a.sentence_id);
    dump.save(&a.out)?;
    m.output(&a.out)?;
    let [rows, cols] = dump.shape();
    log::info!("wrote {rows}x{cols} dump to {}", a.out.display());
    finish(
        m,
        &mpath,
        json!({ "kind": dump.kind, "site": site.to_string(), "shape": [rows, cols], "max_row_sum_error": dump.max_row_sum_error() }),
    )
}

// -------------------------------------------------------------- rank-heads

#[derive(Args, Debug)]
pub struct RankHeads {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub site: String,
    #[arg(long, default_value = "valid")]
    pub split: String,
    /// Ranking JSON; defaults to `rank-<site>.json` beside the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn rank_heads(a: RankHeads) -> Result<u8> {
    parse_split(&a.split)?;
    let site: SiteId = a.site.parse()?;
    let out = a.out.clone().unwrap_or_else(|| default_out(&a.ckpt, &format!("rank-{site}.json")));
    let mpath = manifest_path(&out, false);
    let mut m = RunManifest::new("rank-heads");
    let l = load_checkpoint(&a.ckpt, &mut m)?;
    let data = DataDir::open(&a.data)?;
    data.record(&mut m)?;
    let corpus = data.corpus(&a.split, &mut m)?;
    let ranking = rank_heads_on_corpus(&l.model, &corpus, site, l.ckpt.config.train.max_tokens)?;
    let entropy = mean_importance_entropy(&l.model, &corpus, l.ckpt.config.train.max_tokens)?;
    let result = json!({ "split": a.split, "ranking": ranking, "mean_importance_entropy": entropy });
    emit_json(&result, &out, &mut m)?;
    finish(m, &mpath, result)
}

// -------------------------------------------------------------- prune-eval

#[derive(Args, Debug)]
pub struct PruneEval {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub site: String,
    /// Comma-separated head indices to zero.
    #[arg(long)]
    pub heads: String,
    #[arg(long, default_value = "valid")]
    pub split: String,
    /// Keep the surviving importances as they are instead of rescaling them to sum to 1.
    #[arg(long)]
    pub no_renormalize: bool,
    /// Also decode with this beam width and report BLEU.
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn prune_eval(a: PruneEval) -> Result<u8> {
    parse_split(&a.split)?;
    let site: SiteId = a.site.parse()?;
    let heads: Vec<usize> = parse_list(&a.heads)?;
    let tag = heads.iter().map(|h| h.to_string()).collect::<Vec<_>>().join("-");
    let out = a.out.clone().unwrap_or_else(|| default_out(&a.ckpt, &format!("prune-{site}-{tag}.json")));
    let mpath = manifest_path(&out, false);
    let mut m = RunManifest::new("prune-eval");
    let l = load_checkpoint(&a.ckpt, &mut m)?;
    let data = DataDir::open(&a.data)?;
    data.record(&mut m)?;
    let corpus = data.corpus(&a.split, &mut m)?;
    let pruning = HeadPruning { site, heads, renormalize: !a.no_renormalize };
    let cfg = &l.ckpt.config;
    let decode = a.beam.map(|b| decode_options(cfg, Some(b)));
    let intact = teacher_forced(&l.model, &corpus, cfg.train.max_tokens, None)?;
    let report = prune_and_eval(&l.model, &pruning, &corpus, cfg.train.max_tokens, decode.as_ref())?;
    let result = json!({
        "split": a.split,
        "report": report,
        "intact_L_c": intact.ce,
        "delta_L_c": report.valid_ce - intact.ce,
    });
    emit_json(&result, &out, &mut m)?;
    finish(m, &mpath, result)
}

// --------------------------------------------------------------- gradcheck

#[derive(Args, Debug)]
pub struct Gradcheck {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Directory for the JSON report and manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn gradcheck(a: Gradcheck) -> Result<u8> {
    let report = run_suite(a.seed)?;
    for p in &report.params {
        println!("{:<28} {:>6} elements  max rel err {:.3e}", p.name, p.elements, p.max_rel_error);
    }
    let verdict = if report.passed { "PASS" } else { "FAIL" };
    println!("{verdict}: max relative error {:.3e} (tolerance {:.0e})", report.max_rel_error, report.tolerance);
    if let Some(dir) = &a.out {
        let mpath = manifest_path(dir, true);
        let mut m = RunManifest::new("gradcheck");
        m.seed = Some(a.seed);
        let path = dir.join("gradcheck.json");
        write_atomic(&path, (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
        m.output(&path)?;
        finish(m, &mpath, json!({ "passed": report.passed, "max_rel_error": report.max_rel_error }))?;
    }
    Ok(if report.passed { 0 } else { EXIT_CHECK_FAILED })
}

// -------------------------------------------------------------- gridsearch

#[derive(Args, Debug)]
pub struct Gridsearch {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Grid file: `key = v1,v2,...` lines.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value = "train")]
    pub train_name: String,
    /// Also decode the validation set greedily and record BLEU.
    #[arg(long)]
    pub bleu: bool,
    /// Reuse finished trials from an existing results table.
    #[arg(long)]
    pub resume: bool,
    /// Keep each trial's checkpoints and log under `<out>/trials/`.
    #[arg(long)]
    pub keep_trials: bool,
}

pub fn gridsearch(a: Gridsearch) -> Result<u8> {
    let mpath = manifest_path(&a.out, true);
    if !a.resume {
        refuse_completed(&mpath, "pass --resume to reuse it or choose a new --out")?;
        if a.out.join(RESULTS_FILE).exists() {
            bail!("{} exists; pass --resume to reuse finished trials", a.out.join(RESULTS_FILE).display());
        }
    }
    let spec = match &a.spec {
        Some(p) => GridSpec::load(p).with_context(|| format!("loading grid {}", p.display()))?,
        None => GridSpec::default(),
    };
    let mut base = load_config(&a.config)?;
    let data = DataDir::open(&a.data)?;
    base.model.vocab_size = data.vocab.len();
    base.validate()?;
    let mut m = RunManifest::new("gridsearch");
    data.record(&mut m)?;
    if let Some(p) = &a.spec {
        m.input(p)?;
    }
    let train_c = data.corpus(&a.train_name, &mut m)?;
    let valid_c = data.corpus("valid", &mut m)?;
    m.seed = Some(spec.seed);
    m.config = Some(base.to_kv());
    fs::create_dir_all(&a.out)?;
    m.status = RunStatus::Running;
    m.save(&mpath)?;
    let runner = TrainRunner {
        train: &train_c,
        valid: &valid_c,
        out_dir: a.keep_trials.then(|| a.out.join("trials")),
        bleu: a.bleu,
    };
    let outcome = grid_search(&base, &spec, &runner, Some(&a.out), a.workers.max(1))?;
    let best_path = a.out.join("best_config.txt");
    write_atomic(&best_path, outcome.best.to_kv().as_bytes())?;
    m.output(&a.out.join(RESULTS_FILE))?;
    m.output(&best_path)?;
    let failed = outcome.trials.iter().filter(|t| t.status != dhicm_core::hypersearch::TrialStatus::Ok).count();
    let summary = json!({
        "best_trial": outcome.best_trial,
        "trials": outcome.trials.len(),
        "reused": outcome.reused,
        "failed": failed,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    finish(m, &mpath, summary)
}

// -------------------------------------------------------------- size-sweep

#[derive(Args, Debug)]
pub struct SizeSweep {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value = "lexicon", value_parser = |s: &str| s.parse::<TaskKind>().map_err(|e| e.to_string()))]
    pub task: TaskKind,
    #[arg(long, default_value = "500,1000,2000")]
    pub sizes: String,
    /// Model seeds; each size is trained once per seed and variant.
    #[arg(long, default_value = "1,2,3")]
    pub seeds: String,
    /// Seed of the generated corpus.
    #[arg(long, default_value_t = 1)]
    pub data_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub symbols: usize,
    #[arg(long, default_value_t = 3)]
    pub min_len: usize,
    #[arg(long, default_value_t = 10)]
    pub max_len: usize,
    #[arg(long, default_value_t = 200)]
    pub valid: usize,
    #[arg(long, default_value_t = 200)]
    pub test: usize,
    /// Beam width for test BLEU; defaults to the config.
    #[arg(long)]
    pub beam: Option<usize>,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

pub fn size_sweep(a: SizeSweep) -> Result<u8> {
    let mpath = manifest_path(&a.out, true);
    let mut m = RunManifest::new("size-sweep");
    let data_dir = a.out.join("data");
    let data_manifest = manifest_path(&data_dir, true);
    let fresh_data = !data_manifest.exists() || RunManifest::load(&data_manifest)?.status != RunStatus::Complete;
    if fresh_data {
        let gen = GenData {
            task: a.task,
            sizes: a.sizes.clone(),
            seed: a.data_seed,
            out: data_dir.clone(),
            symbols: a.symbols,
            min_len: a.min_len,
            max_len: a.max_len,
            valid: a.valid,
            test: a.test,
        };
        let mut dm = RunManifest::new("gen-data");
        write_corpora(&gen, &mut dm)?;
        finish(dm, &data_manifest, json!({}))?;
    }
    let data = DataDir::open(&data_dir)?;
    data.record(&mut m)?;
    let sizes: Vec<usize> = parse_list(&a.sizes)?;
    let seeds: Vec<u64> = parse_list(&a.seeds)?;
    let mut base = load_config(&a.config)?;
    base.model.vocab_size = data.vocab.len();
    if base.model.placement.is_empty() {
        base.model.placement = default_placement();
    }
    base.validate()?;
    m.config = Some(base.to_kv());
    m.seed = Some(a.data_seed);
    m.save(&mpath)?;
    let valid_c = data.corpus("valid", &mut m)?;
    let test_c = data.corpus("test", &mut m)?;

    let mut rows = String::from("size,seed,variant,test_BLEU,valid_L_c,epochs_run\n");
    let mut table: BTreeMap<(usize, &str), Vec<f64>> = BTreeMap::new();
    for &size in &sizes {
        let train_c = data.corpus(&format!("train-{size}"), &mut m)?;
        for &seed in &seeds {
            for variant in ["baseline", "dhicm"] {
                let mut cfg = base.clone();
                cfg.model.seed = seed;
                if variant == "baseline" {
                    cfg.model.placement.clear();
                }
                let dir = a.out.join("runs").join(format!("{variant}-n{size}-s{seed}"));
                let run_manifest = manifest_path(&dir, true);
                let done = run_manifest.exists() && RunManifest::load(&run_manifest)?.status == RunStatus::Complete;
                let summary = if done {
                    log::info!("reusing {}", dir.display());
                    RunManifest::load(&run_manifest)?.summary.unwrap_or_default()
                } else {
                    log::info!("training {}", dir.display());
                    let mut rm = RunManifest::new("size-sweep/train");
                    rm.config = Some(cfg.to_kv());
                    rm.seed = Some(seed);
                    fs::create_dir_all(&dir)?;
                    write_atomic(&dir.join(CONFIG_FILE), cfg.to_kv().as_bytes())?;
                    data.vocab.save(&dir.join(VOCAB_FILE))?;
                    let run = RunOptions { out_dir: Some(dir.clone()), resume: false };
                    let outcome = train_model(&cfg, &train_c, &valid_c, &run)?;
                    let bleu = bleu_on_corpus(&outcome.best, &test_c, &decode_options(&cfg, a.beam))?;
                    rm.checkpoints.push(dir.join(BEST_CHECKPOINT).display().to_string());
                    rm.logs.push(dir.join(TRAIN_LOG).display().to_string());
                    rm.output(&dir.join(BEST_CHECKPOINT))?;
                    let summary = json!({
                        "test_BLEU": bleu.bleu,
                        "valid_L_c": outcome.best_valid,
                        "epochs_run": outcome.epochs_run,
                    });
                    finish(rm, &run_manifest, summary.clone())?;
                    summary
                };
                let bleu = summary["test_BLEU"].as_f64().ok_or_else(|| anyhow!("{} lacks test_BLEU", run_manifest.display()))?;
                let _ = writeln!(
                    rows,
                    "{size},{seed},{variant},{bleu:?},{:?},{}",
                    summary["valid_L_c"].as_f64().unwrap_or(f64::NAN),
                    summary["epochs_run"].as_u64().unwrap_or(0)
                );
                table.entry((size, variant)).or_default().push(bleu);
            }
        }
    }
    let runs_path = a.out.join("runs.csv");
    write_atomic(&runs_path, rows.as_bytes())?;
    let mut cmp = String::from("size,baseline_median_BLEU,dhicm_median_BLEU,delta,dhicm_ge_baseline\n");
    let mut wins = 0;
    for &size in &sizes {
        let b = median(table.get_mut(&(size, "baseline")).map(|v| v.as_mut_slice()).unwrap_or(&mut []));
        let d = median(table.get_mut(&(size, "dhicm")).map(|v| v.as_mut_slice()).unwrap_or(&mut []));
        wins += usize::from(d >= b);
        let _ = writeln!(cmp, "{size},{b:.4},{d:.4},{:.4},{}", d - b, d >= b);
    }
    let cmp_path = a.out.join("comparison.csv");
    write_atomic(&cmp_path, cmp.as_bytes())?;
    m.output(&runs_path)?;
    m.output(&cmp_path)?;
    print!("{cmp}");
    finish(m, &mpath, json!({ "sizes": sizes, "seeds": seeds, "dhicm_ge_baseline": wins }))
}

// -------------------------------------------------------------------- plot

#[derive(Args, Debug)]
pub struct Plot {
    /// Dump CSV written by `dump-attention`.
    #[arg(long)]
    pub dump: PathBuf,
    /// `.png` renders an image; any other extension writes a gnuplot matrix.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn plot(a: Plot) -> Result<u8> {
    let mpath = manifest_path(&a.out, false);
    let mut m = RunManifest::new("plot");
    m.input(&a.dump)?;
    crate::plot::render(&a.dump, &a.out)?;
    m.output(&a.out)?;
    finish(m, &mpath, json!({ "output": a.out.display().to_string() }))
}

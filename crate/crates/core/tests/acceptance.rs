//! End-to-end acceptance checks. Runs every criterion in order, prints one
//! PASS/FAIL line per criterion and exits non-zero if any fails.

mod common;

use std::collections::HashSet;
use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use common::{rng, softmax, uniform};
use dhicm_core::analysis::{mean_importance_entropy, prune_and_eval, rank_heads_on_corpus};
use dhicm_core::attention::{dhicm_importance, dhicm_scores, AttentionKind, DhicmParams, HeadOutputs, HeadPruning, SiteId};
use dhicm_core::bleu::corpus_bleu;
use dhicm_core::config::{default_placement, ExperimentConfig, ModelConfig, TrainConfig};
use dhicm_core::data::{gen_splits, Splits, TaskKind, TaskSpec};
use dhicm_core::decoding::{beam_search, bleu_on_corpus, greedy, DecodeOptions, Scorer, SearchSpec};
use dhicm_core::gradcheck::run_suite;
use dhicm_core::losses::{entropy, importance_row, kl_to_uniform, kl_uniform};
use dhicm_core::model::{count_dhicm_params, Model};
use dhicm_core::training::{evaluate, lr_schedule, train, EarlyStopping, RunOptions, TrainOutcome, Verdict};
use dhicm_core::{Result, Tape, Tensor};
use rand::Rng;

const SYMBOLS: usize = 32;
const SEEDS: [u64; 3] = [1, 2, 3];
const SIZES: [usize; 3] = [500, 1000, 2000];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn splits(kind: TaskKind, train: usize) -> Splits {
    let spec = TaskSpec { kind, symbols: SYMBOLS, min_len: 3, max_len: 10, size: train, seed: 1 };
    gen_splits(&spec, train, 200, 200).expect("corpus generation")
}

fn experiment(dhicm: bool, lambda: f64, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        model: ModelConfig {
            d_model: 32,
            heads: 4,
            d_m: 32,
            enc_layers: 1,
            dec_layers: 1,
            ffn_dim: 64,
            dropout: 0.1,
            label_smoothing: 0.1,
            lambda,
            placement: if dhicm { default_placement() } else { vec![] },
            vocab_size: SYMBOLS + 4,
            max_len: 32,
            seed,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            lr: 3e-3,
            warmup: 200,
            max_tokens: 384,
            max_epochs: 200,
            patience: 10,
            ..TrainConfig::default()
        },
    }
}

fn run(cfg: &ExperimentConfig, data: &Splits, train_size: usize) -> Result<TrainOutcome> {
    let t = Instant::now();
    let out = train(cfg, &data.train.prefix(train_size), &data.valid, &RunOptions::default())?;
    println!(
        "    trained n={train_size} seed={} sites={} lambda={}: {} epochs, {} steps, best valid L_c {:.4} ({:.0}s)",
        cfg.model.seed,
        cfg.model.placement.len(),
        cfg.model.lambda,
        out.epochs_run,
        out.steps,
        out.best_valid.unwrap_or(f64::NAN),
        t.elapsed().as_secs_f64()
    );
    Ok(out)
}

fn gradients() -> Result<Outcome> {
    let t = Instant::now();
    let report = run_suite(1)?;
    let secs = t.elapsed().as_secs_f64();
    let dhicm_checked = report.params.iter().filter(|p| p.name.contains(".dhicm.")).count();
    outcome(
        report.max_rel_error < 1e-4 && secs < 60.0 && dhicm_checked == 12,
        format!("max rel err {:.2e} over {} tensors ({dhicm_checked} second-level), {secs:.1}s", report.max_rel_error, report.params.len()),
    )
}

fn importance_invariants() -> Result<Outcome> {
    let mut r = rng(2);
    let mut worst = [0.0f64; 3];
    let mut range_ok = true;
    for i in 0..10_000 {
        let h = 2 + i % 15;
        let scale = [0.1, 1.0, 5.0, 20.0][i % 4];
        let scores: Vec<f64> = (0..h).map(|_| r.gen_range(-scale..scale)).collect();
        let row = importance_row(&scores);
        let ln_h = (h as f64).ln();
        worst[0] = worst[0].max((row.a.iter().sum::<f64>() - 1.0).abs());
        worst[1] = worst[1].max((row.kl - (ln_h - entropy(&row.a))).abs());
        worst[2] = worst[2].max((row.kl - kl_uniform(&softmax(&scores))).abs());
        range_ok &= row.kl >= 0.0 && row.kl < ln_h;
    }
    let constant_zero = (1..=16).all(|h| [-7.5, 0.0, 3.25, 1e3].iter().all(|&c| importance_row(&vec![c; h]).kl == 0.0));
    outcome(
        worst[0] <= 1e-6 && worst[1] <= 1e-9 && worst[2] <= 1e-9 && range_ok && constant_zero,
        format!(
            "sum err {:.1e}, identity err {:.1e}, oracle err {:.1e}, range ok {range_ok}, constant rows zero {constant_zero}",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn degenerate_heads() -> Result<Outcome> {
    let (mut worst_a, mut worst_kl) = (0.0f64, 0.0f64);
    for c in 0..100u64 {
        let mut r = rng(1000 + c);
        let h = 2 + (c % 7) as usize;
        let dk = 1 + (c % 5) as usize;
        let (m, d, dm) = (1 + (c % 4) as usize, h * dk, 3 + (c % 6) as usize);
        let x = uniform(&mut r, &[m, d], -2.0, 2.0);
        let one = uniform(&mut r, &[m, dk], -2.0, 2.0);
        let o: Vec<f64> = (0..m).flat_map(|i| one.data()[i * dk..(i + 1) * dk].repeat(h)).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let ov = tape.constant(Tensor::new(vec![m, h, dk], o)?);
        let heads = HeadOutputs { var: ov, positions: m, heads: h, d_k: dk };
        let mut p = |shape: &[usize]| tape.constant(uniform(&mut r, shape, -1.5, 1.5));
        let params = DhicmParams { w: p(&[dm, dk]), u: p(&[dm, d]), v: p(&[dm, dk]), ws: p(&[d, dm]), dropout: 0.0 };
        let s = dhicm_scores(&mut tape, xv, &heads, &params, false, 0)?;
        let a = dhicm_importance(&mut tape, s)?;
        for v in tape.value(a).data() {
            worst_a = worst_a.max((v - 1.0 / h as f64).abs());
        }
        for i in 0..m {
            let mask: Vec<bool> = (0..m).map(|j| j == i).collect();
            let kl = kl_to_uniform(&mut tape, s, &mask)?;
            worst_kl = worst_kl.max(tape.value(kl).data()[0].abs());
        }
    }
    outcome(worst_a <= 1e-9 && worst_kl < 1e-12, format!("max |a - 1/H| {worst_a:.1e}, max KL {worst_kl:.1e}"))
}

fn parameter_accounting() -> Result<Outcome> {
    let mut r = rng(4);
    let mut agree = 0;
    for _ in 0..20 {
        let heads = r.gen_range(1..6);
        let cfg = ModelConfig {
            d_model: heads * r.gen_range(1..6),
            heads,
            d_m: r.gen_range(1..20),
            enc_layers: r.gen_range(1..3),
            dec_layers: r.gen_range(1..3),
            ffn_dim: 8,
            vocab_size: 10,
            max_len: 4,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg.clone())?;
        let enumerated: usize =
            model.params().iter().filter(|(n, _)| n.contains(".dhicm.")).map(|(_, t)| t.numel()).sum();
        agree += usize::from(enumerated == count_dhicm_params(&cfg));
    }
    let big = ModelConfig { d_model: 512, heads: 8, d_m: 512, placement: vec![default_placement()[0]], ..ModelConfig::default() };
    let per_site = count_dhicm_params(&big);
    outcome(agree == 20 && per_site == 589_824, format!("{agree}/20 configs agree; d=512 H=8 d_m=512 gives {per_site} per site"))
}

/// λ = 0.1 and λ = 0 DHICM runs on lexicon-2000, one per seed.
struct LexiconRuns {
    data: Splits,
    with_kl: Vec<Model>,
    without_kl: Vec<Model>,
}

fn lexicon_runs() -> Result<LexiconRuns> {
    let data = splits(TaskKind::Lexicon, 2000);
    let mut with_kl = Vec::new();
    let mut without_kl = Vec::new();
    for seed in SEEDS {
        with_kl.push(run(&experiment(true, 0.1, seed), &data, 2000)?.best);
        without_kl.push(run(&experiment(true, 0.0, seed), &data, 2000)?.best);
    }
    Ok(LexiconRuns { data, with_kl, without_kl })
}

fn anti_uniformity(runs: &LexiconRuns, secs: f64) -> Result<Outcome> {
    let ent = |models: &[Model]| -> Result<Vec<f64>> {
        models.iter().map(|m| mean_importance_entropy(m, &runs.data.valid, 384)).collect()
    };
    let (a, b) = (ent(&runs.with_kl)?, ent(&runs.without_kl)?);
    let wins = a.iter().flat_map(|x| b.iter().map(move |y| x < y)).filter(|&w| w).count();
    outcome(
        wins >= 8 && secs < 1800.0,
        format!("entropy lambda=0.1 {a:.4?} vs lambda=0 {b:.4?}; {wins}/9 pairings lower; {secs:.0}s"),
    )
}

fn low_resource(runs: &LexiconRuns) -> Result<Outcome> {
    let decode = DecodeOptions { beam: 5, alpha: 1.0, pruning: None };
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let mut wins = 0;
    let mut rows = Vec::new();
    for size in SIZES {
        let (mut base, mut dh) = (Vec::new(), Vec::new());
        for (i, seed) in SEEDS.into_iter().enumerate() {
            let b = run(&experiment(false, 0.1, seed), &runs.data, size)?.best;
            base.push(bleu_on_corpus(&b, &runs.data.test, &decode)?.bleu);
            let d = if size == 2000 { runs.with_kl[i].clone() } else { run(&experiment(true, 0.1, seed), &runs.data, size)?.best };
            dh.push(bleu_on_corpus(&d, &runs.data.test, &decode)?.bleu);
        }
        let (mb, md) = (median(base), median(dh));
        wins += usize::from(md >= mb);
        rows.push(format!("n={size}: baseline {mb:.2} vs DHICM {md:.2}"));
    }
    outcome(wins >= 2, format!("{}; DHICM >= baseline in {wins}/3 sizes", rows.join(", ")))
}

fn pruning_asymmetry(runs: &LexiconRuns) -> Result<Outcome> {
    let site = SiteId::new(0, AttentionKind::DecoderCross);
    let mut wins = 0;
    let mut rows = Vec::new();
    for model in &runs.with_kl {
        let valid = &runs.data.valid;
        let intact = evaluate(model, valid, 384, None)?.ce;
        let ranking = rank_heads_on_corpus(model, valid, site, 384)?;
        let delta = |head: usize| -> Result<f64> {
            let p = HeadPruning { site, heads: vec![head], renormalize: true };
            Ok(prune_and_eval(model, &p, valid, 384, None)?.valid_ce - intact)
        };
        let (top, bottom) = (ranking.order[0], *ranking.order.last().expect("heads"));
        let (d_top, d_bottom) = (delta(top)?, delta(bottom)?);
        wins += usize::from(d_bottom < d_top);
        rows.push(format!("lowest head {bottom} +{d_bottom:.4} vs highest head {top} +{d_top:.4}"));
    }
    outcome(wins >= 2, format!("{}; asymmetric in {wins}/3 seeds", rows.join("; ")))
}

/// Next-token distributions from a fixed table keyed on the whole prefix.
struct TableLm(u64);

impl TableLm {
    fn row(&self, prefix: &[usize]) -> Vec<f64> {
        let key = prefix.iter().fold(self.0, |k, &t| k.wrapping_mul(31).wrapping_add(t as u64 + 1));
        let mut r = rng(key);
        let logits: Vec<f64> = (0..4).map(|_| r.gen_range(-3.0..3.0)).collect();
        softmax(&logits).iter().map(|p| p.ln()).collect()
    }
}

impl Scorer for TableLm {
    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        Ok(prefixes.iter().map(|p| self.row(p)).collect())
    }
}

fn exhaustive_best(lm: &TableLm, spec: &SearchSpec) -> f64 {
    let mut best = f64::NEG_INFINITY;
    let mut stack = vec![(vec![spec.bos], 0.0)];
    while let Some((prefix, lp)) = stack.pop() {
        let n = prefix.len() - 1;
        if n == spec.max_len {
            best = best.max(lp / (n as f64).powf(spec.alpha));
            continue;
        }
        for (w, l) in lm.row(&prefix).into_iter().enumerate() {
            if w == spec.eos {
                best = best.max((lp + l) / ((n + 1) as f64).powf(spec.alpha));
            } else {
                let mut p = prefix.clone();
                p.push(w);
                stack.push((p, lp + l));
            }
        }
    }
    best
}

fn protocol() -> Result<Outcome> {
    let mut trace = vec![3.0, 2.0];
    trace.extend([2.1; 15]);
    let mut stopper = EarlyStopping::new(10);
    let stop_epoch = trace.iter().position(|&v| stopper.observe(v) == Verdict::Stop).map(|i| i + 1);
    let stop_ok = stop_epoch == Some(12);

    let (base, w) = (7e-4, 400);
    let lr_ok = lr_schedule(w, base, w)? == base
        && lr_schedule(4 * w, base, w)? == base / 2.0
        && (1..3 * w).all(|s| lr_schedule(s, base, w).unwrap() <= base);

    let mut greedy_ok = true;
    let mut exhaustive_ok = true;
    for seed in 0..200 {
        let spec = SearchSpec { bos: 0, eos: 1, max_len: 3, alpha: [0.0, 1.0][seed as usize % 2] };
        let g = greedy(&mut TableLm(seed), &spec)?;
        let b = beam_search(&mut TableLm(seed), 1, &spec)?;
        greedy_ok &= b[0].tokens == g.tokens && b[0].log_prob == g.log_prob;
        let wide = beam_search(&mut TableLm(seed), 64, &spec)?;
        exhaustive_ok &= (wide[0].score - exhaustive_best(&TableLm(seed), &spec)).abs() < 1e-12;
    }
    outcome(
        stop_ok && lr_ok && greedy_ok && exhaustive_ok,
        format!("stop at epoch {stop_epoch:?}, schedule ok {lr_ok}, beam1 == greedy {greedy_ok}, wide beam == exhaustive {exhaustive_ok}"),
    )
}

fn determinism() -> Result<Outcome> {
    let mut cfg = experiment(true, 0.1, 7);
    cfg.train.max_epochs = 3;
    let data = splits(TaskKind::Lexicon, 300);
    let dirs = [tempfile::tempdir()?, tempfile::tempdir()?];
    for d in &dirs {
        train(&cfg, &data.train, &data.valid, &RunOptions { out_dir: Some(d.path().to_path_buf()), resume: false })?;
    }
    let mut same = Vec::new();
    for f in ["best.ckpt", "last.ckpt", "train_log.jsonl"] {
        let a = fs::read(dirs[0].path().join(f))?;
        let b = fs::read(dirs[1].path().join(f))?;
        same.push((f, a == b && !a.is_empty()));
    }
    outcome(same.iter().all(|(_, s)| *s), format!("identical files: {same:?}"))
}

fn convergence() -> Result<Outcome> {
    let data = splits(TaskKind::Copy, 2000);
    let mut accs = Vec::new();
    for dhicm in [false, true] {
        let mut cfg = experiment(dhicm, 0.1, 1);
        cfg.train.max_steps = 2000;
        cfg.train.max_epochs = 1000;
        let out = run(&cfg, &data, 2000)?;
        accs.push(evaluate(&out.best, &data.test, 384, None)?.token_accuracy);
    }
    let refs: Vec<Vec<usize>> = data.test.pairs.iter().map(|(_, t)| t.clone()).collect();
    let self_bleu = corpus_bleu(&refs, &refs, 4)?.bleu;
    let distinct: HashSet<&Vec<usize>> = refs.iter().collect();
    outcome(
        accs.iter().all(|&a| a >= 0.99) && self_bleu == 100.0,
        format!("test token accuracy baseline {:.4}, DHICM {:.4}; self-BLEU {self_bleu} over {} refs", accs[0], accs[1], distinct.len()),
    )
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut results: Vec<(usize, &str, Result<Outcome>)> = Vec::new();
    let mut record = |n: usize, name: &'static str, r: Result<Outcome>| {
        match &r {
            Ok(o) => println!("[{n}] {name}: {}", o.detail),
            Err(e) => println!("[{n}] {name}: error: {e}"),
        }
        results.push((n, name, r));
    };
    record(1, "gradient check", gradients());
    record(2, "importance invariants", importance_invariants());
    record(3, "identical heads", degenerate_heads());
    record(4, "parameter accounting", parameter_accounting());
    let t = Instant::now();
    match lexicon_runs() {
        Ok(runs) => {
            let secs = t.elapsed().as_secs_f64();
            record(5, "anti-uniformity", anti_uniformity(&runs, secs));
            record(7, "pruning asymmetry", pruning_asymmetry(&runs));
            record(6, "low-resource trend", low_resource(&runs));
        }
        Err(e) => {
            let msg = e.to_string();
            record(5, "anti-uniformity", Err(dhicm_core::Error::Analysis(msg.clone())));
            record(6, "low-resource trend", Err(dhicm_core::Error::Analysis(msg.clone())));
            record(7, "pruning asymmetry", Err(dhicm_core::Error::Analysis(msg)));
        }
    }
    record(8, "protocol fidelity", protocol());
    record(9, "determinism", determinism());
    record(10, "convergence", convergence());

    results.sort_by_key(|(n, _, _)| *n);
    println!();
    let mut failed = 0;
    for (n, name, r) in &results {
        let pass = matches!(r, Ok(o) if o.pass);
        failed += usize::from(!pass);
        println!("{} criterion {n:>2}: {name}", if pass { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {}/{} passed in {:.0}s", results.len() - failed, results.len(), started.elapsed().as_secs_f64());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

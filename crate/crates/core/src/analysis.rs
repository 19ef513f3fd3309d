//! Attention and head-importance exports, head ranking, and evaluation-time
//! head pruning.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionKind, HeadPruning, SiteId};
use crate::bleu::corpus_bleu;
use crate::data::{batchify, Batch, ParallelCorpus, Vocab};
use crate::decoding::{translate_corpus, DecodeOptions};
use crate::error::{Error, Result};
use crate::losses::entropy;
use crate::model::{ForwardOptions, Model};
use crate::training::evaluate;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DumpKind {
    /// Target rows attending over source columns.
    EncDecAttention,
    /// Query-token rows distributing importance over head columns.
    HeadImportance,
}

/// A labeled matrix whose rows are probability distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDump {
    pub kind: DumpKind,
    pub site: SiteId,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub checkpoint: Option<String>,
    pub sentence: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    kind: DumpKind,
    site: String,
    shape: [usize; 2],
    checkpoint: Option<String>,
    sentence: Option<usize>,
}

/// Path of the JSON sidecar written next to a dump CSV.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

impl AttentionDump {
    pub fn shape(&self) -> [usize; 2] {
        [self.values.len(), self.col_labels.len()]
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        self.values
            .iter()
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// CSV text: a header of column labels, then one labeled row per line
    /// with six decimals.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("token");
        for c in &self.col_labels {
            s.push(',');
            s.push_str(&csv_field(c));
        }
        s.push('\n');
        for (label, row) in self.row_labels.iter().zip(&self.values) {
            s.push_str(&csv_field(label));
            for v in row {
                let _ = write!(s, ",{v:.6}");
            }
            s.push('\n');
        }
        s
    }

    /// Writes the CSV and its sidecar.
    pub fn save(&self, csv: &Path) -> Result<()> {
        fs::write(csv, self.to_csv())?;
        let side = Sidecar {
            kind: self.kind,
            site: self.site.to_string(),
            shape: self.shape(),
            checkpoint: self.checkpoint.clone(),
            sentence: self.sentence,
        };
        fs::write(sidecar_path(csv), serde_json::to_string_pretty(&side)? + "\n")?;
        Ok(())
    }

    /// Reads a dump CSV; kind and site come from the sidecar when present.
    pub fn load(csv: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(csv)?;
        let col_labels: Vec<String> = reader.headers()?.iter().skip(1).map(String::from).collect();
        let mut row_labels = Vec::new();
        let mut values = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let mut fields = rec.iter();
            row_labels.push(fields.next().unwrap_or_default().to_string());
            let row = fields
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Analysis(format!("bad value `{f}` in {}", csv.display())))
                })
                .collect::<Result<Vec<f64>>>()?;
            if row.len() != col_labels.len() {
                return Err(Error::Analysis(format!("ragged row in {}", csv.display())));
            }
            values.push(row);
        }
        let side = sidecar_path(csv);
        let (kind, site, checkpoint, sentence) = if side.exists() {
            let s: Sidecar = serde_json::from_str(&fs::read_to_string(&side)?)?;
            (s.kind, s.site.parse()?, s.checkpoint, s.sentence)
        } else {
            (DumpKind::EncDecAttention, SiteId::new(0, AttentionKind::DecoderCross), None, None)
        };
        Ok(AttentionDump {
            kind,
            site,
            row_labels,
            col_labels,
            values,
            checkpoint,
            sentence,
        })
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn label(vocab: Option<&Vocab>, id: usize) -> String {
    vocab
        .and_then(|v| v.token(id))
        .map_or_else(|| id.to_string(), String::from)
}

/// Which encoder-decoder heads to export.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadSelection {
    Head(usize),
    Average,
}

/// Encoder-decoder attention of decoder layer `layer` for one sentence pair
/// (ids without framing tokens). Rows are the predicted target tokens, with
/// the end marker; columns are the source tokens, with the end marker.
pub fn dump_encdec_attention(
    model: &Model,
    src: &[usize],
    tgt: &[usize],
    vocab: Option<&Vocab>,
    layer: usize,
    heads: HeadSelection,
) -> Result<AttentionDump> {
    let cfg = model.config();
    if layer >= cfg.dec_layers {
        return Err(Error::Analysis(format!("decoder layer {layer} does not exist ({} layers)", cfg.dec_layers)));
    }
    if let HeadSelection::Head(h) = heads {
        if h >= cfg.heads {
            return Err(Error::Analysis(format!("head {h} out of range for {} heads", cfg.heads)));
        }
    }
    let pair = (src.to_vec(), tgt.to_vec());
    let batch = Batch::from_pairs(&[&pair], vec![0]);
    let out = model.forward(&batch, &ForwardOptions::eval())?;
    let w = &out.cross_attention[layer];
    let (h_count, m, n) = (w.shape()[1], w.shape()[2], w.shape()[3]);
    let data = w.data();
    let values = (0..m)
        .map(|i| {
            (0..n)
                .map(|j| match heads {
                    HeadSelection::Head(h) => data[(h * m + i) * n + j],
                    HeadSelection::Average => {
                        (0..h_count).map(|h| data[(h * m + i) * n + j]).sum::<f64>() / h_count as f64
                    }
                })
                .collect()
        })
        .collect();
    Ok(AttentionDump {
        kind: DumpKind::EncDecAttention,
        site: SiteId::new(layer, AttentionKind::DecoderCross),
        row_labels: batch.tgt_out.iter().map(|&t| label(vocab, t)).collect(),
        col_labels: batch.src.iter().map(|&t| label(vocab, t)).collect(),
        values,
        checkpoint: None,
        sentence: None,
    })
}

/// Head importances at `site` for one sentence pair. Rows are the query
/// tokens at that site: source tokens for encoder sites, decoder input
/// tokens for decoder sites.
pub fn dump_head_importance(
    model: &Model,
    src: &[usize],
    tgt: &[usize],
    vocab: Option<&Vocab>,
    site: SiteId,
) -> Result<AttentionDump> {
    if !model.dhicm_sites().contains(&site) {
        return Err(Error::Analysis(format!("site {site} has no head-importance layer")));
    }
    let pair = (src.to_vec(), tgt.to_vec());
    let batch = Batch::from_pairs(&[&pair], vec![0]);
    let out = model.forward(&batch, &ForwardOptions::eval())?;
    let rec = out
        .importance
        .iter()
        .find(|r| r.site == site)
        .ok_or_else(|| Error::Analysis(format!("site {site} produced no importances")))?;
    let h = rec.a.shape()[1];
    let rows: &[usize] = if site.kind == AttentionKind::EncoderSelf { &batch.src } else { &batch.tgt_in };
    Ok(AttentionDump {
        kind: DumpKind::HeadImportance,
        site,
        row_labels: rows.iter().map(|&t| label(vocab, t)).collect(),
        col_labels: (0..h).map(|i| format!("head{i}")).collect(),
        values: rec.a.data().chunks(h).map(<[f64]>::to_vec).collect(),
        checkpoint: None,
        sentence: None,
    })
}

/// Orders heads by decreasing mean importance; ties go to the lower index.
pub fn rank_by_means(means: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..means.len()).collect();
    order.sort_by(|&a, &b| means[b].partial_cmp(&means[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    order
}

/// Ranking of heads with their mean importance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadRanking {
    pub site: String,
    /// Head indices, most important first.
    pub order: Vec<usize>,
    /// Mean importance per head index.
    pub means: Vec<f64>,
    pub tokens: usize,
}

/// Ranks heads by their mean importance over every row of `dumps`.
pub fn rank_heads(dumps: &[AttentionDump]) -> Result<HeadRanking> {
    let first = dumps.first().ok_or_else(|| Error::Analysis("no dumps to rank".into()))?;
    let h = first.col_labels.len();
    let mut sums = vec![0.0; h];
    let mut tokens = 0;
    for d in dumps {
        if d.kind != DumpKind::HeadImportance || d.col_labels.len() != h {
            return Err(Error::Analysis("rank_heads needs head-importance dumps of one site".into()));
        }
        for row in &d.values {
            sums.iter_mut().zip(row).for_each(|(s, v)| *s += v);
            tokens += 1;
        }
    }
    let means: Vec<f64> = sums.iter().map(|s| s / tokens.max(1) as f64).collect();
    Ok(HeadRanking {
        site: first.site.to_string(),
        order: rank_by_means(&means),
        means,
        tokens,
    })
}

/// Visits the importance rows of real (non-padding) positions at every
/// site, batch by batch.
fn for_each_importance_row(
    model: &Model,
    corpus: &ParallelCorpus,
    max_tokens: usize,
    mut f: impl FnMut(SiteId, &[f64]),
) -> Result<()> {
    for batch in batchify(corpus, max_tokens)? {
        let out = model.forward(&batch, &ForwardOptions::eval())?;
        for rec in &out.importance {
            let h = rec.a.shape()[1];
            for (row, &keep) in rec.a.data().chunks(h).zip(&rec.query_mask) {
                if keep {
                    f(rec.site, row);
                }
            }
        }
    }
    Ok(())
}

/// Ranks the heads of `site` by mean importance over a corpus.
pub fn rank_heads_on_corpus(
    model: &Model,
    corpus: &ParallelCorpus,
    site: SiteId,
    max_tokens: usize,
) -> Result<HeadRanking> {
    if !model.dhicm_sites().contains(&site) {
        return Err(Error::Analysis(format!("site {site} has no head-importance layer")));
    }
    let h = model.config().heads;
    let mut sums = vec![0.0; h];
    let mut tokens = 0usize;
    for_each_importance_row(model, corpus, max_tokens, |s, row| {
        if s == site {
            sums.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            tokens += 1;
        }
    })?;
    let means: Vec<f64> = sums.iter().map(|s| s / tokens.max(1) as f64).collect();
    Ok(HeadRanking {
        site: site.to_string(),
        order: rank_by_means(&means),
        means,
        tokens,
    })
}

/// Mean entropy of importance rows over every real position of every site.
pub fn mean_importance_entropy(model: &Model, corpus: &ParallelCorpus, max_tokens: usize) -> Result<f64> {
    if model.dhicm_sites().is_empty() {
        return Err(Error::Analysis("model has no head-importance sites".into()));
    }
    let (mut total, mut rows) = (0.0, 0usize);
    for_each_importance_row(model, corpus, max_tokens, |_, row| {
        total += entropy(row);
        rows += 1;
    })?;
    if rows == 0 {
        return Err(Error::Empty("corpus has no positions".into()));
    }
    Ok(total / rows as f64)
}

/// Mean over target positions of the largest encoder-decoder attention
/// weight, averaged over heads and decoder layers.
pub fn peak_attention(model: &Model, corpus: &ParallelCorpus, max_tokens: usize) -> Result<f64> {
    let (mut total, mut rows) = (0.0, 0usize);
    for batch in batchify(corpus, max_tokens)? {
        let out = model.forward(&batch, &ForwardOptions::eval())?;
        let valid = batch.tgt_mask();
        for w in &out.cross_attention {
            let [b, h, m, n] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
            for bi in 0..b {
                for hi in 0..h {
                    for i in 0..m {
                        if valid[bi * m + i] {
                            let start = ((bi * h + hi) * m + i) * n;
                            total += w.data()[start..start + n].iter().copied().fold(0.0, f64::max);
                            rows += 1;
                        }
                    }
                }
            }
        }
    }
    if rows == 0 {
        return Err(Error::Empty("corpus has no positions".into()));
    }
    Ok(total / rows as f64)
}

/// Metrics of an evaluation-time head ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub site: String,
    pub heads: Vec<usize>,
    pub renormalize: bool,
    #[serde(rename = "valid_L_c")]
    pub valid_ce: f64,
    pub token_accuracy: f64,
    pub bleu: Option<f64>,
}

/// Evaluates `corpus` with the listed heads zeroed at `site`. BLEU is
/// computed only when `decode` is given.
pub fn prune_and_eval(
    model: &Model,
    pruning: &HeadPruning,
    corpus: &ParallelCorpus,
    max_tokens: usize,
    decode: Option<&DecodeOptions>,
) -> Result<PruneReport> {
    if !model.has_site(pruning.site) {
        return Err(Error::Analysis(format!("site {} does not exist", pruning.site)));
    }
    let h = model.config().heads;
    if let Some(&bad) = pruning.heads.iter().find(|&&x| x >= h) {
        return Err(Error::Analysis(format!("head {bad} out of range for {h} heads")));
    }
    let mut distinct = pruning.heads.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() == h {
        return Err(Error::Analysis("cannot prune all heads".into()));
    }
    let stats = evaluate(model, corpus, max_tokens, Some(pruning))?;
    let bleu = match decode {
        Some(d) => {
            let opts = DecodeOptions {
                pruning: Some(pruning.clone()),
                ..d.clone()
            };
            let hyps = translate_corpus(model, corpus, &opts)?;
            let refs: Vec<Vec<usize>> = corpus.pairs.iter().map(|(_, t)| t.clone()).collect();
            Some(corpus_bleu(&hyps, &refs, 4)?.bleu)
        }
        None => None,
    };
    Ok(PruneReport {
        site: pruning.site.to_string(),
        heads: pruning.heads.clone(),
        renormalize: pruning.renormalize,
        valid_ce: stats.ce,
        token_accuracy: stats.token_accuracy,
        bleu,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_examples() {
        assert_eq!(rank_by_means(&[0.1, 0.4, 0.3, 0.2]), vec![1, 2, 3, 0]);
        assert_eq!(rank_by_means(&[0.25; 4]), vec![0, 1, 2, 3]);
    }

    #[test]
    fn csv_roundtrip_keeps_six_decimals() {
        let d = AttentionDump {
            kind: DumpKind::HeadImportance,
            site: "enc.1.self".parse().unwrap(),
            row_labels: vec!["w1".into(), "a,b".into()],
            col_labels: vec!["head0".into(), "head1".into()],
            values: vec![vec![0.25, 0.75], vec![1.0 / 3.0, 2.0 / 3.0]],
            checkpoint: Some("best.ckpt".into()),
            sentence: Some(4),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        d.save(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("0.333333,0.666667"), "{text}");
        let back = AttentionDump::load(&p).unwrap();
        assert_eq!(back.row_labels, d.row_labels);
        assert_eq!(back.site, d.site);
        assert_eq!(back.sentence, Some(4));
        assert!((back.values[1][0] - 1.0 / 3.0).abs() < 1e-6);
    }
}

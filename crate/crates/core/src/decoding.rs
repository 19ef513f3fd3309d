//! Greedy and beam-search decoding over any next-token scorer.

use std::cmp::Ordering;

use crate::attention::HeadPruning;
use crate::bleu::{corpus_bleu, BleuScore};
use crate::data::{ParallelCorpus, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{EncodedSource, ForwardOptions, Model};

/// Supplies next-token log-probabilities for a set of equal-length prefixes.
pub trait Scorer {
    /// One row of log-probabilities per prefix; `-inf` forbids a token.
    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

/// Decoding limits and markers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchSpec {
    pub bos: usize,
    pub eos: usize,
    /// Maximum number of generated tokens, end marker included.
    pub max_len: usize,
    /// Length-normalization exponent.
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens without start or end markers.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// `log_prob / len^alpha`, where `len` counts the end marker if present.
    pub score: f64,
    /// Cut off at `max_len` without producing the end marker.
    pub truncated: bool,
}

fn finish(tokens: &[usize], log_prob: f64, ended: bool, alpha: f64) -> Hypothesis {
    let len = tokens.len() + usize::from(ended);
    Hypothesis {
        tokens: tokens.to_vec(),
        log_prob,
        score: log_prob / (len.max(1) as f64).powf(alpha),
        truncated: !ended,
    }
}

fn argmax(row: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in row.iter().enumerate() {
        if v > f64::NEG_INFINITY && best.map_or(true, |b| v > row[b]) {
            best = Some(i);
        }
    }
    best
}

/// Picks the most probable token at every step; ties go to the lower id.
pub fn greedy(scorer: &mut dyn Scorer, spec: &SearchSpec) -> Result<Hypothesis> {
    let mut prefix = vec![spec.bos];
    let mut lp = 0.0;
    for _ in 0..spec.max_len {
        let rows = scorer.next_log_probs(std::slice::from_ref(&prefix))?;
        let w = argmax(&rows[0]).ok_or_else(|| Error::Data("every token is forbidden".into()))?;
        lp += rows[0][w];
        if w == spec.eos {
            return Ok(finish(&prefix[1..], lp, true, spec.alpha));
        }
        prefix.push(w);
    }
    Ok(finish(&prefix[1..], lp, false, spec.alpha))
}

fn by_score(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal)
}

/// Beam search returning finished hypotheses, best first.
///
/// Each step ranks every extension by cumulative log-probability (ties:
/// lower token id, then earlier beam). End-marker extensions ranked within
/// the top `beam` finish; the first `beam` other extensions stay alive. The
/// search stops once `beam` hypotheses have finished or `max_len` is reached,
/// at which point live hypotheses finish as truncated.
pub fn beam_search(scorer: &mut dyn Scorer, beam: usize, spec: &SearchSpec) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(Error::Config("beam size must be >= 1".into()));
    }
    if spec.max_len == 0 {
        return Ok(vec![finish(&[], 0.0, false, spec.alpha)]);
    }
    let mut alive: Vec<(Vec<usize>, f64)> = vec![(vec![spec.bos], 0.0)];
    let mut done: Vec<Hypothesis> = Vec::new();
    for step in 0..spec.max_len {
        let prefixes: Vec<Vec<usize>> = alive.iter().map(|(p, _)| p.clone()).collect();
        let rows = scorer.next_log_probs(&prefixes)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (b, row) in rows.iter().enumerate() {
            for (w, &lp) in row.iter().enumerate() {
                if lp > f64::NEG_INFINITY {
                    cands.push((alive[b].1 + lp, w, b));
                }
            }
        }
        cands.sort_by(|x, y| {
            y.0.partial_cmp(&x.0)
                .unwrap_or(Ordering::Equal)
                .then(x.1.cmp(&y.1))
                .then(x.2.cmp(&y.2))
        });
        let mut next = Vec::with_capacity(beam);
        for (rank, &(lp, w, b)) in cands.iter().enumerate() {
            if w == spec.eos {
                if rank < beam {
                    done.push(finish(&alive[b].0[1..], lp, true, spec.alpha));
                }
            } else if next.len() < beam {
                let mut p = alive[b].0.clone();
                p.push(w);
                next.push((p, lp));
            }
        }
        alive = next;
        if done.len() >= beam || alive.is_empty() {
            break;
        }
        if step + 1 == spec.max_len {
            done.extend(alive.iter().map(|(p, lp)| finish(&p[1..], *lp, false, spec.alpha)));
        }
    }
    if done.is_empty() {
        return Err(Error::Data("every token is forbidden".into()));
    }
    done.sort_by(by_score);
    Ok(done)
}

/// Scores prefixes against one encoded source sentence.
pub struct ModelScorer<'a> {
    model: &'a Model,
    source: EncodedSource,
    opts: ForwardOptions,
}

impl<'a> ModelScorer<'a> {
    /// `src` includes the end marker. Dropout in `opts` is ignored.
    pub fn new(model: &'a Model, src: &[usize], opts: &ForwardOptions) -> Result<Self> {
        let opts = ForwardOptions { training: false, ..opts.clone() };
        let source = model.encode(src, 1, src.len(), &opts)?;
        Ok(ModelScorer { model, source, opts })
    }
}

impl Scorer for ModelScorer<'_> {
    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let rows = vec![0; prefixes.len()];
        let lp = self
            .model
            .next_token_log_probs(&self.source, &rows, prefixes, &self.opts)?;
        let v = lp.shape()[1];
        Ok(lp
            .data()
            .chunks(v)
            .map(|r| {
                let mut r = r.to_vec();
                r[PAD] = f64::NEG_INFINITY;
                r[BOS] = f64::NEG_INFINITY;
                r
            })
            .collect())
    }
}

/// Decoding settings for model translation.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOptions {
    pub beam: usize,
    pub alpha: f64,
    /// Head ablation applied while decoding.
    pub pruning: Option<HeadPruning>,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions { beam: 5, alpha: 1.0, pruning: None }
    }
}

/// Output budget for a source of `src_len` tokens (end marker included).
pub fn output_limit(model: &Model, src_len: usize) -> usize {
    model.config().max_len.min(2 * src_len + 10)
}

/// Translates one source sentence given without framing tokens.
pub fn translate(model: &Model, src: &[usize], opts: &DecodeOptions) -> Result<Hypothesis> {
    let mut framed = src.to_vec();
    framed.push(EOS);
    let fwd = ForwardOptions {
        pruning: opts.pruning.clone(),
        ..ForwardOptions::eval()
    };
    let mut scorer = ModelScorer::new(model, &framed, &fwd)?;
    let spec = SearchSpec {
        bos: BOS,
        eos: EOS,
        max_len: output_limit(model, framed.len()),
        alpha: opts.alpha,
    };
    if opts.beam == 1 {
        greedy(&mut scorer, &spec)
    } else {
        Ok(beam_search(&mut scorer, opts.beam, &spec)?.swap_remove(0))
    }
}

/// Translates every source sentence of a corpus in order.
pub fn translate_corpus(model: &Model, corpus: &ParallelCorpus, opts: &DecodeOptions) -> Result<Vec<Vec<usize>>> {
    corpus
        .pairs
        .iter()
        .map(|(src, _)| translate(model, src, opts).map(|h| h.tokens))
        .collect()
}

/// Decodes every source sentence and scores the output against the corpus
/// targets with 4-gram BLEU.
pub fn bleu_on_corpus(model: &Model, corpus: &ParallelCorpus, opts: &DecodeOptions) -> Result<BleuScore> {
    let hyps = translate_corpus(model, corpus, opts)?;
    let refs: Vec<Vec<usize>> = corpus.pairs.iter().map(|(_, t)| t.clone()).collect();
    corpus_bleu(&hyps, &refs, 4)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed next-token distribution keyed on the last prefix token.
    struct Table(Vec<Vec<f64>>);

    impl Scorer for Table {
        fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
            Ok(prefixes
                .iter()
                .map(|p| self.0[*p.last().unwrap()].iter().map(|x| x.ln()).collect())
                .collect())
        }
    }

    fn spec(max_len: usize, alpha: f64) -> SearchSpec {
        SearchSpec { bos: 0, eos: 3, max_len, alpha }
    }

    #[test]
    fn greedy_misses_what_beam_finds() {
        // Token 1 looks best first but only leads to low-probability endings.
        let mut t = Table(vec![
            vec![0.0, 0.5, 0.4, 0.1],
            vec![0.0, 0.3, 0.3, 0.4],
            vec![0.0, 0.0, 0.0, 1.0],
            vec![0.25; 4],
        ]);
        let g = greedy(&mut t, &spec(5, 0.0)).unwrap();
        assert_eq!(g.tokens, vec![1]);
        assert!((g.log_prob - 0.2f64.ln()).abs() < 1e-12);
        let b = beam_search(&mut t, 2, &spec(5, 0.0)).unwrap();
        assert_eq!(b[0].tokens, vec![2]);
        assert!((b[0].log_prob - 0.4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn truncation_at_max_len() {
        let mut t = Table(vec![vec![0.0, 0.9, 0.0, 0.1], vec![0.0, 0.9, 0.0, 0.1]]);
        let g = greedy(&mut t, &spec(3, 1.0)).unwrap();
        assert_eq!(g.tokens, vec![1, 1, 1]);
        assert!(g.truncated);
        let b = beam_search(&mut t, 1, &spec(3, 1.0)).unwrap();
        assert_eq!(b[0], g);
    }

    #[test]
    fn zero_beam_is_rejected() {
        let mut t = Table(vec![vec![0.25; 4]]);
        assert!(beam_search(&mut t, 0, &spec(3, 1.0)).is_err());
    }
}

//! Corpus-level BLEU over token sequences.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    /// Score on the 0–100 scale.
    pub bleu: f64,
    /// Clipped n-gram precisions for `n = 1..=max_n`.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// BLEU with clipped n-gram counts up to `max_n`, uniform weights, and the
/// standard brevity penalty, accumulated over the whole corpus.
pub fn corpus_bleu<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>], max_n: usize) -> Result<BleuScore> {
    if hyps.len() != refs.len() {
        return Err(Error::Data(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::Empty("no hypotheses to score".into()));
    }
    if max_n == 0 {
        return Err(Error::Config("BLEU order must be at least 1".into()));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matched[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    let precisions: Vec<f64> = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
        .collect();
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let bleu = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuScore {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn clipped_unigram_example() {
        let h = vec![words("the the the")];
        let r = vec![words("the cat")];
        assert_abs_diff_eq!(corpus_bleu(&h, &r, 1).unwrap().bleu, 100.0 / 3.0, epsilon = 1e-9);
        assert_eq!(corpus_bleu(&h, &r, 4).unwrap().bleu, 0.0);
    }

    #[test]
    fn identical_corpus_scores_100() {
        let r = vec![words("a b c d e"), words("f g h i")];
        assert_abs_diff_eq!(corpus_bleu(&r, &r, 4).unwrap().bleu, 100.0, epsilon = 1e-9);
    }

    #[test]
    fn brevity_penalty_applies_to_short_output() {
        let h = vec![words("a b c d")];
        let r = vec![words("a b c d e f g h")];
        let s = corpus_bleu(&h, &r, 4).unwrap();
        assert_abs_diff_eq!(s.brevity_penalty, (1.0f64 - 2.0).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(s.bleu, 100.0 * (-1.0f64).exp(), epsilon = 1e-9);
    }

    #[test]
    fn mismatched_lengths_error() {
        assert!(corpus_bleu::<u32>(&[vec![1]], &[], 4).is_err());
        assert!(matches!(corpus_bleu::<u32>(&[], &[], 4), Err(Error::Empty(_))));
    }
}

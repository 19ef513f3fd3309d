//! Training objective: label-smoothed cross-entropy minus a weighted
//! divergence of head importances from the uniform distribution.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::{ImportanceRecord, SiteId};
use crate::autodiff::{Tape, Var};
use crate::data::PAD;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Numerically stable log-softmax of one row.
pub fn log_softmax_row(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| (v - max) - log_sum).collect()
}

/// `KL(a ‖ uniform) = Σ_h a_h ln(a_h·H)`, with `0·ln 0 = 0`.
pub fn kl_uniform(a: &[f64]) -> f64 {
    let h = a.len() as f64;
    a.iter().filter(|&&p| p > 0.0).map(|&p| p * (p * h).ln()).sum()
}

/// Shannon entropy in nats, with `0·ln 0 = 0`.
pub fn entropy(a: &[f64]) -> f64 {
    -a.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Importance distribution and its divergence from uniform, computed from
/// raw scores. Working in log space makes equal scores give exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceRow {
    pub a: Vec<f64>,
    pub kl: f64,
}

pub fn importance_row(scores: &[f64]) -> ImportanceRow {
    let ln_h = (scores.len() as f64).ln();
    let lp = log_softmax_row(scores);
    let a: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
    let kl = a.iter().zip(&lp).map(|(p, l)| p * (l + ln_h)).sum::<f64>();
    ImportanceRow { a, kl }
}

/// Mean label-smoothed cross-entropy over positions whose target is not
/// padding: `(1 − ε)·NLL + ε·(mean NLL over every non-padding token)`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Config(format!("label smoothing {smoothing} not in [0, 1)")));
    }
    let (rows, vocab) = (shape[0], shape[1]);
    if vocab < 3 {
        return Err(Error::Config(format!("vocabulary of {vocab} is too small")));
    }
    let spread = smoothing / (vocab - 1) as f64;
    let mut q = vec![0.0; rows * vocab];
    let mut count = 0usize;
    for (r, &t) in targets.iter().enumerate() {
        if t == PAD {
            continue;
        }
        if t >= vocab {
            return Err(Error::Data(format!("target id {t} outside vocabulary of {vocab}")));
        }
        count += 1;
        let row = &mut q[r * vocab..(r + 1) * vocab];
        for (j, v) in row.iter_mut().enumerate() {
            if j != PAD {
                *v = spread + if j == t { 1.0 - smoothing } else { 0.0 };
            }
        }
    }
    if count == 0 {
        return Err(Error::Empty("no non-padding targets".into()));
    }
    let lp = tape.log_softmax(logits, 1)?;
    let weighted = tape.mul_const(lp, &Tensor::new(vec![rows, vocab], q)?)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, -1.0 / count as f64))
}

/// Mean divergence from uniform over the unmasked rows of `[N, H]` scores.
pub fn kl_to_uniform(tape: &mut Tape, scores: Var, query_mask: &[bool]) -> Result<Var> {
    let shape = tape.shape(scores).to_vec();
    if shape.len() != 2 || shape[0] != query_mask.len() {
        return Err(Error::shape("kl_to_uniform", &shape, &[query_mask.len()]));
    }
    let count = query_mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Empty("no unmasked positions for the importance divergence".into()));
    }
    let ln_h = (shape[1] as f64).ln();
    let lp = tape.log_softmax(scores, 1)?;
    let a = tape.exp(lp);
    let shifted = tape.add_scalar(lp, ln_h);
    let terms = tape.mul(a, shifted)?;
    let mask: Vec<f64> = query_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let terms = tape.mul_const(terms, &Tensor::new(vec![shape[0], 1], mask)?)?;
    let total = tape.sum(terms);
    Ok(tape.scale(total, 1.0 / count as f64))
}

/// Divergence terms of one forward pass.
#[derive(Clone, Debug)]
pub struct KlTerms {
    /// Mean over sites of the per-site means.
    pub mean: Var,
    pub per_site: Vec<(SiteId, Var)>,
}

/// Mean over unmasked positions within each site, then mean over sites.
/// `None` when there are no sites.
pub fn aggregate_kl(tape: &mut Tape, records: &[ImportanceRecord]) -> Result<Option<KlTerms>> {
    let mut per_site = Vec::with_capacity(records.len());
    let mut acc: Option<Var> = None;
    for r in records {
        let kl = kl_to_uniform(tape, r.scores, &r.query_mask)?;
        per_site.push((r.site, kl));
        acc = Some(match acc {
            Some(a) => tape.add(a, kl)?,
            None => kl,
        });
    }
    Ok(acc.map(|a| KlTerms {
        mean: tape.scale(a, 1.0 / records.len() as f64),
        per_site,
    }))
}

/// Loss components of one batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_c")]
    pub ce: f64,
    #[serde(rename = "L_KL")]
    pub kl: f64,
    pub total: f64,
    /// Mean divergence per site, keyed by site name.
    pub per_site: BTreeMap<String, f64>,
}

/// Tape handles of the loss components.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub kl: Option<KlTerms>,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossBreakdown {
        let get = |v: Var| tape.value(v).data()[0];
        LossBreakdown {
            ce: get(self.ce),
            kl: self.kl.as_ref().map_or(0.0, |k| get(k.mean)),
            total: get(self.total),
            per_site: self
                .kl
                .iter()
                .flat_map(|k| k.per_site.iter().map(|&(s, v)| (s.to_string(), get(v))))
                .collect(),
        }
    }
}

/// `L = L_c − λ·L_KL`.
pub fn total_loss(
    tape: &mut Tape,
    logits: Var,
    targets: &[usize],
    records: &[ImportanceRecord],
    smoothing: f64,
    lambda: f64,
) -> Result<LossVars> {
    let ce = cross_entropy(tape, logits, targets, smoothing)?;
    let kl = aggregate_kl(tape, records)?;
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let total = match &kl {
        Some(k) if lambda != 0.0 => {
            let weighted = tape.scale(k.mean, -lambda);
            tape.add(ce, weighted)?
        }
        _ => ce,
    };
    Ok(LossVars { total, ce, kl })
}

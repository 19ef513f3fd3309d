//! Multi-head attention and the dynamic head-importance combine.
//!
//! Heads are computed independently and returned *before* any output
//! projection ([`HeadOutputs`]). They are then combined either by the usual
//! concatenate-and-project step ([`baseline_combine`]) or by a second-level
//! attention over heads: each head output is scored against the sublayer's
//! query-side input ([`dhicm_scores`]), the scores are softmax-normalized
//! across heads into importances ([`dhicm_importance`]), and the heads are
//! mixed by those importances ([`dhicm_combine`]).
//!
//! All functions work on a [`Tape`] so that gradients flow through every
//! parameter. Row vectors are used throughout: a projection `W x` is written
//! `x · Wᵀ`, and the per-head query/key/value projections of all heads are
//! stored side by side as one `[d, H·d_k]` matrix.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Mask, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::derive_index;
use crate::tensor::Tensor;

/// Which attention sublayer of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttentionKind {
    EncoderSelf,
    DecoderSelf,
    DecoderCross,
}

/// An attention sublayer: layer index plus kind. Text form: `enc.0.self`,
/// `dec.1.self`, `dec.1.cross`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SiteId {
    pub layer: usize,
    pub kind: AttentionKind,
}

impl SiteId {
    pub fn new(layer: usize, kind: AttentionKind) -> Self {
        SiteId { layer, kind }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            AttentionKind::EncoderSelf => write!(f, "enc.{}.self", self.layer),
            AttentionKind::DecoderSelf => write!(f, "dec.{}.self", self.layer),
            AttentionKind::DecoderCross => write!(f, "dec.{}.cross", self.layer),
        }
    }
}

impl FromStr for SiteId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split('.').collect();
        let bad = || Error::Config(format!("invalid site `{s}` (expected e.g. enc.0.self, dec.1.cross)"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let layer: usize = parts[1].parse().map_err(|_| bad())?;
        let kind = match (parts[0], parts[2]) {
            ("enc", "self") => AttentionKind::EncoderSelf,
            ("dec", "self") => AttentionKind::DecoderSelf,
            ("dec", "cross") => AttentionKind::DecoderCross,
            _ => return Err(bad()),
        };
        Ok(SiteId { layer, kind })
    }
}

/// Multi-head projection weights bound on a tape.
///
/// `wq`, `wk`, `wv` are `[d, H·d_k]`; columns `h·d_k..(h+1)·d_k` belong to
/// head `h`. `wo` is the `[H·d_k, d]` combine projection; it is absent at
/// sites where the head-importance combine replaces it.
#[derive(Clone, Copy, Debug)]
pub struct MhaParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Option<Var>,
}

/// Second-level attention weights bound on a tape:
/// `w: [d_m, d_k]`, `u: [d_m, d]`, `v: [d_m, d_k]`, `ws: [d, d_m]`.
#[derive(Clone, Copy, Debug)]
pub struct DhicmParams {
    pub w: Var,
    pub u: Var,
    pub v: Var,
    pub ws: Var,
    /// Dropout applied to `U x`.
    pub dropout: f64,
}

/// Element count of one site's second-level attention parameters.
pub fn dhicm_param_count_per_site(d: usize, d_k: usize, d_m: usize) -> usize {
    2 * d_m * d_k + 2 * d_m * d
}

/// Per-position head outputs `[positions, H, d_k]`, before any output
/// projection.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub var: Var,
    pub positions: usize,
    pub heads: usize,
    pub d_k: usize,
}

/// Head-importance distributions produced at one site during a forward pass.
#[derive(Clone, Debug)]
pub struct ImportanceRecord {
    pub site: SiteId,
    /// Pre-softmax scores `[positions, H]`.
    pub scores: Var,
    /// Importances `[positions, H]`; each row is a distribution.
    pub importance: Var,
    /// `true` for real (non-padding) query positions.
    pub query_mask: Vec<bool>,
}

/// Evaluation-time ablation of heads at one site.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadPruning {
    pub site: SiteId,
    pub heads: Vec<usize>,
    /// Renormalize importances over the surviving heads.
    pub renormalize: bool,
}

/// Options shared by the attention sublayer functions.
#[derive(Clone, Copy, Debug)]
pub struct AttnOptions {
    pub training: bool,
    pub attn_dropout: f64,
    pub seed: u64,
}

/// Output of [`multi_head_forward`].
#[derive(Clone, Copy, Debug)]
pub struct MhaOutput {
    pub heads: HeadOutputs,
    /// Attention probabilities `[B, H, M, N]`.
    pub weights: Var,
}

/// Runs `H` scaled dot-product attentions in parallel.
///
/// `queries` is `[B·M, d]`, `memory` is `[B·N, d]`; `mask` is broadcastable
/// to `[B, H, M, N]` with `true` meaning attention is allowed. A query row
/// with nothing allowed yields a zero head output.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_forward(
    tape: &mut Tape,
    queries: Var,
    memory: Var,
    batch: usize,
    params: &MhaParams,
    heads: usize,
    mask: Option<&Mask>,
    opts: AttnOptions,
) -> Result<MhaOutput> {
    let qs = tape.shape(queries).to_vec();
    let ms = tape.shape(memory).to_vec();
    if qs.len() != 2 || ms.len() != 2 || qs[1] != ms[1] || batch == 0 {
        return Err(Error::shape("multi_head_forward", &qs, &ms));
    }
    if qs[0] % batch != 0 || ms[0] % batch != 0 {
        return Err(Error::shape("multi_head_forward", &qs, &[batch]));
    }
    let (m, n) = (qs[0] / batch, ms[0] / batch);
    let inner = tape.shape(params.wq)[1];
    if heads == 0 || inner % heads != 0 {
        return Err(Error::Config(format!("{inner} projection columns not divisible into {heads} heads")));
    }
    let d_k = inner / heads;

    let split = |tape: &mut Tape, x: Var, w: Var, len: usize| -> Result<Var> {
        let p = tape.matmul(x, w)?;
        let p = tape.reshape(p, &[batch, len, heads, d_k])?;
        tape.permute(p, &[0, 2, 1, 3])
    };
    let q = split(tape, queries, params.wq, m)?;
    let k = split(tape, memory, params.wk, n)?;
    let v = split(tape, memory, params.wv, n)?;

    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (d_k as f64).sqrt());
    let weights = tape.softmax(scores, 3, mask)?;
    let dropped = tape.dropout(weights, opts.attn_dropout, opts.training, opts.seed)?;
    let o = tape.bmm(dropped, v, false)?;
    let o = tape.permute(o, &[0, 2, 1, 3])?;
    let o = tape.reshape(o, &[batch * m, heads, d_k])?;
    Ok(MhaOutput {
        heads: HeadOutputs {
            var: o,
            positions: batch * m,
            heads,
            d_k,
        },
        weights,
    })
}

/// One attention head over a single sequence: `x: [N, d]`, `y: [M, d]`,
/// projections `[d, d_k]`, mask `[M, N]`. Returns `[M, d_k]`.
pub fn single_head_attention(
    tape: &mut Tape,
    x: Var,
    y: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    mask: Option<&Mask>,
) -> Result<Var> {
    let params = MhaParams { wq, wk, wv, wo: None };
    let opts = AttnOptions { training: false, attn_dropout: 0.0, seed: 0 };
    let out = multi_head_forward(tape, y, x, 1, &params, 1, mask, opts)?;
    let m = out.heads.positions;
    tape.reshape(out.heads.var, &[m, out.heads.d_k])
}

/// Concatenates heads along the feature axis and projects by `wo`.
pub fn baseline_combine(tape: &mut Tape, o: &HeadOutputs, wo: Var) -> Result<Var> {
    let flat = tape.reshape(o.var, &[o.positions, o.heads * o.d_k])?;
    tape.matmul(flat, wo)
}

/// Bilinear head scores `s[m,h] = O[m,h]ᵀ Wᵀ drop(U x_m) / √d_m`.
pub fn dhicm_scores(
    tape: &mut Tape,
    x: Var,
    o: &HeadOutputs,
    params: &DhicmParams,
    training: bool,
    seed: u64,
) -> Result<Var> {
    let (ws, us, vs, wss) = (
        tape.shape(params.w).to_vec(),
        tape.shape(params.u).to_vec(),
        tape.shape(params.v).to_vec(),
        tape.shape(params.ws).to_vec(),
    );
    let d_m = us[0];
    if ws[0] != d_m || vs[0] != d_m || wss.get(1) != Some(&d_m) {
        return Err(Error::Config(format!(
            "second-level attention d_m mismatch: W {ws:?}, U {us:?}, V {vs:?}, W_s {wss:?}"
        )));
    }
    if ws[1] != o.d_k {
        return Err(Error::shape("dhicm_scores", &ws, &[o.positions, o.heads, o.d_k]));
    }
    let ut = tape.transpose(params.u)?;
    let ux = tape.matmul(x, ut)?;
    let ux = tape.dropout(ux, params.dropout, training, seed)?;
    // (Ux)ᵀ W is the row form of Wᵀ U x.
    let z = tape.matmul(ux, params.w)?;
    let z = tape.reshape(z, &[o.positions, o.d_k, 1])?;
    let s = tape.bmm(o.var, z, false)?;
    let s = tape.reshape(s, &[o.positions, o.heads])?;
    Ok(tape.scale(s, 1.0 / (d_m as f64).sqrt()))
}

/// Softmax of head scores across the head axis.
pub fn dhicm_importance(tape: &mut Tape, scores: Var) -> Result<Var> {
    let axis = tape.shape(scores).len().checked_sub(1).ok_or_else(|| {
        Error::shape("dhicm_importance", &[], &[])
    })?;
    tape.softmax(scores, axis, None)
}

/// `out[m] = W_s Σ_h a[m,h] V O[m,h]`.
pub fn dhicm_combine(tape: &mut Tape, a: Var, o: &HeadOutputs, params: &DhicmParams) -> Result<Var> {
    if tape.shape(a) != [o.positions, o.heads] {
        return Err(Error::shape("dhicm_combine", tape.shape(a), &[o.positions, o.heads]));
    }
    // V is linear, so Σ_h a_h V O^h = V Σ_h a_h O^h.
    let a3 = tape.reshape(a, &[o.positions, 1, o.heads])?;
    let mixed = tape.bmm(a3, o.var, false)?;
    let mixed = tape.reshape(mixed, &[o.positions, o.d_k])?;
    let vt = tape.transpose(params.v)?;
    let projected = tape.matmul(mixed, vt)?;
    let wst = tape.transpose(params.ws)?;
    tape.matmul(projected, wst)
}

/// Output of [`dhicm_forward`].
#[derive(Clone, Debug)]
pub struct DhicmOutput {
    pub output: Var,
    pub record: ImportanceRecord,
    pub weights: Var,
}

/// Full attention sublayer with the head-importance combine.
#[allow(clippy::too_many_arguments)]
pub fn dhicm_forward(
    tape: &mut Tape,
    site: SiteId,
    queries: Var,
    memory: Var,
    batch: usize,
    mha: &MhaParams,
    dhicm: &DhicmParams,
    heads: usize,
    mask: Option<&Mask>,
    query_mask: Vec<bool>,
    opts: AttnOptions,
) -> Result<DhicmOutput> {
    let mha_opts = AttnOptions { seed: derive_index(opts.seed, 0), ..opts };
    let out = multi_head_forward(tape, queries, memory, batch, mha, heads, mask, mha_opts)?;
    let scores = dhicm_scores(tape, queries, &out.heads, dhicm, opts.training, derive_index(opts.seed, 1))?;
    let a = dhicm_importance(tape, scores)?;
    let output = dhicm_combine(tape, a, &out.heads, dhicm)?;
    Ok(DhicmOutput {
        output,
        record: ImportanceRecord {
            site,
            scores,
            importance: a,
            query_mask,
        },
        weights: out.weights,
    })
}

/// Zeroes the listed heads of `o`.
pub fn zero_heads(tape: &mut Tape, o: &HeadOutputs, pruned: &[usize]) -> Result<HeadOutputs> {
    let keep = head_keep_vector(o.heads, pruned)?;
    let keep = Tensor::new(vec![1, o.heads, 1], keep)?;
    let var = tape.mul_const(o.var, &keep)?;
    Ok(HeadOutputs { var, ..*o })
}

/// Restricts importances to surviving heads and renormalizes each row.
pub fn renormalize_importance(tape: &mut Tape, a: Var, heads: usize, pruned: &[usize]) -> Result<Var> {
    let keep = Tensor::new(vec![heads], head_keep_vector(heads, pruned)?)?;
    let kept = tape.mul_const(a, &keep)?;
    let total = tape.sum_axis(kept, 1)?;
    let rows = tape.shape(total)[0];
    let total = tape.reshape(total, &[rows, 1])?;
    tape.div(kept, total)
}

fn head_keep_vector(heads: usize, pruned: &[usize]) -> Result<Vec<f64>> {
    let mut keep = vec![1.0; heads];
    for &h in pruned {
        if h >= heads {
            return Err(Error::Analysis(format!("head {h} out of range for {heads} heads")));
        }
        keep[h] = 0.0;
    }
    if keep.iter().all(|&k| k == 0.0) {
        return Err(Error::Analysis("cannot prune all heads".into()));
    }
    Ok(keep)
}

//! Encoder-decoder transformer with head-importance combine at configurable
//! attention sites.
//!
//! Layers use pre-norm ordering: `x + drop(sublayer(LN(x)))`. Source and
//! target share one vocabulary and one embedding table, which also serves as
//! the output projection.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{
    baseline_combine, dhicm_combine, dhicm_importance, dhicm_scores, multi_head_forward,
    renormalize_importance, zero_heads, AttentionKind, AttnOptions, DhicmParams, HeadPruning,
    ImportanceRecord, MhaParams, SiteId,
};
use crate::attention::dhicm_param_count_per_site;
use crate::autodiff::{Mask, Tape, Var};
use crate::config::ModelConfig;
use crate::data::{Batch, PAD};
use crate::error::{Error, Result};
use crate::rng::{derive_index, derive_seed};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        let name = name.into();
        let id = self.names.len();
        assert!(self.index.insert(name.clone(), id).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(Arc::new(t));
        id
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| self.get(i))
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[id])
    }

    pub fn arc(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.tensors[id])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter().map(|t| &**t))
    }

    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct DhicmSlots {
    w: usize,
    u: usize,
    v: usize,
    ws: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct AttnSlots {
    site: SiteId,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: Option<usize>,
    dhicm: Option<DhicmSlots>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct NormSlots {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct FfnSlots {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct EncoderLayer {
    norm_attn: NormSlots,
    attn: AttnSlots,
    norm_ffn: NormSlots,
    ffn: FfnSlots,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct DecoderLayer {
    norm_self: NormSlots,
    self_attn: AttnSlots,
    norm_cross: NormSlots,
    cross_attn: AttnSlots,
    norm_ffn: NormSlots,
    ffn: FfnSlots,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    embed: usize,
    encoder: Vec<EncoderLayer>,
    encoder_norm: NormSlots,
    decoder: Vec<DecoderLayer>,
    decoder_norm: NormSlots,
    sites: Vec<SiteId>,
    positions: Tensor,
}

/// Number of second-level attention parameters the config adds.
pub fn count_dhicm_params(config: &ModelConfig) -> usize {
    dhicm_param_count_per_site(config.d_model, config.d_k(), config.d_m) * config.sites().len()
}

/// Fixed sinusoidal position table `[len, d]`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, d]);
    let half = d / 2;
    for p in 0..len {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let angle = p as f64 * freq;
            t.set(&[p, i], angle.sin());
            t.set(&[p, half + i], angle.cos());
        }
    }
    t
}

struct Builder {
    params: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    fn xavier(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.params.push(name, Tensor::new(vec![rows, cols], data).expect("shape"))
    }

    fn filled(&mut self, name: String, n: usize, v: f64) -> usize {
        self.params.push(name, Tensor::filled(&[n], v))
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormSlots {
        NormSlots {
            gain: self.filled(format!("{prefix}.gain"), d, 1.0),
            bias: self.filled(format!("{prefix}.bias"), d, 0.0),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, hidden: usize) -> FfnSlots {
        FfnSlots {
            w1: self.xavier(format!("{prefix}.w1"), d, hidden),
            b1: self.filled(format!("{prefix}.b1"), hidden, 0.0),
            w2: self.xavier(format!("{prefix}.w2"), hidden, d),
            b2: self.filled(format!("{prefix}.b2"), d, 0.0),
        }
    }

    fn attention(&mut self, site: SiteId, cfg: &ModelConfig, with_dhicm: bool) -> AttnSlots {
        let d = cfg.d_model;
        let inner = cfg.heads * cfg.d_k();
        let p = site.to_string();
        let wq = self.xavier(format!("{p}.wq"), d, inner);
        let wk = self.xavier(format!("{p}.wk"), d, inner);
        let wv = self.xavier(format!("{p}.wv"), d, inner);
        let (wo, dhicm) = if with_dhicm {
            let slots = DhicmSlots {
                w: self.xavier(format!("{p}.dhicm.w"), cfg.d_m, cfg.d_k()),
                u: self.xavier(format!("{p}.dhicm.u"), cfg.d_m, d),
                v: self.xavier(format!("{p}.dhicm.v"), cfg.d_m, cfg.d_k()),
                ws: self.xavier(format!("{p}.dhicm.ws"), d, cfg.d_m),
            };
            (None, Some(slots))
        } else {
            (Some(self.xavier(format!("{p}.wo"), inner, d)), None)
        };
        AttnSlots { site, wq, wk, wv, wo, dhicm }
    }
}

/// Forward-pass switches.
#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    pub training: bool,
    /// Base seed for every dropout mask in the pass.
    pub seed: u64,
    pub pruning: Option<HeadPruning>,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        ForwardOptions::default()
    }

    pub fn train(seed: u64) -> Self {
        ForwardOptions {
            training: true,
            seed,
            pruning: None,
        }
    }
}

/// Tape-level outputs of a full forward pass.
#[derive(Clone, Debug)]
pub struct Graph {
    /// `[B·M, V]`.
    pub logits: Var,
    pub records: Vec<ImportanceRecord>,
    /// Encoder-decoder attention `[B, H, M, N]`, one per decoder layer.
    pub cross_weights: Vec<Var>,
}

/// Value-level importance distributions of one site.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceValues {
    pub site: SiteId,
    /// `[positions, H]`.
    pub a: Tensor,
    pub query_mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardResult {
    /// `[B·M, V]`.
    pub logits: Tensor,
    pub importance: Vec<ImportanceValues>,
    /// `[B, H, M, N]` per decoder layer; empty unless requested.
    pub cross_attention: Vec<Tensor>,
}

/// Encoder output kept for step-wise decoding.
#[derive(Clone, Debug)]
pub struct EncodedSource {
    /// `[B·N, d]`.
    pub memory: Arc<Tensor>,
    pub valid: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

struct Ctx<'a> {
    tape: &'a mut Tape,
    vars: &'a [Var],
    opts: &'a ForwardOptions,
    counter: u64,
}

impl Ctx<'_> {
    fn next_seed(&mut self) -> u64 {
        self.counter += 1;
        derive_index(self.opts.seed, self.counter)
    }

    fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        let seed = self.next_seed();
        self.tape.dropout(x, p, self.opts.training, seed)
    }
}

impl Model {
    /// Builds a model with freshly initialized parameters.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let sites = config.sites();
        let d = config.d_model;
        let mut b = Builder {
            params: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "init")),
        };
        let normal = Normal::new(0.0, (d as f64).powf(-0.5)).expect("positive std");
        let embed_data = (0..config.vocab_size * d).map(|_| normal.sample(&mut b.rng)).collect();
        let embed = b.params.push("embed", Tensor::new(vec![config.vocab_size, d], embed_data)?);

        let has = |s: SiteId| sites.contains(&s);
        let encoder = (0..config.enc_layers)
            .map(|l| {
                let site = SiteId::new(l, AttentionKind::EncoderSelf);
                EncoderLayer {
                    norm_attn: b.norm(&format!("enc.{l}.norm_attn"), d),
                    attn: b.attention(site, &config, has(site)),
                    norm_ffn: b.norm(&format!("enc.{l}.norm_ffn"), d),
                    ffn: b.ffn(&format!("enc.{l}.ffn"), d, config.ffn_dim),
                }
            })
            .collect();
        let encoder_norm = b.norm("enc.norm", d);
        let decoder = (0..config.dec_layers)
            .map(|l| {
                let self_site = SiteId::new(l, AttentionKind::DecoderSelf);
                let cross_site = SiteId::new(l, AttentionKind::DecoderCross);
                DecoderLayer {
                    norm_self: b.norm(&format!("dec.{l}.norm_self"), d),
                    self_attn: b.attention(self_site, &config, has(self_site)),
                    norm_cross: b.norm(&format!("dec.{l}.norm_cross"), d),
                    cross_attn: b.attention(cross_site, &config, has(cross_site)),
                    norm_ffn: b.norm(&format!("dec.{l}.norm_ffn"), d),
                    ffn: b.ffn(&format!("dec.{l}.ffn"), d, config.ffn_dim),
                }
            })
            .collect();
        let decoder_norm = b.norm("dec.norm", d);
        let positions = sinusoidal_positions(config.max_len, d);
        Ok(Model {
            config,
            params: b.params,
            embed,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            sites,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Sites with the head-importance combine attached.
    pub fn dhicm_sites(&self) -> &[SiteId] {
        &self.sites
    }

    pub fn has_site(&self, site: SiteId) -> bool {
        match site.kind {
            AttentionKind::EncoderSelf => site.layer < self.encoder.len(),
            _ => site.layer < self.decoder.len(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.element_count()
    }

    /// Replaces parameter values; names and shapes must match exactly.
    pub fn load_params(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let id = self
                .params
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            if self.params.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    self.params.get(id).shape()
                )));
            }
            *self.params.get_mut(id) = t;
        }
        Ok(())
    }

    /// Puts every parameter on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        (0..self.params.len())
            .map(|i| {
                let t = self.params.arc(i);
                if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect()
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_len {
            return Err(Error::TooLong { len, max: self.config.max_len });
        }
        Ok(())
    }

    /// Full teacher-forced forward pass on a tape.
    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &Batch,
        opts: &ForwardOptions,
    ) -> Result<Graph> {
        if let Some(p) = &opts.pruning {
            if !self.has_site(p.site) {
                return Err(Error::Analysis(format!("site {} does not exist", p.site)));
            }
        }
        let mut ctx = Ctx { tape, vars, opts, counter: 0 };
        let src_valid: Vec<bool> = batch.src.iter().map(|&t| t != PAD).collect();
        let (memory, mut records) =
            self.encode_inner(&mut ctx, &batch.src, batch.batch, batch.src_len)?;
        let (logits, dec_records, cross_weights) = self.decode_inner(
            &mut ctx,
            memory,
            &src_valid,
            batch.batch,
            batch.src_len,
            &batch.tgt_in,
            batch.tgt_len,
        )?;
        records.extend(dec_records);
        Ok(Graph {
            logits,
            records,
            cross_weights,
        })
    }

    /// Forward pass returning plain values.
    pub fn forward(&self, batch: &Batch, opts: &ForwardOptions) -> Result<ForwardResult> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let g = self.forward_graph(&mut tape, &vars, batch, opts)?;
        Ok(ForwardResult {
            logits: tape.value(g.logits).clone(),
            importance: g
                .records
                .iter()
                .map(|r| ImportanceValues {
                    site: r.site,
                    a: tape.value(r.importance).clone(),
                    query_mask: r.query_mask.clone(),
                })
                .collect(),
            cross_attention: g.cross_weights.iter().map(|&w| tape.value(w).clone()).collect(),
        })
    }

    /// Runs the encoder once for later step-wise decoding.
    pub fn encode(&self, src: &[usize], batch: usize, len: usize, opts: &ForwardOptions) -> Result<EncodedSource> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let mut ctx = Ctx { tape: &mut tape, vars: &vars, opts, counter: 0 };
        let (memory, _) = self.encode_inner(&mut ctx, src, batch, len)?;
        Ok(EncodedSource {
            memory: Arc::new(tape.value(memory).clone()),
            valid: src.iter().map(|&t| t != PAD).collect(),
            batch,
            len,
        })
    }

    /// Log-probabilities of the next token after each prefix. `rows[i]`
    /// picks the encoded source row that prefix `i` decodes; all prefixes
    /// must have equal length. Returns `[prefixes, V]`.
    pub fn next_token_log_probs(
        &self,
        enc: &EncodedSource,
        rows: &[usize],
        prefixes: &[Vec<usize>],
        opts: &ForwardOptions,
    ) -> Result<Tensor> {
        let b = prefixes.len();
        let m = prefixes.first().map_or(0, Vec::len);
        if b == 0 || m == 0 || rows.len() != b || prefixes.iter().any(|p| p.len() != m) {
            return Err(Error::Data("prefixes must be non-empty and of equal length".into()));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let memory_all = tape.constant(Arc::clone(&enc.memory));
        let src_rows: Vec<usize> = rows
            .iter()
            .flat_map(|&r| r * enc.len..(r + 1) * enc.len)
            .collect();
        let memory = tape.select_rows(memory_all, &src_rows)?;
        let valid: Vec<bool> = src_rows.iter().map(|&i| enc.valid[i]).collect();
        let tgt: Vec<usize> = prefixes.iter().flatten().copied().collect();
        let mut ctx = Ctx { tape: &mut tape, vars: &vars, opts, counter: 1 << 32 };
        let (logits, _, _) = self.decode_inner(&mut ctx, memory, &valid, b, enc.len, &tgt, m)?;
        let last: Vec<usize> = (0..b).map(|i| i * m + m - 1).collect();
        let last = tape.select_rows(logits, &last)?;
        let lp = tape.log_softmax(last, 1)?;
        Ok(tape.value(lp).clone())
    }

    fn embed_tokens(&self, ctx: &mut Ctx, ids: &[usize], batch: usize, len: usize) -> Result<Var> {
        self.check_len(len)?;
        let d = self.config.d_model;
        let e = ctx.tape.embedding(ctx.vars[self.embed], ids)?;
        let e = ctx.tape.scale(e, (d as f64).sqrt());
        let mut pe = Vec::with_capacity(batch * len * d);
        for _ in 0..batch {
            pe.extend_from_slice(&self.positions.data()[..len * d]);
        }
        let pe = ctx.tape.constant(Tensor::new(vec![batch * len, d], pe)?);
        let x = ctx.tape.add(e, pe)?;
        ctx.dropout(x, self.config.dropout)
    }

    fn norm(&self, ctx: &mut Ctx, x: Var, n: NormSlots) -> Result<Var> {
        ctx.tape.layer_norm(x, ctx.vars[n.gain], ctx.vars[n.bias], LN_EPS)
    }

    fn ffn(&self, ctx: &mut Ctx, x: Var, f: FfnSlots) -> Result<Var> {
        let h = ctx.tape.matmul(x, ctx.vars[f.w1])?;
        let h = ctx.tape.add(h, ctx.vars[f.b1])?;
        let h = ctx.tape.relu(h);
        let h = ctx.dropout(h, self.config.activation_dropout)?;
        let o = ctx.tape.matmul(h, ctx.vars[f.w2])?;
        ctx.tape.add(o, ctx.vars[f.b2])
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        ctx: &mut Ctx,
        slots: &AttnSlots,
        queries: Var,
        memory: Var,
        batch: usize,
        mask: &Mask,
        query_mask: Vec<bool>,
    ) -> Result<(Var, Option<ImportanceRecord>, Var)> {
        let v = ctx.vars;
        let mha = MhaParams {
            wq: v[slots.wq],
            wk: v[slots.wk],
            wv: v[slots.wv],
            wo: slots.wo.map(|i| v[i]),
        };
        let opts = AttnOptions {
            training: ctx.opts.training,
            attn_dropout: self.config.attention_dropout,
            seed: ctx.next_seed(),
        };
        let out = multi_head_forward(ctx.tape, queries, memory, batch, &mha, self.config.heads, Some(mask), opts)?;
        let pruning = ctx.opts.pruning.as_ref().filter(|p| p.site == slots.site && !p.heads.is_empty());
        let mut heads = out.heads;
        if let Some(p) = pruning {
            heads = zero_heads(ctx.tape, &heads, &p.heads)?;
        }
        match (slots.dhicm, mha.wo) {
            (Some(ds), _) => {
                let params = DhicmParams {
                    w: v[ds.w],
                    u: v[ds.u],
                    v: v[ds.v],
                    ws: v[ds.ws],
                    dropout: self.config.dhicm_dropout,
                };
                let seed = ctx.next_seed();
                let scores = dhicm_scores(ctx.tape, queries, &heads, &params, ctx.opts.training, seed)?;
                let mut a = dhicm_importance(ctx.tape, scores)?;
                if let Some(p) = pruning.filter(|p| p.renormalize) {
                    a = renormalize_importance(ctx.tape, a, self.config.heads, &p.heads)?;
                }
                let output = dhicm_combine(ctx.tape, a, &heads, &params)?;
                let record = ImportanceRecord {
                    site: slots.site,
                    scores,
                    importance: a,
                    query_mask,
                };
                Ok((output, Some(record), out.weights))
            }
            (None, Some(wo)) => Ok((baseline_combine(ctx.tape, &heads, wo)?, None, out.weights)),
            (None, None) => unreachable!("attention site without a combine step"),
        }
    }

    fn encode_inner(
        &self,
        ctx: &mut Ctx,
        src: &[usize],
        batch: usize,
        len: usize,
    ) -> Result<(Var, Vec<ImportanceRecord>)> {
        if src.len() != batch * len {
            return Err(Error::shape("encode", &[src.len()], &[batch, len]));
        }
        let valid: Vec<bool> = src.iter().map(|&t| t != PAD).collect();
        let mask = pair_mask(&valid, &valid, batch, len, len, false)?;
        let mut x = self.embed_tokens(ctx, src, batch, len)?;
        let mut records = Vec::new();
        for layer in &self.encoder {
            let h = self.norm(ctx, x, layer.norm_attn)?;
            let (a, rec, _) = self.attention(ctx, &layer.attn, h, h, batch, &mask, valid.clone())?;
            records.extend(rec);
            let a = ctx.dropout(a, self.config.dropout)?;
            x = ctx.tape.add(x, a)?;
            let h = self.norm(ctx, x, layer.norm_ffn)?;
            let f = self.ffn(ctx, h, layer.ffn)?;
            let f = ctx.dropout(f, self.config.dropout)?;
            x = ctx.tape.add(x, f)?;
        }
        let memory = self.norm(ctx, x, self.encoder_norm)?;
        Ok((memory, records))
    }

    #[allow(clippy::too_many_arguments)]
    fn decode_inner(
        &self,
        ctx: &mut Ctx,
        memory: Var,
        src_valid: &[bool],
        batch: usize,
        src_len: usize,
        tgt: &[usize],
        tgt_len: usize,
    ) -> Result<(Var, Vec<ImportanceRecord>, Vec<Var>)> {
        if tgt.len() != batch * tgt_len {
            return Err(Error::shape("decode", &[tgt.len()], &[batch, tgt_len]));
        }
        let valid: Vec<bool> = tgt.iter().map(|&t| t != PAD).collect();
        let self_mask = pair_mask(&valid, &valid, batch, tgt_len, tgt_len, true)?;
        let cross_mask = pair_mask(&valid, src_valid, batch, tgt_len, src_len, false)?;
        let mut x = self.embed_tokens(ctx, tgt, batch, tgt_len)?;
        let mut records = Vec::new();
        let mut cross = Vec::new();
        for layer in &self.decoder {
            let h = self.norm(ctx, x, layer.norm_self)?;
            let (a, rec, _) = self.attention(ctx, &layer.self_attn, h, h, batch, &self_mask, valid.clone())?;
            records.extend(rec);
            let a = ctx.dropout(a, self.config.dropout)?;
            x = ctx.tape.add(x, a)?;

            let h = self.norm(ctx, x, layer.norm_cross)?;
            let (a, rec, w) =
                self.attention(ctx, &layer.cross_attn, h, memory, batch, &cross_mask, valid.clone())?;
            records.extend(rec);
            cross.push(w);
            let a = ctx.dropout(a, self.config.dropout)?;
            x = ctx.tape.add(x, a)?;

            let h = self.norm(ctx, x, layer.norm_ffn)?;
            let f = self.ffn(ctx, h, layer.ffn)?;
            let f = ctx.dropout(f, self.config.dropout)?;
            x = ctx.tape.add(x, f)?;
        }
        let h = self.norm(ctx, x, self.decoder_norm)?;
        let et = ctx.tape.transpose(ctx.vars[self.embed])?;
        let logits = ctx.tape.matmul(h, et)?;
        Ok((logits, records, cross))
    }
}

/// `[B, 1, M, N]` mask: query and key both real, and `j <= i` when causal.
fn pair_mask(
    q_valid: &[bool],
    k_valid: &[bool],
    batch: usize,
    m: usize,
    n: usize,
    causal: bool,
) -> Result<Mask> {
    let mut data = Vec::with_capacity(batch * m * n);
    for b in 0..batch {
        for i in 0..m {
            for j in 0..n {
                data.push(q_valid[b * m + i] && k_valid[b * n + j] && (!causal || j <= i));
            }
        }
    }
    Mask::new(vec![batch, 1, m, n], data)
}

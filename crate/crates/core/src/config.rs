//! Model and training hyperparameters, and the flat `key = value` text format
//! used for config files, `--set` overrides and run manifests.
//!
//! ```text
//! # comment
//! d_model = 64
//! heads = 4
//! placement = enc.last.self,dec.last.self,dec.last.cross
//! ```
//!
//! `placement` also accepts `default` (the three last-layer sites) and `none`.

use std::fmt::Write as _;
use std::path::Path;

use crate::attention::{AttentionKind, SiteId};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerRef {
    Last,
    Index(usize),
}

/// A placement entry whose layer may be given relative to the layer count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SiteRef {
    pub layer: LayerRef,
    pub kind: AttentionKind,
}

impl SiteRef {
    fn text(&self) -> String {
        let layer = match self.layer {
            LayerRef::Last => "last".to_string(),
            LayerRef::Index(i) => i.to_string(),
        };
        match self.kind {
            AttentionKind::EncoderSelf => format!("enc.{layer}.self"),
            AttentionKind::DecoderSelf => format!("dec.{layer}.self"),
            AttentionKind::DecoderCross => format!("dec.{layer}.cross"),
        }
    }

    fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(rest) = s.strip_prefix("enc.last.").or_else(|| s.strip_prefix("dec.last.")) {
            let kind = match (&s[..3], rest) {
                ("enc", "self") => AttentionKind::EncoderSelf,
                ("dec", "self") => AttentionKind::DecoderSelf,
                ("dec", "cross") => AttentionKind::DecoderCross,
                _ => return Err(Error::Config(format!("invalid site `{s}`"))),
            };
            return Ok(SiteRef { layer: LayerRef::Last, kind });
        }
        let site: SiteId = s.parse()?;
        Ok(SiteRef {
            layer: LayerRef::Index(site.layer),
            kind: site.kind,
        })
    }
}

pub fn default_placement() -> Vec<SiteRef> {
    [
        AttentionKind::EncoderSelf,
        AttentionKind::DecoderSelf,
        AttentionKind::DecoderCross,
    ]
    .into_iter()
    .map(|kind| SiteRef { layer: LayerRef::Last, kind })
    .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Inner size of the second-level attention.
    pub d_m: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub activation_dropout: f64,
    /// Dropout on `U x` inside the head-importance scores.
    pub dhicm_dropout: f64,
    pub label_smoothing: f64,
    /// Weight of the anti-uniformity term.
    pub lambda: f64,
    pub placement: Vec<SiteRef>,
    /// Total vocabulary size, reserved ids included.
    pub vocab_size: usize,
    /// Maximum sequence length including framing tokens.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            heads: 4,
            d_m: 64,
            enc_layers: 2,
            dec_layers: 2,
            ffn_dim: 128,
            dropout: 0.1,
            attention_dropout: 0.0,
            activation_dropout: 0.0,
            dhicm_dropout: 0.2,
            label_smoothing: 0.1,
            lambda: 0.1,
            placement: default_placement(),
            vocab_size: 36,
            max_len: 32,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return err(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if self.d_m == 0 || self.ffn_dim == 0 {
            return err("d_m and ffn_dim must be positive".into());
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return err("encoder and decoder need at least one layer".into());
        }
        for (name, p) in [
            ("dropout", self.dropout),
            ("attention_dropout", self.attention_dropout),
            ("activation_dropout", self.activation_dropout),
            ("dhicm_dropout", self.dhicm_dropout),
            ("label_smoothing", self.label_smoothing),
        ] {
            if !(0.0..1.0).contains(&p) {
                return err(format!("{name} = {p} outside [0, 1)"));
            }
        }
        if !(self.lambda >= 0.0) {
            return err(format!("lambda = {} must be >= 0", self.lambda));
        }
        if self.vocab_size < 5 {
            return err(format!("vocab_size {} leaves no content tokens", self.vocab_size));
        }
        if self.max_len < 2 {
            return err("max_len must be at least 2".into());
        }
        for site in &self.placement {
            if let LayerRef::Index(i) = site.layer {
                let layers = match site.kind {
                    AttentionKind::EncoderSelf => self.enc_layers,
                    _ => self.dec_layers,
                };
                if i >= layers {
                    return err(format!("placement site {} does not exist ({layers} layers)", site.text()));
                }
            }
        }
        Ok(())
    }

    /// Placement resolved to concrete, sorted, de-duplicated sites.
    pub fn sites(&self) -> Vec<SiteId> {
        let mut out: Vec<SiteId> = self
            .placement
            .iter()
            .map(|s| {
                let layers = match s.kind {
                    AttentionKind::EncoderSelf => self.enc_layers,
                    _ => self.dec_layers,
                };
                let layer = match s.layer {
                    LayerRef::Last => layers - 1,
                    LayerRef::Index(i) => i,
                };
                SiteId::new(layer, s.kind)
            })
            .collect();
        out.sort();
        out.dedup();
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Padded-token budget per batch.
    pub max_tokens: usize,
    pub max_epochs: usize,
    /// Step cap; 0 means no cap.
    pub max_steps: u64,
    /// Consecutive non-improving epochs before stopping; 0 disables.
    pub patience: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub beam: usize,
    pub length_penalty: f64,
    /// Decode the validation set and log BLEU after every epoch.
    pub valid_bleu: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            warmup: 400,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-6,
            max_tokens: 512,
            max_epochs: 100,
            max_steps: 0,
            patience: 10,
            clip_norm: 1.0,
            beam: 5,
            length_penalty: 1.0,
            valid_bleu: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.warmup == 0 {
            return Err(Error::Config("lr and warmup must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("invalid Adam betas/eps".into()));
        }
        if self.beam == 0 {
            return Err(Error::Config("beam must be >= 1".into()));
        }
        Ok(())
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let value = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "d_model" => m.d_model = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "d_m" => m.d_m = parse(key, value)?,
            "enc_layers" => m.enc_layers = parse(key, value)?,
            "dec_layers" => m.dec_layers = parse(key, value)?,
            "layers" => {
                m.enc_layers = parse(key, value)?;
                m.dec_layers = m.enc_layers;
            }
            "ffn_dim" => m.ffn_dim = parse(key, value)?,
            "dropout" => m.dropout = parse(key, value)?,
            "attention_dropout" => m.attention_dropout = parse(key, value)?,
            "activation_dropout" => m.activation_dropout = parse(key, value)?,
            "dhicm_dropout" => m.dhicm_dropout = parse(key, value)?,
            "label_smoothing" => m.label_smoothing = parse(key, value)?,
            "lambda" => m.lambda = parse(key, value)?,
            "placement" => {
                m.placement = match value {
                    "default" => default_placement(),
                    "none" | "" => Vec::new(),
                    list => list.split(',').map(SiteRef::parse).collect::<Result<_>>()?,
                }
            }
            "vocab_size" => m.vocab_size = parse(key, value)?,
            "max_len" => m.max_len = parse(key, value)?,
            "seed" => m.seed = parse(key, value)?,
            "norm" => {
                if value != "pre" {
                    return Err(Error::Config("only pre-norm layers are implemented (norm = pre)".into()));
                }
            }
            "lr" => t.lr = parse(key, value)?,
            "warmup" => t.warmup = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "max_tokens" => t.max_tokens = parse(key, value)?,
            "max_epochs" => t.max_epochs = parse(key, value)?,
            "max_steps" => t.max_steps = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "clip_norm" => t.clip_norm = parse(key, value)?,
            "beam" => t.beam = parse(key, value)?,
            "length_penalty" => t.length_penalty = parse(key, value)?,
            "valid_bleu" => t.valid_bleu = parse(key, value)?,
            "precision" => {
                if value != "f64" {
                    return Err(Error::Config("only precision = f64 is supported".into()));
                }
            }
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        self.set(k, v)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&std::fs::read_to_string(path)?)
    }

    /// Serializes every key; `from_kv(to_kv())` reproduces the config.
    pub fn to_kv(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let placement = if m.placement.is_empty() {
            "none".to_string()
        } else {
            m.placement.iter().map(SiteRef::text).collect::<Vec<_>>().join(",")
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("d_model", m.d_model.to_string());
        kv("heads", m.heads.to_string());
        kv("d_m", m.d_m.to_string());
        kv("enc_layers", m.enc_layers.to_string());
        kv("dec_layers", m.dec_layers.to_string());
        kv("ffn_dim", m.ffn_dim.to_string());
        kv("dropout", fmt_f(m.dropout));
        kv("attention_dropout", fmt_f(m.attention_dropout));
        kv("activation_dropout", fmt_f(m.activation_dropout));
        kv("dhicm_dropout", fmt_f(m.dhicm_dropout));
        kv("label_smoothing", fmt_f(m.label_smoothing));
        kv("lambda", fmt_f(m.lambda));
        kv("placement", placement);
        kv("vocab_size", m.vocab_size.to_string());
        kv("max_len", m.max_len.to_string());
        kv("seed", m.seed.to_string());
        kv("norm", "pre".into());
        kv("precision", "f64".into());
        kv("lr", fmt_f(t.lr));
        kv("warmup", t.warmup.to_string());
        kv("beta1", fmt_f(t.beta1));
        kv("beta2", fmt_f(t.beta2));
        kv("adam_eps", fmt_f(t.adam_eps));
        kv("max_tokens", t.max_tokens.to_string());
        kv("max_epochs", t.max_epochs.to_string());
        kv("max_steps", t.max_steps.to_string());
        kv("patience", t.patience.to_string());
        kv("clip_norm", fmt_f(t.clip_norm));
        kv("beam", t.beam.to_string());
        kv("length_penalty", fmt_f(t.length_penalty));
        kv("valid_bleu", t.valid_bleu.to_string());
        s
    }
}

/// Shortest representation that parses back to the same `f64`.
fn fmt_f(x: f64) -> String {
    format!("{x:?}")
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

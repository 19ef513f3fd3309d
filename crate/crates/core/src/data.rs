//! Synthetic parallel corpora, vocabularies and token-budget batching.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::derive_seed;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token/id bijection with fixed reserved ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved ids plus the given content tokens, in order.
    pub fn new<I, S>(content: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(content.into_iter().map(Into::into));
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Vocabulary of `symbols` synthetic tokens `w0 .. w{symbols-1}`.
    pub fn synthetic(symbols: usize) -> Self {
        Vocab::new((0..symbols).map(|i| format!("w{i}"))).expect("synthetic tokens are valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Maps tokens to ids; unknown tokens become `<unk>`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref()).unwrap_or(UNK)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&i| {
                self.token(i)
                    .map(str::to_string)
                    .ok_or_else(|| Error::Data(format!("id {i} outside vocabulary of {}", self.len())))
            })
            .collect()
    }

    /// Space-joined tokens with framing and padding tokens removed.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD && i != BOS && i != EOS)
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        for t in &self.tokens[RESERVED.len()..] {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Vocab::new(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }

    /// Joint vocabulary over every token of the given files, sorted.
    pub fn from_files(paths: &[&Path]) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for p in paths {
            for line in BufReader::new(fs::File::open(p)?).lines() {
                for tok in line?.split_whitespace() {
                    if !RESERVED.contains(&tok) {
                        seen.insert(tok.to_string());
                    }
                }
            }
        }
        Vocab::new(seen)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Copy,
    Reverse,
    /// Token-wise bijective relabeling followed by swapping adjacent pairs.
    Lexicon,
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "lexicon" => Ok(TaskKind::Lexicon),
            _ => Err(Error::Data(format!("unknown task `{s}` (copy|reverse|lexicon)"))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Lexicon => "lexicon",
        })
    }
}

/// Generator parameters. `symbols` counts content tokens; the model
/// vocabulary adds the four reserved ids on top.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub symbols: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub size: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Data("task size must be >= 1".into()));
        }
        if self.symbols < 2 {
            return Err(Error::Data("need at least 2 symbols".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Data(format!(
                "invalid length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::synthetic(self.symbols)
    }

    /// Relabeling used by the lexicon task, indexed by content offset.
    pub fn lexicon(&self) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.symbols).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "lexicon"));
        perm.shuffle(&mut rng);
        perm
    }

    /// Target sequence for `src` under this task.
    pub fn target(&self, src: &[usize], lexicon: &[usize]) -> Vec<usize> {
        match self.kind {
            TaskKind::Copy => src.to_vec(),
            TaskKind::Reverse => src.iter().rev().copied().collect(),
            TaskKind::Lexicon => {
                let mut t: Vec<usize> = src
                    .iter()
                    .map(|&s| RESERVED.len() + lexicon[s - RESERVED.len()])
                    .collect();
                for pair in t.chunks_mut(2) {
                    pair.reverse();
                }
                t
            }
        }
    }
}

pub type Pair = (Vec<usize>, Vec<usize>);

#[derive(Clone, Debug, PartialEq)]
pub struct ParallelCorpus {
    pub pairs: Vec<Pair>,
    pub split: Split,
    pub spec: Option<TaskSpec>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// First `n` pairs (nested subsets for size sweeps).
    pub fn prefix(&self, n: usize) -> ParallelCorpus {
        ParallelCorpus {
            pairs: self.pairs[..n.min(self.pairs.len())].to_vec(),
            split: self.split,
            spec: self.spec.clone().map(|s| TaskSpec { size: n, ..s }),
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        for (i, (s, t)) in self.pairs.iter().enumerate() {
            if s.is_empty() || t.is_empty() {
                return Err(Error::Data(format!("pair {i} has an empty side")));
            }
            if let Some(&bad) = s.iter().chain(t).find(|&&id| id >= vocab_size) {
                return Err(Error::Data(format!("pair {i}: id {bad} outside vocabulary of {vocab_size}")));
            }
        }
        Ok(())
    }

    /// Writes `<dir>/<name>.src` and `<dir>/<name>.tgt`.
    pub fn save(&self, dir: &Path, name: &str, vocab: &Vocab) -> Result<()> {
        let mut src = fs::File::create(dir.join(format!("{name}.src")))?;
        let mut tgt = fs::File::create(dir.join(format!("{name}.tgt")))?;
        for (s, t) in &self.pairs {
            writeln!(src, "{}", vocab.decode(s)?.join(" "))?;
            writeln!(tgt, "{}", vocab.decode(t)?.join(" "))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, name: &str, split: Split, vocab: &Vocab) -> Result<Self> {
        let read = |ext: &str| -> Result<Vec<Vec<usize>>> {
            let path = dir.join(format!("{name}.{ext}"));
            let text = fs::read_to_string(&path)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            Ok(text
                .lines()
                .map(|l| vocab.encode(&l.split_whitespace().collect::<Vec<_>>()))
                .collect())
        };
        let src = read("src")?;
        let tgt = read("tgt")?;
        if src.len() != tgt.len() {
            return Err(Error::Data(format!(
                "{name}: {} source lines but {} target lines",
                src.len(),
                tgt.len()
            )));
        }
        let corpus = ParallelCorpus {
            pairs: src.into_iter().zip(tgt).collect(),
            split,
            spec: None,
        };
        corpus.validate(vocab.len())?;
        Ok(corpus)
    }
}

/// Generates one split, skipping any pair in `exclude` and any duplicate.
pub fn gen_task(spec: &TaskSpec, split: Split, exclude: &HashSet<Pair>) -> Result<ParallelCorpus> {
    spec.validate()?;
    let lexicon = spec.lexicon();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &split.to_string()));
    let mut seen: HashSet<Pair> = HashSet::new();
    let mut pairs = Vec::with_capacity(spec.size);
    let max_attempts = spec.size.saturating_mul(50).max(1000);
    let mut attempts = 0;
    while pairs.len() < spec.size {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Data(format!(
                "could only generate {} distinct {split} pairs of the requested {}",
                pairs.len(),
                spec.size
            )));
        }
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let src: Vec<usize> = (0..len)
            .map(|_| RESERVED.len() + rng.gen_range(0..spec.symbols))
            .collect();
        let tgt = spec.target(&src, &lexicon);
        let pair = (src, tgt);
        if exclude.contains(&pair) || !seen.insert(pair.clone()) {
            continue;
        }
        pairs.push(pair);
    }
    Ok(ParallelCorpus {
        pairs,
        split,
        spec: Some(spec.clone()),
    })
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: ParallelCorpus,
    pub valid: ParallelCorpus,
    pub test: ParallelCorpus,
}

/// Test, then validation, then training data, each disjoint from the ones
/// generated before it. `spec.size` is ignored.
pub fn gen_splits(spec: &TaskSpec, train: usize, valid: usize, test: usize) -> Result<Splits> {
    let with = |size| TaskSpec { size, ..spec.clone() };
    let mut used: HashSet<Pair> = HashSet::new();
    let test = gen_task(&with(test), Split::Test, &used)?;
    used.extend(test.pairs.iter().cloned());
    let valid = gen_task(&with(valid), Split::Valid, &used)?;
    used.extend(valid.pairs.iter().cloned());
    let train = gen_task(&with(train), Split::Train, &used)?;
    Ok(Splits { train, valid, test })
}

/// Padded batch in row-major `[batch, len]` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Source ids followed by `</s>`.
    pub src: Vec<usize>,
    /// `<s>` followed by target ids (decoder input).
    pub tgt_in: Vec<usize>,
    /// Target ids followed by `</s>` (decoder output).
    pub tgt_out: Vec<usize>,
    pub batch: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    /// Corpus index of each row.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&Pair], indices: Vec<usize>) -> Batch {
        let src_len = pairs.iter().map(|(s, _)| s.len() + 1).max().unwrap_or(1);
        let tgt_len = pairs.iter().map(|(_, t)| t.len() + 1).max().unwrap_or(1);
        let b = pairs.len();
        let mut src = vec![PAD; b * src_len];
        let mut tgt_in = vec![PAD; b * tgt_len];
        let mut tgt_out = vec![PAD; b * tgt_len];
        for (r, (s, t)) in pairs.iter().enumerate() {
            src[r * src_len..r * src_len + s.len()].copy_from_slice(s);
            src[r * src_len + s.len()] = EOS;
            tgt_in[r * tgt_len] = BOS;
            tgt_in[r * tgt_len + 1..r * tgt_len + 1 + t.len()].copy_from_slice(t);
            tgt_out[r * tgt_len..r * tgt_len + t.len()].copy_from_slice(t);
            tgt_out[r * tgt_len + t.len()] = EOS;
        }
        Batch {
            src,
            tgt_in,
            tgt_out,
            batch: b,
            src_len,
            tgt_len,
            indices,
        }
    }

    pub fn src_mask(&self) -> Vec<bool> {
        self.src.iter().map(|&t| t != PAD).collect()
    }

    pub fn tgt_mask(&self) -> Vec<bool> {
        self.tgt_out.iter().map(|&t| t != PAD).collect()
    }

    pub fn target_tokens(&self) -> usize {
        self.tgt_out.iter().filter(|&&t| t != PAD).count()
    }
}

/// Sorts pairs by length and packs them so that
/// `rows * (longest side + 2) <= max_tokens` for every batch.
pub fn batchify(corpus: &ParallelCorpus, max_tokens: usize) -> Result<Vec<Batch>> {
    let cost = |p: &Pair| p.0.len().max(p.1.len()) + 2;
    let mut order: Vec<usize> = (0..corpus.pairs.len()).collect();
    if let Some(&worst) = order.iter().max_by_key(|&&i| cost(&corpus.pairs[i])) {
        let c = cost(&corpus.pairs[worst]);
        if c > max_tokens {
            return Err(Error::Data(format!(
                "pair {worst} needs {c} tokens, over the batch budget of {max_tokens}"
            )));
        }
    }
    order.sort_by_key(|&i| (cost(&corpus.pairs[i]), corpus.pairs[i].0.len(), i));
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut width = 0;
    for i in order {
        let c = cost(&corpus.pairs[i]);
        let w = width.max(c);
        if !current.is_empty() && (current.len() + 1) * w > max_tokens {
            batches.push(make_batch(corpus, std::mem::take(&mut current)));
            width = 0;
        }
        width = width.max(c);
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(make_batch(corpus, current));
    }
    Ok(batches)
}

fn make_batch(corpus: &ParallelCorpus, indices: Vec<usize>) -> Batch {
    let pairs: Vec<&Pair> = indices.iter().map(|&i| &corpus.pairs[i]).collect();
    Batch::from_pairs(&pairs, indices)
}

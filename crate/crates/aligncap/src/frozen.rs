//! Frozen stand-ins for the pretrained components: a whitespace tokenizer
//! with a fixed word list, a per-patch vision encoder, a text encoder with
//! mean pooling, and a tiny causal LLM (embedding + positional table + one
//! self-attention block + logit head).
//!
//! Everything here is a pure function of (input, seed). All parameters are
//! `trainable == false`: gradients flow through them to upstream trainable
//! tensors but optimizer steps never touch them.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{CrossAttention, LayerNorm, Linear};
use crate::tensor::{Init, Parameter, Rng, Tape, Tensor, TensorId};

pub const UNK: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const RESERVED: usize = 3;

/// Fixed word list with 3 reserved ids. Line i of a vocab file maps to id 3+i.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(words: &[&str]) -> Result<Self> {
        Self::from_words(words.iter().map(|w| w.to_string()), "<builtin>")
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let words = text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty());
        Self::from_words(words, &path.display().to_string())
    }

    fn from_words(words: impl Iterator<Item = String>, source: &str) -> Result<Self> {
        let mut v = Self { words: Vec::new(), index: HashMap::new() };
        for (i, word) in words.enumerate() {
            let word = word.to_lowercase();
            if v.index.contains_key(&word) {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line: i + 1,
                    msg: format!("duplicate word `{word}`"),
                });
            }
            v.index.insert(word.clone(), RESERVED + v.words.len());
            v.words.push(word);
        }
        Ok(v)
    }

    /// Total id count including the 3 reserved tokens.
    pub fn len(&self) -> usize {
        RESERVED + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(&word.to_lowercase()).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        match id {
            UNK => "<unk>",
            BOS => "<bos>",
            EOS => "<eos>",
            _ => &self.words[id - RESERVED],
        }
    }

    /// Lowercase, whitespace-split, OOV -> <unk>, wrapped in <bos>/<eos>.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        for word in text.split_whitespace() {
            ids.push(self.id(word).unwrap_or(UNK));
        }
        ids.push(EOS);
        ids
    }

    /// Inverse of tokenize on in-vocab text (reserved ids are skipped).
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id >= RESERVED)
            .map(|&id| self.word(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.len()) {
            return Err(Error::RowIndexOutOfRange { index: bad, rows: self.len() });
        }
        Ok(())
    }
}

/// Synthetic G×G×C scene raster, the desk-scale stand-in for an image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneInput {
    /// [G, G, C]
    pub shape: [usize; 3],
    /// Row-major patch values, length G·G·C.
    pub data: Vec<f64>,
}

impl SceneInput {
    pub fn new(g: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let s = Self { shape: [g, g, channels], data };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let [gy, gx, c] = self.shape;
        if gy == 0 || gx == 0 || c == 0 {
            return Err(Error::EmptyDimension("scene shape"));
        }
        if gy != gx {
            return Err(Error::Config(format!("scene grid must be square, got {gy}x{gx}")));
        }
        if self.data.len() != gy * gx * c {
            return Err(Error::ShapeMismatch {
                op: "SceneInput",
                lhs: format!("{:?}", self.shape),
                rhs: format!("data len {}", self.data.len()),
            });
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("scene contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[2]
    }

    /// Flattened [G*G, C] patch tensor.
    pub fn patches(&self) -> Tensor {
        Tensor { shape: vec![self.grid() * self.grid(), self.channels()], data: self.data.clone(), requires_grad: false, grad: None }
    }
}

/// Per-patch 2-layer MLP over scene channels, frozen.
#[derive(Debug, Clone)]
pub struct FrozenVisionEncoder {
    pub grid: usize,
    pub channels: usize,
    pub d_v: usize,
    l1: Linear,
    l2: Linear,
}

impl FrozenVisionEncoder {
    pub fn new(seed: u64, grid: usize, channels: usize, d_v: usize) -> Self {
        let mut rng = Rng::new(seed);
        Self {
            grid,
            channels,
            d_v,
            l1: Linear::new("vision.l1", channels, d_v, Init::FanIn { fan_in: channels }, &mut rng).frozen(),
            l2: Linear::new("vision.l2", d_v, d_v, Init::FanIn { fan_in: d_v }, &mut rng).frozen(),
        }
    }

    /// patches: [G*G, C] -> feature map [G*G, D_v], recorded on the tape so
    /// gradients pass through to trainable producers of `patches`.
    pub fn encode(&self, t: &mut Tape, patches: TensorId) -> Result<TensorId> {
        let shape = t.shape(patches);
        if shape != [self.grid * self.grid, self.channels] {
            return Err(Error::ShapeMismatch {
                op: "encode_image",
                lhs: format!("{shape:?}"),
                rhs: format!("[{}, {}]", self.grid * self.grid, self.channels),
            });
        }
        let h = self.l1.forward(t, patches)?;
        let a = t.silu(h);
        self.l2.forward(t, a)
    }

    /// Pure convenience wrapper over a scratch tape.
    pub fn encode_scene(&self, scene: &SceneInput) -> Result<Tensor> {
        let mut t = Tape::new();
        let p = t.constant(&scene.patches());
        let f = self.encode(&mut t, p)?;
        Ok(t.to_tensor(f))
    }

    pub fn for_each(&self, f: &mut dyn FnMut(&Parameter)) {
        self.l1.for_each(f);
        self.l2.for_each(f);
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.l1.for_each_mut(f);
        self.l2.for_each_mut(f);
    }
}

/// Frozen embedding + single SiLU layer; pooled output is the row mean.
#[derive(Debug, Clone)]
pub struct FrozenTextEncoder {
    pub d_t: usize,
    vocab_len: usize,
    emb: Parameter,
    proj: Linear,
}

impl FrozenTextEncoder {
    pub fn new(seed: u64, vocab: &Vocab, d_t: usize) -> Self {
        let mut rng = Rng::new(seed);
        let emb = Parameter::from_tensor(
            "text.emb",
            Tensor::uniform(vec![vocab.len(), d_t], -0.5, 0.5, &mut rng),
        )
        .frozen();
        Self {
            d_t,
            vocab_len: vocab.len(),
            emb,
            proj: Linear::new("text.proj", d_t, d_t, Init::FanIn { fan_in: d_t }, &mut rng).frozen(),
        }
    }

    /// ids -> (per-token [L, D_t], pooled [1, D_t]).
    pub fn encode(&self, t: &mut Tape, ids: &[usize]) -> Result<(TensorId, TensorId)> {
        if ids.is_empty() {
            return Err(Error::EmptyDimension("encode_text ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.vocab_len) {
            return Err(Error::RowIndexOutOfRange { index: bad, rows: self.vocab_len });
        }
        let table = t.param(&self.emb);
        let rows = t.gather_rows(table, ids)?;
        let h = self.proj.forward(t, rows)?;
        let per_token = t.silu(h);
        let pooled = t.mean_rows(per_token)?;
        Ok((per_token, pooled))
    }

    pub fn for_each(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.emb);
        self.proj.for_each(f);
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.emb);
        self.proj.for_each_mut(f);
    }
}

/// Frozen decoder-only LLM: token + positional embeddings, one causal
/// self-attention block with pre-norm residual, and a logit head.
#[derive(Debug, Clone)]
pub struct LLMStub {
    pub vocab: Vocab,
    pub d_llm: usize,
    pub max_seq: usize,
    emb: Parameter,
    pos: Parameter,
    ln: LayerNorm,
    attn: CrossAttention,
    head: Linear,
}

impl LLMStub {
    pub fn new(seed: u64, vocab: Vocab, d_llm: usize, heads: usize, max_seq: usize) -> Self {
        let mut rng = Rng::new(seed);
        let emb = Parameter::from_tensor(
            "llm.emb",
            Tensor::uniform(vec![vocab.len(), d_llm], -0.5, 0.5, &mut rng),
        )
        .frozen();
        let pos = Parameter::from_tensor(
            "llm.pos",
            Tensor::uniform(vec![max_seq, d_llm], -0.5, 0.5, &mut rng),
        )
        .frozen();
        let mut ln = LayerNorm::new("llm.ln", d_llm);
        ln.gain = ln.gain.frozen();
        ln.bias = ln.bias.frozen();
        let attn =
            CrossAttention::new("llm.attn", d_llm, heads, Init::FanIn { fan_in: d_llm }, &mut rng).frozen();
        let head = Linear::new("llm.head", d_llm, vocab.len(), Init::FanIn { fan_in: d_llm }, &mut rng)
            .frozen();
        Self { vocab, d_llm, max_seq, emb, pos, ln, attn, head }
    }

    /// Frozen table lookup: ids -> [L, D_llm]. Errors on empty ids; callers
    /// model the empty case as an absent tensor.
    pub fn embed_tokens(&self, t: &mut Tape, ids: &[usize]) -> Result<TensorId> {
        if ids.is_empty() {
            return Err(Error::EmptyDimension("embed_tokens ids"));
        }
        self.vocab.check_ids(ids)?;
        let table = t.param(&self.emb);
        t.gather_rows(table, ids)
    }

    /// Causal logits for each target position, conditioned on an optional
    /// prefix of already-embedded tokens. Returns [len(target_ids), V].
    ///
    /// Gradients flow to the prefix; decoder weights stay frozen. Empty
    /// target ids yield `None` (no positions to score).
    pub fn decode_logits(
        &self,
        t: &mut Tape,
        prefix: Option<TensorId>,
        target_ids: &[usize],
    ) -> Result<Option<TensorId>> {
        if target_ids.is_empty() {
            return Ok(None);
        }
        self.vocab.check_ids(target_ids)?;
        let m = match prefix {
            Some(p) => {
                let shape = t.shape(p);
                if shape.len() != 2 || shape[1] != self.d_llm {
                    return Err(Error::ShapeMismatch {
                        op: "decode_logits",
                        lhs: format!("{shape:?}"),
                        rhs: format!("[.., {}]", self.d_llm),
                    });
                }
                shape[0]
            }
            None => 0,
        };
        let total = m + target_ids.len();
        if total > self.max_seq {
            return Err(Error::Precondition(format!(
                "sequence length {total} exceeds max_seq {}",
                self.max_seq
            )));
        }

        let tok = self.embed_tokens(t, target_ids)?;
        let seq = match prefix {
            Some(p) => t.concat_rows(&[p, tok])?,
            None => tok,
        };
        let pos_table = t.param(&self.pos);
        let positions: Vec<usize> = (0..total).collect();
        let pos = t.gather_rows(pos_table, &positions)?;
        let x = t.add(seq, pos)?;

        let normed = self.ln.forward(t, x)?;
        let a = self.attn.forward(t, normed, normed, normed, true)?;
        let h = t.add(x, a)?;
        let out_rows = t.slice_rows(h, m, target_ids.len())?;
        Ok(Some(self.head.forward(t, out_rows)?))
    }

    /// Greedy decoding from a prefix: feeds <bos>, repeatedly appends the
    /// argmax token, stops at <eos> or `max_new`. Returns ids without
    /// <bos>/<eos>.
    pub fn greedy_decode(&self, prefix: &Tensor, max_new: usize) -> Result<Vec<usize>> {
        let mut ids = vec![BOS];
        for _ in 0..max_new {
            let mut t = Tape::new();
            let p = t.leaf(prefix, false);
            let logits = self
                .decode_logits(&mut t, Some(p), &ids)?
                .expect("non-empty ids always produce logits");
            let v = t.value(logits);
            let last = &v[(ids.len() - 1) * self.vocab.len()..];
            let next = last
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if next == EOS {
                break;
            }
            ids.push(next);
        }
        Ok(ids[1..].to_vec())
    }

    pub fn for_each(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.emb);
        f(&self.pos);
        self.ln.for_each(f);
        self.attn.for_each(f);
        self.head.for_each(f);
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.emb);
        f(&mut self.pos);
        self.ln.for_each_mut(f);
        self.attn.for_each_mut(f);
        self.head.for_each_mut(f);
    }

    #[cfg(test)]
    pub(crate) fn head_mut(&mut self) -> &mut Linear {
        &mut self.head
    }
}

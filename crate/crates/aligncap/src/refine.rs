//! Image-conditioned feature refinement: a trainable adapter over the frozen
//! tag table, cross-attention conditioning of image tokens on tag/caption
//! context, a two-layer similarity head scoring all (tagging, caption) pairs,
//! and the temperature-scaled sigmoid pairwise loss.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::frozen::{FrozenTextEncoder, Vocab};
use crate::nn::{CrossAttention, LayerNorm, Linear};
use crate::tensor::{Init, Parameter, Rng, Tape, Tensor, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TagSubclass {
    Entity,
    Attribute,
    Action,
    Scene,
}

impl FromStr for TagSubclass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entity" => Ok(Self::Entity),
            "attribute" => Ok(Self::Attribute),
            "action" => Ok(Self::Action),
            "scene" => Ok(Self::Scene),
            _ => Err(Error::Config(format!(
                "unknown tag subclass `{s}` (entity | attribute | action | scene)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TagVocabulary {
    pub tags: Vec<String>,
    pub subclasses: Vec<TagSubclass>,
}

impl TagVocabulary {
    pub fn new(entries: &[(&str, TagSubclass)]) -> Result<Self> {
        Self::from_entries(
            entries.iter().map(|(t, s)| (t.to_string(), *s)).collect::<Vec<_>>(),
            "<builtin>",
        )
    }

    fn from_entries(entries: Vec<(String, TagSubclass)>, origin: &str) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config(format!("tag vocabulary {origin} is empty")));
        }
        let mut seen = std::collections::HashSet::new();
        for (tag, _) in &entries {
            if !seen.insert(tag.clone()) {
                return Err(Error::Config(format!("duplicate tag `{tag}` in {origin}")));
            }
        }
        let (tags, subclasses) = entries.into_iter().unzip();
        Ok(Self { tags, subclasses })
    }

    /// One `tag<TAB>subclass` per line; blank lines skipped.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let shown = path.display().to_string();
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let (tag, sub) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: shown.clone(),
                line: i + 1,
                msg: "expected tag<TAB>subclass".into(),
            })?;
            let subclass = sub.trim().parse().map_err(|e| Error::Parse {
                path: shown.clone(),
                line: i + 1,
                msg: format!("{e}"),
            })?;
            entries.push((tag.trim().to_string(), subclass));
        }
        Self::from_entries(entries, &shown)
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}

/// Frozen matrix of pooled text-encoder features, one row per tag.
#[derive(Debug, Clone)]
pub struct TagEmbeddingTable {
    pub table: Tensor, // [V_tag, D_t]
}

impl TagEmbeddingTable {
    pub fn build(vocab: &TagVocabulary, words: &Vocab, enc: &FrozenTextEncoder) -> Result<Self> {
        let mut data = Vec::new();
        let mut d_t = 0;
        for tag in &vocab.tags {
            let mut t = Tape::new();
            let (_, pooled) = enc.encode(&mut t, &words.tokenize(tag))?;
            let row = t.value(pooled);
            d_t = row.len();
            data.extend_from_slice(row);
        }
        Ok(Self { table: Tensor::new(vec![vocab.len(), d_t], data)? })
    }
}

/// Trainable affine map of the frozen tag table into the conditioning space.
pub fn adapt_tags(t: &mut Tape, adapter: &Linear, table: TensorId) -> Result<TensorId> {
    adapter.forward(t, table)
}

/// Cross-attention conditioning: projected image tokens query projected
/// context tokens, with a residual back onto the projected image tokens.
#[derive(Debug)]
pub struct ConditionModule {
    pub proj_image: Linear,
    pub proj_context: Linear,
    pub attn: CrossAttention,
}

impl ConditionModule {
    pub fn new(name: &str, d_c: usize, heads: usize, rng: &mut Rng) -> Self {
        let fan = Init::FanIn { fan_in: d_c };
        Self {
            proj_image: Linear::new(&format!("{name}.img"), d_c, d_c, fan, rng),
            proj_context: Linear::new(&format!("{name}.ctx"), d_c, d_c, fan, rng),
            attn: CrossAttention::new(&format!("{name}.attn"), d_c, heads, fan, rng),
        }
    }

    /// image [L, D_c], context [K, D_c] -> [L, D_c]
    pub fn forward(&self, t: &mut Tape, image: TensorId, context: TensorId) -> Result<TensorId> {
        let qi = self.proj_image.forward(t, image)?;
        let ctx = self.proj_context.forward(t, context)?;
        let a = self.attn.forward(t, qi, ctx, ctx, false)?;
        t.add(qi, a)
    }

    pub fn for_each(&self, f: &mut dyn FnMut(&Parameter)) {
        self.proj_image.for_each(f);
        self.proj_context.for_each(f);
        self.attn.for_each(f);
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.proj_image.for_each_mut(f);
        self.proj_context.for_each_mut(f);
        self.attn.for_each_mut(f);
    }
}

/// Two stacked residual cross-attention layers over the pair, then pooled
/// representations projected to the score space.
#[derive(Debug)]
pub struct SimilarityHead {
    pub attn1: CrossAttention,
    pub ln1: LayerNorm,
    pub attn2: CrossAttention,
    pub ln2: LayerNorm,
    pub proj: Linear, // D_c -> D_s, shared by both pooled sides
    pub d_s: usize,
}

impl SimilarityHead {
    pub fn new(name: &str, d_c: usize, d_s: usize, heads: usize, rng: &mut Rng) -> Self {
        let fan = Init::FanIn { fan_in: d_c };
        Self {
            attn1: CrossAttention::new(&format!("{name}.attn1"), d_c, heads, fan, rng),
            ln1: LayerNorm::new(&format!("{name}.ln1"), d_c),
            attn2: CrossAttention::new(&format!("{name}.attn2"), d_c, heads, fan, rng),
            ln2: LayerNorm::new(&format!("{name}.ln2"), d_c),
            proj: Linear::new(&format!("{name}.proj"), d_c, d_s, fan, rng),
            d_s,
        }
    }

    /// s_ij = dot(proj(pool(refined)), proj(pool(c_j))) / sqrt(D_s)
    pub fn pair_score(&self, t: &mut Tape, t_i: TensorId, c_j: TensorId) -> Result<TensorId> {
        let a1 = self.attn1.forward(t, t_i, c_j, c_j, false)?;
        let r1 = t.add(t_i, a1)?;
        let x1 = self.ln1.forward(t, r1)?;
        let a2 = self.attn2.forward(t, x1, c_j, c_j, false)?;
        let r2 = t.add(x1, a2)?;
        let x2 = self.ln2.forward(t, r2)?;

        let pooled_pair = t.mean_rows(x2)?;
        let pooled_c = t.mean_rows(c_j)?;
        let u = self.proj.forward(t, pooled_pair)?;
        let v = self.proj.forward(t, pooled_c)?;
        let raw = t.dot(u, v)?;
        Ok(t.scale(raw, 1.0 / (self.d_s as f64).sqrt()))
    }

    pub fn for_each(&self, f: &mut dyn FnMut(&Parameter)) {
        self.attn1.for_each(f);
        self.ln1.for_each(f);
        self.attn2.for_each(f);
        self.ln2.for_each(f);
        self.proj.for_each(f);
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.attn1.for_each_mut(f);
        self.ln1.for_each_mut(f);
        self.attn2.for_each_mut(f);
        self.ln2.for_each_mut(f);
        self.proj.for_each_mut(f);
    }
}

/// All ordered pair scores, assembled row-major into [N, N].
pub fn pairwise_similarity(
    t: &mut Tape,
    head: &SimilarityHead,
    t_feats: &[TensorId],
    c_feats: &[TensorId],
) -> Result<TensorId> {
    let n = t_feats.len();
    if n == 0 || c_feats.len() != n {
        return Err(Error::Precondition(format!(
            "pairwise_similarity needs matching non-empty sides, got {n} and {}",
            c_feats.len()
        )));
    }
    let mut scores = Vec::with_capacity(n * n);
    for &ti in t_feats {
        for &cj in c_feats {
            scores.push(head.pair_score(t, ti, cj)?);
        }
    }
    t.stack_scalars(&scores, n, n)
}

/// Match labels for an in-batch contrast: +1 on the diagonal, -1 elsewhere.
#[derive(Debug, Clone)]
pub struct PairLabels(pub Tensor);

impl PairLabels {
    pub fn in_batch(n: usize) -> Self {
        let mut z = Tensor::filled(vec![n, n], -1.0);
        for i in 0..n {
            z.data[i * n + i] = 1.0;
        }
        Self(z)
    }
}

/// Trainable temperature (as log, so tau = exp(tau_log) stays positive) and
/// bias of the sigmoid pairwise loss.
#[derive(Debug)]
pub struct SigmoidLossParams {
    pub tau_log: Parameter,
    pub b: Parameter,
}

impl SigmoidLossParams {
    pub fn new(name: &str, tau_init: f64, b_init: f64) -> Self {
        assert!(tau_init > 0.0, "temperature must start positive");
        Self {
            tau_log: Parameter::from_tensor(
                format!("{name}.tau_log"),
                Tensor::scalar(tau_init.ln()),
            ),
            b: Parameter::from_tensor(format!("{name}.b"), Tensor::scalar(b_init)),
        }
    }

    /// Conventional starting point: tau = 10, b = -10.
    pub fn default_init(name: &str) -> Self {
        Self::new(name, 10.0, -10.0)
    }

    pub fn tau(&self) -> f64 {
        self.tau_log.tensor.data[0].exp()
    }

    pub fn for_each(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.tau_log);
        f(&self.b);
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.tau_log);
        f(&mut self.b);
    }
}

/// (1/N) * sum_ij softplus(Z_ij * (-tau * s_ij + b)); softplus(x) is exactly
/// -log(1/(1+exp(x))).
pub fn sigmoid_pair_loss(
    t: &mut Tape,
    s: TensorId,
    z: &PairLabels,
    p: &SigmoidLossParams,
) -> Result<TensorId> {
    if t.shape(s) != z.0.shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "sigmoid_pair_loss",
            lhs: format!("{:?}", t.shape(s)),
            rhs: format!("{:?}", z.0.shape),
        });
    }
    let n = t.shape(s)[0] as f64;
    let tau_log = t.param(&p.tau_log);
    let tau = t.exp(tau_log);
    let b = t.param(&p.b);
    let scaled = t.scale_by(s, tau)?;
    let neg = t.scale(scaled, -1.0);
    let arg = t.shift_by(neg, b)?;
    let zc = t.constant(&z.0);
    let signed = t.mul(arg, zc)?;
    let sp = t.softplus(signed);
    let total = t.sum(sp);
    Ok(t.scale(total, 1.0 / n))
}

/// The full conditioning-and-contrast stack for one batch.
#[derive(Debug)]
pub struct LatentRefinement {
    pub tag_adapter: Linear,     // D_t -> D_c over the frozen table
    pub caption_adapter: Linear, // D_t -> D_c over frozen caption tokens
    pub tag_conditioner: ConditionModule,
    pub caption_conditioner: ConditionModule,
    pub head: SimilarityHead,
    pub loss: SigmoidLossParams,
}

impl LatentRefinement {
    pub fn new(name: &str, d_t: usize, d_c: usize, d_s: usize, heads: usize, rng: &mut Rng) -> Self {
        let fan = Init::FanIn { fan_in: d_t };
        Self {
            tag_adapter: Linear::new(&format!("{name}.tag_adapter"), d_t, d_c, fan, rng),
            caption_adapter: Linear::new(&format!("{name}.cap_adapter"), d_t, d_c, fan, rng),
            tag_conditioner: ConditionModule::new(&format!("{name}.tag_cond"), d_c, heads, rng),
            caption_conditioner: ConditionModule::new(&format!("{name}.cap_cond"), d_c, heads, rng),
            head: SimilarityHead::new(&format!("{name}.head"), d_c, d_s, heads, rng),
            loss: SigmoidLossParams::default_init(&format!("{name}.loss")),
        }
    }

    /// image_tokens[i]: [L, D_c]; caption_tokens[i]: frozen per-token caption
    /// features [T_i, D_t]; tag_table: frozen [V_tag, D_t] constant.
    /// Returns per-example (t_i, c_i) conditioned token features; t_i also
    /// feeds the tagging head downstream.
    pub fn condition_batch(
        &self,
        t: &mut Tape,
        image_tokens: &[TensorId],
        caption_tokens: &[TensorId],
        tag_table: TensorId,
    ) -> Result<(Vec<TensorId>, Vec<TensorId>)> {
        let n = image_tokens.len();
        if n == 0 || caption_tokens.len() != n {
            return Err(Error::Precondition(format!(
                "condition_batch needs matching non-empty batches, got {n} images and {} captions",
                caption_tokens.len()
            )));
        }
        let adapted = adapt_tags(t, &self.tag_adapter, tag_table)?;
        let mut t_feats = Vec::with_capacity(n);
        let mut c_feats = Vec::with_capacity(n);
        for i in 0..n {
            t_feats.push(self.tag_conditioner.forward(t, image_tokens[i], adapted)?);
            let cap = self.caption_adapter.forward(t, caption_tokens[i])?;
            c_feats.push(self.caption_conditioner.forward(t, image_tokens[i], cap)?);
        }
        Ok((t_feats, c_feats))
    }

    pub fn l_cond_from(
        &self,
        t: &mut Tape,
        t_feats: &[TensorId],
        c_feats: &[TensorId],
    ) -> Result<TensorId> {
        let s = pairwise_similarity(t, &self.head, t_feats, c_feats)?;
        sigmoid_pair_loss(t, s, &PairLabels::in_batch(t_feats.len()), &self.loss)
    }

    pub fn l_cond(
        &self,
        t: &mut Tape,
        image_tokens: &[TensorId],
        caption_tokens: &[TensorId],
        tag_table: TensorId,
    ) -> Result<TensorId> {
        let (t_feats, c_feats) = self.condition_batch(t, image_tokens, caption_tokens, tag_table)?;
        self.l_cond_from(t, &t_feats, &c_feats)
    }

    pub fn for_each(&self, f: &mut dyn FnMut(&Parameter)) {
        self.tag_adapter.for_each(f);
        self.caption_adapter.for_each(f);
        self.tag_conditioner.for_each(f);
        self.caption_conditioner.for_each(f);
        self.head.for_each(f);
        self.loss.for_each(f);
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.tag_adapter.for_each_mut(f);
        self.caption_adapter.for_each_mut(f);
        self.tag_conditioner.for_each_mut(f);
        self.caption_conditioner.for_each_mut(f);
        self.head.for_each_mut(f);
        self.loss.for_each_mut(f);
    }
}

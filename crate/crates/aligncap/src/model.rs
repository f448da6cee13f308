//! The full model: frozen perception stubs around the trainable
//! region-alignment pipeline, assembled from a TrainingConfig.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::config::TrainingConfig;
use crate::data::SyntheticExample;
use crate::error::{Error, Result};
use crate::frozen::{FrozenTextEncoder, FrozenVisionEncoder, LLMStub, SceneInput};
use crate::god::{build_candidates, crop_indices, crop_region, select_inference_view, BBox};
use crate::losses::{captioning_loss, tagging_loss, total_loss};
use crate::nn::Linear;
use crate::refine::{adapt_tags, LatentRefinement, TagEmbeddingTable, TagVocabulary};
use crate::semantic::{embed_caption_llm, embed_tags_llm, fuse_multimodal, SemanticAlignment};
use crate::spatial::{fuse_views, roi_align, LatentResampler, SpatialBlock};
use crate::synth::{caption_vocab, tag_vocabulary};
use crate::tensor::{Init, Parameter, Rng, Tape, TensorId};

/// Position table length of the decoder stub; bounds prefix + caption length.
const MAX_SEQ: usize = 64;

/// The five scalars of one forward pass, all recorded on the caller's tape.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub l_tag: TensorId,
    pub l_cap: TensorId,
    pub l_cond: TensorId,
    pub l_multi: TensorId,
    pub total: TensorId,
}

#[derive(Debug, Clone)]
pub struct InferenceOutput {
    pub caption: String,
    /// (tag, probability) pairs, best first.
    pub tags: Vec<(String, f64)>,
}

/// Re-expresses the target box in the normalized coordinates of the
/// patch-aligned region a view crop covers. Valid because every candidate
/// view contains the target.
pub(crate) fn view_local_target(target: &BBox, view: &BBox, g: usize) -> Result<BBox> {
    let region = crop_region(view, g);
    let w = region.x1 - region.x0;
    let h = region.y1 - region.y0;
    BBox::new(
        ((target.x0 - region.x0) / w).clamp(0.0, 1.0),
        ((target.y0 - region.y0) / h).clamp(0.0, 1.0),
        ((target.x1 - region.x0) / w).clamp(0.0, 1.0),
        ((target.y1 - region.y0) / h).clamp(0.0, 1.0),
    )
}

pub struct AlignCapModel {
    pub config: TrainingConfig,
    pub vision: FrozenVisionEncoder,
    pub text: FrozenTextEncoder,
    pub llm: LLMStub,
    pub tag_vocab: TagVocabulary,
    /// Frozen [V_tag, D_t] text embeddings of the tag vocabulary.
    pub tag_table: Parameter,
    pub spatial_block: SpatialBlock,
    pub resampler: LatentResampler,
    /// D_v region tokens into the D_c conditioning space.
    pub img_proj: Linear,
    pub refinement: LatentRefinement,
    /// Mean-pooled t_i into per-tag logits.
    pub tag_head: Linear,
    pub semantic: SemanticAlignment,
}

impl AlignCapModel {
    pub fn new(config: &TrainingConfig) -> Result<Self> {
        Self::with_residual_init(config, true)
    }

    /// `zero_residuals = false` gives every output projection a generic
    /// fan-in init so gradient checks see nonzero flow on all paths.
    pub fn with_residual_init(config: &TrainingConfig, zero_residuals: bool) -> Result<Self> {
        config.validate()?;
        let d = config.dims;
        let root = Rng::new(config.seed);
        let words = caption_vocab();
        let tag_vocab = tag_vocabulary();

        let vision =
            FrozenVisionEncoder::new(root.derive(1).next_u64(), d.g, d.channels, d.d_v);
        let text = FrozenTextEncoder::new(root.derive(2).next_u64(), &words, d.d_t);
        let llm = LLMStub::new(root.derive(3).next_u64(), words, d.d_llm, d.h, MAX_SEQ);
        let table = TagEmbeddingTable::build(&tag_vocab, &llm.vocab, &text)?;
        let tag_table = Parameter::from_tensor("tag_table", table.table).frozen();

        let mut rng = root.derive(4);
        let spatial_block = SpatialBlock::new(
            "spatial.block",
            d.d_v,
            d.h,
            2 * d.d_v,
            config.dropout_p,
            zero_residuals,
            &mut rng,
        );
        let resampler = LatentResampler::new("spatial.latent", d.m, d.d_v, d.h, d.d_llm, &mut rng);
        let img_proj = Linear::new(
            "refine.img_proj",
            d.d_v,
            d.d_c,
            Init::FanIn { fan_in: d.d_v },
            &mut rng,
        );
        let refinement = LatentRefinement::new("refine", d.d_t, d.d_c, d.d_s, d.h, &mut rng);
        let tag_head = Linear::new(
            "tag_head",
            d.d_c,
            tag_vocab.len(),
            Init::FanIn { fan_in: d.d_c },
            &mut rng,
        );
        let semantic = SemanticAlignment::new("semantic", d.d_llm, d.d_s, d.h, &mut rng);

        Ok(Self {
            config: config.clone(),
            vision,
            text,
            llm,
            tag_vocab,
            tag_table,
            spatial_block,
            resampler,
            img_proj,
            refinement,
            tag_head,
            semantic,
        })
    }

    fn check_scene(&self, scene: &SceneInput) -> Result<()> {
        scene.validate()?;
        let d = self.config.dims;
        if scene.grid() != d.g || scene.channels() != d.channels {
            return Err(Error::Incompatible(format!(
                "scene is {}x{}x{}, model expects {}x{}x{}",
                scene.grid(),
                scene.grid(),
                scene.channels(),
                d.g,
                d.g,
                d.channels
            )));
        }
        Ok(())
    }

    /// Region tokens for one scene: candidate views are cropped, encoded,
    /// RoI-pooled onto the target, and fused. Returns (latent queries
    /// [M, D_llm], conditioning tokens [P^2, D_c]).
    fn encode_region(
        &self,
        t: &mut Tape,
        scene: &SceneInput,
        target: &BBox,
        views: &[BBox],
        rng: &Rng,
        training: bool,
    ) -> Result<(TensorId, TensorId)> {
        let d = self.config.dims;
        let patches = t.constant(&scene.patches());
        let mut view_tokens = Vec::with_capacity(views.len());
        for view in views {
            let cropped = t.gather_rows(patches, &crop_indices(view, d.g))?;
            let feat = self.vision.encode(t, cropped)?;
            let local = view_local_target(target, view, d.g)?;
            view_tokens.push(roi_align(t, feat, &local, d.p, d.sampling_ratio)?);
        }
        let fused = fuse_views(t, &self.spatial_block, &view_tokens, rng, training)?;
        Ok((self.resampler.forward(t, fused)?, self.img_proj.forward(t, fused)?))
    }

    fn mean_of(&self, t: &mut Tape, ids: &[TensorId]) -> Result<TensorId> {
        let stacked = t.stack_scalars(ids, ids.len(), 1)?;
        Ok(t.mean(stacked))
    }

    /// Full training objective over a batch. Per-example randomness (view
    /// sampling, dropout) derives from `rng` by example index, so batch
    /// composition alone determines the result.
    pub fn forward(
        &self,
        t: &mut Tape,
        batch: &[SyntheticExample],
        rng: &Rng,
        training: bool,
    ) -> Result<ForwardOutput> {
        if batch.is_empty() {
            return Err(Error::Precondition("forward needs a non-empty batch".into()));
        }
        let god_cfg = self.config.god_config();
        let v_tag = self.tag_vocab.len();
        let table = t.param(&self.tag_table);

        let n = batch.len();
        let mut queries = Vec::with_capacity(n);
        let mut img_tokens = Vec::with_capacity(n);
        let mut caption_ids = Vec::with_capacity(n);
        let mut caption_dt = Vec::with_capacity(n);
        let mut caption_llm = Vec::with_capacity(n);

        for (i, ex) in batch.iter().enumerate() {
            self.check_scene(&ex.scene)?;
            let ex_rng = rng.derive(i as u64);
            let mut god_rng = ex_rng.derive(0);
            let candidates = build_candidates(&ex.target, &ex.detections, &god_cfg, &mut god_rng)?;
            let views: Vec<BBox> = candidates.iter().map(|c| c.bbox).collect();
            let (q, img) =
                self.encode_region(t, &ex.scene, &ex.target, &views, &ex_rng.derive(1), training)?;
            queries.push(q);
            img_tokens.push(img);

            let ids = self.llm.vocab.tokenize(&ex.gt_caption);
            let (per_token, _) = self.text.encode(t, &ids)?;
            caption_dt.push(per_token);
            caption_llm.push(embed_caption_llm(t, &self.llm, &ex.gt_caption)?);
            caption_ids.push(ids);
        }

        let (t_feats, c_feats) =
            self.refinement.condition_batch(t, &img_tokens, &caption_dt, table)?;
        let l_cond = self.refinement.l_cond_from(t, &t_feats, &c_feats)?;

        let mut tag_losses = Vec::with_capacity(n);
        for (ex, &tf) in batch.iter().zip(&t_feats) {
            let pooled = t.mean_rows(tf)?;
            let logits = self.tag_head.forward(t, pooled)?;
            tag_losses.push(tagging_loss(t, logits, &ex.multi_hot(v_tag))?);
        }
        let l_tag = self.mean_of(t, &tag_losses)?;

        let mut unified = Vec::with_capacity(n);
        let mut cap_losses = Vec::with_capacity(n);
        for (i, ex) in batch.iter().enumerate() {
            let words: Vec<String> =
                ex.gt_tags.iter().map(|&ti| self.tag_vocab.tags[ti].clone()).collect();
            let tag_emb = embed_tags_llm(t, &self.llm, &words)?;
            let e_i = fuse_multimodal(t, &self.semantic.fuse_proj, queries[i], tag_emb)?;
            cap_losses.push(captioning_loss(t, &self.llm, Some(e_i), &caption_ids[i])?);
            unified.push(e_i);
        }
        let l_cap = self.mean_of(t, &cap_losses)?;
        let l_multi = self.semantic.l_multi(t, &unified, &caption_llm)?;

        let total = total_loss(t, l_tag, l_cap, l_cond, l_multi, &self.config.weights)?;
        Ok(ForwardOutput { l_tag, l_cap, l_cond, l_multi, total })
    }

    /// Inference path: the GOD selector picks one context view, tags come
    /// from the tagging head, and the decoder runs greedily from the fused
    /// prefix. `top_tags` bounds the reported tag list.
    pub fn infer(
        &self,
        scene: &SceneInput,
        target: &BBox,
        detections: &[crate::god::Detection],
        rng: &Rng,
        top_tags: usize,
        max_new: usize,
    ) -> Result<InferenceOutput> {
        self.check_scene(scene)?;
        let mut god_rng = rng.derive(0);
        let candidates =
            build_candidates(target, detections, &self.config.god_config(), &mut god_rng)?;
        let selected = select_inference_view(
            &candidates,
            target,
            scene,
            &self.vision,
            self.config.discrepancy_mode,
        )?;

        let mut t = Tape::new();
        let table = t.param(&self.tag_table);
        let views = [candidates[0].bbox, selected.bbox];
        let (queries, img) =
            self.encode_region(&mut t, scene, target, &views, &rng.derive(1), false)?;

        let adapted = adapt_tags(&mut t, &self.refinement.tag_adapter, table)?;
        let t_i = self.refinement.tag_conditioner.forward(&mut t, img, adapted)?;
        let pooled = t.mean_rows(t_i)?;
        let logits = self.tag_head.forward(&mut t, pooled)?;
        let scores = t.value(logits).to_vec();
        let mut ranked: Vec<usize> = (0..scores.len()).collect();
        ranked.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let tags: Vec<(String, f64)> = ranked
            .iter()
            .take(top_tags)
            .map(|&i| (self.tag_vocab.tags[i].clone(), 1.0 / (1.0 + (-scores[i]).exp())))
            .collect();

        let words: Vec<String> = tags.iter().map(|(w, _)| w.clone()).collect();
        let tag_emb = embed_tags_llm(&mut t, &self.llm, &words)?;
        let e_i = fuse_multimodal(&mut t, &self.semantic.fuse_proj, queries, tag_emb)?;
        let prefix = t.to_tensor(e_i);
        let ids = self.llm.greedy_decode(&prefix, max_new)?;
        let caption =
            ids.iter().map(|&id| self.llm.vocab.word(id)).collect::<Vec<_>>().join(" ");
        Ok(InferenceOutput { caption, tags })
    }

    pub fn for_each(&self, f: &mut dyn FnMut(&Parameter)) {
        self.vision.for_each(f);
        self.text.for_each(f);
        self.llm.for_each(f);
        f(&self.tag_table);
        self.spatial_block.for_each(f);
        self.resampler.for_each(f);
        self.img_proj.for_each(f);
        self.refinement.for_each(f);
        self.tag_head.for_each(f);
        self.semantic.for_each(f);
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.vision.for_each_mut(f);
        self.text.for_each_mut(f);
        self.llm.for_each_mut(f);
        f(&mut self.tag_table);
        self.spatial_block.for_each_mut(f);
        self.resampler.for_each_mut(f);
        self.img_proj.for_each_mut(f);
        self.refinement.for_each_mut(f);
        self.tag_head.for_each_mut(f);
        self.semantic.for_each_mut(f);
    }

    /// SHA-256 of every frozen buffer's little-endian bytes, by name.
    pub fn frozen_shas(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        self.for_each(&mut |p| {
            if !p.trainable {
                let mut h = Sha256::new();
                for v in &p.tensor.data {
                    h.update(v.to_le_bytes());
                }
                out.insert(p.name.clone(), format!("{:x}", h.finalize()));
            }
        });
        out
    }
}

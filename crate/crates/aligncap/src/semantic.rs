//! Fusion of latent queries with language-model tag embeddings into one
//! token sequence, plus the pairwise contrast against frozen caption
//! embeddings. Shares the similarity head structure and the sigmoid loss
//! kernel with the conditioning module.

use crate::error::{Error, Result};
use crate::frozen::LLMStub;
use crate::nn::Linear;
use crate::refine::{pairwise_similarity, sigmoid_pair_loss, PairLabels, SigmoidLossParams, SimilarityHead};
use crate::tensor::{Init, Parameter, Rng, Tape, TensorId};

/// Frozen embedding rows for every token of every tag, concatenated in tag
/// order. `None` when no tags are selected.
pub fn embed_tags_llm(t: &mut Tape, llm: &LLMStub, tags: &[String]) -> Result<Option<TensorId>> {
    let mut ids = Vec::new();
    for tag in tags {
        ids.extend(llm.vocab.tokenize(tag));
    }
    if ids.is_empty() {
        return Ok(None);
    }
    Ok(Some(llm.embed_tokens(t, &ids)?))
}

/// Frozen caption embedding in the LLM space: pure function of the text.
pub fn embed_caption_llm(t: &mut Tape, llm: &LLMStub, caption: &str) -> Result<TensorId> {
    llm.embed_tokens(t, &llm.vocab.tokenize(caption))
}

/// Row-wise concatenation [queries; tag_emb] followed by one trainable
/// linear map applied to every row. Tag rows are optional.
pub fn fuse_multimodal(
    t: &mut Tape,
    proj: &Linear,
    queries: TensorId,
    tag_emb: Option<TensorId>,
) -> Result<TensorId> {
    let stacked = match tag_emb {
        Some(tags) => t.concat_rows(&[queries, tags])?,
        None => queries,
    };
    proj.forward(t, stacked)
}

/// Trainable pieces of the unified-space contrast.
#[derive(Debug)]
pub struct SemanticAlignment {
    pub fuse_proj: Linear, // D_llm -> D_llm
    pub head: SimilarityHead,
    pub loss: SigmoidLossParams,
}

impl SemanticAlignment {
    pub fn new(name: &str, d_llm: usize, d_s: usize, heads: usize, rng: &mut Rng) -> Self {
        Self {
            fuse_proj: Linear::new(
                &format!("{name}.fuse"),
                d_llm,
                d_llm,
                Init::FanIn { fan_in: d_llm },
                rng,
            ),
            head: SimilarityHead::new(&format!("{name}.head"), d_llm, d_s, heads, rng),
            loss: SigmoidLossParams::default_init(&format!("{name}.loss")),
        }
    }

    /// unified[i]: e_i tokens [M + L_tag, D_llm]; captions[j]: frozen caption
    /// tokens [T_j, D_llm]. Same kernel as the conditioning contrast.
    pub fn l_multi(
        &self,
        t: &mut Tape,
        unified: &[TensorId],
        captions: &[TensorId],
    ) -> Result<TensorId> {
        let n = unified.len();
        if n == 0 || captions.len() != n {
            return Err(Error::Precondition(format!(
                "l_multi needs matching non-empty batches, got {n} unified and {} captions",
                captions.len()
            )));
        }
        let s = pairwise_similarity(t, &self.head, unified, captions)?;
        sigmoid_pair_loss(t, s, &PairLabels::in_batch(n), &self.loss)
    }

    pub fn for_each(&self, f: &mut dyn FnMut(&Parameter)) {
        self.fuse_proj.for_each(f);
        self.head.for_each(f);
        self.loss.for_each(f);
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.fuse_proj.for_each_mut(f);
        self.head.for_each_mut(f);
        self.loss.for_each_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frozen::Vocab;
    use crate::tensor::{Tensor, TensorId};

    fn stub() -> LLMStub {
        let vocab = Vocab::new(&["a", "red", "dog", "sits", "here"]).unwrap();
        LLMStub::new(11, vocab, 8, 2, 32)
    }

    #[test]
    fn no_tags_embed_to_nothing() {
        let llm = stub();
        let mut t = Tape::new();
        assert!(embed_tags_llm(&mut t, &llm, &[]).unwrap().is_none());
    }

    #[test]
    fn one_tag_embeds_to_its_token_rows() {
        let llm = stub();
        let mut t = Tape::new();
        let out = embed_tags_llm(&mut t, &llm, &["dog".into()]).unwrap().unwrap();
        let direct = llm.embed_tokens(&mut t, &llm.vocab.tokenize("dog")).unwrap();
        assert_eq!(t.value(out), t.value(direct));
    }

    #[test]
    fn tags_concatenate_in_order() {
        let llm = stub();
        let mut t = Tape::new();
        let both = embed_tags_llm(&mut t, &llm, &["red".into(), "dog".into()]).unwrap().unwrap();
        let red = embed_tags_llm(&mut t, &llm, &["red".into()]).unwrap().unwrap();
        let dog = embed_tags_llm(&mut t, &llm, &["dog".into()]).unwrap().unwrap();
        let red_rows = t.value(red).to_vec();
        let dog_rows = t.value(dog).to_vec();
        let mut expect = red_rows;
        expect.extend(dog_rows);
        assert_eq!(t.value(both), expect.as_slice());
        assert_eq!(t.shape(both), &[6, 8], "two tags of 3 tokens each (with markers)");
    }

    #[test]
    fn identity_fusion_is_plain_concatenation() {
        let mut rng = Rng::new(500);
        let mut proj = Linear::new("fp", 8, 8, Init::Zero, &mut rng);
        proj.weight.tensor = Tensor::eye(8);
        proj.weight.tensor.requires_grad = true;

        let llm = stub();
        let mut t = Tape::new();
        let queries = t.constant(&Tensor::uniform(vec![4, 8], -1.0, 1.0, &mut rng));
        let tags = embed_tags_llm(&mut t, &llm, &["red".into()]).unwrap();
        let out = fuse_multimodal(&mut t, &proj, queries, tags).unwrap();
        assert_eq!(t.shape(out), &[4 + 3, 8], "M + L_tag rows");

        let mut expect = t.value(queries).to_vec();
        expect.extend_from_slice(t.value(tags.unwrap()));
        assert_eq!(t.value(out), expect.as_slice());
    }

    #[test]
    fn fusion_gradients_reach_projection_and_upstream_queries() {
        let mut rng = Rng::new(501);
        let proj = Linear::new("fp", 8, 8, Init::FanIn { fan_in: 8 }, &mut rng);
        let upstream = Linear::new("up", 4, 8, Init::FanIn { fan_in: 4 }, &mut rng);
        let llm = stub();

        let mut t = Tape::new();
        let x = t.constant(&Tensor::uniform(vec![3, 4], -1.0, 1.0, &mut rng));
        let queries = upstream.forward(&mut t, x).unwrap();
        let tags = embed_tags_llm(&mut t, &llm, &["dog".into()]).unwrap();
        let out = fuse_multimodal(&mut t, &proj, queries, tags).unwrap();
        let sq = t.mul(out, out).unwrap();
        let loss = t.mean(sq);
        t.backward(loss).unwrap();

        assert!(t.param_grad("fp.w").unwrap().iter().any(|&g| g != 0.0));
        assert!(t.param_grad("up.w").unwrap().iter().any(|&g| g != 0.0));
        assert!(t.param_grad("llm.emb").is_none(), "frozen lookup stays frozen");
    }

    #[test]
    fn zeroed_score_projection_costs_ln2_per_pair() {
        let mut rng = Rng::new(502);
        let mut module = SemanticAlignment::new("sa", 8, 4, 2, &mut rng);
        module.head.proj.weight.tensor.data.iter_mut().for_each(|v| *v = 0.0);
        module.head.proj.bias.tensor.data.iter_mut().for_each(|v| *v = 0.0);
        module.loss = SigmoidLossParams::new("sa.loss", 1.0, 0.0);

        let mut t = Tape::new();
        let e: Vec<TensorId> =
            (0..2).map(|_| t.constant(&Tensor::uniform(vec![3, 8], -1.0, 1.0, &mut rng))).collect();
        let c: Vec<TensorId> =
            (0..2).map(|_| t.constant(&Tensor::uniform(vec![4, 8], -1.0, 1.0, &mut rng))).collect();
        let loss = module.l_multi(&mut t, &e, &c).unwrap();
        let got = t.scalar_value(loss).unwrap();
        assert!((got - 2.0 * std::f64::consts::LN_2).abs() <= 1e-12, "got {got}");
    }

    #[test]
    fn single_pair_loss_is_softplus_of_its_score() {
        let mut rng = Rng::new(503);
        let module = SemanticAlignment::new("sa", 8, 4, 2, &mut rng);
        let e_t = Tensor::uniform(vec![3, 8], -1.0, 1.0, &mut rng);
        let c_t = Tensor::uniform(vec![4, 8], -1.0, 1.0, &mut rng);

        let mut t = Tape::new();
        let e = t.constant(&e_t);
        let c = t.constant(&c_t);
        let loss = module.l_multi(&mut t, &[e], &[c]).unwrap();
        let got = t.scalar_value(loss).unwrap();

        let s_id = module.head.pair_score(&mut t, e, c).unwrap();
        let s = t.scalar_value(s_id).unwrap();
        let want = crate::tensor::scalar::softplus(-module.loss.tau() * s
            + module.loss.b.tensor.data[0]);
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }

    #[test]
    fn loss_kernel_is_shared_bit_for_bit() {
        let mut rng = Rng::new(504);
        let module = SemanticAlignment::new("sa", 8, 4, 2, &mut rng);
        let mut t = Tape::new();
        let e: Vec<TensorId> =
            (0..3).map(|_| t.constant(&Tensor::uniform(vec![3, 8], -1.0, 1.0, &mut rng))).collect();
        let c: Vec<TensorId> =
            (0..3).map(|_| t.constant(&Tensor::uniform(vec![4, 8], -1.0, 1.0, &mut rng))).collect();

        let via_module = module.l_multi(&mut t, &e, &c).unwrap();
        let s = pairwise_similarity(&mut t, &module.head, &e, &c).unwrap();
        let via_kernel =
            sigmoid_pair_loss(&mut t, s, &PairLabels::in_batch(3), &module.loss).unwrap();
        let a = t.scalar_value(via_module).unwrap();
        let b = t.scalar_value(via_kernel).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn caption_embedding_is_a_pure_frozen_function() {
        let llm = stub();
        let embed = || {
            let mut t = Tape::new();
            let c = embed_caption_llm(&mut t, &llm, "a red dog sits").unwrap();
            t.value(c).to_vec()
        };
        let a = embed();
        let b = embed();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.len(), 6 * 8, "4 words plus markers, width 8");
    }

    #[test]
    fn unified_similarity_permutes_with_inputs() {
        let mut rng = Rng::new(505);
        let module = SemanticAlignment::new("sa", 8, 4, 2, &mut rng);
        let e_raw: Vec<Tensor> =
            (0..3).map(|_| Tensor::uniform(vec![3, 8], -1.0, 1.0, &mut rng)).collect();
        let c_raw: Vec<Tensor> =
            (0..3).map(|_| Tensor::uniform(vec![4, 8], -1.0, 1.0, &mut rng)).collect();

        let score = |e_order: [usize; 3], c_order: [usize; 3]| -> Vec<f64> {
            let mut t = Tape::new();
            let e: Vec<TensorId> = e_order.iter().map(|&i| t.constant(&e_raw[i])).collect();
            let c: Vec<TensorId> = c_order.iter().map(|&i| t.constant(&c_raw[i])).collect();
            let s = pairwise_similarity(&mut t, &module.head, &e, &c).unwrap();
            t.value(s).to_vec()
        };
        let base = score([0, 1, 2], [0, 1, 2]);
        let (sigma, pi) = ([1, 2, 0], [2, 1, 0]);
        let perm = score(sigma, pi);
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(perm[a * 3 + b].to_bits(), base[sigma[a] * 3 + pi[b]].to_bits());
            }
        }
    }
}

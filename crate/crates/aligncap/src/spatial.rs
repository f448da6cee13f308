//! Region feature extraction and cross-view fusion: RoI-align over the
//! patch-feature grid, a pre-norm cross-attention block that refines each
//! candidate view against the target, token-wise view averaging, and a
//! learned query bank that resamples the fused tokens into latent queries.

use crate::error::{Error, Result};
use crate::god::BBox;
use crate::nn::{CrossAttention, LayerNorm, Linear, Mlp};
use crate::tensor::{Init, Parameter, Rng, Tape, Tensor, TensorId};

/// Bilinear taps of one patch-space coordinate (patch i's center sits at
/// integer i). Returns (low index, weight of high index).
fn bilinear_axis(v: f64, g: usize) -> (usize, f64) {
    let v = v.clamp(0.0, (g - 1) as f64);
    if g == 1 {
        return (0, 0.0);
    }
    let mut i0 = v.floor() as usize;
    let mut frac = v - i0 as f64;
    if i0 >= g - 1 {
        i0 = g - 2;
        frac = 1.0;
    }
    (i0, frac)
}

/// Constant RoI-align matrix W of shape [P², G²]: `W @ fm` averages
/// `sampling_ratio²` bilinear samples per output bin. Rows sum to 1.
pub fn roi_align_weights(bbox: &BBox, g: usize, p: usize, sampling_ratio: usize) -> Result<Tensor> {
    if g < 1 || p < 1 || sampling_ratio < 1 {
        return Err(Error::Precondition(format!(
            "roi_align needs g, P, sampling_ratio >= 1, got {g}, {p}, {sampling_ratio}"
        )));
    }
    let sr = sampling_ratio;
    // bin-to-patch mapping done in patch space: the full-image box with
    // P == G and sr == 1 then lands exactly on integer patch centers
    let scale_x = (bbox.x1 - bbox.x0) * g as f64 / p as f64;
    let scale_y = (bbox.y1 - bbox.y0) * g as f64 / p as f64;
    let base_x = bbox.x0 * g as f64 - 0.5;
    let base_y = bbox.y0 * g as f64 - 0.5;
    let mut w = vec![0.0; p * p * g * g];
    let tap = 1.0 / (sr * sr) as f64;
    for py in 0..p {
        for px in 0..p {
            let row = (py * p + px) * g * g;
            for sy in 0..sr {
                let vy = base_y + scale_y * (py as f64 + (sy as f64 + 0.5) / sr as f64);
                let (iy, fy) = bilinear_axis(vy, g);
                for sx in 0..sr {
                    let vx = base_x + scale_x * (px as f64 + (sx as f64 + 0.5) / sr as f64);
                    let (ix, fx) = bilinear_axis(vx, g);
                    w[row + iy * g + ix] += tap * (1.0 - fy) * (1.0 - fx);
                    if g > 1 {
                        w[row + iy * g + ix + 1] += tap * (1.0 - fy) * fx;
                        w[row + (iy + 1) * g + ix] += tap * fy * (1.0 - fx);
                        w[row + (iy + 1) * g + ix + 1] += tap * fy * fx;
                    }
                }
            }
        }
    }
    Tensor::new(vec![p * p, g * g], w)
}

/// RoI-aligned region feature [P², D] from a flattened feature map [G², D].
/// Differentiable w.r.t. `fm`; the sampling weights are constants.
pub fn roi_align(
    t: &mut Tape,
    fm: TensorId,
    bbox: &BBox,
    p: usize,
    sampling_ratio: usize,
) -> Result<TensorId> {
    let rows = t.shape(fm)[0];
    let g = (rows as f64).sqrt().round() as usize;
    if g * g != rows {
        return Err(Error::Precondition(format!(
            "feature map has {rows} rows, expected a square patch count"
        )));
    }
    let w = t.constant(&roi_align_weights(bbox, g, p, sampling_ratio)?);
    t.matmul(w, fm)
}

/// Pre-norm cross-attention block refining a candidate view against the
/// target view. Query and value come from the candidate, the key from the
/// target; both residual branches add back onto the candidate stream.
#[derive(Debug)]
pub struct SpatialBlock {
    pub ln1_target: LayerNorm,
    pub ln1_candidate: LayerNorm,
    pub mhca: CrossAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub dropout_p: f64,
}

impl SpatialBlock {
    /// `zero_residuals` zero-initializes both residual output projections so
    /// a fresh block is exactly the identity; pass false to start from a
    /// generic point instead.
    pub fn new(
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        dropout_p: f64,
        zero_residuals: bool,
        rng: &mut Rng,
    ) -> Self {
        let out = if zero_residuals { Init::Zero } else { Init::FanIn { fan_in: dim } };
        Self {
            ln1_target: LayerNorm::new(&format!("{name}.ln1_t"), dim),
            ln1_candidate: LayerNorm::new(&format!("{name}.ln1_c"), dim),
            mhca: CrossAttention::new(&format!("{name}.mhca"), dim, heads, out, rng),
            ln2: LayerNorm::new(&format!("{name}.ln2"), dim),
            mlp: Mlp::new(&format!("{name}.mlp"), dim, hidden, out, rng),
            dropout_p,
        }
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        candidate: TensorId,
        target: TensorId,
        rng: &mut Rng,
        training: bool,
    ) -> Result<TensorId> {
        let c_norm = self.ln1_candidate.forward(t, candidate)?;
        let t_norm = self.ln1_target.forward(t, target)?;
        let attn = self.mhca.forward(t, c_norm, t_norm, c_norm, false)?;
        let attn = t.dropout(attn, self.dropout_p, rng, training)?;
        let y1 = t.add(candidate, attn)?;
        let y2 = self.ln2.forward(t, y1)?;
        let m = self.mlp.forward(t, y2)?;
        t.add(y1, m)
    }

    pub fn for_each(&self, f: &mut dyn FnMut(&Parameter)) {
        self.ln1_target.for_each(f);
        self.ln1_candidate.for_each(f);
        self.mhca.for_each(f);
        self.ln2.for_each(f);
        self.mlp.for_each(f);
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.ln1_target.for_each_mut(f);
        self.ln1_candidate.for_each_mut(f);
        self.mhca.for_each_mut(f);
        self.ln2.for_each_mut(f);
        self.mlp.for_each_mut(f);
    }
}

/// Token-wise mean of the target feature and every refined candidate.
/// `views[0]` is the target; the rest pass through the block against it.
pub fn fuse_views(
    t: &mut Tape,
    block: &SpatialBlock,
    views: &[TensorId],
    rng: &Rng,
    training: bool,
) -> Result<TensorId> {
    let (target, candidates) = views
        .split_first()
        .ok_or_else(|| Error::Precondition("fuse_views needs at least the target view".into()))?;
    let mut acc = *target;
    for (i, &cand) in candidates.iter().enumerate() {
        // per-view stream so masks replay regardless of call order
        let mut view_rng = rng.derive(i as u64);
        let refined = block.forward(t, cand, *target, &mut view_rng, training)?;
        acc = t.add(acc, refined)?;
    }
    Ok(t.scale(acc, 1.0 / views.len() as f64))
}

/// Learned query bank cross-attending over fused tokens, then projected into
/// the language model's embedding width.
#[derive(Debug)]
pub struct LatentResampler {
    pub bank: Parameter,
    pub attn: CrossAttention,
    pub proj: Linear,
}

impl LatentResampler {
    pub fn new(name: &str, m: usize, d_v: usize, heads: usize, d_llm: usize, rng: &mut Rng) -> Self {
        // random output projections: with no residual path, zero init would
        // pin the whole module (and the bank's gradient) at zero
        let fan = Init::FanIn { fan_in: d_v };
        Self {
            bank: Parameter::new(format!("{name}.bank"), vec![m, d_v], fan, rng),
            attn: CrossAttention::new(&format!("{name}.attn"), d_v, heads, fan, rng),
            proj: Linear::new(&format!("{name}.proj"), d_v, d_llm, fan, rng),
        }
    }

    /// fused [T, D_v] -> latent queries [M, D_llm]
    pub fn forward(&self, t: &mut Tape, fused: TensorId) -> Result<TensorId> {
        let bank = t.param(&self.bank);
        let mixed = self.attn.forward(t, bank, fused, fused, false)?;
        self.proj.forward(t, mixed)
    }

    pub fn for_each(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.bank);
        self.attn.for_each(f);
        self.proj.for_each(f);
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.bank);
        self.attn.for_each_mut(f);
        self.proj.for_each_mut(f);
    }
}

//! Shared trainable layers: linear, layer norm, multi-head cross-attention,
//! and the two-hidden-layer SiLU MLP.
//!
//! Layers own their [`Parameter`]s; `forward` records onto a caller-supplied
//! tape, and the `for_each`/`for_each_mut` visitors feed the optimizer and
//! checkpoint code.

use crate::error::{Error, Result};
use crate::tensor::{Init, Parameter, Rng, Tape, Tensor, TensorId};

/// Additive attention-mask value. Finite so the debug NaN guard stays quiet,
/// large enough that exp(masked - max) underflows to exactly 0.
const MASK_NEG: f64 = -1e30;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Parameter, // [d_in, d_out]
    pub bias: Parameter,   // [1, d_out]
}

impl Linear {
    pub fn new(name: &str, d_in: usize, d_out: usize, init: Init, rng: &mut Rng) -> Self {
        Self {
            weight: Parameter::new(format!("{name}.w"), vec![d_in, d_out], init, rng),
            bias: Parameter::new(format!("{name}.b"), vec![1, d_out], Init::Zero, rng),
        }
    }

    pub fn frozen(mut self) -> Self {
        self.weight = self.weight.frozen();
        self.bias = self.bias.frozen();
        self
    }

    pub fn forward(&self, t: &mut Tape, x: TensorId) -> Result<TensorId> {
        let w = t.param(&self.weight);
        let b = t.param(&self.bias);
        let y = t.matmul(x, w)?;
        t.add_row(y, b)
    }

    pub fn for_each(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.weight);
        f(&self.bias);
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Parameter, // [d], init 1
    pub bias: Parameter, // [d], init 0
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: &str, d: usize) -> Self {
        Self {
            gain: Parameter::from_tensor(format!("{name}.g"), Tensor::filled(vec![d], 1.0)),
            bias: Parameter::from_tensor(format!("{name}.b"), Tensor::zeros(vec![d])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: TensorId) -> Result<TensorId> {
        let g = t.param(&self.gain);
        let b = t.param(&self.bias);
        t.layer_norm(x, g, b, self.eps)
    }

    pub fn for_each(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.gain);
        f(&self.bias);
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.gain);
        f(&mut self.bias);
    }
}

/// Multi-head attention with separate query/key/value sources.
///
/// Heads are column slices of single [dim, dim] projections; `scale` is
/// 1/sqrt(dim/heads).
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    scale: f64,
}

impl CrossAttention {
    /// `out_init` governs the output projection; residual blocks pass
    /// `Init::Zero` so a fresh block is an exact identity.
    pub fn new(name: &str, dim: usize, heads: usize, out_init: Init, rng: &mut Rng) -> Self {
        assert!(heads >= 1 && dim % heads == 0, "heads {heads} must divide dim {dim}");
        let fan = Init::FanIn { fan_in: dim };
        Self {
            wq: Linear::new(&format!("{name}.q"), dim, dim, fan, rng),
            wk: Linear::new(&format!("{name}.k"), dim, dim, fan, rng),
            wv: Linear::new(&format!("{name}.v"), dim, dim, fan, rng),
            wo: Linear::new(&format!("{name}.o"), dim, dim, out_init, rng),
            heads,
            scale: 1.0 / ((dim / heads) as f64).sqrt(),
        }
    }

    pub fn frozen(mut self) -> Self {
        self.wq = self.wq.frozen();
        self.wk = self.wk.frozen();
        self.wv = self.wv.frozen();
        self.wo = self.wo.frozen();
        self
    }

    /// q: [Lq, dim], k: [Lk, dim], v: [Lk, dim] -> [Lq, dim].
    ///
    /// `causal` masks key j > query i (only meaningful when Lq == Lk).
    pub fn forward(&self, t: &mut Tape, q: TensorId, k: TensorId, v: TensorId, causal: bool) -> Result<TensorId> {
        let (lq, dim) = (t.shape(q)[0], *t.shape(q).last().unwrap());
        let lk = t.shape(k)[0];
        if t.shape(k) != t.shape(v) {
            return Err(Error::ShapeMismatch {
                op: "cross_attention",
                lhs: format!("{:?}", t.shape(k)),
                rhs: format!("{:?}", t.shape(v)),
            });
        }
        let qp = self.wq.forward(t, q)?;
        let kp = self.wk.forward(t, k)?;
        let vp = self.wv.forward(t, v)?;

        let mask = causal.then(|| {
            let mut m = Tensor::zeros(vec![lq, lk]);
            for i in 0..lq {
                for j in 0..lk {
                    if j > i {
                        m.data[i * lk + j] = MASK_NEG;
                    }
                }
            }
            t.constant(&m)
        });

        let dh = dim / self.heads;
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = t.slice_cols(qp, h * dh, dh)?;
            let kh = t.slice_cols(kp, h * dh, dh)?;
            let vh = t.slice_cols(vp, h * dh, dh)?;
            let kt = t.transpose(kh)?;
            let raw = t.matmul(qh, kt)?;
            let mut scores = t.scale(raw, self.scale);
            if let Some(m) = mask {
                scores = t.add(scores, m)?;
            }
            let attn = t.softmax_rows(scores)?;
            head_outs.push(t.matmul(attn, vh)?);
        }
        let merged = t.concat_cols(&head_outs)?;
        self.wo.forward(t, merged)
    }

    pub fn for_each(&self, f: &mut dyn FnMut(&Parameter)) {
        self.wq.for_each(f);
        self.wk.for_each(f);
        self.wv.for_each(f);
        self.wo.for_each(f);
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.wq.for_each_mut(f);
        self.wk.for_each_mut(f);
        self.wv.for_each_mut(f);
        self.wo.for_each_mut(f);
    }
}

/// d_in -> hidden -> hidden -> d_in with SiLU after both hidden layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
}

impl Mlp {
    pub fn new(name: &str, d: usize, hidden: usize, out_init: Init, rng: &mut Rng) -> Self {
        Self {
            fc1: Linear::new(&format!("{name}.fc1"), d, hidden, Init::FanIn { fan_in: d }, rng),
            fc2: Linear::new(&format!("{name}.fc2"), hidden, hidden, Init::FanIn { fan_in: hidden }, rng),
            fc3: Linear::new(&format!("{name}.fc3"), hidden, d, out_init, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: TensorId) -> Result<TensorId> {
        let h1 = self.fc1.forward(t, x)?;
        let a1 = t.silu(h1);
        let h2 = self.fc2.forward(t, a1)?;
        let a2 = t.silu(h2);
        self.fc3.forward(t, a2)
    }

    pub fn for_each(&self, f: &mut dyn FnMut(&Parameter)) {
        self.fc1.for_each(f);
        self.fc2.for_each(f);
        self.fc3.for_each(f);
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.fc1.for_each_mut(f);
        self.fc2.for_each_mut(f);
        self.fc3.for_each_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;

    #[test]
    fn linear_matches_manual_affine() {
        let mut rng = Rng::new(100);
        let lin = Linear::new("l", 3, 2, Init::FanIn { fan_in: 3 }, &mut rng);
        let x = Tensor::uniform(vec![2, 3], -1.0, 1.0, &mut Rng::new(101));
        let mut t = Tape::new();
        let xi = t.constant(&x);
        let y = lin.forward(&mut t, xi).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                let mut want = lin.bias.tensor.data[c];
                for i in 0..3 {
                    want += x.data[r * 3 + i] * lin.weight.tensor.data[i * 2 + c];
                }
                assert!((t.value(y)[r * 2 + c] - want).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn zero_init_linear_outputs_zero() {
        let mut rng = Rng::new(102);
        let lin = Linear::new("l", 4, 4, Init::Zero, &mut rng);
        let x = Tensor::uniform(vec![3, 4], -1.0, 1.0, &mut Rng::new(103));
        let mut t = Tape::new();
        let xi = t.constant(&x);
        let y = lin.forward(&mut t, xi).unwrap();
        assert_eq!(t.value(y), &[0.0; 12]);
    }

    #[test]
    fn single_key_attention_repeats_one_row() {
        let mut rng = Rng::new(104);
        let attn = CrossAttention::new("a", 8, 2, Init::FanIn { fan_in: 8 }, &mut rng);
        let q = Tensor::uniform(vec![5, 8], -1.0, 1.0, &mut Rng::new(105));
        let kv = Tensor::uniform(vec![1, 8], -1.0, 1.0, &mut Rng::new(106));
        let mut t = Tape::new();
        let qi = t.constant(&q);
        let ki = t.constant(&kv);
        let out = t_forward(&attn, &mut t, qi, ki, ki, false);
        let v = t.value(out);
        // softmax over one key is 1, so every query receives the same value row
        for r in 1..5 {
            assert_eq!(&v[r * 8..(r + 1) * 8], &v[0..8], "row {r}");
        }
    }

    fn t_forward(attn: &CrossAttention, t: &mut Tape, q: TensorId, k: TensorId, v: TensorId, causal: bool) -> TensorId {
        attn.forward(t, q, k, v, causal).unwrap()
    }

    #[test]
    fn causal_mask_blocks_future_tokens_exactly() {
        let mut rng = Rng::new(107);
        let attn = CrossAttention::new("a", 6, 3, Init::FanIn { fan_in: 6 }, &mut rng);
        let x = Tensor::uniform(vec![4, 6], -1.0, 1.0, &mut Rng::new(108));
        let mut x2 = x.clone();
        for v in &mut x2.data[3 * 6..] {
            *v += 5.0; // change only the last token
        }
        let run = |input: &Tensor| {
            let mut t = Tape::new();
            let xi = t.constant(input);
            let out = t_forward(&attn, &mut t, xi, xi, xi, true);
            t.value(out).to_vec()
        };
        let a = run(&x);
        let b = run(&x2);
        assert_eq!(&a[..3 * 6], &b[..3 * 6], "prefix rows must be bit-identical");
        assert_ne!(&a[3 * 6..], &b[3 * 6..], "last row must see its own change");
    }

    #[test]
    fn zero_out_mlp_is_constant_zero() {
        let mut rng = Rng::new(109);
        let mlp = Mlp::new("m", 4, 8, Init::Zero, &mut rng);
        let x = Tensor::uniform(vec![3, 4], -1.0, 1.0, &mut Rng::new(110));
        let mut t = Tape::new();
        let xi = t.constant(&x);
        let y = mlp.forward(&mut t, xi).unwrap();
        assert_eq!(t.value(y), &[0.0; 12]);
    }

    #[test]
    fn attention_and_mlp_param_gradients_pass_fd() {
        let mut rng = Rng::new(111);
        let attn = CrossAttention::new("a", 4, 2, Init::FanIn { fan_in: 4 }, &mut rng);
        let mlp = Mlp::new("m", 4, 6, Init::FanIn { fan_in: 6 }, &mut rng);
        let q = Tensor::uniform(vec![2, 4], -1.0, 1.0, &mut Rng::new(112));
        let kv = Tensor::uniform(vec![3, 4], -1.0, 1.0, &mut Rng::new(113));
        let model = RefCell::new((attn, mlp));

        let mut build = |t: &mut Tape| -> crate::error::Result<TensorId> {
            let m = model.borrow();
            let qi = t.constant(&q);
            let ki = t.constant(&kv);
            let a = m.0.forward(t, qi, ki, ki, false)?;
            let y = m.1.forward(t, a)?;
            let s = t.silu(y);
            Ok(t.sum(s))
        };
        let mut nudge = |name: &str, i: usize, delta: f64| {
            let mut m = model.borrow_mut();
            let mut hit = false;
            let mut apply = |p: &mut Parameter| {
                if p.name == name {
                    p.tensor.data[i] += delta;
                    hit = true;
                }
            };
            m.0.for_each_mut(&mut apply);
            m.1.for_each_mut(&mut apply);
            assert!(hit, "unknown param {name}");
        };
        let report = crate::tensor::finite_diff_check_params(
            &mut build,
            &mut nudge,
            1e-5,
            crate::tensor::check::FD_ATOL_OP,
        )
        .unwrap();
        assert_eq!(report.len(), 14, "4 attn linears + 3 mlp linears, w and b each");
        for (name, err) in report {
            assert!(err <= 1e-5, "{name}: {err}");
        }
    }
}

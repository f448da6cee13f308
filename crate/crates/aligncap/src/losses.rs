//! Loss terms: per-tag binary cross-entropy, caption cross-entropy, and the
//! weighted four-component total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frozen::LLMStub;
use crate::tensor::{Tape, Tensor, TensorId};

fn one() -> f64 {
    1.0
}

/// Coefficients of the weighted training objective
/// `alpha*L_tag + beta*L_cap + gamma*L_cond + lambda*L_multi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default = "one")]
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0, gamma: 1.0, lambda: 1.0 }
    }
}

impl LossWeights {
    /// Training-run invariant: every weight finite and non-negative, at least
    /// one strictly positive.
    pub fn validate(&self) -> Result<()> {
        let named =
            [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("lambda", self.lambda)];
        for (name, w) in named {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {w}")));
            }
        }
        if named.iter().all(|(_, w)| *w == 0.0) {
            return Err(Error::Config("at least one loss weight must be > 0".into()));
        }
        Ok(())
    }
}

/// Mean per-tag binary cross-entropy with logits:
/// `(1/V) * sum_v [softplus(l_v) - y_v * l_v]`.
///
/// `labels` is a multi-hot vector over the tag vocabulary.
pub fn tagging_loss(t: &mut Tape, logits: TensorId, labels: &[f64]) -> Result<TensorId> {
    let n: usize = t.shape(logits).iter().product();
    if n != labels.len() {
        return Err(Error::Precondition(format!(
            "tagging_loss: {n} logits vs {} labels",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|y| **y != 0.0 && **y != 1.0) {
        return Err(Error::Precondition(format!("tagging_loss: label {bad} is not 0 or 1")));
    }
    let y = t.constant(&Tensor::new(t.shape(logits).to_vec(), labels.to_vec())?);
    let sp = t.softplus(logits);
    let yl = t.mul(logits, y)?;
    let per_tag = t.sub(sp, yl)?;
    Ok(t.mean(per_tag))
}

/// Mean next-token cross-entropy of the frozen decoder over a tokenized
/// caption, teacher-forced: inputs `ids[..n-1]`, targets `ids[1..]`.
/// Gradients flow only into `prefix`.
pub fn captioning_loss(
    t: &mut Tape,
    llm: &LLMStub,
    prefix: Option<TensorId>,
    ids: &[usize],
) -> Result<TensorId> {
    if ids.len() < 2 {
        return Err(Error::Precondition(format!(
            "captioning_loss needs >= 2 token ids (one transition), got {}",
            ids.len()
        )));
    }
    let inputs = &ids[..ids.len() - 1];
    let targets = &ids[1..];
    let logits = llm
        .decode_logits(t, prefix, inputs)?
        .expect("non-empty inputs always produce logits");
    t.cross_entropy_rows(logits, targets)
}

/// Guard evaluated on each component before weighting; a non-finite value
/// means training has diverged and the step must abort.
pub(crate) fn ensure_finite_component(component: &'static str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { component, value })
    }
}

/// Weighted total `alpha*l_tag + beta*l_cap + gamma*l_cond + lambda*l_multi`.
/// Every input must be a finite scalar.
pub fn total_loss(
    t: &mut Tape,
    l_tag: TensorId,
    l_cap: TensorId,
    l_cond: TensorId,
    l_multi: TensorId,
    w: &LossWeights,
) -> Result<TensorId> {
    let components =
        [("l_tag", l_tag), ("l_cap", l_cap), ("l_cond", l_cond), ("l_multi", l_multi)];
    for (name, id) in components {
        let v = t.value(id);
        if v.len() != 1 {
            return Err(Error::Precondition(format!(
                "total_loss component {name} must be scalar, got shape {:?}",
                t.shape(id)
            )));
        }
        ensure_finite_component(name, v[0])?;
    }
    let a = t.scale(l_tag, w.alpha);
    let b = t.scale(l_cap, w.beta);
    let c = t.scale(l_cond, w.gamma);
    let d = t.scale(l_multi, w.lambda);
    let ab = t.add(a, b)?;
    let cd = t.add(c, d)?;
    t.add(ab, cd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frozen::{Vocab, BOS};
    use crate::tensor::Rng;

    fn scalar_leaf(t: &mut Tape, v: f64) -> TensorId {
        t.leaf(&Tensor::scalar(v), false)
    }

    fn llm() -> LLMStub {
        let vocab = Vocab::new(&["a", "red", "dog", "sits", "here"]).unwrap();
        LLMStub::new(11, vocab, 8, 2, 32)
    }

    #[test]
    fn weights_default_to_one_and_validate() {
        let w: LossWeights = serde_json::from_str("{}").unwrap();
        assert_eq!(w, LossWeights::default());
        assert!(w.validate().is_ok());
        assert!(LossWeights { alpha: -0.1, ..w }.validate().is_err());
        assert!(LossWeights { alpha: f64::NAN, ..w }.validate().is_err());
        let zero = LossWeights { alpha: 0.0, beta: 0.0, gamma: 0.0, lambda: 0.0 };
        assert!(zero.validate().is_err());
        assert!(LossWeights { gamma: 0.5, ..zero }.validate().is_ok());
    }

    #[test]
    fn tagging_zero_logits_is_ln2_for_any_labels() {
        for labels in [vec![1.0, 0.0, 1.0, 0.0, 0.0], vec![0.0; 5], vec![1.0; 5]] {
            let mut t = Tape::new();
            let logits = t.leaf(&Tensor::zeros(vec![1, 5]), true);
            let loss = tagging_loss(&mut t, logits, &labels).unwrap();
            assert!((t.value(loss)[0] - std::f64::consts::LN_2).abs() <= 1e-12);
        }
    }

    #[test]
    fn tagging_saturated_correct_is_tiny() {
        let labels = [1.0, 0.0, 0.0, 1.0];
        let data: Vec<f64> = labels.iter().map(|y| if *y == 1.0 { 20.0 } else { -20.0 }).collect();
        let mut t = Tape::new();
        let logits = t.leaf(&Tensor::new(vec![1, 4], data).unwrap(), true);
        let loss = tagging_loss(&mut t, logits, &labels).unwrap();
        assert!(t.value(loss)[0] <= 1e-8);
        assert!(t.value(loss)[0] > 0.0);
    }

    // Oracle computes each term through the sigmoid directly:
    // y=1 -> -ln(sigma(l)), y=0 -> -ln(1 - sigma(l)); safe for |l| <= 3.
    #[test]
    fn tagging_matches_elementwise_sigmoid_oracle() {
        let v = 17;
        let mut rng = Rng::new(404);
        let logits = Tensor::uniform(vec![1, v], -3.0, 3.0, &mut rng);
        let labels: Vec<f64> =
            (0..v).map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }).collect();
        let expected: f64 = logits
            .data
            .iter()
            .zip(&labels)
            .map(|(l, y)| {
                let s = 1.0 / (1.0 + (-l).exp());
                if *y == 1.0 {
                    -s.ln()
                } else {
                    -(1.0 - s).ln()
                }
            })
            .sum::<f64>()
            / v as f64;

        let mut t = Tape::new();
        let id = t.leaf(&logits, true);
        let loss = tagging_loss(&mut t, id, &labels).unwrap();
        assert!((t.value(loss)[0] - expected).abs() <= 1e-12);

        // dL/dl_v = (sigma(l_v) - y_v) / V.
        t.backward(loss).unwrap();
        let grad = t.grad(id).unwrap();
        for ((l, y), g) in logits.data.iter().zip(&labels).zip(grad) {
            let s = 1.0 / (1.0 + (-l).exp());
            assert!((g - (s - y) / v as f64).abs() <= 1e-12);
        }
    }

    #[test]
    fn tagging_rejects_bad_inputs() {
        let mut t = Tape::new();
        let logits = t.leaf(&Tensor::zeros(vec![1, 3]), false);
        assert!(matches!(
            tagging_loss(&mut t, logits, &[1.0, 0.0]),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            tagging_loss(&mut t, logits, &[1.0, 0.5, 0.0]),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn captioning_uniform_head_gives_ln_vocab() {
        let mut llm = llm();
        let head = llm.head_mut();
        head.weight.tensor.data.iter_mut().for_each(|v| *v = 0.0);
        head.bias.tensor.data.iter_mut().for_each(|v| *v = 0.0);
        let ids = llm.vocab.tokenize("a red dog");
        let mut t = Tape::new();
        let loss = captioning_loss(&mut t, &llm, None, &ids).unwrap();
        let expected = (llm.vocab.len() as f64).ln();
        assert!((t.value(loss)[0] - expected).abs() <= 1e-12);
    }

    #[test]
    fn captioning_saturated_target_is_tiny() {
        let mut llm = llm();
        let a = llm.vocab.id("a").unwrap();
        let head = llm.head_mut();
        head.weight.tensor.data.iter_mut().for_each(|v| *v = 0.0);
        head.bias.tensor.data.iter_mut().for_each(|v| *v = 0.0);
        head.bias.tensor.data[a] = 30.0;
        // Both transitions target `a`, the only boosted column.
        let ids = vec![BOS, a, a];
        let mut t = Tape::new();
        let loss = captioning_loss(&mut t, &llm, None, &ids).unwrap();
        assert!(t.value(loss)[0] <= 1e-8);
    }

    #[test]
    fn captioning_matches_log_softmax_gather_oracle() {
        let llm = llm();
        let ids = llm.vocab.tokenize("a red dog sits here");
        let inputs = &ids[..ids.len() - 1];
        let targets = &ids[1..];

        let mut probe = Tape::new();
        let logits = llm.decode_logits(&mut probe, None, inputs).unwrap().unwrap();
        let v = llm.vocab.len();
        let rows = probe.value(logits).to_vec();
        let expected: f64 = targets
            .iter()
            .enumerate()
            .map(|(r, tgt)| {
                let row = &rows[r * v..(r + 1) * v];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                lse - row[*tgt]
            })
            .sum::<f64>()
            / targets.len() as f64;

        let mut t = Tape::new();
        let loss = captioning_loss(&mut t, &llm, None, &ids).unwrap();
        assert!((t.value(loss)[0] - expected).abs() <= 1e-10);
    }

    #[test]
    fn captioning_rejects_short_sequences() {
        let llm = llm();
        let mut t = Tape::new();
        assert!(matches!(captioning_loss(&mut t, &llm, None, &[]), Err(Error::Precondition(_))));
        assert!(matches!(captioning_loss(&mut t, &llm, None, &[BOS]), Err(Error::Precondition(_))));
    }

    #[test]
    fn total_annihilation_selector_and_arithmetic() {
        let w0 = LossWeights { alpha: 0.0, beta: 0.0, gamma: 0.0, lambda: 0.0 };
        let mut t = Tape::new();
        let (a, b, c, d) = (
            scalar_leaf(&mut t, 0.37),
            scalar_leaf(&mut t, 1.25),
            scalar_leaf(&mut t, 0.11),
            scalar_leaf(&mut t, 2.5),
        );
        let zero = total_loss(&mut t, a, b, c, d, &w0).unwrap();
        assert_eq!(t.value(zero)[0], 0.0);

        let sel = LossWeights { alpha: 1.0, ..w0 };
        let picked = total_loss(&mut t, a, b, c, d, &sel).unwrap();
        assert_eq!(t.value(picked)[0], 0.37);

        let (a, b, c, d) = (
            scalar_leaf(&mut t, 0.5),
            scalar_leaf(&mut t, 1.0),
            scalar_leaf(&mut t, 0.25),
            scalar_leaf(&mut t, 0.25),
        );
        let total = total_loss(&mut t, a, b, c, d, &LossWeights::default()).unwrap();
        assert_eq!(t.value(total)[0], 2.0);
    }

    #[test]
    fn total_is_linear_in_components() {
        let w = LossWeights { alpha: 0.3, beta: 1.7, gamma: 0.05, lambda: 2.2 };
        let vals = [0.41, 0.93, 0.27, 1.55];
        let k = 3.7;
        let mut t = Tape::new();
        let base: Vec<TensorId> = vals.iter().map(|v| scalar_leaf(&mut t, *v)).collect();
        let scaled: Vec<TensorId> = vals.iter().map(|v| scalar_leaf(&mut t, k * v)).collect();
        let lb = total_loss(&mut t, base[0], base[1], base[2], base[3], &w).unwrap();
        let ls = total_loss(&mut t, scaled[0], scaled[1], scaled[2], scaled[3], &w).unwrap();
        assert!((t.value(ls)[0] - k * t.value(lb)[0]).abs() <= 1e-12);
    }

    #[test]
    fn total_matches_plain_weighted_sum() {
        let mut rng = Rng::new(909);
        for _ in 0..100 {
            let vals: Vec<f64> = (0..4).map(|_| rng.range(0.0, 4.0)).collect();
            let ws: Vec<f64> = (0..4).map(|_| rng.range(0.0, 2.0)).collect();
            let w = LossWeights { alpha: ws[0], beta: ws[1], gamma: ws[2], lambda: ws[3] };
            let expected = ws[0] * vals[0] + ws[1] * vals[1] + ws[2] * vals[2] + ws[3] * vals[3];
            let mut t = Tape::new();
            let ids: Vec<TensorId> = vals.iter().map(|v| scalar_leaf(&mut t, *v)).collect();
            let total = total_loss(&mut t, ids[0], ids[1], ids[2], ids[3], &w).unwrap();
            assert!((t.value(total)[0] - expected).abs() <= 1e-12);
        }
    }

    #[test]
    fn non_finite_component_is_reported_by_name() {
        assert!(ensure_finite_component("l_cap", 0.5).is_ok());
        match ensure_finite_component("l_cap", f64::NAN) {
            Err(Error::NonFinite { component, .. }) => assert_eq!(component, "l_cap"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
        match ensure_finite_component("l_cond", f64::INFINITY) {
            Err(Error::NonFinite { component, value }) => {
                assert_eq!(component, "l_cond");
                assert!(value.is_infinite());
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn total_rejects_non_scalar_components() {
        let mut t = Tape::new();
        let vec2 = t.leaf(&Tensor::zeros(vec![2]), false);
        let s = scalar_leaf(&mut t, 0.1);
        assert!(matches!(
            total_loss(&mut t, vec2, s, s, s, &LossWeights::default()),
            Err(Error::Precondition(_))
        ));
    }
}

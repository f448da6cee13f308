//! Named model parameters with the frozen/trainable distinction.

use super::{Rng, Tensor};

/// How a parameter tensor is filled at construction time.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// U(-s, s) with s = 1/sqrt(fan_in).
    FanIn { fan_in: usize },
    /// U(lo, hi).
    Uniform { lo: f64, hi: f64 },
    Zero,
}

/// A named tensor owned by a model.
///
/// `trainable == false` parameters must be bit-identical before and after any
/// number of optimizer steps; names are unique across a model and double as
/// checkpoint keys.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub tensor: Tensor,
    pub name: String,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, init: Init, rng: &mut Rng) -> Self {
        let tensor = match init {
            Init::FanIn { fan_in } => {
                let s = 1.0 / (fan_in.max(1) as f64).sqrt();
                Tensor::uniform(shape, -s, s, rng)
            }
            Init::Uniform { lo, hi } => Tensor::uniform(shape, lo, hi, rng),
            Init::Zero => Tensor::zeros(shape),
        };
        Self { tensor, name: name.into(), trainable: true }
    }

    pub fn from_tensor(name: impl Into<String>, tensor: Tensor) -> Self {
        Self { tensor, name: name.into(), trainable: true }
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fan_in_bound_shrinks_with_width() {
        let mut rng = Rng::new(3);
        let p = Parameter::new("w", vec![100, 4], Init::FanIn { fan_in: 100 }, &mut rng);
        assert!(p.tensor.data.iter().all(|v| v.abs() <= 0.1));
        assert!(p.trainable);
    }

    #[test]
    fn frozen_flips_trainable_only() {
        let mut rng = Rng::new(3);
        let p = Parameter::new("w", vec![2, 2], Init::Zero, &mut rng).frozen();
        assert!(!p.trainable);
        assert_eq!(p.tensor.data, vec![0.0; 4]);
    }
}

//! Adaptive-moment optimizer over named parameters.

use std::collections::HashMap;

use crate::config::OptimizerConfig;
use crate::tensor::{Parameter, Tape};

/// Moment buffers are keyed by parameter name and live across steps; a
/// parameter absent from the current tape (or without a gradient) is skipped.
#[derive(Debug)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    steps_taken: usize,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, cfg: &OptimizerConfig) -> Self {
        Self {
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            steps_taken: 0,
            moments: HashMap::new(),
        }
    }

    /// One update over every trainable parameter the visitor yields, using
    /// gradients recorded on `tape` by a prior `backward`. Frozen parameters
    /// are never written.
    pub fn step(&mut self, tape: &Tape, for_each_mut: &mut dyn FnMut(&mut dyn FnMut(&mut Parameter))) {
        self.steps_taken += 1;
        let t = self.steps_taken as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.epsilon);
        let moments = &mut self.moments;

        for_each_mut(&mut |p: &mut Parameter| {
            if !p.trainable {
                return;
            }
            let Some(g) = tape.param_grad(&p.name) else {
                return;
            };
            let n = p.tensor.data.len();
            debug_assert_eq!(g.len(), n, "gradient length mismatch for `{}`", p.name);
            let (m, v) = moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for i in 0..n {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.tensor.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }
}

//! Stochastic exit sampling and stick-breaking probabilities.
//!
//! A position walks its exitable layers in ascending order, flipping a
//! Bernoulli coin with probability sigmoid(logit + offset) at each head. The
//! first success fixes the exit layer; surviving every head lands in the
//! final-layer catch-all. The induced distribution over exit layers is the
//! stick-breaking construction p(l=k) = s_k * prod_{j<k} (1 - s_j).

use rand::{Rng, RngCore};

use crate::forward::LayerTrace;
use crate::tensor::sigmoid;

/// Outcome of the exit process for one generated token.
#[derive(Debug, Clone)]
pub struct ExitDecision {
    /// Sequence position whose forward pass made the decision.
    pub position: usize,
    /// Exitable layer index, or `n_layers` for the catch-all.
    pub exit_layer: usize,
    /// (layer, sigmoid(logit + offset)) for every head actually visited.
    pub head_probs: Vec<(usize, f64)>,
    /// log p(exit_layer) accumulated from the visited heads.
    pub logp_exit: f64,
    /// log p(token | exit_layer); filled in by the decoder loop.
    pub logp_token: f64,
}

impl ExitDecision {
    /// log p(l, v) = log p(l) + log p(v | l).
    pub fn joint_logp(&self) -> f64 {
        self.logp_exit + self.logp_token
    }
}

/// Sequential Bernoulli walk over exit heads.
pub struct ExitSampler {
    offset: f64,
    visited: Vec<(usize, f64)>,
    logp: f64,
    exited: Option<usize>,
}

impl ExitSampler {
    pub fn new(offset: f64) -> Self {
        ExitSampler { offset, visited: Vec::new(), logp: 0.0, exited: None }
    }

    /// Flip the coin for one head. Returns true when the position exits here.
    pub fn observe(&mut self, layer: usize, logit: f64, rng: &mut dyn RngCore) -> bool {
        debug_assert!(self.exited.is_none(), "observe after exit");
        let p = sigmoid(logit + self.offset);
        self.visited.push((layer, p));
        // gen::<f64>() is in [0, 1): p = 1 always exits, p = 0 never does,
        // so the sampled branch always has nonzero probability.
        if rng.gen::<f64>() < p {
            self.logp += p.ln();
            self.exited = Some(layer);
            true
        } else {
            self.logp += (-p).ln_1p();
            false
        }
    }

    pub fn exited(&self) -> Option<usize> {
        self.exited
    }

    pub fn finish(&self, position: usize, final_layer: usize) -> ExitDecision {
        let exit_layer = self.exited.unwrap_or(final_layer);
        debug_assert!(self.logp.is_finite() && self.logp <= 0.0);
        ExitDecision {
            position,
            exit_layer,
            head_probs: self.visited.clone(),
            logp_exit: self.logp,
            logp_token: 0.0,
        }
    }
}

/// Sample an exit layer for `position` from a full-depth trace.
pub fn sample_exit(
    trace: &LayerTrace,
    position: usize,
    offset: f64,
    rng: &mut impl Rng,
) -> ExitDecision {
    let mut sampler = ExitSampler::new(offset);
    for (hi, &layer) in trace.exitable.iter().enumerate() {
        if sampler.observe(layer, trace.exit_logits[hi][position], rng) {
            break;
        }
    }
    sampler.finish(position, trace.n_layers)
}

/// Stick-breaking over per-head probabilities. Returns one probability per
/// head plus the catch-all mass as the last element; the total is exactly 1
/// up to floating error (the construction telescopes).
pub fn stick_breaking(head_probs: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(head_probs.len() + 1);
    let mut survive = 1.0;
    for &s in head_probs {
        out.push(survive * s);
        survive *= 1.0 - s;
    }
    out.push(survive);
    out
}

/// Exit distribution implied by head logits under a logit offset.
pub fn exit_distribution_from_logits(logits: &[f64], offset: f64) -> Vec<f64> {
    let probs: Vec<f64> = logits.iter().map(|&l| sigmoid(l + offset)).collect();
    stick_breaking(&probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stick_breaking_hand_case() {
        let p = stick_breaking(&[0.3, 0.6]);
        assert!((p[0] - 0.3).abs() < 1e-15);
        assert!((p[1] - 0.42).abs() < 1e-15);
        assert!((p[2] - 0.28).abs() < 1e-15);
    }

    #[test]
    fn stick_breaking_normalizes_on_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let n = rng.gen_range(1..8);
            let probs: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let dist = stick_breaking(&probs);
            let total: f64 = dist.iter().sum();
            assert!((total - 1.0).abs() < 1e-12, "total {total}");
            assert!(dist.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn certain_first_exit_takes_all_mass() {
        let p = stick_breaking(&[1.0, 0.7]);
        assert_eq!(p[0], 1.0);
        assert_eq!(p[1], 0.0);
        assert_eq!(p[2], 0.0);
    }
}

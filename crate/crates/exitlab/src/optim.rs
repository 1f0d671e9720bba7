//! Adam-style optimizer over the canonical tensor list.
//!
//! `beta1 = 0` gives the momentum-free adaptive step used for RL; pretraining
//! and calibration run with the usual momentum.

use crate::model::{ModelParams, TrainScope};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimConfig {
    pub fn adam(lr: f64) -> Self {
        OptimConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// Momentum-free adaptive step (Adam with beta1 = 0).
    pub fn adaptive(lr: f64) -> Self {
        OptimConfig { lr, beta1: 0.0, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct Optimizer {
    cfg: OptimConfig,
    t: u64,
    scope: Vec<usize>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(params: &ModelParams, scope: TrainScope, cfg: OptimConfig) -> Self {
        let shapes: Vec<(usize, usize)> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| (t.rows, t.cols))
            .collect();
        Optimizer {
            cfg,
            t: 0,
            scope: params.trainable_indices(scope),
            m: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
        }
    }

    pub fn scope_indices(&self) -> &[usize] {
        &self.scope
    }

    /// One update from gradients aligned with the canonical tensor order.
    /// Only tensors in scope move; the params version is bumped.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor]) {
        assert_eq!(grads.len(), self.m.len(), "gradient layout mismatch");
        self.t += 1;
        let c1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        let in_scope: std::collections::HashSet<usize> = self.scope.iter().copied().collect();
        let (cfg, m, v) = (&self.cfg, &mut self.m, &mut self.v);
        params.for_each_tensor_mut(|i, t| {
            if !in_scope.contains(&i) {
                return;
            }
            let g = &grads[i];
            let mi = &mut m[i];
            let vi = &mut v[i];
            for j in 0..t.data.len() {
                let gj = g.data[j];
                mi.data[j] = cfg.beta1 * mi.data[j] + (1.0 - cfg.beta1) * gj;
                vi.data[j] = cfg.beta2 * vi.data[j] + (1.0 - cfg.beta2) * gj * gj;
                let m_hat = mi.data[j] / c1;
                let v_hat = vi.data[j] / c2;
                t.data[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        });
        params.version += 1;
    }
}

/// Zero gradients aligned with the canonical tensor order.
pub fn zero_grads(params: &ModelParams) -> Vec<Tensor> {
    params
        .named_tensors()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.rows, t.cols))
        .collect()
}

/// dst += scale * src for every tensor.
pub fn accumulate(dst: &mut [Tensor], src: &[Tensor], scale: f64) {
    assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        d.add_scaled(s, scale);
    }
}

/// Items per gradient-accumulation chunk. Fixed (not tied to the worker
/// count) so the floating-point reduction order, and therefore every metric
/// file, is identical no matter how many threads run.
const GRAD_CHUNK: usize = 8;

/// Accumulate per-item gradients over `n_items` in parallel chunks.
/// `per_item` adds its gradient contribution into the chunk buffer and may
/// return a metric; chunk buffers are folded in index order.
pub fn grad_accumulate_chunked<E: Send>(
    n_items: usize,
    params: &ModelParams,
    per_item: impl Fn(usize, &mut Vec<Tensor>) -> crate::error::Result<E> + Sync,
) -> crate::error::Result<(Vec<Tensor>, Vec<E>)> {
    use rayon::prelude::*;
    let chunk_starts: Vec<usize> = (0..n_items).step_by(GRAD_CHUNK).collect();
    let parts: Vec<(Vec<Tensor>, Vec<E>)> = chunk_starts
        .par_iter()
        .map(|&start| {
            let end = (start + GRAD_CHUNK).min(n_items);
            let mut buf = zero_grads(params);
            let mut extras = Vec::with_capacity(end - start);
            for i in start..end {
                extras.push(per_item(i, &mut buf)?);
            }
            Ok((buf, extras))
        })
        .collect::<crate::error::Result<Vec<_>>>()?;

    let mut grads = zero_grads(params);
    let mut extras = Vec::with_capacity(n_items);
    for (buf, ex) in parts {
        accumulate(&mut grads, &buf, 1.0);
        extras.extend(ex);
    }
    Ok((grads, extras))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn frozen_base_stays_bitwise_identical() {
        let config = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            vocab_size: 6,
            max_seq_len: 8,
            exit_stride: 1,
            lora_rank: 2,
        };
        let mut params = ModelParams::init(&config, 4).unwrap();
        let before = params.clone();
        let mut opt =
            Optimizer::new(&params, TrainScope::AdaptersAndHeads, OptimConfig::adam(1e-2));
        let mut grads = zero_grads(&params);
        for g in &mut grads {
            g.fill(0.5);
        }
        opt.step(&mut params, &grads);

        // adapters and heads moved, base weights did not
        assert_ne!(params.blocks[0].lora, before.blocks[0].lora);
        assert_ne!(params.exit_heads, before.exit_heads);
        assert_eq!(params.tok_embed, before.tok_embed);
        assert_eq!(params.blocks[0].wq, before.blocks[0].wq);
        assert_eq!(params.unembed, before.unembed);
        assert_eq!(params.version, before.version + 1);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let params0 = ModelParams::init(&ModelConfig::default(), 4).unwrap();
        let mut params = params0.clone();
        let mut opt = Optimizer::new(&params, TrainScope::All, OptimConfig::adaptive(1e-3));
        let grads = zero_grads(&params);
        opt.step(&mut params, &grads);
        let mut expected = params0.clone();
        expected.version = 1;
        assert_eq!(params, expected);
    }
}

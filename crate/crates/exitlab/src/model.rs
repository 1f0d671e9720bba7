//! Model configuration and parameters for the early-exit decoder.
//!
//! The architecture is a pre-norm decoder-only transformer (RMSNorm, SiLU
//! MLP, learned positional embeddings, untied unembedding) with a scalar exit
//! head after every `exit_stride`-th block. The final layer never has a head:
//! it is the catch-all that absorbs whatever exit probability mass is left.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// An exit head sits after every `exit_stride`-th block; the final layer
    /// is always a catch-all with no head.
    pub exit_stride: usize,
    /// 0 disables low-rank adapters.
    pub lora_rank: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            vocab_size: 96,
            max_seq_len: 256,
            exit_stride: 2,
            lora_rank: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.vocab_size == 0
            || self.max_seq_len == 0
            || self.exit_stride == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.exit_stride > self.n_layers {
            return Err(Error::Config(format!(
                "exit_stride {} exceeds n_layers {}",
                self.exit_stride, self.n_layers
            )));
        }
        Ok(())
    }

    /// 1-based indices of layers carrying an exit head:
    /// multiples of `exit_stride` strictly below the final layer.
    pub fn exitable_layers(&self) -> Vec<usize> {
        (1..self.n_layers)
            .filter(|l| l % self.exit_stride == 0)
            .collect()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.d_model
    }
}

/// One low-rank adapter pair: contribution is `x * a * b` on top of `x * w`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    /// d_in x rank
    pub a: Tensor,
    /// rank x d_out
    pub b: Tensor,
}

impl LoraPair {
    pub fn zeros(d_in: usize, d_out: usize, rank: usize) -> Self {
        LoraPair { a: Tensor::zeros(d_in, rank), b: Tensor::zeros(rank, d_out) }
    }

    pub fn delta(&self) -> Tensor {
        matmul(&self.a, &self.b)
    }

    pub fn zero_out(&mut self) {
        self.a.fill(0.0);
        self.b.fill(0.0);
    }
}

/// Adapters for one block (attention projections only).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockLora {
    pub q: LoraPair,
    pub k: LoraPair,
    pub v: LoraPair,
    pub o: LoraPair,
}

impl BlockLora {
    pub fn pairs_mut(&mut self) -> [&mut LoraPair; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub attn_norm: Tensor, // 1 x d gain
    pub wq: Tensor,        // d x d
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm: Tensor, // 1 x d gain
    pub w_up: Tensor,     // d x 4d
    pub w_down: Tensor,   // 4d x d
    pub lora: Option<BlockLora>,
}

/// Scalar exit head reading the final-normed post-block residual.
/// The bias lives in a 1x1 tensor so heads flow through the same gradient,
/// optimizer, and checkpoint plumbing as every other parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitHead {
    /// Index of the layer this head sits after (1-based).
    pub layer: usize,
    pub w: Tensor, // d x 1
    pub b: Tensor, // 1 x 1
}

impl ExitHead {
    pub fn bias(&self) -> f64 {
        self.b.data[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// Bumped on every optimizer update; used to reject stale rollouts.
    pub version: u64,
    pub tok_embed: Tensor, // vocab x d
    pub pos_embed: Tensor, // max_seq_len x d
    pub blocks: Vec<BlockParams>,
    pub final_norm: Tensor, // 1 x d gain
    pub unembed: Tensor,    // d x vocab
    pub exit_heads: Vec<ExitHead>,
}

/// Which parameter tensors an optimizer may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    /// Everything except exit heads and adapters (pretraining).
    Base,
    /// Adapters and exit heads only (calibration, RL).
    AdaptersAndHeads,
    All,
}

impl ModelParams {
    /// Fresh parameters: blocks and embeddings get small random values, exit
    /// heads start at exactly zero so every exit probability is sigmoid(0),
    /// and adapter products start at zero (B = 0) so the model is
    /// base-equivalent from the first step.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let std = 0.06;

        let tok_embed = Tensor::randn(config.vocab_size, d, std, &mut rng);
        let pos_embed = Tensor::randn(config.max_seq_len, d, std, &mut rng);

        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let wq = Tensor::randn(d, d, std, &mut rng);
            let wk = Tensor::randn(d, d, std, &mut rng);
            let wv = Tensor::randn(d, d, std, &mut rng);
            let wo = Tensor::randn(d, d, std, &mut rng);
            let w_up = Tensor::randn(d, config.mlp_hidden(), std, &mut rng);
            let w_down = Tensor::randn(config.mlp_hidden(), d, std, &mut rng);
            let lora = if config.lora_rank > 0 {
                let r = config.lora_rank;
                let pair = |rng: &mut ChaCha8Rng| {
                    let mut p = LoraPair::zeros(d, d, r);
                    // A gets small random values, B stays zero: the product is
                    // zero but gradients can reach both factors.
                    p.a = Tensor::randn(d, r, std, rng);
                    p
                };
                Some(BlockLora {
                    q: pair(&mut rng),
                    k: pair(&mut rng),
                    v: pair(&mut rng),
                    o: pair(&mut rng),
                })
            } else {
                None
            };
            blocks.push(BlockParams {
                attn_norm: ones(1, d),
                wq,
                wk,
                wv,
                wo,
                mlp_norm: ones(1, d),
                w_up,
                w_down,
                lora,
            });
        }

        let unembed = Tensor::randn(d, config.vocab_size, std, &mut rng);
        let exit_heads = config
            .exitable_layers()
            .into_iter()
            .map(|layer| ExitHead { layer, w: Tensor::zeros(d, 1), b: Tensor::zeros(1, 1) })
            .collect();

        Ok(ModelParams {
            config: config.clone(),
            version: 0,
            tok_embed,
            pos_embed,
            blocks,
            final_norm: ones(1, d),
            unembed,
            exit_heads,
        })
    }

    /// Fold every adapter product into its base matrix and zero the pairs.
    /// The merged model computes the same function as the unmerged one.
    pub fn merge_adapters(&self) -> Result<ModelParams> {
        if self.config.lora_rank == 0 {
            return Err(Error::AdaptersDisabled);
        }
        let mut merged = self.clone();
        for block in &mut merged.blocks {
            if let Some(lora) = &mut block.lora {
                block.wq.add_assign(&lora.q.delta());
                block.wk.add_assign(&lora.k.delta());
                block.wv.add_assign(&lora.v.delta());
                block.wo.add_assign(&lora.o.delta());
                for pair in lora.pairs_mut() {
                    pair.zero_out();
                }
            }
        }
        Ok(merged)
    }

    /// Set every exit head and adapter factor to exactly zero.
    pub fn zero_exit_machinery(&mut self) {
        for h in &mut self.exit_heads {
            h.w.fill(0.0);
            h.b.fill(0.0);
        }
        for block in &mut self.blocks {
            if let Some(lora) = &mut block.lora {
                for pair in lora.pairs_mut() {
                    pair.zero_out();
                }
            }
        }
    }

    /// Canonical (name, tensor) listing; the order defines gradient and
    /// optimizer-state layout and the checkpoint tensor order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("tok_embed".into(), &self.tok_embed),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.attn_norm"), &b.attn_norm));
            out.push((format!("block{i}.wq"), &b.wq));
            out.push((format!("block{i}.wk"), &b.wk));
            out.push((format!("block{i}.wv"), &b.wv));
            out.push((format!("block{i}.wo"), &b.wo));
            out.push((format!("block{i}.mlp_norm"), &b.mlp_norm));
            out.push((format!("block{i}.w_up"), &b.w_up));
            out.push((format!("block{i}.w_down"), &b.w_down));
            if let Some(l) = &b.lora {
                out.push((format!("block{i}.lora_q_a"), &l.q.a));
                out.push((format!("block{i}.lora_q_b"), &l.q.b));
                out.push((format!("block{i}.lora_k_a"), &l.k.a));
                out.push((format!("block{i}.lora_k_b"), &l.k.b));
                out.push((format!("block{i}.lora_v_a"), &l.v.a));
                out.push((format!("block{i}.lora_v_b"), &l.v.b));
                out.push((format!("block{i}.lora_o_a"), &l.o.a));
                out.push((format!("block{i}.lora_o_b"), &l.o.b));
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("unembed".into(), &self.unembed));
        for h in &self.exit_heads {
            out.push((format!("exit_head{}.w", h.layer), &h.w));
            out.push((format!("exit_head{}.b", h.layer), &h.b));
        }
        out
    }

    /// Apply `f` to each named tensor mutably, in canonical order.
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(usize, &mut Tensor)) {
        let mut idx = 0usize;
        macro_rules! visit {
            ($t:expr) => {{
                f(idx, $t);
                idx += 1;
            }};
        }
        visit!(&mut self.tok_embed);
        visit!(&mut self.pos_embed);
        for b in &mut self.blocks {
            visit!(&mut b.attn_norm);
            visit!(&mut b.wq);
            visit!(&mut b.wk);
            visit!(&mut b.wv);
            visit!(&mut b.wo);
            visit!(&mut b.mlp_norm);
            visit!(&mut b.w_up);
            visit!(&mut b.w_down);
            if let Some(l) = &mut b.lora {
                visit!(&mut l.q.a);
                visit!(&mut l.q.b);
                visit!(&mut l.k.a);
                visit!(&mut l.k.b);
                visit!(&mut l.v.a);
                visit!(&mut l.v.b);
                visit!(&mut l.o.a);
                visit!(&mut l.o.b);
            }
        }
        visit!(&mut self.final_norm);
        visit!(&mut self.unembed);
        for h in &mut self.exit_heads {
            visit!(&mut h.w);
            visit!(&mut h.b);
        }
    }

    /// Indices (into the canonical order) that a given scope may update.
    pub fn trainable_indices(&self, scope: TrainScope) -> Vec<usize> {
        self.named_tensors()
            .iter()
            .enumerate()
            .filter(|(_, (name, _))| match scope {
                TrainScope::All => true,
                TrainScope::Base => !name.contains("lora_") && !name.starts_with("exit_head"),
                TrainScope::AdaptersAndHeads => {
                    name.contains("lora_") || name.starts_with("exit_head")
                }
            })
            .map(|(i, _)| i)
            .collect()
    }
}

fn ones(rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, vec![1.0; rows * cols])
}

/// Per-tensor trainability flags in canonical order.
pub fn trainable_mask(params: &ModelParams, scope: TrainScope) -> Vec<bool> {
    let mut mask = vec![false; params.named_tensors().len()];
    for i in params.trainable_indices(scope) {
        mask[i] = true;
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_head_placement_stride_two() {
        let config = ModelConfig { n_layers: 8, exit_stride: 2, ..Default::default() };
        assert_eq!(config.exitable_layers(), vec![2, 4, 6]);
        let params = ModelParams::init(&config, 7).unwrap();
        let layers: Vec<usize> = params.exit_heads.iter().map(|h| h.layer).collect();
        assert_eq!(layers, vec![2, 4, 6]);
    }

    #[test]
    fn exit_head_placement_every_five() {
        let config = ModelConfig {
            n_layers: 28,
            d_model: 16,
            n_heads: 2,
            exit_stride: 5,
            ..Default::default()
        };
        assert_eq!(config.exitable_layers(), vec![5, 10, 15, 20, 25]);
        let params = ModelParams::init(&config, 0).unwrap();
        let layers: Vec<usize> = params.exit_heads.iter().map(|h| h.layer).collect();
        assert_eq!(layers, vec![5, 10, 15, 20, 25]);
    }

    #[test]
    fn init_is_deterministic() {
        let config = ModelConfig::default();
        let a = ModelParams::init(&config, 42).unwrap();
        let b = ModelParams::init(&config, 42).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init(&config, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_rejects_bad_dims() {
        let config = ModelConfig { d_model: 65, ..Default::default() };
        assert!(matches!(ModelParams::init(&config, 0), Err(Error::Config(_))));
        let config = ModelConfig { exit_stride: 9, ..Default::default() };
        assert!(matches!(ModelParams::init(&config, 0), Err(Error::Config(_))));
    }

    #[test]
    fn heads_start_at_zero() {
        let params = ModelParams::init(&ModelConfig::default(), 3).unwrap();
        for h in &params.exit_heads {
            assert!(h.w.data.iter().all(|&v| v == 0.0));
            assert_eq!(h.bias(), 0.0);
        }
        // adapter products are zero even though A is random
        for b in &params.blocks {
            let l = b.lora.as_ref().unwrap();
            assert!(l.q.delta().data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn merge_on_zero_adapters_is_identity() {
        let mut params = ModelParams::init(&ModelConfig::default(), 3).unwrap();
        params.zero_exit_machinery();
        let merged = params.merge_adapters().unwrap();
        assert_eq!(params, merged);
    }

    #[test]
    fn merge_without_adapters_errors() {
        let config = ModelConfig { lora_rank: 0, ..Default::default() };
        let params = ModelParams::init(&config, 0).unwrap();
        assert!(matches!(params.merge_adapters(), Err(Error::AdaptersDisabled)));
    }

    #[test]
    fn named_tensor_order_matches_mut_walk() {
        let mut params = ModelParams::init(&ModelConfig::default(), 1).unwrap();
        let names: Vec<String> =
            params.named_tensors().into_iter().map(|(n, _)| n).collect();
        let shapes: Vec<(usize, usize)> = {
            let mut v = Vec::new();
            params.for_each_tensor_mut(|_, t| v.push((t.rows, t.cols)));
            v
        };
        assert_eq!(names.len(), shapes.len());
        let ref_shapes: Vec<(usize, usize)> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| (t.rows, t.cols))
            .collect();
        assert_eq!(shapes, ref_shapes);
    }
}

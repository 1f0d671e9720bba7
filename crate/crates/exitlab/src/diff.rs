//! Differentiable forward pass on the tape.
//!
//! Mirrors the math in [`crate::forward`] but records every op so losses can
//! be backpropagated to the parameters. Exit layers, when supplied, mask the
//! block writes of every layer above a position's exit; the frozen residual
//! still reaches later layers' key/value projections, so gradients flow
//! through the frozen-stream attention exactly as the sampled rollout ran.

use std::rc::Rc;

use crate::error::Result;
use crate::forward::{check_len, RMS_EPS};
use crate::model::ModelParams;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOpts<'a> {
    /// Record logit-lens log-distributions at every exitable layer.
    pub lens_at_exitable: bool,
    /// Record exit-head logit columns at every exitable layer.
    pub exit_heads: bool,
    /// Per-tensor trainability in canonical order; frozen tensors become
    /// constant leaves and their gradient products are skipped. `None`
    /// trains everything.
    pub trainable: Option<&'a [bool]>,
}

/// A recorded forward pass plus handles to everything losses need.
pub struct DiffForward {
    pub tape: Tape,
    /// Parameter leaves in the canonical `named_tensors` order.
    pub param_vars: Vec<Var>,
    /// Final-layer log p(v) rows, `T x V`.
    pub final_logprobs: Var,
    /// (layer, `T x V` log p(v|layer)) per exitable layer.
    pub lens_logprobs: Vec<(usize, Var)>,
    /// (layer, `T x 1` exit logit) per exitable layer.
    pub exit_logits: Vec<(usize, Var)>,
}

impl DiffForward {
    /// Gradients for every parameter tensor after `tape.backward`.
    pub fn param_grads(&self) -> Vec<Tensor> {
        self.param_vars.iter().map(|&v| self.tape.grad(v)).collect()
    }

    /// Accumulate `scale` times this pass's parameter gradients into `dst`
    /// (canonical order). Unreached and frozen tensors contribute nothing.
    pub fn add_param_grads_into(&self, dst: &mut [Tensor], scale: f64) {
        assert_eq!(dst.len(), self.param_vars.len());
        for (d, &v) in dst.iter_mut().zip(&self.param_vars) {
            if let Some(g) = self.tape.grad_ref(v) {
                d.add_scaled(g, scale);
            }
        }
    }

    /// Clone only the gradients named by `indices` (canonical order).
    pub fn sparse_param_grads(&self, indices: &[usize]) -> Vec<(usize, Tensor)> {
        indices
            .iter()
            .map(|&i| (i, self.tape.grad(self.param_vars[i])))
            .collect()
    }

    /// Log-lens logprobs for an exit layer index (final layer included).
    pub fn logprobs_at_layer(&self, layer: usize, n_layers: usize) -> Option<Var> {
        if layer == n_layers {
            return Some(self.final_logprobs);
        }
        self.lens_logprobs
            .iter()
            .find(|(l, _)| *l == layer)
            .map(|(_, v)| *v)
    }
}

struct BlockVars {
    attn_norm: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    mlp_norm: Var,
    w_up: Var,
    w_down: Var,
    /// (a, b) for q, k, v, o.
    lora: Option<[(Var, Var); 4]>,
}

struct ParamVars {
    tok_embed: Var,
    pos_embed: Var,
    blocks: Vec<BlockVars>,
    final_norm: Var,
    unembed: Var,
    heads: Vec<(Var, Var)>,
    flat: Vec<Var>,
}

fn register_params(tape: &mut Tape, params: &ModelParams, trainable: Option<&[bool]>) -> ParamVars {
    let mut flat = Vec::new();
    let mut leaf = |tape: &mut Tape, t: &Tensor| {
        let idx = flat.len();
        let train = trainable.map_or(true, |m| m[idx]);
        let v = if train { tape.leaf(t.clone()) } else { tape.leaf_const(t.clone()) };
        flat.push(v);
        v
    };
    let tok_embed = leaf(tape, &params.tok_embed);
    let pos_embed = leaf(tape, &params.pos_embed);
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for b in &params.blocks {
        let attn_norm = leaf(tape, &b.attn_norm);
        let wq = leaf(tape, &b.wq);
        let wk = leaf(tape, &b.wk);
        let wv = leaf(tape, &b.wv);
        let wo = leaf(tape, &b.wo);
        let mlp_norm = leaf(tape, &b.mlp_norm);
        let w_up = leaf(tape, &b.w_up);
        let w_down = leaf(tape, &b.w_down);
        let lora = b.lora.as_ref().map(|l| {
            [
                (leaf(tape, &l.q.a), leaf(tape, &l.q.b)),
                (leaf(tape, &l.k.a), leaf(tape, &l.k.b)),
                (leaf(tape, &l.v.a), leaf(tape, &l.v.b)),
                (leaf(tape, &l.o.a), leaf(tape, &l.o.b)),
            ]
        });
        blocks.push(BlockVars { attn_norm, wq, wk, wv, wo, mlp_norm, w_up, w_down, lora });
    }
    let final_norm = leaf(tape, &params.final_norm);
    let unembed = leaf(tape, &params.unembed);
    let heads = params
        .exit_heads
        .iter()
        .map(|h| (leaf(tape, &h.w), leaf(tape, &h.b)))
        .collect();
    ParamVars { tok_embed, pos_embed, blocks, final_norm, unembed, heads, flat }
}

fn rmsnorm(tape: &mut Tape, x: Var, gain: Var) -> Var {
    let sq = tape.mul(x, x);
    let ms = tape.row_mean(sq);
    let mse = tape.add_const(ms, RMS_EPS);
    let inv = tape.pow_const(mse, -0.5);
    let scaled = tape.mul_col_broadcast(x, inv);
    tape.mul_row_broadcast(scaled, gain)
}

fn linear_lora(tape: &mut Tape, x: Var, w: Var, lora: Option<(Var, Var)>) -> Var {
    let y = tape.matmul(x, w);
    match lora {
        None => y,
        Some((a, b)) => {
            let xa = tape.matmul(x, a);
            let delta = tape.matmul(xa, b);
            tape.add(y, delta)
        }
    }
}

/// Record a forward pass over `tokens`. `exits` gives each position's exit
/// layer (use `n_layers` for "no early exit"); `None` runs full depth.
pub fn build_forward(
    params: &ModelParams,
    tokens: &[usize],
    exits: Option<&[usize]>,
    opts: ForwardOpts<'_>,
) -> Result<DiffForward> {
    check_len(params, tokens.len())?;
    if let Some(e) = exits {
        assert_eq!(e.len(), tokens.len(), "one exit layer per position");
    }
    let cfg = &params.config;
    let t_len = tokens.len();
    let n_heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let exitable = cfg.exitable_layers();

    let mut tape = Tape::new();
    let pv = register_params(&mut tape, params, opts.trainable);

    let tok_ids = Rc::new(tokens.to_vec());
    let pos_ids = Rc::new((0..t_len).collect::<Vec<usize>>());
    let tok_rows = tape.embed_rows(pv.tok_embed, tok_ids);
    let pos_rows = tape.embed_rows(pv.pos_embed, pos_ids);
    let mut h = tape.add(tok_rows, pos_rows);

    let mut lens_logprobs = Vec::new();
    let mut exit_logits = Vec::new();

    for (bi, block) in pv.blocks.iter().enumerate() {
        let layer = bi + 1;
        let write_mask = exits.and_then(|e| {
            if e.iter().all(|&x| x >= layer) {
                return None;
            }
            let mask: Vec<f64> =
                e.iter().map(|&x| if x >= layer { 1.0 } else { 0.0 }).collect();
            Some(tape.leaf_const(Tensor::from_vec(t_len, 1, mask)))
        });

        // attention
        let normed = rmsnorm(&mut tape, h, block.attn_norm);
        let q = linear_lora(&mut tape, normed, block.wq, block.lora.map(|l| l[0]));
        let k = linear_lora(&mut tape, normed, block.wk, block.lora.map(|l| l[1]));
        let v = linear_lora(&mut tape, normed, block.wv, block.lora.map(|l| l[2]));
        let mut head_outs = Vec::with_capacity(n_heads);
        for hi in 0..n_heads {
            let qh = tape.slice_cols(q, hi * hd, hd);
            let kh = tape.slice_cols(k, hi * hd, hd);
            let vh = tape.slice_cols(v, hi * hd, hd);
            let scores = tape.matmul_trans_b(qh, kh);
            let scaled = tape.scale(scores, scale);
            let weights = tape.causal_row_softmax(scaled);
            head_outs.push(tape.matmul(weights, vh));
        }
        let mixed = tape.concat_cols(head_outs);
        let attn_out = linear_lora(&mut tape, mixed, block.wo, block.lora.map(|l| l[3]));
        let attn_write = match write_mask {
            Some(m) => tape.mul_col_broadcast(attn_out, m),
            None => attn_out,
        };
        h = tape.add(h, attn_write);

        // mlp
        let normed2 = rmsnorm(&mut tape, h, block.mlp_norm);
        let up = tape.matmul(normed2, block.w_up);
        let act = tape.silu(up);
        let down = tape.matmul(act, block.w_down);
        let mlp_write = match write_mask {
            Some(m) => tape.mul_col_broadcast(down, m),
            None => down,
        };
        h = tape.add(h, mlp_write);

        // exit machinery reads the post-block residual through the final norm
        if let Some(head_pos) = exitable.iter().position(|&l| l == layer) {
            if opts.exit_heads || opts.lens_at_exitable {
                let normed_f = rmsnorm(&mut tape, h, pv.final_norm);
                if opts.exit_heads {
                    let (hw, hb) = pv.heads[head_pos];
                    let e = tape.matmul(normed_f, hw);
                    let e = tape.add_row_broadcast(e, hb);
                    exit_logits.push((layer, e));
                }
                if opts.lens_at_exitable {
                    let lens = tape.matmul(normed_f, pv.unembed);
                    let lp = tape.row_log_softmax(lens);
                    lens_logprobs.push((layer, lp));
                }
            }
        }
    }

    let normed_final = rmsnorm(&mut tape, h, pv.final_norm);
    let logits = tape.matmul(normed_final, pv.unembed);
    let final_logprobs = tape.row_log_softmax(logits);

    Ok(DiffForward {
        tape,
        param_vars: pv.flat,
        final_logprobs,
        lens_logprobs,
        exit_logits,
    })
}

/// Mean next-token cross-entropy over `(position, target)` pairs.
pub fn cross_entropy_loss(fwd: &mut DiffForward, targets: &[(usize, usize)]) -> Var {
    assert!(!targets.is_empty());
    let picks = Rc::new(targets.to_vec());
    let picked = fwd.tape.gather(fwd.final_logprobs, picks);
    let total = fwd.tape.sum_all(picked);
    fwd.tape.scale(total, -1.0 / targets.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::full_trace;
    use crate::model::ModelConfig;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 4,
            d_model: 16,
            n_heads: 2,
            vocab_size: 11,
            max_seq_len: 12,
            exit_stride: 1,
            lora_rank: 2,
        }
    }

    fn randomize_heads(params: &mut ModelParams, seed: u64) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for h in &mut params.exit_heads {
            h.w = Tensor::randn(h.w.rows, 1, 0.4, &mut rng);
            h.b = Tensor::randn(1, 1, 0.4, &mut rng);
        }
        for b in &mut params.blocks {
            if let Some(l) = &mut b.lora {
                for p in l.pairs_mut() {
                    p.a = Tensor::randn(p.a.rows, p.a.cols, 0.2, &mut rng);
                    p.b = Tensor::randn(p.b.rows, p.b.cols, 0.2, &mut rng);
                }
            }
        }
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let mut params = ModelParams::init(&tiny_config(), 5).unwrap();
        randomize_heads(&mut params, 6);
        let tokens = vec![1, 4, 2, 9, 0, 7];
        let trace = full_trace(&params, &tokens).unwrap();
        let fwd = build_forward(
            &params,
            &tokens,
            None,
            ForwardOpts { lens_at_exitable: true, exit_heads: true, trainable: None },
        )
        .unwrap();

        // final distribution
        let lp = fwd.tape.value(fwd.final_logprobs);
        for pos in 0..tokens.len() {
            for v in 0..11 {
                let p_tape = lp.at(pos, v).exp();
                let p_plain = trace.final_dist.at(pos, v);
                assert!((p_tape - p_plain).abs() < 1e-12);
            }
        }
        // exit logits
        for (i, (layer, var)) in fwd.exit_logits.iter().enumerate() {
            assert_eq!(*layer, trace.exitable[i]);
            let col = fwd.tape.value(*var);
            for pos in 0..tokens.len() {
                assert!((col.at(pos, 0) - trace.exit_logits[i][pos]).abs() < 1e-12);
            }
        }
        // lens distributions
        for (i, (_, var)) in fwd.lens_logprobs.iter().enumerate() {
            let lp = fwd.tape.value(*var);
            for pos in 0..tokens.len() {
                for v in 0..11 {
                    assert!((lp.at(pos, v).exp() - trace.lens[i].at(pos, v)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn masked_tape_forward_matches_frozen_forward() {
        let mut params = ModelParams::init(&tiny_config(), 8).unwrap();
        randomize_heads(&mut params, 9);
        let tokens = vec![3, 1, 4, 1, 5];
        let exits = vec![2, 4, 1, 4, 3];
        let plain = crate::forward::frozen_forward(&params, &tokens, &exits).unwrap();
        let fwd = build_forward(&params, &tokens, Some(&exits), ForwardOpts::default()).unwrap();
        let lp = fwd.tape.value(fwd.final_logprobs);
        for pos in 0..tokens.len() {
            for v in 0..11 {
                assert!((lp.at(pos, v).exp() - plain.at(pos, v)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_gradcheck_all_tensors() {
        let mut params = ModelParams::init(&tiny_config(), 10).unwrap();
        randomize_heads(&mut params, 11);
        let tokens = vec![2, 7, 3, 8];
        let targets: Vec<(usize, usize)> = vec![(0, 7), (1, 3), (2, 8), (3, 1)];

        let loss_of = |p: &ModelParams| -> f64 {
            let mut fwd = build_forward(p, &tokens, None, ForwardOpts::default()).unwrap();
            let loss = cross_entropy_loss(&mut fwd, &targets);
            fwd.tape.scalar_value(loss)
        };

        let mut fwd = build_forward(&params, &tokens, None, ForwardOpts::default()).unwrap();
        let loss = cross_entropy_loss(&mut fwd, &targets);
        fwd.tape.backward(loss);
        let grads = fwd.param_grads();

        let names: Vec<String> = params.named_tensors().iter().map(|(n, _)| n.clone()).collect();
        let shapes: Vec<(usize, usize)> =
            params.named_tensors().iter().map(|(_, t)| (t.rows, t.cols)).collect();
        let eps = 1e-4;
        for ti in 0..names.len() {
            let (rows, cols) = shapes[ti];
            let n = rows * cols;
            // probe a handful of entries per tensor
            let stride = (n / 5).max(1);
            for ei in (0..n).step_by(stride) {
                let mut pp = params.clone();
                pp.for_each_tensor_mut(|i, t| {
                    if i == ti {
                        t.data[ei] += eps;
                    }
                });
                let mut pm = params.clone();
                pm.for_each_tensor_mut(|i, t| {
                    if i == ti {
                        t.data[ei] -= eps;
                    }
                });
                let fd = (loss_of(&pp) - loss_of(&pm)) / (2.0 * eps);
                let an = grads[ti].data[ei];
                let denom = an.abs().max(fd.abs());
                if denom < 1e-10 {
                    continue;
                }
                let rel = (an - fd).abs() / denom;
                assert!(
                    rel < 1e-4,
                    "tensor {} [{}]: analytic {an}, fd {fd}, rel {rel}",
                    names[ti],
                    ei
                );
            }
        }
    }
}

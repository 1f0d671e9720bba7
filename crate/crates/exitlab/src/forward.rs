//! Inference-time forward passes (no gradients).
//!
//! Three entry points share the same math:
//! - [`full_trace`]: full-depth pass recording per-layer residuals, exit-head
//!   logits, and logit-lens distributions at every exitable layer.
//! - [`frozen_forward`]: forced exits per position. A position that exits at
//!   layer l receives no block writes above l; its keys and values at later
//!   layers are derived from the frozen residual through those layers'
//!   projections.
//! - [`Decoder`]: incremental decoding with KV caches and (optionally)
//!   stochastic exit sampling, used for generation and RL rollouts.

use crate::error::{Error, Result};
use crate::exit::{ExitDecision, ExitSampler};
use crate::model::{BlockParams, LoraPair, ModelParams};
use crate::tensor::{dot, matmul, matmul_acc, row_softmax, softmax_in_place, Tensor};

/// Everything a full-depth forward pass exposes per position: the residual
/// stream after each block, exit-head logits, and logit-lens distributions.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub n_layers: usize,
    /// Exitable layer indices (1-based), ascending.
    pub exitable: Vec<usize>,
    /// Post-block residuals, one `T x d` tensor per layer (index 0 = layer 1).
    pub residuals: Vec<Tensor>,
    /// Exit-head logits per exitable layer, one value per position.
    pub exit_logits: Vec<Vec<f64>>,
    /// Logit-lens distribution p(v | l) per exitable layer, `T x V` rows.
    pub lens: Vec<Tensor>,
    /// Final-layer next-token distribution, `T x V` rows.
    pub final_dist: Tensor,
}

impl LayerTrace {
    /// p(v | l) rows for an exit layer index (exitable or final).
    pub fn dist_at_layer(&self, layer: usize) -> Option<&Tensor> {
        if layer == self.n_layers {
            return Some(&self.final_dist);
        }
        self.exitable
            .iter()
            .position(|&l| l == layer)
            .map(|i| &self.lens[i])
    }

    /// Exit-head logits at `position`, ascending by layer.
    pub fn exit_logits_at(&self, position: usize) -> Vec<f64> {
        self.exit_logits.iter().map(|col| col[position]).collect()
    }
}

pub(crate) fn check_len(params: &ModelParams, len: usize) -> Result<()> {
    if len == 0 {
        return Err(Error::Input("empty token sequence".into()));
    }
    if len > params.config.max_seq_len {
        return Err(Error::Length { len, max: params.config.max_seq_len });
    }
    Ok(())
}

/// Row-wise RMS normalization with a learned gain.
pub(crate) fn rmsnorm(x: &Tensor, gain: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..x.rows {
        rmsnorm_row(out.row_mut(r), &gain.data);
    }
    out
}

pub(crate) fn rmsnorm_row(row: &mut [f64], gain: &[f64]) {
    let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    for (v, g) in row.iter_mut().zip(gain) {
        *v *= inv * g;
    }
}

pub(crate) const RMS_EPS: f64 = 1e-6;

/// x * w plus the low-rank contribution x * a * b when adapters are present.
pub(crate) fn linear_lora(x: &Tensor, w: &Tensor, lora: Option<&LoraPair>) -> Tensor {
    let mut y = matmul(x, w);
    if let Some(pair) = lora {
        let xa = matmul(x, &pair.a);
        matmul_acc(&xa, &pair.b, &mut y, 1.0);
    }
    y
}

fn lora_part(block: &BlockParams, pick: impl Fn(&crate::model::BlockLora) -> &LoraPair) -> Option<&LoraPair> {
    block.lora.as_ref().map(pick)
}

/// Causal multi-head attention over a full sequence.
fn attention(block: &BlockParams, normed: &Tensor, n_heads: usize) -> Tensor {
    let q = linear_lora(normed, &block.wq, lora_part(block, |l| &l.q));
    let k = linear_lora(normed, &block.wk, lora_part(block, |l| &l.k));
    let v = linear_lora(normed, &block.wv, lora_part(block, |l| &l.v));
    let t = normed.rows;
    let hd = normed.cols / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();

    let mut mixed = Tensor::zeros(t, normed.cols);
    let mut scores = vec![0.0f64; t];
    for h in 0..n_heads {
        let off = h * hd;
        for i in 0..t {
            let qi = &q.row(i)[off..off + hd];
            for (j, s) in scores[..=i].iter_mut().enumerate() {
                *s = scale * dot(qi, &k.row(j)[off..off + hd]);
            }
            softmax_in_place(&mut scores[..=i]);
            let out = &mut mixed.row_mut(i)[off..off + hd];
            for (j, &w) in scores[..=i].iter().enumerate() {
                let vj = &v.row(j)[off..off + hd];
                for (o, val) in out.iter_mut().zip(vj) {
                    *o += w * val;
                }
            }
        }
    }
    linear_lora(&mixed, &block.wo, lora_part(block, |l| &l.o))
}

fn mlp(block: &BlockParams, normed: &Tensor) -> Tensor {
    let mut up = matmul(normed, &block.w_up);
    for v in &mut up.data {
        *v *= crate::tensor::sigmoid(*v);
    }
    matmul(&up, &block.w_down)
}

/// Lens distribution: unembed(final_norm(h)) softmaxed per row.
fn lens_dist(params: &ModelParams, h: &Tensor) -> Tensor {
    let normed = rmsnorm(h, &params.final_norm);
    row_softmax(&matmul(&normed, &params.unembed))
}

fn head_logits(params: &ModelParams, h: &Tensor, head_idx: usize) -> Vec<f64> {
    let head = &params.exit_heads[head_idx];
    let normed = rmsnorm(h, &params.final_norm);
    (0..h.rows)
        .map(|r| {
            dot(normed.row(r), &head.w.data) + head.bias()
        })
        .collect()
}

/// Full-depth next-token distributions without any exit machinery.
pub fn plain_final_dist(params: &ModelParams, tokens: &[usize]) -> Result<Tensor> {
    check_len(params, tokens.len())?;
    let state = run_layers(params, tokens, None);
    Ok(lens_dist(params, &state[params.config.n_layers - 1]))
}

/// Greedy full-depth generation (no exits); returns the generated tokens.
pub fn generate_plain(
    params: &ModelParams,
    prompt: &[usize],
    max_new_tokens: usize,
    stop_token: Option<usize>,
) -> Result<Vec<usize>> {
    check_len(params, prompt.len() + 1)?;
    let mut dec = Decoder::new(params);
    for &t in &prompt[..prompt.len() - 1] {
        dec.step(t, None)?;
    }
    let mut next = prompt[prompt.len() - 1];
    let mut out = Vec::new();
    while out.len() < max_new_tokens && dec.position() < params.config.max_seq_len {
        let step = dec.step(next, None)?;
        let tok = argmax(&step.dist);
        out.push(tok);
        if stop_token == Some(tok) {
            break;
        }
        next = tok;
    }
    Ok(out)
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Full-depth forward pass over `tokens` recording the complete trace.
pub fn full_trace(params: &ModelParams, tokens: &[usize]) -> Result<LayerTrace> {
    check_len(params, tokens.len())?;
    let state = run_layers(params, tokens, None);
    let exitable = params.config.exitable_layers();

    let mut exit_logits = Vec::with_capacity(exitable.len());
    let mut lens = Vec::with_capacity(exitable.len());
    for (hi, &layer) in exitable.iter().enumerate() {
        let h = &state[layer - 1];
        exit_logits.push(head_logits(params, h, hi));
        lens.push(lens_dist(params, h));
    }
    let final_dist = lens_dist(params, &state[params.config.n_layers - 1]);

    Ok(LayerTrace {
        n_layers: params.config.n_layers,
        exitable,
        residuals: state,
        exit_logits,
        lens,
        final_dist,
    })
}

/// Forward pass with a forced exit layer per position. Returns the
/// next-token distribution rows; a position forced to the final layer
/// behaves exactly as in [`full_trace`].
pub fn frozen_forward(
    params: &ModelParams,
    tokens: &[usize],
    forced_exits: &[usize],
) -> Result<Tensor> {
    Ok(frozen_forward_with_residuals(params, tokens, forced_exits)?.1)
}

/// As [`frozen_forward`] but also exposing per-layer residuals (frozen
/// positions keep their residual bit-identical above the exit layer).
pub fn frozen_forward_with_residuals(
    params: &ModelParams,
    tokens: &[usize],
    forced_exits: &[usize],
) -> Result<(Vec<Tensor>, Tensor)> {
    check_len(params, tokens.len())?;
    if forced_exits.len() != tokens.len() {
        return Err(Error::Argument(format!(
            "forced_exits has {} entries for {} tokens",
            forced_exits.len(),
            tokens.len()
        )));
    }
    let exitable = params.config.exitable_layers();
    for &e in forced_exits {
        if e != params.config.n_layers && !exitable.contains(&e) {
            return Err(Error::Argument(format!(
                "forced exit layer {e} is not exitable (exitable: {exitable:?}, final: {})",
                params.config.n_layers
            )));
        }
    }
    let state = run_layers(params, tokens, Some(forced_exits));
    let final_h = &state[params.config.n_layers - 1];
    Ok((state.clone(), lens_dist(params, final_h)))
}

/// Shared layer sweep. With `exits`, writes of block m are masked for every
/// position whose exit layer is below m; the frozen residual still feeds the
/// later layers' key/value projections via the normal attention path.
fn run_layers(params: &ModelParams, tokens: &[usize], exits: Option<&[usize]>) -> Vec<Tensor> {
    let d = params.config.d_model;
    let t = tokens.len();
    let mut h = Tensor::zeros(t, d);
    for (i, &tok) in tokens.iter().enumerate() {
        let row = h.row_mut(i);
        for (x, (e, p)) in row
            .iter_mut()
            .zip(params.tok_embed.row(tok).iter().zip(params.pos_embed.row(i)))
        {
            *x = e + p;
        }
    }

    let mut out = Vec::with_capacity(params.config.n_layers);
    for (bi, block) in params.blocks.iter().enumerate() {
        let layer = bi + 1;
        let normed = rmsnorm(&h, &block.attn_norm);
        let attn_out = attention(block, &normed, params.config.n_heads);
        add_masked(&mut h, &attn_out, exits, layer);
        let normed2 = rmsnorm(&h, &block.mlp_norm);
        let mlp_out = mlp(block, &normed2);
        add_masked(&mut h, &mlp_out, exits, layer);
        out.push(h.clone());
    }
    out
}

fn add_masked(h: &mut Tensor, writes: &Tensor, exits: Option<&[usize]>, layer: usize) {
    match exits {
        None => h.add_assign(writes),
        Some(exits) => {
            for r in 0..h.rows {
                if exits[r] >= layer {
                    for (a, b) in h.row_mut(r).iter_mut().zip(writes.row(r)) {
                        *a += b;
                    }
                }
            }
        }
    }
}

/// One decode step's output.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Next-token distribution at this position.
    pub dist: Vec<f64>,
    /// Exit decision when sampling was enabled; full depth otherwise.
    pub decision: Option<ExitDecision>,
}

/// Enables stochastic exits for a decode step.
pub struct ExitCtl<'r> {
    pub rng: &'r mut dyn rand::RngCore,
    pub offset: f64,
}

/// Incremental decoder with per-layer KV caches and frozen-stream semantics.
///
/// When a position exits at layer l, its keys and values for layers above l
/// are derived immediately from the frozen residual so later positions can
/// attend to it at any depth.
pub struct Decoder<'a> {
    params: &'a ModelParams,
    k_cache: Vec<Vec<Vec<f64>>>,
    v_cache: Vec<Vec<Vec<f64>>>,
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        let n = params.config.n_layers;
        Decoder {
            params,
            k_cache: vec![Vec::new(); n],
            v_cache: vec![Vec::new(); n],
            pos: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining_context(&self) -> usize {
        self.params.config.max_seq_len - self.pos
    }

    /// Feed one token. `exits` enables stochastic exit sampling at this
    /// position's exitable layers.
    pub fn step(&mut self, token: usize, exits: Option<ExitCtl<'_>>) -> Result<StepOutput> {
        let params = self.params;
        let cfg = &params.config;
        if self.pos >= cfg.max_seq_len {
            return Err(Error::Length { len: self.pos + 1, max: cfg.max_seq_len });
        }
        if token >= cfg.vocab_size {
            return Err(Error::Input(format!("token id {token} out of range")));
        }
        let d = cfg.d_model;
        let mut x = vec![0.0f64; d];
        for ((xv, e), p) in x
            .iter_mut()
            .zip(params.tok_embed.row(token))
            .zip(params.pos_embed.row(self.pos))
        {
            *xv = e + p;
        }

        let mut sampler_state = exits.map(|ctl| (ExitSampler::new(ctl.offset), ctl.rng));
        let mut exited_at: Option<usize> = None;
        let mut head_iter = params.exit_heads.iter().peekable();
        for (bi, block_layer) in (1..=cfg.n_layers).enumerate() {
            self.block_step(bi, &mut x);
            if let Some((sampler, rng)) = sampler_state.as_mut() {
                if head_iter.peek().map(|h| h.layer) == Some(block_layer) {
                    let head = head_iter.next().unwrap();
                    let logit = self.head_logit(&x, head);
                    if sampler.observe(block_layer, logit, *rng) {
                        exited_at = Some(block_layer);
                        break;
                    }
                }
            }
        }

        // Frozen stream: derive KV for the remaining layers from the frozen
        // residual; no further writes happen for this position.
        if let Some(layer) = exited_at {
            for bi in layer..cfg.n_layers {
                self.push_kv_only(bi, &x);
            }
        }

        let mut normed = x.clone();
        rmsnorm_row(&mut normed, &params.final_norm.data);
        let mut logits = vec![0.0f64; cfg.vocab_size];
        for (k, &nv) in normed.iter().enumerate() {
            if nv == 0.0 {
                continue;
            }
            for (l, u) in logits.iter_mut().zip(params.unembed.row(k)) {
                *l += nv * u;
            }
        }
        softmax_in_place(&mut logits);

        self.pos += 1;
        let decision =
            sampler_state.map(|(sampler, _)| sampler.finish(self.pos - 1, cfg.n_layers));
        Ok(StepOutput { dist: logits, decision })
    }

    fn head_logit(&self, x: &[f64], head: &crate::model::ExitHead) -> f64 {
        let mut normed = x.to_vec();
        rmsnorm_row(&mut normed, &self.params.final_norm.data);
        dot(&normed, &head.w.data) + head.bias()
    }

    /// Run block `bi` for the current position: push KV, attend, MLP.
    fn block_step(&mut self, bi: usize, x: &mut [f64]) {
        let block = &self.params.blocks[bi];
        let cfg = &self.params.config;
        let d = cfg.d_model;
        let n_heads = cfg.n_heads;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();

        let mut normed = x.to_vec();
        rmsnorm_row(&mut normed, &block.attn_norm.data);

        let q = vec_linear_lora(&normed, &block.wq, block.lora.as_ref().map(|l| &l.q));
        let k = vec_linear_lora(&normed, &block.wk, block.lora.as_ref().map(|l| &l.k));
        let v = vec_linear_lora(&normed, &block.wv, block.lora.as_ref().map(|l| &l.v));
        self.k_cache[bi].push(k);
        self.v_cache[bi].push(v);

        let keys = &self.k_cache[bi];
        let vals = &self.v_cache[bi];
        let t = keys.len();
        let mut mixed = vec![0.0f64; d];
        let mut scores = vec![0.0f64; t];
        for h in 0..n_heads {
            let off = h * hd;
            let qh = &q[off..off + hd];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = scale * dot(qh, &keys[j][off..off + hd]);
            }
            softmax_in_place(&mut scores);
            let out = &mut mixed[off..off + hd];
            for (j, &w) in scores.iter().enumerate() {
                let vh = &vals[j][off..off + hd];
                for (o, val) in out.iter_mut().zip(vh) {
                    *o += w * val;
                }
            }
        }
        let attn_out = vec_linear_lora(&mixed, &block.wo, block.lora.as_ref().map(|l| &l.o));
        for (a, b) in x.iter_mut().zip(&attn_out) {
            *a += b;
        }

        let mut normed2 = x.to_vec();
        rmsnorm_row(&mut normed2, &block.mlp_norm.data);
        let mut up = vec_linear(&normed2, &block.w_up);
        for u in &mut up {
            *u *= crate::tensor::sigmoid(*u);
        }
        let down = vec_linear(&up, &block.w_down);
        for (a, b) in x.iter_mut().zip(&down) {
            *a += b;
        }
    }

    /// Fill layer `bi`'s KV cache from a frozen residual without running the
    /// block for this position.
    fn push_kv_only(&mut self, bi: usize, x: &[f64]) {
        let block = &self.params.blocks[bi];
        let mut normed = x.to_vec();
        rmsnorm_row(&mut normed, &block.attn_norm.data);
        let k = vec_linear_lora(&normed, &block.wk, block.lora.as_ref().map(|l| &l.k));
        let v = vec_linear_lora(&normed, &block.wv, block.lora.as_ref().map(|l| &l.v));
        self.k_cache[bi].push(k);
        self.v_cache[bi].push(v);
    }
}

fn vec_linear(x: &[f64], w: &Tensor) -> Vec<f64> {
    assert_eq!(x.len(), w.rows);
    let mut y = vec![0.0f64; w.cols];
    for (k, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (yv, wv) in y.iter_mut().zip(w.row(k)) {
            *yv += xv * wv;
        }
    }
    y
}

fn vec_linear_lora(x: &[f64], w: &Tensor, lora: Option<&LoraPair>) -> Vec<f64> {
    let mut y = vec_linear(x, w);
    if let Some(pair) = lora {
        let xa = vec_linear(x, &pair.a);
        let delta = vec_linear(&xa, &pair.b);
        for (yv, dv) in y.iter_mut().zip(&delta) {
            *yv += dv;
        }
    }
    y
}

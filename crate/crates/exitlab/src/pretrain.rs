//! Stage 0: train the plain base transformer with next-token cross-entropy.
//!
//! Exit heads stay untouched (zero) and adapter products stay zero, so the
//! resulting checkpoint is a plain decoder ready for calibration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;


use crate::diff::{build_forward, cross_entropy_loss, ForwardOpts};
use crate::error::{Error, Result};
use crate::forward::generate_plain;
use crate::model::{trainable_mask, ModelParams, TrainScope};
use crate::optim::{grad_accumulate_chunked, OptimConfig, Optimizer};
use crate::tasks::{verify, TaskInstance, Tokenizer, NEWLINE_ID};

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Stop once greedy eval accuracy reaches this value.
    pub target_accuracy: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 8,
            lr: 1e-3,
            batch_size: 32,
            target_accuracy: 0.95,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Greedy full-depth accuracy on a prompt set.
pub fn eval_accuracy(
    params: &ModelParams,
    instances: &[TaskInstance],
    max_new_tokens: usize,
) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let tokenizer = Tokenizer;
    let hits: Vec<u8> = instances
        .par_iter()
        .map(|inst| {
            let prompt = tokenizer.encode(&inst.prompt)?;
            let completion =
                generate_plain(params, &prompt, max_new_tokens, Some(NEWLINE_ID))?;
            let text = format!("{}{}", inst.prompt, tokenizer.decode(&completion));
            Ok(verify(&text, inst))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().map(|&h| h as usize).sum::<usize>() as f64 / hits.len() as f64)
}

/// Train the base weights on newline-terminated token sequences. Evaluates
/// after every epoch and stops early at the target accuracy.
pub fn pretrain(
    corpus: &[Vec<usize>],
    eval_set: &[TaskInstance],
    params: ModelParams,
    cfg: &PretrainConfig,
    mut on_epoch: impl FnMut(&PretrainEpoch),
) -> Result<(ModelParams, Vec<PretrainEpoch>)> {
    if corpus.is_empty() && cfg.epochs > 0 {
        return Err(Error::Config("pretraining corpus is empty".into()));
    }
    let mut model = params;
    let mut opt = Optimizer::new(&model, TrainScope::Base, OptimConfig::adam(cfg.lr));
    let trainable = trainable_mask(&model, TrainScope::Base);
    let mut history = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }

        let mut loss_sum = 0.0;
        let mut seq_count = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let scale = 1.0 / chunk.len() as f64;
            let (grads, losses) = grad_accumulate_chunked(chunk.len(), &model, |ci, buf| {
                let tokens = &corpus[chunk[ci]];
                if tokens.len() < 2 {
                    return Ok(0.0);
                }
                let input = &tokens[..tokens.len() - 1];
                let targets: Vec<(usize, usize)> =
                    (0..input.len()).map(|i| (i, tokens[i + 1])).collect();
                let mut fwd = build_forward(
                    &model,
                    input,
                    None,
                    ForwardOpts { trainable: Some(&trainable), ..Default::default() },
                )?;
                let loss = cross_entropy_loss(&mut fwd, &targets);
                fwd.tape.backward(loss);
                fwd.add_param_grads_into(buf, scale);
                Ok(fwd.tape.scalar_value(loss))
            })?;
            loss_sum += losses.iter().sum::<f64>();
            seq_count += chunk.len();
            opt.step(&mut model, &grads);
        }

        let accuracy = if eval_set.is_empty() {
            0.0
        } else {
            eval_accuracy(&model, eval_set, 16)?
        };
        let row = PretrainEpoch {
            epoch,
            loss: loss_sum / seq_count.max(1) as f64,
            accuracy,
        };
        on_epoch(&row);
        history.push(row);
        if accuracy >= cfg.target_accuracy {
            break;
        }
    }

    Ok((model, history))
}

/// Tokenize task lines (full text plus trailing newline) for training.
pub fn corpus_from_instances(instances: &[TaskInstance]) -> Result<Vec<Vec<usize>>> {
    let tokenizer = Tokenizer;
    instances
        .iter()
        .map(|inst| tokenizer.encode(&format!("{}\n", inst.full_text())))
        .collect()
}

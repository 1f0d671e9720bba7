//! Stage 1: exit-probability calibration by self-distillation.
//!
//! The frozen pre-calibration model is the teacher. For every token the
//! teacher's layerwise KL (lens distribution vs. final distribution) is
//! turned into survival probabilities, those into a stick-breaking target
//! exit distribution, and an exit layer is sampled from it. The student —
//! adapters and exit heads only, base weights frozen — is trained to match
//! the teacher's final distribution at the sampled layer and to reproduce
//! the sampled exit under its own stick-breaking distribution.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::diff::{build_forward, DiffForward, ForwardOpts};
use crate::error::{Error, Result};
use crate::exit::stick_breaking;
use crate::forward::{full_trace, LayerTrace};
use crate::model::{trainable_mask, ModelParams, TrainScope};
use crate::optim::{grad_accumulate_chunked, OptimConfig, Optimizer};
use crate::tape::Var;
use crate::tensor::{kl_divergence, sigmoid, Tensor};

/// Probabilities are floored at this value before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Forward KL per exitable layer, per token position.
#[derive(Debug, Clone)]
pub struct LayerKL {
    pub exitable: Vec<usize>,
    /// `values[pos][i]` = D(p_final || p_layer_i) in nats.
    pub values: Vec<Vec<f64>>,
}

/// D(p_final || p_l) for every exitable layer at every position.
/// The final layer's own divergence is zero by definition and not stored.
pub fn layerwise_kl(trace: &LayerTrace) -> Result<LayerKL> {
    let t_len = trace.final_dist.rows;
    for lens in trace.lens.iter().chain(std::iter::once(&trace.final_dist)) {
        for r in 0..lens.rows {
            let sum: f64 = lens.row(r).iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Validation(format!(
                    "lens distribution row sums to {sum}, expected 1"
                )));
            }
        }
    }
    let mut values = Vec::with_capacity(t_len);
    for pos in 0..t_len {
        let p_final = trace.final_dist.row(pos);
        values.push(
            trace
                .lens
                .iter()
                .map(|lens| kl_divergence(p_final, lens.row(pos), PROB_FLOOR))
                .collect(),
        );
    }
    Ok(LayerKL { exitable: trace.exitable.clone(), values })
}

/// Survival probabilities s_k = 2 (1 - sigmoid(kl_factor * D_KL^(k))).
/// Zero divergence gives s = 1; large divergence drives s to 0.
pub fn survival_probs(kl: &[f64], kl_factor: f64) -> Result<Vec<f64>> {
    if kl_factor < 0.0 {
        return Err(Error::Config(format!(
            "kl_factor must be non-negative, got {kl_factor} (would yield s > 1)"
        )));
    }
    Ok(kl.iter().map(|&d| 2.0 * (1.0 - sigmoid(kl_factor * d))).collect())
}

/// Stick-breaking target distribution over exit layers.
#[derive(Debug, Clone)]
pub struct TargetExitDistribution {
    pub survivals: Vec<f64>,
    /// p(exit at exitable layer k), aligned with the survivals.
    pub exit_probs: Vec<f64>,
    /// Remaining mass assigned to the final layer.
    pub catch_all: f64,
}

pub fn target_exit_distribution(survivals: &[f64]) -> Result<TargetExitDistribution> {
    for &s in survivals {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Validation(format!("survival {s} outside [0, 1]")));
        }
    }
    let mut dist = stick_breaking(survivals);
    let catch_all = dist.pop().unwrap();
    Ok(TargetExitDistribution { survivals: survivals.to_vec(), exit_probs: dist, catch_all })
}

impl TargetExitDistribution {
    /// Probabilities over exitable layers plus the catch-all, in order.
    pub fn full_probs(&self) -> Vec<f64> {
        let mut p = self.exit_probs.clone();
        p.push(self.catch_all);
        p
    }

    /// Sample an exit layer (an exitable index or `n_layers`).
    pub fn sample(&self, exitable: &[usize], n_layers: usize, rng: &mut impl Rng) -> usize {
        let idx = crate::tensor::sample_categorical(&self.full_probs(), rng);
        if idx == self.exit_probs.len() {
            n_layers
        } else {
            exitable[idx]
        }
    }

    /// Mean exit layer index under this distribution.
    pub fn expected_exit_layer(&self, exitable: &[usize], n_layers: usize) -> f64 {
        self.exit_probs
            .iter()
            .zip(exitable)
            .map(|(&p, &l)| p * l as f64)
            .sum::<f64>()
            + self.catch_all * n_layers as f64
    }
}

/// Both terms of the distillation loss, as tape nodes (means over tokens).
pub struct SftLoss {
    pub loss: Var,
    pub token_kl: Var,
    pub exit_ce: Var,
}

/// L = D_KL[p_student(y at sampled layer) || p_teacher(y)] - log p_exit(sample).
///
/// `teacher_final` holds the teacher's final-layer probabilities per position;
/// `sampled_exits` gives each position's sampled exit layer. The returned
/// nodes are means over all positions.
pub fn sft_loss(
    fwd: &mut DiffForward,
    n_layers: usize,
    exitable: &[usize],
    teacher_final: &Tensor,
    sampled_exits: &[usize],
) -> Result<SftLoss> {
    let t_len = sampled_exits.len();
    assert_eq!(teacher_final.rows, t_len);
    for &e in sampled_exits {
        if e != n_layers && !exitable.contains(&e) {
            return Err(Error::Argument(format!(
                "sampled exit {e} outside exitable set and final layer"
            )));
        }
    }

    // Teacher log-probs as a constant.
    let mut ln_teacher = teacher_final.clone();
    for v in &mut ln_teacher.data {
        *v = v.max(PROB_FLOOR).ln();
    }
    let ln_teacher = fwd.tape.leaf_const(ln_teacher);

    // Token term: per layer, KL rows for the positions sampled at that layer.
    let mut kl_terms: Vec<Var> = Vec::new();
    for (layer, positions) in group_by_layer(sampled_exits, exitable, n_layers) {
        if positions.is_empty() {
            continue;
        }
        let lp = fwd
            .logprobs_at_layer(layer, n_layers)
            .expect("lens logprobs missing; build the forward with lens_at_exitable");
        let p = fwd.tape.exp(lp);
        let diff = fwd.tape.sub(lp, ln_teacher);
        let prod = fwd.tape.mul(p, diff);
        let kl_col = fwd.tape.row_sum(prod);
        let picks = Rc::new(positions.iter().map(|&p| (p, 0usize)).collect::<Vec<_>>());
        let picked = fwd.tape.gather(kl_col, picks);
        kl_terms.push(fwd.tape.sum_all(picked));
    }
    let token_kl_sum = sum_vars(fwd, kl_terms);

    // Exit term: -log sigma at the sampled head, -log(1 - sigma) below it.
    let mut ce_terms: Vec<Var> = Vec::new();
    for (hi, &layer) in exitable.iter().enumerate() {
        let (_, e_col) = fwd.exit_logits[hi];
        debug_assert_eq!(fwd.exit_logits[hi].0, layer);
        let survived: Vec<(usize, usize)> = sampled_exits
            .iter()
            .enumerate()
            .filter(|&(_, &x)| x > layer)
            .map(|(p, _)| (p, 0usize))
            .collect();
        let exited: Vec<(usize, usize)> = sampled_exits
            .iter()
            .enumerate()
            .filter(|&(_, &x)| x == layer)
            .map(|(p, _)| (p, 0usize))
            .collect();
        if !survived.is_empty() {
            // -log(1 - sigmoid(e)) = softplus(e)
            let sp = fwd.tape.softplus(e_col);
            let picked = fwd.tape.gather(sp, Rc::new(survived));
            ce_terms.push(fwd.tape.sum_all(picked));
        }
        if !exited.is_empty() {
            // -log sigmoid(e) = softplus(-e)
            let neg = fwd.tape.scale(e_col, -1.0);
            let sp = fwd.tape.softplus(neg);
            let picked = fwd.tape.gather(sp, Rc::new(exited));
            ce_terms.push(fwd.tape.sum_all(picked));
        }
    }
    let exit_ce_sum = sum_vars(fwd, ce_terms);

    let inv = 1.0 / t_len as f64;
    let token_kl = fwd.tape.scale(token_kl_sum, inv);
    let exit_ce = fwd.tape.scale(exit_ce_sum, inv);
    let loss = fwd.tape.add(token_kl, exit_ce);
    Ok(SftLoss { loss, token_kl, exit_ce })
}

fn group_by_layer(
    sampled_exits: &[usize],
    exitable: &[usize],
    n_layers: usize,
) -> Vec<(usize, Vec<usize>)> {
    let mut groups: Vec<(usize, Vec<usize>)> = exitable
        .iter()
        .chain(std::iter::once(&n_layers))
        .map(|&l| (l, Vec::new()))
        .collect();
    for (pos, &e) in sampled_exits.iter().enumerate() {
        let slot = groups.iter_mut().find(|(l, _)| *l == e).unwrap();
        slot.1.push(pos);
    }
    groups
}

fn sum_vars(fwd: &mut DiffForward, terms: Vec<Var>) -> Var {
    let mut it = terms.into_iter();
    let first = it.next().unwrap_or_else(|| fwd.tape.scalar(0.0));
    it.fold(first, |acc, v| fwd.tape.add(acc, v))
}

#[derive(Debug, Clone)]
pub struct CalibrationConfig {
    pub kl_factor: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig { kl_factor: 1.0, epochs: 2, lr: 1e-3, batch_size: 16, seed: 0 }
    }
}

/// Per-epoch mean losses, mirroring the emitted CSV columns.
#[derive(Debug, Clone, Copy)]
pub struct EpochLoss {
    pub epoch: usize,
    pub token_kl: f64,
    pub exit_ce: f64,
    pub total: f64,
}

/// Teacher-side targets for one sequence, computed once.
struct SeqTargets {
    tokens: Vec<usize>,
    teacher_final: Tensor,
    targets: Vec<TargetExitDistribution>,
}

/// Run Stage-1 calibration. Returns the calibrated student and the per-epoch
/// loss history; the teacher (a frozen copy of `params`) is never mutated.
pub fn calibrate(
    corpus: &[Vec<usize>],
    params: &ModelParams,
    cfg: &CalibrationConfig,
) -> Result<(ModelParams, Vec<EpochLoss>)> {
    calibrate_with(corpus, params, cfg, |_| {})
}

/// As [`calibrate`] with a per-epoch progress callback.
pub fn calibrate_with(
    corpus: &[Vec<usize>],
    params: &ModelParams,
    cfg: &CalibrationConfig,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<(ModelParams, Vec<EpochLoss>)> {
    if corpus.is_empty() {
        return Err(Error::Config("calibration corpus is empty".into()));
    }
    if cfg.kl_factor < 0.0 {
        return Err(Error::Config("kl_factor must be non-negative".into()));
    }
    let teacher = params.clone();
    let mut student = params.clone();
    let exitable = params.config.exitable_layers();
    let n_layers = params.config.n_layers;

    // Teacher forwards are pure; precompute all targets in parallel.
    let seq_targets: Vec<SeqTargets> = corpus
        .par_iter()
        .map(|tokens| {
            let trace = full_trace(&teacher, tokens)?;
            let kl = layerwise_kl(&trace)?;
            let targets = kl
                .values
                .iter()
                .map(|row| {
                    let s = survival_probs(row, cfg.kl_factor)?;
                    target_exit_distribution(&s)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SeqTargets { tokens: tokens.clone(), teacher_final: trace.final_dist, targets })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut opt = Optimizer::new(
        &student,
        TrainScope::AdaptersAndHeads,
        OptimConfig::adam(cfg.lr),
    );
    let trainable = trainable_mask(&student, TrainScope::AdaptersAndHeads);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..seq_targets.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle_rng.gen_range(0..=i));
        }

        let mut epoch_token_kl = 0.0;
        let mut epoch_exit_ce = 0.0;
        let mut batches = 0usize;

        for chunk in order.chunks(cfg.batch_size.max(1)) {
            // Exit layers are resampled fresh every epoch.
            let scale = 1.0 / chunk.len() as f64;
            let (grads, losses) = grad_accumulate_chunked(chunk.len(), &student, |ci, buf| {
                let si = chunk[ci];
                let st = &seq_targets[si];
                let mut rng = ChaCha8Rng::seed_from_u64(
                    cfg.seed
                        ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
                        ^ (si as u64).wrapping_mul(0xD1B5_4A32_D192_ED03),
                );
                let sampled: Vec<usize> = st
                    .targets
                    .iter()
                    .map(|t| t.sample(&exitable, n_layers, &mut rng))
                    .collect();
                let mut fwd = build_forward(
                    &student,
                    &st.tokens,
                    None,
                    ForwardOpts {
                        lens_at_exitable: true,
                        exit_heads: true,
                        trainable: Some(&trainable),
                    },
                )?;
                let loss =
                    sft_loss(&mut fwd, n_layers, &exitable, &st.teacher_final, &sampled)?;
                fwd.tape.backward(loss.loss);
                fwd.add_param_grads_into(buf, scale);
                Ok((
                    fwd.tape.scalar_value(loss.token_kl),
                    fwd.tape.scalar_value(loss.exit_ce),
                ))
            })?;
            for (tk, ce) in &losses {
                epoch_token_kl += tk;
                epoch_exit_ce += ce;
            }
            batches += chunk.len();
            opt.step(&mut student, &grads);
        }

        let token_kl = epoch_token_kl / batches as f64;
        let exit_ce = epoch_exit_ce / batches as f64;
        let row = EpochLoss { epoch, token_kl, exit_ce, total: token_kl + exit_ce };
        on_epoch(&row);
        history.push(row);
    }

    Ok((student, history))
}

/// Pooled target-vs-learned exit histograms over a corpus, teacher-forced.
///
/// Buckets are the exitable layers followed by the catch-all. The learned
/// histogram is empirical: one exit sampled per token from the student's
/// stick-breaking distribution.
#[derive(Debug, Clone)]
pub struct ExitHistograms {
    pub exitable: Vec<usize>,
    pub n_layers: usize,
    pub target: Vec<f64>,
    /// Mean student stick-breaking probabilities (analytic).
    pub learned: Vec<f64>,
    /// Empirical frequencies of sampled student exits.
    pub sampled: Vec<f64>,
    pub tokens: usize,
}

impl ExitHistograms {
    /// Total variation distance between the sampled student histogram and
    /// the pooled target histogram.
    pub fn tv_distance(&self) -> f64 {
        0.5 * self
            .sampled
            .iter()
            .zip(&self.target)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }

    /// Fraction of sampled exits below the final layer.
    pub fn exit_rate(&self) -> f64 {
        1.0 - self.sampled[self.sampled.len() - 1]
    }
}

pub fn exit_histograms(
    teacher: &ModelParams,
    student: &ModelParams,
    corpus: &[Vec<usize>],
    kl_factor: f64,
    seed: u64,
) -> Result<ExitHistograms> {
    if corpus.is_empty() {
        return Err(Error::Config("empty corpus for exit histograms".into()));
    }
    let exitable = teacher.config.exitable_layers();
    let n_layers = teacher.config.n_layers;
    let buckets = exitable.len() + 1;

    let per_seq: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, usize)> = corpus
        .par_iter()
        .enumerate()
        .map(|(si, tokens)| {
            let t_trace = full_trace(teacher, tokens)?;
            let kl = layerwise_kl(&t_trace)?;
            let s_trace = full_trace(student, tokens)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (si as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));

            let mut target = vec![0.0; buckets];
            let mut learned = vec![0.0; buckets];
            let mut sampled = vec![0.0; buckets];
            for pos in 0..tokens.len() {
                let s = survival_probs(&kl.values[pos], kl_factor)?;
                let tgt = target_exit_distribution(&s)?;
                for (b, p) in target.iter_mut().zip(tgt.full_probs()) {
                    *b += p;
                }
                let logits = s_trace.exit_logits_at(pos);
                let student_dist = crate::exit::exit_distribution_from_logits(&logits, 0.0);
                for (b, p) in learned.iter_mut().zip(&student_dist) {
                    *b += p;
                }
                let decision = crate::exit::sample_exit(&s_trace, pos, 0.0, &mut rng);
                let bucket = exitable
                    .iter()
                    .position(|&l| l == decision.exit_layer)
                    .unwrap_or(buckets - 1);
                sampled[bucket] += 1.0;
            }
            Ok((target, learned, sampled, tokens.len()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut target = vec![0.0; buckets];
    let mut learned = vec![0.0; buckets];
    let mut sampled = vec![0.0; buckets];
    let mut tokens = 0usize;
    for (t, l, s, n) in per_seq {
        for (acc, v) in target.iter_mut().zip(t) {
            *acc += v;
        }
        for (acc, v) in learned.iter_mut().zip(l) {
            *acc += v;
        }
        for (acc, v) in sampled.iter_mut().zip(s) {
            *acc += v;
        }
        tokens += n;
    }
    let inv = 1.0 / tokens as f64;
    for h in [&mut target, &mut learned, &mut sampled] {
        for v in h.iter_mut() {
            *v *= inv;
        }
    }
    Ok(ExitHistograms { exitable, n_layers, target, learned, sampled, tokens })
}

//! Stage 2: leave-one-out REINFORCE over the augmented action space.
//!
//! Rollouts sample (exit layer, token) jointly per generated token. The
//! reward penalizes average exit depth and KL drift from the pre-RL model on
//! top of the task reward; advantages use the leave-one-out baseline; the
//! gradient is advantage times the gradient of the augmented sequence
//! log-probability, recomputed by a teacher-forced scoring pass that replays
//! the sampled exits through the frozen-stream forward.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::calibrate::PROB_FLOOR;
use crate::diff::{build_forward, DiffForward, ForwardOpts};
use crate::error::{Error, Result};
use crate::exit::ExitDecision;
use crate::forward::{plain_final_dist, Decoder, ExitCtl};
use crate::metrics::{self, ExitRecord};
use crate::model::{trainable_mask, ModelParams, TrainScope};
use crate::optim::{grad_accumulate_chunked, OptimConfig, Optimizer};
use crate::tape::Var;
use crate::tasks::{verify, TaskInstance, Tokenizer};
use crate::tensor::kl_divergence;

#[derive(Debug, Clone, Copy)]
pub struct DecodeSettings {
    /// Token sampling temperature; 0 means greedy.
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub stop_token: Option<usize>,
    /// Added to every exit-head logit; negative infinity disables exits.
    pub exit_offset: f64,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        DecodeSettings {
            temperature: 1.0,
            max_new_tokens: 128,
            stop_token: Some(crate::tasks::NEWLINE_ID),
            exit_offset: 0.0,
        }
    }
}

/// One sampled completion with its exit decisions.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub prompt: Vec<usize>,
    pub completion: Vec<usize>,
    /// One decision per completion token, in generation order.
    pub decisions: Vec<ExitDecision>,
    /// Augmented sequence log-probability: sum of joint (exit, token) terms.
    pub logp: f64,
    /// True when the stop token ended generation (vs. a length cutoff).
    pub stopped: bool,
    pub params_version: u64,
}

impl Rollout {
    pub fn exit_layers(&self) -> Vec<usize> {
        self.decisions.iter().map(|d| d.exit_layer).collect()
    }

    pub fn mean_exit_layer(&self) -> f64 {
        let sum: usize = self.decisions.iter().map(|d| d.exit_layer).sum();
        sum as f64 / self.decisions.len().max(1) as f64
    }

    pub fn all_tokens(&self) -> Vec<usize> {
        let mut t = self.prompt.clone();
        t.extend_from_slice(&self.completion);
        t
    }
}

/// Autoregressive sampling with stochastic exits and frozen-stream decoding.
pub fn rollout(
    prompt: &[usize],
    params: &ModelParams,
    decode: &DecodeSettings,
    rng: &mut impl Rng,
) -> Result<Rollout> {
    if prompt.is_empty() {
        return Err(Error::Input("empty prompt".into()));
    }
    if prompt.len() + 1 > params.config.max_seq_len {
        return Err(Error::Length { len: prompt.len() + 1, max: params.config.max_seq_len });
    }

    let mut dec = Decoder::new(params);
    for &t in &prompt[..prompt.len() - 1] {
        dec.step(t, None)?;
    }

    let mut completion = Vec::new();
    let mut decisions = Vec::new();
    let mut logp = 0.0;
    let mut stopped = false;
    let mut next = prompt[prompt.len() - 1];

    while completion.len() < decode.max_new_tokens
        && dec.position() < params.config.max_seq_len
    {
        let out = dec.step(next, Some(ExitCtl { rng, offset: decode.exit_offset }))?;
        let mut decision = out.decision.expect("exit sampling was enabled");
        let tok = sample_token(&out.dist, decode.temperature, rng);
        decision.logp_token = out.dist[tok].ln();
        logp += decision.joint_logp();
        decisions.push(decision);
        completion.push(tok);
        if decode.stop_token == Some(tok) {
            stopped = true;
            break;
        }
        next = tok;
    }

    Ok(Rollout {
        prompt: prompt.to_vec(),
        completion,
        decisions,
        logp,
        stopped,
        params_version: params.version,
    })
}

fn sample_token(dist: &[f64], temperature: f64, rng: &mut impl Rng) -> usize {
    if temperature <= 0.0 {
        return crate::forward::argmax(dist);
    }
    if (temperature - 1.0).abs() < 1e-12 {
        return crate::tensor::sample_categorical(dist, rng);
    }
    let weights: Vec<f64> = dist.iter().map(|&p| p.max(PROB_FLOOR).powf(1.0 / temperature)).collect();
    crate::tensor::sample_categorical(&weights, rng)
}

#[derive(Debug, Clone, Copy)]
pub struct RewardConfig {
    /// Depth penalty weight.
    pub lambda: f64,
    /// KL-to-base penalty weight.
    pub beta: f64,
    /// Divide the mean exit layer by n_layers (penalty comparable across depths).
    pub depth_normalized: bool,
}

#[derive(Debug, Clone)]
pub struct RewardBreakdown {
    pub total: f64,
    pub task: f64,
    /// Mean exit layer index, normalized when configured.
    pub depth_term: f64,
    /// Mean per-token KL between policy and base next-token distributions
    /// at full depth.
    pub kl_term: f64,
    pub per_token_kl: Vec<f64>,
}

/// R_total = R_task - lambda * depth - beta * KL(policy || base).
pub fn total_reward(
    rollout: &Rollout,
    task_reward: f64,
    cfg: &RewardConfig,
    policy: &ModelParams,
    base: &ModelParams,
) -> Result<RewardBreakdown> {
    if rollout.completion.is_empty() {
        return Err(Error::Reward("empty completion".into()));
    }
    let n_layers = policy.config.n_layers as f64;
    let mut depth_term = rollout.mean_exit_layer();
    if cfg.depth_normalized {
        depth_term /= n_layers;
    }

    let per_token_kl = if cfg.beta != 0.0 {
        kl_to_base(rollout, policy, base)?
    } else {
        vec![0.0; rollout.completion.len()]
    };
    let kl_term = per_token_kl.iter().sum::<f64>() / per_token_kl.len() as f64;

    Ok(RewardBreakdown {
        total: combine_reward(task_reward, depth_term, kl_term, cfg),
        task: task_reward,
        depth_term,
        kl_term,
        per_token_kl,
    })
}

/// The scalar reward of Eq. 1 from its three ingredients.
pub fn combine_reward(task: f64, depth_term: f64, kl_term: f64, cfg: &RewardConfig) -> f64 {
    task - cfg.lambda * depth_term - cfg.beta * kl_term
}

/// Per-completion-token D(policy || base) of full-depth next-token
/// distributions over the sampled sequence.
pub fn kl_to_base(
    rollout: &Rollout,
    policy: &ModelParams,
    base: &ModelParams,
) -> Result<Vec<f64>> {
    let tokens = rollout.all_tokens();
    let input = &tokens[..tokens.len() - 1];
    let pol = plain_final_dist(policy, input)?;
    let bas = plain_final_dist(base, input)?;
    let first = rollout.prompt.len() - 1;
    Ok((0..rollout.completion.len())
        .map(|t| kl_divergence(pol.row(first + t), bas.row(first + t), PROB_FLOOR))
        .collect())
}

/// Leave-one-out advantages: a_i = r_i - mean of the other rewards.
/// Computed as a sum of pairwise differences so identical rewards yield
/// exactly zero and two-sample advantages are exactly antisymmetric.
pub fn rloo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    let k = rewards.len();
    if k < 2 {
        return Err(Error::Config(format!("RLOO needs at least 2 rollouts, got {k}")));
    }
    let denom = (k - 1) as f64;
    Ok((0..k)
        .map(|i| {
            rewards
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &rj)| (rewards[i] - rj) / denom)
                .sum()
        })
        .collect())
}

/// A rollout with its reward breakdown and task reward.
#[derive(Debug, Clone)]
pub struct ScoredRollout {
    pub rollout: Rollout,
    pub reward: RewardBreakdown,
}

/// The k scored rollouts of one prompt plus their advantages.
#[derive(Debug, Clone)]
pub struct RlooBatch {
    pub rollouts: Vec<ScoredRollout>,
    pub advantages: Vec<f64>,
}

impl RlooBatch {
    pub fn new(rollouts: Vec<ScoredRollout>) -> Result<Self> {
        let rewards: Vec<f64> = rollouts.iter().map(|s| s.reward.total).collect();
        let advantages = rloo_advantages(&rewards)?;
        Ok(RlooBatch { rollouts, advantages })
    }
}

/// Tape forward that replays a rollout's sampled exits and returns the node
/// for its augmented log-probability.
pub fn build_rollout_score(
    params: &ModelParams,
    rollout: &Rollout,
    exit_offset: f64,
    trainable: Option<&[bool]>,
) -> Result<(DiffForward, Var)> {
    let tokens = rollout.all_tokens();
    let input = &tokens[..tokens.len() - 1];
    let p_len = rollout.prompt.len();
    let n_layers = params.config.n_layers;
    let exitable = params.config.exitable_layers();

    // Positions 0..p_len-1 ran full depth; position p_len-1+t carries the
    // exit sampled while generating completion token t.
    let mut exits = vec![n_layers; input.len()];
    for (t, d) in rollout.decisions.iter().enumerate() {
        exits[p_len - 1 + t] = d.exit_layer;
    }

    let mut fwd = build_forward(
        params,
        input,
        Some(&exits),
        ForwardOpts { lens_at_exitable: false, exit_heads: true, trainable },
    )?;

    // Token term: log p(v_t | exit layer) at each decision position.
    let picks: Vec<(usize, usize)> = rollout
        .completion
        .iter()
        .enumerate()
        .map(|(t, &tok)| (p_len - 1 + t, tok))
        .collect();
    let picked = fwd.tape.gather(fwd.final_logprobs, Rc::new(picks));
    let token_sum = fwd.tape.sum_all(picked);

    // Exit term: -softplus pieces summed over visited heads (only decision
    // positions contribute; prompt positions never sampled).
    let mut penalty_terms: Vec<Var> = Vec::new();
    for (hi, &layer) in exitable.iter().enumerate() {
        let (_, e_raw) = fwd.exit_logits[hi];
        let e_col = if exit_offset == 0.0 {
            e_raw
        } else {
            fwd.tape.add_const(e_raw, exit_offset)
        };
        let survived: Vec<(usize, usize)> = rollout
            .decisions
            .iter()
            .enumerate()
            .filter(|&(_, d)| d.exit_layer > layer)
            .map(|(t, _)| (p_len - 1 + t, 0usize))
            .collect();
        let exited: Vec<(usize, usize)> = rollout
            .decisions
            .iter()
            .enumerate()
            .filter(|&(_, d)| d.exit_layer == layer)
            .map(|(t, _)| (p_len - 1 + t, 0usize))
            .collect();
        if !survived.is_empty() {
            let sp = fwd.tape.softplus(e_col);
            let picked = fwd.tape.gather(sp, Rc::new(survived));
            penalty_terms.push(fwd.tape.sum_all(picked));
        }
        if !exited.is_empty() {
            let neg = fwd.tape.scale(e_col, -1.0);
            let sp = fwd.tape.softplus(neg);
            let picked = fwd.tape.gather(sp, Rc::new(exited));
            penalty_terms.push(fwd.tape.sum_all(picked));
        }
    }

    let logp = match penalty_terms.into_iter().reduce(|a, b| fwd.tape.add(a, b)) {
        Some(penalty) => fwd.tape.sub(token_sum, penalty),
        None => token_sum,
    };
    Ok((fwd, logp))
}

/// Metrics emitted by one update step.
#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub mean_reward: f64,
    pub mean_exit_layer: f64,
    pub task_accuracy: f64,
    pub mean_kl: f64,
}

/// One policy-gradient update from on-policy batches.
///
/// gradient = -mean over rollouts of advantage * grad(augmented logp);
/// only adapters and exit heads move.
pub fn rl_step(
    batches: &[RlooBatch],
    params: &mut ModelParams,
    opt: &mut Optimizer,
    exit_offset: f64,
) -> Result<StepMetrics> {
    let total: usize = batches.iter().map(|b| b.rollouts.len()).sum();
    if total == 0 {
        return Err(Error::Config("rl_step needs at least one rollout".into()));
    }
    for b in batches {
        for s in &b.rollouts {
            if s.rollout.params_version != params.version {
                return Err(Error::Stale {
                    rollout: s.rollout.params_version,
                    current: params.version,
                });
            }
        }
    }

    let jobs: Vec<(&Rollout, f64)> = batches
        .iter()
        .flat_map(|b| {
            b.rollouts
                .iter()
                .zip(&b.advantages)
                .map(|(s, &a)| (&s.rollout, a))
        })
        .collect();

    let shared: &ModelParams = params;
    let trainable = trainable_mask(shared, TrainScope::AdaptersAndHeads);
    let (grads, _) = grad_accumulate_chunked(jobs.len(), shared, |ji, buf| {
        let (r, a) = jobs[ji];
        if a == 0.0 {
            return Ok(());
        }
        let (mut fwd, logp) = build_rollout_score(shared, r, exit_offset, Some(&trainable))?;
        if cfg!(debug_assertions) {
            let scored = fwd.tape.scalar_value(logp);
            debug_assert!(
                (scored - r.logp).abs() < 1e-6,
                "scoring pass disagrees with rollout logp: {scored} vs {}",
                r.logp
            );
        }
        fwd.tape.backward(logp);
        fwd.add_param_grads_into(buf, -a / total as f64);
        Ok(())
    })?;
    opt.step(params, &grads);

    let mut reward_sum = 0.0;
    let mut task_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut layer_sum = 0usize;
    let mut token_count = 0usize;
    for b in batches {
        for s in &b.rollouts {
            reward_sum += s.reward.total;
            task_sum += s.reward.task;
            kl_sum += s.reward.kl_term;
            layer_sum += s.rollout.decisions.iter().map(|d| d.exit_layer).sum::<usize>();
            token_count += s.rollout.decisions.len();
        }
    }
    Ok(StepMetrics {
        mean_reward: reward_sum / total as f64,
        mean_exit_layer: layer_sum as f64 / token_count.max(1) as f64,
        task_accuracy: task_sum / total as f64,
        mean_kl: kl_sum / total as f64,
    })
}

#[derive(Debug, Clone)]
pub struct RlConfig {
    pub lambda: f64,
    pub beta: f64,
    /// Rollouts per prompt.
    pub k: usize,
    pub steps: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub depth_normalized: bool,
    pub lr: f64,
    pub prompts_per_step: usize,
    pub eval_every: usize,
    pub eval_prompts: usize,
    pub exit_offset: f64,
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            lambda: 1.5,
            beta: 0.25,
            k: 8,
            steps: 300,
            temperature: 1.0,
            max_new_tokens: 128,
            depth_normalized: true,
            lr: 1e-4,
            prompts_per_step: 4,
            eval_every: 20,
            eval_prompts: 60,
            exit_offset: 0.0,
            seed: 0,
        }
    }
}

impl RlConfig {
    pub fn reward_config(&self) -> RewardConfig {
        RewardConfig {
            lambda: self.lambda,
            beta: self.beta,
            depth_normalized: self.depth_normalized,
        }
    }

    pub fn decode_settings(&self) -> DecodeSettings {
        DecodeSettings {
            temperature: self.temperature,
            max_new_tokens: self.max_new_tokens,
            stop_token: Some(crate::tasks::NEWLINE_ID),
            exit_offset: self.exit_offset,
        }
    }
}

/// One evaluation row of the training history CSV.
#[derive(Debug, Clone, Copy)]
pub struct HistoryRow {
    pub step: usize,
    pub mean_reward: f64,
    pub accuracy: f64,
    pub avg_compute: f64,
    pub total_compute: f64,
    pub exit_rate: f64,
    pub mean_kl: f64,
}

pub const HISTORY_HEADER: [&str; 7] = [
    "step",
    "mean_reward",
    "accuracy",
    "avg_compute",
    "total_compute",
    "exit_rate",
    "mean_kl",
];

impl HistoryRow {
    pub fn as_fields(&self) -> Vec<f64> {
        vec![
            self.step as f64,
            self.mean_reward,
            self.accuracy,
            self.avg_compute,
            self.total_compute,
            self.exit_rate,
            self.mean_kl,
        ]
    }
}

/// Evaluation outcome on a held-out prompt set (greedy tokens, sampled exits).
#[derive(Debug, Clone)]
pub struct EvalResult {
    pub accuracy: f64,
    pub avg_compute: f64,
    pub total_compute: f64,
    pub exit_rate: f64,
    pub mean_kl: f64,
    pub mean_reward: f64,
    pub mean_completion_tokens: f64,
    pub records: Vec<ExitRecord>,
}

pub fn evaluate(
    params: &ModelParams,
    base: &ModelParams,
    instances: &[TaskInstance],
    cfg: &RlConfig,
    seed: u64,
) -> Result<EvalResult> {
    if instances.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let tokenizer = Tokenizer;
    let reward_cfg = cfg.reward_config();
    let mut decode = cfg.decode_settings();
    decode.temperature = 0.0; // greedy tokens; exits stay stochastic

    let outcomes: Vec<(f64, RewardBreakdown, Vec<ExitRecord>, usize)> = instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let prompt = tokenizer.encode(&inst.prompt)?;
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let r = rollout(&prompt, params, &decode, &mut rng)?;
            let text = format!("{}{}", inst.prompt, tokenizer.decode(&r.completion));
            let task = verify(&text, inst) as f64;
            let reward = total_reward(&r, task, &reward_cfg, params, base)?;
            let records: Vec<ExitRecord> = r
                .decisions
                .iter()
                .zip(&r.completion)
                .map(|(d, &tok)| ExitRecord {
                    token: tokenizer.decode(&[tok]),
                    exit_layer: d.exit_layer,
                    position: d.position,
                })
                .collect();
            let n_tokens = r.completion.len();
            Ok((task, reward, records, n_tokens))
        })
        .collect::<Result<Vec<_>>>()?;

    let n = outcomes.len() as f64;
    let accuracy = outcomes.iter().map(|o| o.0).sum::<f64>() / n;
    let mean_reward = outcomes.iter().map(|o| o.1.total).sum::<f64>() / n;
    let mean_kl = outcomes.iter().map(|o| o.1.kl_term).sum::<f64>() / n;
    let mean_completion_tokens = outcomes.iter().map(|o| o.3 as f64).sum::<f64>() / n;
    let records: Vec<ExitRecord> = outcomes.into_iter().flat_map(|o| o.2).collect();

    let l_total = params.config.n_layers;
    let avg_compute = metrics::avg_compute(&records, l_total)?;
    let exit_rate = metrics::exit_rate(&records, l_total)?;
    Ok(EvalResult {
        accuracy,
        avg_compute,
        total_compute: mean_completion_tokens * avg_compute,
        exit_rate,
        mean_kl,
        mean_reward,
        mean_completion_tokens,
        records,
    })
}

/// Full RL loop: rollouts, rewards, RLOO advantages, updates, periodic
/// evaluation. `base` (the passed-in params) stays frozen as the KL anchor.
pub fn run_rl(
    train: &[TaskInstance],
    eval_set: &[TaskInstance],
    params: ModelParams,
    cfg: &RlConfig,
    mut on_eval: impl FnMut(&HistoryRow, &ModelParams) -> Result<()>,
) -> Result<(ModelParams, Vec<HistoryRow>)> {
    if train.is_empty() {
        return Err(Error::Config("empty RL training set".into()));
    }
    if cfg.k < 2 {
        return Err(Error::Config("RLOO needs k >= 2 rollouts per prompt".into()));
    }
    let base = params.clone();
    let mut policy = params;
    let tokenizer = Tokenizer;
    let reward_cfg = cfg.reward_config();
    let decode = cfg.decode_settings();
    let mut opt = Optimizer::new(&policy, TrainScope::AdaptersAndHeads, OptimConfig::adaptive(cfg.lr));
    let mut history = Vec::new();

    let eval_slice = &eval_set[..eval_set.len().min(cfg.eval_prompts.max(1))];
    let do_eval = |step: usize,
                       policy: &ModelParams,
                       history: &mut Vec<HistoryRow>,
                       on_eval: &mut dyn FnMut(&HistoryRow, &ModelParams) -> Result<()>|
     -> Result<()> {
        if eval_slice.is_empty() {
            return Ok(());
        }
        let ev = evaluate(policy, &base, eval_slice, cfg, cfg.seed ^ 0x5E1F ^ step as u64)?;
        let row = HistoryRow {
            step,
            mean_reward: ev.mean_reward,
            accuracy: ev.accuracy,
            avg_compute: ev.avg_compute,
            total_compute: ev.total_compute,
            exit_rate: ev.exit_rate,
            mean_kl: ev.mean_kl,
        };
        history.push(row);
        on_eval(&row, policy)
    };

    do_eval(0, &policy, &mut history, &mut on_eval)?;

    for step in 1..=cfg.steps {
        let start = ((step - 1) * cfg.prompts_per_step) % train.len();
        let prompts: Vec<&TaskInstance> = (0..cfg.prompts_per_step)
            .map(|i| &train[(start + i) % train.len()])
            .collect();

        let batches: Vec<RlooBatch> = prompts
            .par_iter()
            .enumerate()
            .map(|(pi, inst)| {
                let prompt = tokenizer.encode(&inst.prompt)?;
                let scored: Vec<ScoredRollout> = (0..cfg.k)
                    .into_par_iter()
                    .map(|ki| {
                        let mut rng = ChaCha8Rng::seed_from_u64(
                            cfg.seed
                                ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
                                ^ (pi as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
                                ^ (ki as u64).wrapping_mul(0x2545_F491_4F6C_DD1D),
                        );
                        let r = rollout(&prompt, &policy, &decode, &mut rng)?;
                        let text =
                            format!("{}{}", inst.prompt, tokenizer.decode(&r.completion));
                        let task = verify(&text, inst) as f64;
                        let reward = total_reward(&r, task, &reward_cfg, &policy, &base)?;
                        Ok(ScoredRollout { rollout: r, reward })
                    })
                    .collect::<Result<Vec<_>>>()?;
                RlooBatch::new(scored)
            })
            .collect::<Result<Vec<_>>>()?;

        rl_step(&batches, &mut policy, &mut opt, cfg.exit_offset)?;

        if (cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.steps {
            do_eval(step, &policy, &mut history, &mut on_eval)?;
        }
    }

    Ok((policy, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rloo_hand_cases() {
        assert_eq!(rloo_advantages(&[1.0, 0.0]).unwrap(), vec![1.0, -1.0]);
        assert_eq!(rloo_advantages(&[1.0, 0.0, 0.0]).unwrap(), vec![1.0, -0.5, -0.5]);
        assert_eq!(
            rloo_advantages(&[0.7, 0.7, 0.7, 0.7]).unwrap(),
            vec![0.0, 0.0, 0.0, 0.0]
        );
        assert!(matches!(rloo_advantages(&[1.0]), Err(Error::Config(_))));
    }

    #[test]
    fn rloo_advantages_are_mean_zero_and_antisymmetric() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let k = rng.gen_range(2..9);
            let rewards: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let adv = rloo_advantages(&rewards).unwrap();
            let mean: f64 = adv.iter().sum::<f64>() / k as f64;
            assert!(mean.abs() < 1e-12, "mean {mean}");
        }
        // two-sample antisymmetry is exact
        let adv = rloo_advantages(&[2.5, -1.5]).unwrap();
        assert_eq!(adv[0], -adv[1]);
        assert_eq!(adv[0], 4.0);
    }

    #[test]
    fn reward_formula_hand_case() {
        // R_task=1, lambda=1.5, normalized depth 0.95, beta=0.25, KL=0.1
        let cfg = RewardConfig { lambda: 1.5, beta: 0.25, depth_normalized: true };
        let total = combine_reward(1.0, 0.95, 0.1, &cfg);
        assert!((total - (-0.45)).abs() < 1e-12);
        // penalties off
        let off = RewardConfig { lambda: 0.0, beta: 0.0, depth_normalized: true };
        assert_eq!(combine_reward(1.0, 0.93, 2.5, &off), 1.0);
    }
}

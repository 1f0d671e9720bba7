//! Pipeline commands behind the `exitlab` binary.
//!
//! Every command is reproducible from (config, seed): outputs land in the
//! configured directory together with the effective config that produced
//! them, and stages hand off through checkpoint files alone.

use std::path::Path;

use crate::calibrate::{calibrate_with, exit_histograms};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::metrics::ExitRecord;
use crate::model::ModelParams;
use crate::pretrain::{corpus_from_instances, pretrain};
use crate::rl::{run_rl, DecodeSettings, HistoryRow, HISTORY_HEADER};
use crate::runcfg::RunConfig;
use crate::tasks::{verify, TaskInstance, Tokenizer};
use crate::viz::{export_curves, render_exit_map_ansi, render_exit_map_html, Palette};

/// Seed salts keep the stage-level datasets disjoint for one master seed.
const EVAL_SALT: u64 = 0x45_56_41_4C; // "EVAL"
const CALIB_SALT: u64 = 0x43_41_4C_49; // "CALI"
const HELD_OUT_SALT: u64 = 0x48_45_4C_44; // "HELD"

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    write_text(path, &export_curves(header, rows)?)
}

/// Train the plain base model and write `base.ckpt`.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    cfg.echo()?;
    let train = cfg.task.generate(cfg.seed, cfg.task.train_examples)?;
    let eval = cfg.task.generate(cfg.seed ^ EVAL_SALT, cfg.task.eval_examples)?;
    let corpus = corpus_from_instances(&train)?;
    let params = ModelParams::init(&cfg.model, cfg.seed)?;

    println!(
        "pretraining on {} {} examples ({} eval prompts)",
        train.len(),
        cfg.task.family,
        eval.len()
    );
    let (model, history) = pretrain(
        &corpus,
        &eval,
        params,
        &cfg.pretrain.to_config(cfg.seed),
        |e| println!("epoch {:3}  loss {:.4}  accuracy {:.3}", e.epoch, e.loss, e.accuracy),
    )?;

    let ckpt = cfg.out_dir.join("base.ckpt");
    checkpoint::save(&model, &ckpt)?;
    let rows: Vec<Vec<f64>> = history
        .iter()
        .map(|e| vec![e.epoch as f64, e.loss, e.accuracy])
        .collect();
    write_csv(&cfg.out_dir.join("pretrain-log.csv"), &["epoch", "loss", "accuracy"], &rows)?;
    if let Some(last) = history.last() {
        println!("final accuracy {:.3}; checkpoint at {}", last.accuracy, ckpt.display());
    } else {
        println!("zero epochs requested; checkpoint equals initialization: {}", ckpt.display());
    }
    Ok(())
}

fn load_corpus_lines(cfg: &RunConfig) -> Result<(Vec<String>, &'static str)> {
    match &cfg.calibration.corpus {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            Ok((
                text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect(),
                "file",
            ))
        }
        None => {
            let instances =
                cfg.task.generate(cfg.seed ^ CALIB_SALT, cfg.calibration.sequences)?;
            Ok((instances.iter().map(|i| i.full_text()).collect(), "generated"))
        }
    }
}

fn tokenize_lines(lines: &[String]) -> Result<Vec<Vec<usize>>> {
    let tokenizer = Tokenizer;
    lines.iter().map(|l| tokenizer.encode(&format!("{l}\n"))).collect()
}

/// Calibrate exit heads and adapters against the frozen base checkpoint.
pub fn cmd_calibrate(cfg: &RunConfig, ckpt: &Path) -> Result<()> {
    cfg.validate()?;
    cfg.echo()?;
    let base = checkpoint::load(ckpt)?;
    let (lines, source) = load_corpus_lines(cfg)?;
    let corpus = tokenize_lines(&lines)?;
    write_text(&cfg.out_dir.join("calibration-corpus.txt"), &(lines.join("\n") + "\n"))?;
    println!(
        "calibrating on {} sequences ({source}), kl_factor {}",
        corpus.len(),
        cfg.calibration.kl_factor
    );

    let (calibrated, history) = calibrate_with(
        &corpus,
        &base,
        &cfg.calibration.to_config(cfg.seed),
        |e| {
            println!(
                "epoch {:3}  token_kl {:.4}  exit_ce {:.4}  total {:.4}",
                e.epoch, e.token_kl, e.exit_ce, e.total
            )
        },
    )?;

    let out_ckpt = cfg.out_dir.join("calibrated.ckpt");
    checkpoint::save(&calibrated, &out_ckpt)?;
    let rows: Vec<Vec<f64>> = history
        .iter()
        .map(|e| vec![e.epoch as f64, e.token_kl, e.exit_ce, e.total])
        .collect();
    write_csv(
        &cfg.out_dir.join("calibration-loss.csv"),
        &["epoch", "token_kl", "exit_ce", "total"],
        &rows,
    )?;

    // Teacher-forced target-vs-learned report on held-out text.
    let held = cfg
        .task
        .generate(cfg.seed ^ HELD_OUT_SALT, cfg.task.eval_examples.max(50))?;
    let held_corpus = tokenize_lines(&held.iter().map(|i| i.full_text()).collect::<Vec<_>>())?;
    let hist = exit_histograms(&base, &calibrated, &held_corpus, cfg.calibration.kl_factor, cfg.seed)?;

    let l_total = calibrated.config.n_layers as f64;
    let mut layer_labels: Vec<f64> = hist.exitable.iter().map(|&l| l as f64).collect();
    layer_labels.push(l_total);
    let hist_rows: Vec<Vec<f64>> = (0..hist.target.len())
        .map(|i| vec![layer_labels[i], hist.target[i], hist.learned[i], hist.sampled[i]])
        .collect();
    write_csv(
        &cfg.out_dir.join("exit-histograms.csv"),
        &["layer", "target", "learned", "sampled"],
        &hist_rows,
    )?;

    let sampled_mean_layer: f64 = hist
        .sampled
        .iter()
        .zip(&layer_labels)
        .map(|(p, l)| p * l)
        .sum();
    let als = 100.0 * (1.0 - sampled_mean_layer / l_total);
    let report = format!(
        "tokens: {}\nexit_rate: {:.4}\nals_percent: {:.4}\ntv_learned_vs_target: {:.4}\n",
        hist.tokens,
        hist.exit_rate(),
        als,
        hist.tv_distance()
    );
    write_text(&cfg.out_dir.join("calibration-report.txt"), &report)?;
    println!(
        "exit_rate {:.3}  ALS {:.2}%  TV(learned, target) {:.4}",
        hist.exit_rate(),
        als,
        hist.tv_distance()
    );
    println!("calibrated checkpoint at {}", out_ckpt.display());
    Ok(())
}

/// RL fine-tuning from a calibrated checkpoint.
pub fn cmd_rl(cfg: &RunConfig, ckpt: &Path) -> Result<()> {
    cfg.validate()?;
    cfg.echo()?;
    let calibrated = checkpoint::load(ckpt)?;
    let train = cfg.task.generate(cfg.seed, cfg.task.train_examples)?;
    let eval = cfg.task.generate(cfg.seed ^ EVAL_SALT, cfg.rl.eval_prompts.max(1))?;
    let rl_cfg = cfg.rl.to_config(cfg.seed, cfg.decode.offset);
    println!(
        "rl: lambda {} beta {} k {} steps {} on {} prompts",
        rl_cfg.lambda,
        rl_cfg.beta,
        rl_cfg.k,
        rl_cfg.steps,
        train.len()
    );

    let out_dir = cfg.out_dir.clone();
    let checkpoint_every = cfg.rl.checkpoint_every;
    let (final_params, history) = run_rl(&train, &eval, calibrated, &rl_cfg, |row, params| {
        println!(
            "step {:4}  reward {:+.3}  accuracy {:.3}  avg_compute {:.3}  exit_rate {:.3}  kl {:.4}",
            row.step, row.mean_reward, row.accuracy, row.avg_compute, row.exit_rate, row.mean_kl
        );
        if checkpoint_every > 0 && row.step > 0 && row.step % checkpoint_every == 0 {
            checkpoint::save(params, &out_dir.join(format!("ckpt-step{}.ckpt", row.step)))?;
        }
        Ok(())
    })?;

    checkpoint::save(&final_params, &cfg.out_dir.join("rl-final.ckpt"))?;
    let rows: Vec<Vec<f64>> = history.iter().map(HistoryRow::as_fields).collect();
    write_csv(&cfg.out_dir.join("history.csv"), &HISTORY_HEADER, &rows)?;
    println!("history written to {}", cfg.out_dir.join("history.csv").display());
    Ok(())
}

/// Sample a completion with stochastic exits; print it colored by exit depth
/// and write a standalone HTML exit map.
pub fn cmd_generate(
    cfg: &RunConfig,
    ckpt: &Path,
    prompt: &str,
    no_color: bool,
) -> Result<()> {
    cfg.echo()?;
    let params = checkpoint::load(ckpt)?;
    let tokenizer = Tokenizer;
    let prompt_ids = tokenizer.encode(prompt)?;
    let decode = DecodeSettings {
        temperature: cfg.rl.temperature,
        max_new_tokens: cfg.rl.max_new_tokens,
        stop_token: Some(crate::tasks::NEWLINE_ID),
        exit_offset: cfg.decode.offset,
    };
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let rollout = crate::rl::rollout(&prompt_ids, &params, &decode, &mut rng)?;

    let records: Vec<ExitRecord> = rollout
        .decisions
        .iter()
        .zip(&rollout.completion)
        .map(|(d, &tok)| ExitRecord {
            token: tokenizer.decode(&[tok]),
            exit_layer: d.exit_layer,
            position: d.position,
        })
        .collect();

    let l_total = params.config.n_layers;
    print!("{prompt}");
    println!(
        "{}",
        render_exit_map_ansi(&records, l_total, &Palette { no_color })
    );
    let mean_layer = rollout.mean_exit_layer();
    println!(
        "tokens {}  mean exit layer {:.2}/{}  joint logp {:.3}",
        rollout.completion.len(),
        mean_layer,
        l_total,
        rollout.logp
    );
    let html_path = cfg.out_dir.join("exit-map.html");
    write_text(&html_path, &render_exit_map_html(&records, l_total))?;
    println!("exit map written to {}", html_path.display());
    Ok(())
}

/// Calibrate once per KL factor and tabulate exit rate, ALS, and accuracy.
pub fn cmd_sweep(cfg: &RunConfig, ckpt: &Path, factors: &[f64]) -> Result<()> {
    if factors.is_empty() {
        return Err(Error::Config("empty kl-factor list".into()));
    }
    cfg.validate()?;
    cfg.echo()?;
    let base = checkpoint::load(ckpt)?;
    let (lines, _) = load_corpus_lines(cfg)?;
    let corpus = tokenize_lines(&lines)?;
    let eval = cfg.task.generate(cfg.seed ^ EVAL_SALT, cfg.task.eval_examples)?;

    let mut rows = Vec::new();
    println!("{:>9}  {:>9}  {:>8}  {:>8}", "kl_factor", "exit_rate", "als_pct", "accuracy");
    for &factor in factors {
        let mut cal_cfg = cfg.calibration.to_config(cfg.seed);
        cal_cfg.kl_factor = factor;
        let (model, _) = calibrate_with(&corpus, &base, &cal_cfg, |_| {})?;
        let mut eval_cfg = cfg.rl.to_config(cfg.seed, 0.0);
        eval_cfg.beta = 0.0; // no KL anchor needed to measure exits
        let ev = crate::rl::evaluate(&model, &model, &eval, &eval_cfg, cfg.seed ^ EVAL_SALT)?;
        let als = 100.0 * (1.0 - ev.avg_compute);
        println!(
            "{factor:>9.2}  {:>9.4}  {als:>8.3}  {:>8.4}",
            ev.exit_rate, ev.accuracy
        );
        rows.push(vec![factor, ev.exit_rate, als, ev.accuracy]);
    }
    write_csv(
        &cfg.out_dir.join("sweep.csv"),
        &["kl_factor", "exit_rate", "als_pct", "accuracy"],
        &rows,
    )?;
    println!("table written to {}", cfg.out_dir.join("sweep.csv").display());
    Ok(())
}

/// Sanity generation used in tests: greedy full-depth decode plus verify.
pub fn greedy_answer(params: &ModelParams, inst: &TaskInstance) -> Result<(String, u8)> {
    let tokenizer = Tokenizer;
    let prompt = tokenizer.encode(&inst.prompt)?;
    let completion =
        crate::forward::generate_plain(params, &prompt, 16, Some(crate::tasks::NEWLINE_ID))?;
    let text = format!("{}{}", inst.prompt, tokenizer.decode(&completion));
    let score = verify(&text, inst);
    Ok((text, score))
}

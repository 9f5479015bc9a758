//! Adam training of the copula-weighted objective.
//!
//! Every epoch writes one `train` row (averages over the epoch's batches)
//! and one `valid` row (eval mode, anneal weight 1) to the metrics stream.
//! `last.ckpt` is rewritten after each epoch and `best.ckpt` whenever the
//! validation objective improves.

mod adam;
mod checkpoint;

pub use adam::{adam_step, clip_global_norm, global_norm, AdamState, ADAM_EPS, BETA1, BETA2};
pub use checkpoint::{Checkpoint, MAGIC, VERSION};

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::RunConfig;
use crate::data::{batches, Batch, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{corpus_totals, EvalOptions};
use crate::grad::{finite_diff_check_piecewise, FdOptions, GradientReport};
use crate::lowrank::W_FLOOR;
use crate::metrics::{MetricRow, Totals, HEADER};
use crate::model::{forward, LossWeights, ModelParams, Noise, ParamId, Phase};
use crate::objective::anneal_weight;

pub const GATE_TOL: f64 = 1e-3;

pub const METRICS_FILE: &str = "metrics.csv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

pub struct TrainData {
    pub vocab: Vocabulary,
    pub train: Vec<Vec<usize>>,
    pub valid: Vec<Vec<usize>>,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Where metrics and checkpoints go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    pub skip_grad_check: bool,
    /// Stop after this many epochs of the current call (for resume tests).
    pub stop_after: Option<usize>,
    pub on_row: Option<&'a mut dyn FnMut(&MetricRow)>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub rows: Vec<MetricRow>,
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub gate: Option<GradientReport>,
}

/// Training batches for an epoch; a trailing batch of one joins its
/// predecessor because batch norm needs two rows.
pub fn epoch_batches(corpus: &[Vec<usize>], batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
    let mut bs = batches(corpus, batch_size, Some((seed, epoch as u64)))?;
    if bs.len() >= 2 && bs.last().is_some_and(|b| b.size() == 1) {
        let tail = bs.pop().expect("non-empty");
        let head = bs.pop().expect("two batches");
        let mut idx = head.indices;
        idx.extend(tail.indices);
        bs.push(Batch::from_examples(corpus, &idx));
    }
    if bs.iter().any(|b| b.size() < 2) {
        return Err(Error::Config(
            "training needs batches of at least two sentences (batch norm); use batch_size >= 2 and two or more training lines".into(),
        ));
    }
    Ok(bs)
}

fn loss_weights(cfg: &RunConfig, anneal_w: f64) -> LossWeights {
    LossWeights {
        mode: cfg.mode,
        lambda: cfg.lambda,
        anneal_w,
        anneal_copula: cfg.anneal_copula,
    }
}

/// Finite-difference check of the objective on a two-sentence batch, at a
/// sample of coordinates per tensor. The only kink in the objective is the
/// floor on `w`, so the regime is the set of entries sitting on it.
pub fn gradient_gate(params: &ModelParams, cfg: &RunConfig, corpus: &[Vec<usize>], tol: f64) -> Result<GradientReport> {
    if corpus.len() < 2 {
        return Err(Error::Config("gradient check needs two training sentences".into()));
    }
    let batch = Batch::from_examples(corpus, &[0, 1]);
    let noise = Noise::draw(&params.config, &batch, Phase::Train, cfg.seed, 0, 0, cfg.shared_noise);
    let weights = loss_weights(cfg, 0.5);
    let pass = forward(params, &batch, &noise, Phase::Train, weights)?;
    let analytic = pass.gradients()?;
    let named: Vec<(String, ndarray::Array2<f64>)> = ParamId::ALL
        .iter()
        .zip(&params.tensors)
        .map(|(id, t)| (id.name().to_string(), t.clone()))
        .collect();
    finite_diff_check_piecewise(
        |ts| {
            let mut p = params.clone();
            p.tensors = ts.to_vec();
            let pass = forward(&p, &batch, &noise, Phase::Train, weights)?;
            let floored: Vec<bool> = pass.value(pass.w).iter().map(|&x| x <= W_FLOOR).collect();
            Ok((pass.loss_value(), floored))
        },
        &named,
        &analytic,
        &FdOptions {
            step: 1e-5,
            tol,
            max_coords: Some(12),
            seed: cfg.seed,
            // round-off in the loss is ~1e-9 per coordinate at this step
            atol: 1e-6,
        },
    )
}

fn append_rows(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut s = String::new();
    if fresh {
        s.push_str(HEADER);
        s.push('\n');
    }
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    f.write_all(s.as_bytes())?;
    Ok(())
}

pub fn train(cfg: &RunConfig, data: &TrainData, mut opts: TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.valid.is_empty() {
        return Err(Error::Input("training and validation corpora must be non-empty".into()));
    }
    let steps_per_epoch = epoch_batches(&data.train, cfg.batch_size, cfg.seed, 0)?.len() as u64;
    let mut cfg = cfg.clone();
    cfg.anneal_warmup_steps = Some(cfg.anneal_warmup_steps.unwrap_or(10 * steps_per_epoch));
    let schedule = cfg.anneal_schedule(steps_per_epoch);
    let model_cfg = cfg.model_config(data.vocab.len());

    let (mut params, mut adam, mut epoch, mut step, mut best_valid) = match opts.resume.take() {
        Some(ck) => {
            if ck.params.config != model_cfg {
                return Err(Error::Config("checkpoint model shape differs from the configuration".into()));
            }
            (ck.params, ck.adam, ck.epoch, ck.step, ck.best_valid)
        }
        None => {
            let p = ModelParams::init(&model_cfg, cfg.seed)?;
            let a = AdamState::new(&p.tensors);
            (p, a, 0, 0, f64::INFINITY)
        }
    };

    let gate = if epoch == 0 && !opts.skip_grad_check {
        let report = gradient_gate(&params, &cfg, &data.train, GATE_TOL)?;
        if !report.passed {
            let worst = report.worst().expect("non-empty report");
            return Err(Error::GradientGate(format!(
                "{} has relative error {:.3e} > {:.0e}",
                worst.name, worst.rel_error, GATE_TOL
            )));
        }
        Some(report)
    } else {
        None
    };

    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
    }
    // where the run is written is not part of its state
    let ck_config = RunConfig {
        out_dir: None,
        ..cfg.clone()
    };
    let snapshot = |params: &ModelParams, adam: &AdamState, epoch, step, best_valid| Checkpoint {
        config: ck_config.clone(),
        vocab: data.vocab.clone(),
        params: params.clone(),
        adam: adam.clone(),
        epoch,
        step,
        best_valid,
    };
    let mut best = match &opts.out_dir {
        Some(dir) if dir.join(BEST_CHECKPOINT).exists() && epoch > 0 => Checkpoint::load(&dir.join(BEST_CHECKPOINT))?,
        _ => snapshot(&params, &adam, epoch, step, best_valid),
    };
    let eval_opts = EvalOptions {
        mode: cfg.mode,
        lambda: loss_weights(&cfg, 1.0).effective_lambda(),
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        shared_noise: cfg.shared_noise,
    };

    let mut rows = Vec::new();
    let mut done_here = 0;
    while epoch < cfg.epochs && opts.stop_after.is_none_or(|n| done_here < n) {
        let started = Instant::now();
        let mut totals = Totals::default();
        let mut norm_sum = 0.0;
        let mut anneal_w = anneal_weight(step, &schedule);
        let epoch_batches = epoch_batches(&data.train, cfg.batch_size, cfg.seed, epoch)?;
        for (bi, batch) in epoch_batches.iter().enumerate() {
            anneal_w = anneal_weight(step, &schedule);
            let noise = Noise::draw(&params.config, batch, Phase::Train, cfg.seed, epoch as u64, bi as u64, cfg.shared_noise);
            let pass = forward(&params, batch, &noise, Phase::Train, loss_weights(&cfg, anneal_w))
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("{m} at epoch {epoch} batch {bi}")),
                    other => other,
                })?;
            let loss = pass.loss_value();
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch} batch {bi}")));
            }
            let mut grads = pass.gradients()?;
            for (id, g) in ParamId::ALL.iter().zip(&grads) {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of {} at epoch {epoch} batch {bi}",
                        id.name()
                    )));
                }
            }
            norm_sum += clip_global_norm(&mut grads, cfg.grad_clip);
            adam_step(&mut params.tensors, &grads, &mut adam, cfg.lr)?;
            if let Some((mean, var)) = pass.bn_stats() {
                params.update_running_stats(&mean, &var, batch.size());
            }
            totals.add(&pass.totals(), batch.size(), batch.target_count());
            step += 1;
        }
        let lambda = loss_weights(&cfg, anneal_w).effective_lambda();
        let train_secs = if cfg.deterministic { 0.0 } else { started.elapsed().as_secs_f64() };
        let train_row = MetricRow::from_totals(
            epoch + 1,
            step,
            "train",
            &totals,
            anneal_w,
            lambda,
            norm_sum / epoch_batches.len() as f64,
            train_secs,
        );
        let valid_started = Instant::now();
        let (vt, _) = corpus_totals(&params, &data.valid, &eval_opts)?;
        let valid_secs = if cfg.deterministic { 0.0 } else { valid_started.elapsed().as_secs_f64() };
        let valid_row = MetricRow::from_totals(epoch + 1, step, "valid", &vt, 1.0, eval_opts.lambda, 0.0, valid_secs);
        epoch += 1;
        done_here += 1;

        let objective = valid_row.modified_objective();
        let improved = objective < best_valid;
        if improved {
            best_valid = objective;
        }
        let last = snapshot(&params, &adam, epoch, step, best_valid);
        if improved {
            best = last.clone();
        }
        if let Some(dir) = &opts.out_dir {
            append_rows(&dir.join(METRICS_FILE), &[train_row.clone(), valid_row.clone()])?;
            last.save(&dir.join(LAST_CHECKPOINT))?;
            if improved {
                best.save(&dir.join(BEST_CHECKPOINT))?;
            }
        }
        if let Some(cb) = opts.on_row.as_mut() {
            cb(&train_row);
            cb(&valid_row);
        }
        rows.push(train_row);
        rows.push(valid_row);
    }
    Ok(TrainOutcome {
        rows,
        last: snapshot(&params, &adam, epoch, step, best_valid),
        best,
        gate,
    })
}

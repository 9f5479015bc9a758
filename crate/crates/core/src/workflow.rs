//! File-level workflows shared by the command-line tool and the experiment
//! tests: corpus loading, a full training run into a directory, λ sweeps and
//! checkpoint evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::{build_vocab, encode_corpus, read_lines, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalReport};
use crate::metrics::MetricRow;
use crate::model::LossWeights;
use crate::trainer::{self, epoch_batches, Checkpoint, TrainData, TrainOptions, TrainOutcome, LAST_CHECKPOINT};

pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const SWEEP_SUMMARY: &str = "sweep_summary.csv";
pub const SWEEP_HEADER: &str = "lambda,final_val_kl,final_val_rec,final_val_ppl";
/// Prior samples behind the diversity column of an evaluation report.
pub const EVAL_SAMPLES: usize = 50;

/// Reads the training and validation files named in `cfg`; the vocabulary
/// comes from `vocab` when given, otherwise from the training lines.
pub fn load_data(cfg: &RunConfig, vocab: Option<Vocabulary>) -> Result<TrainData> {
    let train_path = cfg.require_path("train_path", &cfg.train_path)?;
    let valid_path = cfg.require_path("valid_path", &cfg.valid_path)?;
    let train_lines = read_lines(train_path)?;
    let valid_lines = read_lines(valid_path)?;
    let vocab = match vocab {
        Some(v) => v,
        None => build_vocab(&train_lines, cfg.vocab_max)?,
    };
    Ok(TrainData {
        train: encode_corpus(&train_lines, &vocab, cfg.max_len),
        valid: encode_corpus(&valid_lines, &vocab, cfg.max_len),
        vocab,
    })
}

/// Fills in the automatic warm-up length so the echoed configuration
/// reproduces the run exactly.
pub fn resolve(cfg: &RunConfig, data: &TrainData) -> Result<RunConfig> {
    let mut cfg = cfg.clone();
    if cfg.anneal_warmup_steps.is_none() {
        let steps = epoch_batches(&data.train, cfg.batch_size, cfg.seed, 0)?.len() as u64;
        cfg.anneal_warmup_steps = Some(10 * steps);
    }
    Ok(cfg)
}

#[derive(Default)]
pub struct RunOptions<'a> {
    pub resume: bool,
    pub skip_grad_check: bool,
    pub on_row: Option<&'a mut dyn FnMut(&MetricRow)>,
}

/// Trains into `cfg.out_dir`, writing the resolved configuration, the
/// vocabulary, metrics and checkpoints there.
pub fn run_training(cfg: &RunConfig, opts: RunOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out_dir = cfg.require_path("out_dir", &cfg.out_dir)?.clone();
    let resume = if opts.resume {
        let path = out_dir.join(LAST_CHECKPOINT);
        if !path.exists() {
            return Err(Error::Input(format!("nothing to resume: {} does not exist", path.display())));
        }
        Some(Checkpoint::load(&path)?)
    } else {
        None
    };
    let data = load_data(cfg, resume.as_ref().map(|c| c.vocab.clone()))?;
    let cfg = resolve(cfg, &data)?;
    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join(RESOLVED_CONFIG), cfg.to_text())?;
    data.vocab.save(&out_dir.join(VOCAB_FILE))?;
    trainer::train(
        &cfg,
        &data,
        TrainOptions {
            out_dir: Some(out_dir),
            resume,
            skip_grad_check: opts.skip_grad_check,
            stop_after: None,
            on_row: opts.on_row,
        },
    )
}

/// Run directory for one λ of a sweep.
pub fn sweep_dir(base: &Path, lambda: f64) -> PathBuf {
    base.join(format!("lambda_{lambda}"))
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub lambda: f64,
    /// Final validation row, or the error that stopped the run.
    pub result: std::result::Result<MetricRow, Error>,
}

/// One run per λ under `cfg.out_dir`; a failed run is recorded and the sweep
/// moves on. The summary CSV has a row per λ, with NaN for failed runs.
pub fn sweep_lambda(
    cfg: &RunConfig,
    lambdas: &[f64],
    skip_grad_check: bool,
    mut on_row: impl FnMut(f64, &MetricRow),
) -> Result<Vec<SweepOutcome>> {
    if lambdas.is_empty() {
        return Err(Error::Config("the lambda list is empty".into()));
    }
    let base = cfg.require_path("out_dir", &cfg.out_dir)?.clone();
    fs::create_dir_all(&base)?;
    let mut outcomes = Vec::new();
    let mut summary = format!("{SWEEP_HEADER}\n");
    for &lambda in lambdas {
        let mut sub = cfg.clone();
        sub.lambda = lambda;
        sub.out_dir = Some(sweep_dir(&base, lambda));
        let mut cb = |r: &MetricRow| on_row(lambda, r);
        let result = run_training(
            &sub,
            RunOptions {
                resume: false,
                skip_grad_check,
                on_row: Some(&mut cb),
            },
        )
        .and_then(|out| {
            out.rows
                .iter()
                .rev()
                .find(|r| r.split == "valid")
                .cloned()
                .ok_or_else(|| Error::State("run produced no validation rows".into()))
        });
        match &result {
            Ok(r) => writeln!(summary, "{lambda},{},{},{}", r.kl, r.rec_nll, r.ppl),
            Err(_) => writeln!(summary, "{lambda},NaN,NaN,NaN"),
        }
        .expect("string write");
        fs::write(base.join(SWEEP_SUMMARY), &summary)?;
        outcomes.push(SweepOutcome { lambda, result });
    }
    Ok(outcomes)
}

/// Evaluates a checkpoint on the lines of `corpus_path` with its own
/// vocabulary and objective settings.
pub fn evaluate_checkpoint(ck: &Checkpoint, corpus_path: &Path, seed: u64, batch_size: usize) -> Result<EvalReport> {
    let lines = read_lines(corpus_path)?;
    let corpus = encode_corpus(&lines, &ck.vocab, ck.config.max_len);
    let opts = EvalOptions {
        mode: ck.config.mode,
        lambda: effective_lambda(&ck.config),
        batch_size,
        seed,
        shared_noise: ck.config.shared_noise,
    };
    evaluate(&ck.params, &ck.vocab, &corpus, &opts, EVAL_SAMPLES, ck.config.max_len)
}

pub fn effective_lambda(cfg: &RunConfig) -> f64 {
    LossWeights {
        mode: cfg.mode,
        lambda: cfg.lambda,
        anneal_w: 1.0,
        anneal_copula: cfg.anneal_copula,
    }
    .effective_lambda()
}

/// One CSV line matching [`crate::metrics::EVAL_HEADER`].
pub fn eval_csv(ck: &Checkpoint, report: &EvalReport) -> String {
    let row = MetricRow::from_totals(
        ck.epoch,
        ck.step,
        "eval",
        &report.totals,
        1.0,
        effective_lambda(&ck.config),
        0.0,
        0.0,
    );
    format!("{},{},{}", row.to_csv(), report.active_units, report.distinct_ratio)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{EVAL_HEADER, HEADER};
    use crate::trainer::METRICS_FILE;

    fn setup(dir: &Path) -> RunConfig {
        let lines: Vec<String> = (0..12).map(|i| format!("w{} w{} w{}", i % 3, i % 5, i % 2)).collect();
        fs::write(dir.join("train.txt"), lines[..9].join("\n")).unwrap();
        fs::write(dir.join("valid.txt"), lines[9..].join("\n")).unwrap();
        RunConfig {
            latent_dim: 3,
            hidden_dim: 8,
            embed_dim: 8,
            batch_size: 4,
            epochs: 2,
            dropout: 0.0,
            deterministic: true,
            train_path: Some(dir.join("train.txt")),
            valid_path: Some(dir.join("valid.txt")),
            out_dir: Some(dir.join("run")),
            ..RunConfig::default()
        }
    }

    #[test]
    fn training_run_writes_its_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = setup(dir.path());
        run_training(&cfg, RunOptions::default()).unwrap();
        let run = dir.path().join("run");
        let resolved = RunConfig::parse(&fs::read_to_string(run.join(RESOLVED_CONFIG)).unwrap()).unwrap();
        // 9 lines in batches of 4 with the tail merged: 2 steps per epoch
        assert_eq!(resolved.anneal_warmup_steps, Some(20));
        assert_eq!(resolved.lambda, cfg.lambda);
        let csv = fs::read_to_string(run.join(METRICS_FILE)).unwrap();
        assert!(csv.starts_with(HEADER));
        assert!(Vocabulary::load(&run.join(VOCAB_FILE)).is_ok());
    }

    #[test]
    fn missing_path_names_the_key() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = setup(dir.path());
        cfg.train_path = None;
        let err = run_training(&cfg, RunOptions::default()).unwrap_err();
        assert!(err.to_string().contains("train_path"), "{err}");
    }

    #[test]
    fn sweep_writes_summary_and_continues_after_failure() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = setup(dir.path());
        // a negative λ fails validation; the sweep carries on
        let out = sweep_lambda(&cfg, &[0.0, -1.0, 0.4], true, |_, _| {}).unwrap();
        assert!(out[0].result.is_ok() && out[1].result.is_err() && out[2].result.is_ok());
        let summary = fs::read_to_string(dir.path().join("run").join(SWEEP_SUMMARY)).unwrap();
        let lines: Vec<&str> = summary.lines().collect();
        assert_eq!(lines[0], SWEEP_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(lines[2].starts_with("-1,NaN"));
        assert!(sweep_dir(&dir.path().join("run"), 0.4).join(LAST_CHECKPOINT).exists());
        assert!(matches!(sweep_lambda(&cfg, &[], true, |_, _| {}), Err(Error::Config(_))));
    }

    #[test]
    fn evaluation_line_matches_header() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = setup(dir.path());
        let out = run_training(&cfg, RunOptions::default()).unwrap();
        fs::write(dir.path().join("with_empty.txt"), "w1 w2\n\nw0\n").unwrap();
        let report = evaluate_checkpoint(&out.last, &dir.path().join("with_empty.txt"), 1, 2).unwrap();
        assert_eq!(report.sentences_evaluated, 3);
        let line = eval_csv(&out.last, &report);
        assert_eq!(line.split(',').count(), EVAL_HEADER.split(',').count());
        let again = evaluate_checkpoint(&out.last, &dir.path().join("with_empty.txt"), 1, 2).unwrap();
        assert_eq!(eval_csv(&out.last, &again), line);
    }
}

use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cvlm::config::RunConfig;
use cvlm::data::decode;
use cvlm::eval::{distinct_ratio, sample_from_prior};
use cvlm::metrics::{MetricRow, EVAL_HEADER};
use cvlm::trainer::Checkpoint;
use cvlm::verify::{run_suite, VerifyOptions};
use cvlm::workflow::{self, RunOptions};
use cvlm::{synthetic, Error};

#[derive(Parser)]
#[command(name = "cvlm", version, about = "Gaussian-copula variational language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from out_dir/last.ckpt.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        skip_grad_check: bool,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on a corpus and print a report line.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Defaults to the checkpoint's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Decode sentences from prior samples.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to the checkpoint's max_len.
        #[arg(long)]
        max_len: Option<usize>,
        /// Output file; standard output when absent.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Train once per copula weight, each run in out_dir/lambda_<value>.
    SweepLambda {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated weights, e.g. 0,0.2,0.4
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        lambdas: Vec<f64>,
        #[arg(long)]
        skip_grad_check: bool,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Run the oracle suite.
    Verify {
        /// Multiplies every pass threshold (below 1 is stricter).
        #[arg(long, default_value_t = 1.0)]
        tolerance_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1_000_000)]
        kl_samples: usize,
        /// Debug: negate the copula quadratic term; normalization must fail.
        #[arg(long, hide = true)]
        flip_m_sign: bool,
    },
    /// Write a synthetic templated corpus as train/valid/test files.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 5000)]
        train: usize,
        #[arg(long, default_value_t = 500)]
        valid: usize,
        #[arg(long, default_value_t = 500)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::parse(&fs::read_to_string(p)?)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{kv}' is not key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = Some(d.clone());
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io(_) | Error::Input(_) | Error::Checkpoint(_) => 3,
        Error::Oracle { .. } => 5,
        Error::Domain(_)
        | Error::Shape { .. }
        | Error::Factorization { .. }
        | Error::NonFinite(_)
        | Error::State(_)
        | Error::GradientGate(_) => 4,
    }
}

fn progress(quiet: bool, prefix: String) -> impl FnMut(&MetricRow) {
    move |r: &MetricRow| {
        if !quiet {
            eprintln!(
                "{prefix}epoch {:>3} {:<5} rec {:.4} kl {:.4} log_c {:.4} ppl {:.3} anneal {:.3}",
                r.epoch, r.split, r.rec_nll, r.kl, r.log_copula, r.ppl, r.anneal_w
            );
        }
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Train {
            config,
            resume,
            skip_grad_check,
            quiet,
        } => {
            let cfg = config.resolve()?;
            let mut cb = progress(quiet, String::new());
            workflow::run_training(
                &cfg,
                RunOptions {
                    resume,
                    skip_grad_check,
                    on_row: Some(&mut cb),
                },
            )?;
            Ok(0)
        }
        Command::Eval {
            checkpoint,
            corpus,
            seed,
            batch_size,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let seed = seed.unwrap_or(ck.config.seed);
            let bs = batch_size.unwrap_or(ck.config.batch_size);
            let report = workflow::evaluate_checkpoint(&ck, &corpus, seed, bs)?;
            println!("{EVAL_HEADER}");
            println!("{}", workflow::eval_csv(&ck, &report));
            Ok(0)
        }
        Command::Generate {
            checkpoint,
            n,
            seed,
            max_len,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let max_len = max_len.unwrap_or(ck.config.max_len);
            let sentences: Vec<String> = sample_from_prior(&ck.params, n, seed, max_len)?
                .iter()
                .map(|s| decode(s, &ck.vocab))
                .collect();
            let mut text = String::new();
            for s in &sentences {
                text.push_str(s);
                text.push('\n');
            }
            match out {
                Some(p) => fs::write(p, text)?,
                None => io::stdout().write_all(text.as_bytes())?,
            }
            eprintln!("distinct_ratio {}", distinct_ratio(&sentences));
            Ok(0)
        }
        Command::SweepLambda {
            config,
            lambdas,
            skip_grad_check,
            quiet,
        } => {
            let cfg = config.resolve()?;
            let outcomes = workflow::sweep_lambda(&cfg, &lambdas, skip_grad_check, |lambda, r| {
                progress(quiet, format!("[lambda {lambda}] "))(r)
            })?;
            let mut code = 0;
            for o in &outcomes {
                if let Err(e) = &o.result {
                    eprintln!("lambda {} failed: {e}", o.lambda);
                    if code == 0 {
                        code = exit_code(e);
                    }
                }
            }
            Ok(code)
        }
        Command::Verify {
            tolerance_scale,
            seed,
            kl_samples,
            flip_m_sign,
        } => {
            if !(tolerance_scale > 0.0) {
                return Err(Error::Config("tolerance_scale must be positive".into()));
            }
            let results = run_suite(&VerifyOptions {
                tolerance_scale,
                flip_m_sign,
                seed,
                kl_samples,
            });
            for r in &results {
                println!("{r}");
            }
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
            if failed.is_empty() {
                Ok(0)
            } else {
                eprintln!("failed: {}", failed.join(", "));
                Ok(5)
            }
        }
        Command::Synth {
            out_dir,
            train,
            valid,
            test,
            seed,
        } => {
            let lines = synthetic::generate(train + valid + test, seed);
            fs::create_dir_all(&out_dir)?;
            let parts = [("train.txt", &lines[..train]), ("valid.txt", &lines[train..train + valid]), ("test.txt", &lines[train + valid..])];
            for (name, part) in parts {
                let mut text = part.join("\n");
                if !part.is_empty() {
                    text.push('\n');
                }
                fs::write(out_dir.join(name), text)?;
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

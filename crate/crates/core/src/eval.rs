//! Corpus evaluation, collapse diagnostics and prior sampling.

use std::collections::HashSet;
use std::hash::Hash;

use ndarray::{Array2, Axis};

use crate::data::{batches, decode, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::Totals;
use crate::model::{forward, LossWeights, ModelParams, Noise, Phase};
use crate::objective::ObjectiveMode;
use crate::rng::{self, Purpose};

pub const ACTIVE_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub mode: ObjectiveMode,
    pub lambda: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub shared_noise: bool,
}

/// Eval-mode totals over the corpus plus the posterior means, in corpus order.
pub fn corpus_totals(params: &ModelParams, corpus: &[Vec<usize>], opts: &EvalOptions) -> Result<(Totals, Array2<f64>)> {
    if corpus.is_empty() {
        return Err(Error::Input("cannot evaluate an empty corpus".into()));
    }
    let weights = LossWeights {
        mode: opts.mode,
        lambda: opts.lambda,
        anneal_w: 1.0,
        anneal_copula: false,
    };
    let mut totals = Totals::default();
    let mut means = Array2::zeros((corpus.len(), params.config.latent));
    for batch in batches(corpus, opts.batch_size, None)? {
        let noise = Noise::per_example(&params.config, &batch, opts.seed, opts.shared_noise);
        let pass = forward(params, &batch, &noise, Phase::Eval, weights)?;
        totals.add(&pass.totals(), batch.size(), batch.target_count());
        for (r, &i) in batch.indices.iter().enumerate() {
            means.row_mut(i).assign(&pass.value(pass.mu).row(r));
        }
    }
    Ok((totals, means))
}

/// Number of latent dimensions whose posterior mean varies across inputs by
/// more than `threshold` (population variance).
pub fn active_units_from_means(means: &Array2<f64>, threshold: f64) -> usize {
    if means.nrows() == 0 {
        return 0;
    }
    means.var_axis(Axis(0), 0.0).iter().filter(|&&v| v > threshold).count()
}

pub fn active_units(params: &ModelParams, corpus: &[Vec<usize>], threshold: f64, opts: &EvalOptions) -> Result<usize> {
    let (_, means) = corpus_totals(params, corpus, opts)?;
    Ok(active_units_from_means(&means, threshold))
}

/// z ~ N(0, I) per sample, greedily decoded.
pub fn sample_from_prior(params: &ModelParams, n: usize, seed: u64, max_len: usize) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let d = params.config.latent;
    let mut r = rng::stream(seed, Purpose::Prior, 0, 0);
    let z = Array2::from_shape_vec((n, d), rng::normals(&mut r, n * d)).expect("n×d");
    params.greedy_decode(&z, max_len)
}

/// Unique sentences over total; 0 for an empty list.
pub fn distinct_ratio<T: Eq + Hash>(sentences: &[T]) -> f64 {
    if sentences.is_empty() {
        return 0.0;
    }
    let unique: HashSet<&T> = sentences.iter().collect();
    unique.len() as f64 / sentences.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Per-sentence bound −ELBO = (rec + KL) / sentences.
    pub nll: f64,
    pub rec_nll: f64,
    pub kl: f64,
    pub log_copula: f64,
    pub sum_log_marg: f64,
    pub ppl: f64,
    pub active_units: usize,
    pub distinct_ratio: f64,
    pub sentences_evaluated: usize,
    pub tokens_evaluated: usize,
    pub totals: Totals,
}

/// Full report; `samples` prior draws feed the diversity measure.
pub fn evaluate(
    params: &ModelParams,
    vocab: &Vocabulary,
    corpus: &[Vec<usize>],
    opts: &EvalOptions,
    samples: usize,
    max_len: usize,
) -> Result<EvalReport> {
    let (t, means) = corpus_totals(params, corpus, opts)?;
    let sentences: Vec<String> = sample_from_prior(params, samples, opts.seed, max_len)?
        .iter()
        .map(|s| decode(s, vocab))
        .collect();
    Ok(EvalReport {
        nll: t.per_sentence(t.rec_nll + t.kl),
        rec_nll: t.per_sentence(t.rec_nll),
        kl: t.per_sentence(t.kl),
        log_copula: t.per_sentence(t.log_copula),
        sum_log_marg: t.per_sentence(t.sum_log_marg),
        ppl: t.ppl(),
        active_units: active_units_from_means(&means, ACTIVE_THRESHOLD),
        distinct_ratio: distinct_ratio(&sentences),
        sentences_evaluated: t.sentences,
        tokens_evaluated: t.tokens,
        totals: t,
    })
}

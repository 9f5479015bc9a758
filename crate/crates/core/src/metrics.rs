//! CSV metric rows shared by training logs and evaluation reports.

use std::fmt::Write as _;

use crate::objective::LossBreakdown;

pub const HEADER: &str =
    "epoch,step,split,rec_nll,kl,log_copula,sum_log_marg,elbo_nll,ppl,anneal_w,lambda,grad_norm,wallclock_s";

pub const EVAL_HEADER: &str = "epoch,step,split,rec_nll,kl,log_copula,sum_log_marg,elbo_nll,ppl,anneal_w,lambda,grad_norm,wallclock_s,active_units,distinct_ratio";

/// Corpus-level sums of the loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Totals {
    pub rec_nll: f64,
    pub kl: f64,
    pub log_copula: f64,
    pub sum_log_marg: f64,
    pub sentences: usize,
    /// Target tokens (eos counted, bos and pad not).
    pub tokens: usize,
}

impl Totals {
    pub fn add(&mut self, b: &LossBreakdown, sentences: usize, tokens: usize) {
        self.rec_nll += b.rec_nll;
        self.kl += b.kl;
        self.log_copula += b.log_copula;
        self.sum_log_marg += b.sum_log_marginals;
        self.sentences += sentences;
        self.tokens += tokens;
    }

    pub fn per_sentence(&self, total: f64) -> f64 {
        if self.sentences == 0 {
            0.0
        } else {
            total / self.sentences as f64
        }
    }

    /// exp((rec + KL) / tokens).
    pub fn ppl(&self) -> f64 {
        if self.tokens == 0 {
            return f64::NAN;
        }
        ((self.rec_nll + self.kl) / self.tokens as f64).exp()
    }
}

/// One row of the metrics stream. Loss columns are per sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub step: u64,
    pub split: String,
    pub rec_nll: f64,
    pub kl: f64,
    pub log_copula: f64,
    pub sum_log_marg: f64,
    pub elbo_nll: f64,
    pub ppl: f64,
    pub anneal_w: f64,
    pub lambda: f64,
    pub grad_norm: f64,
    pub wallclock_s: f64,
}

impl MetricRow {
    pub fn from_totals(
        epoch: usize,
        step: u64,
        split: &str,
        t: &Totals,
        anneal_w: f64,
        lambda: f64,
        grad_norm: f64,
        wallclock_s: f64,
    ) -> Self {
        let rec = t.per_sentence(t.rec_nll);
        let kl = t.per_sentence(t.kl);
        MetricRow {
            epoch,
            step,
            split: split.to_string(),
            rec_nll: rec,
            kl,
            log_copula: t.per_sentence(t.log_copula),
            sum_log_marg: t.per_sentence(t.sum_log_marg),
            elbo_nll: rec + anneal_w * kl,
            ppl: t.ppl(),
            anneal_w,
            lambda,
            grad_norm,
            wallclock_s,
        }
    }

    /// elbo_nll − λ (log_copula + sum_log_marg), per sentence.
    pub fn modified_objective(&self) -> f64 {
        self.elbo_nll - self.lambda * (self.log_copula + self.sum_log_marg)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{},{}", self.epoch, self.step, self.split);
        for v in [
            self.rec_nll,
            self.kl,
            self.log_copula,
            self.sum_log_marg,
            self.elbo_nll,
            self.ppl,
            self.anneal_w,
            self.lambda,
            self.grad_norm,
            self.wallclock_s,
        ] {
            let _ = write!(s, ",{v}");
        }
        s
    }

    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() < 13 {
            return None;
        }
        let n = |i: usize| f[i].parse::<f64>().ok();
        Some(MetricRow {
            epoch: f[0].parse().ok()?,
            step: f[1].parse().ok()?,
            split: f[2].to_string(),
            rec_nll: n(3)?,
            kl: n(4)?,
            log_copula: n(5)?,
            sum_log_marg: n(6)?,
            elbo_nll: n(7)?,
            ppl: n(8)?,
            anneal_w: n(9)?,
            lambda: n(10)?,
            grad_norm: n(11)?,
            wallclock_s: n(12)?,
        })
    }
}

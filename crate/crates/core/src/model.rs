//! LSTM encoder/decoder with Gaussian inference heads and the copula branch.
//!
//! The encoder reads `bos … eos` and its final hidden state `h` feeds four
//! affine heads:
//!
//! ```text
//! μ      = BN(W_μ h)            (learned scale and shift)
//! logσ²  = W_v h + b_v
//! w      = max(ReLU(W₁ h + b₁), W_FLOOR)
//! a      = tanh(W₂ h + b₂)
//! ```
//!
//! z conditions the decoder twice: an affine map gives the initial hidden and
//! cell state, and z is appended to every input embedding.

use ndarray::{s, Array2, Axis};
use rand::distributions::Uniform;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Batch, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::grad::{BatchNormMode, Gradients, Record, Var};
use crate::lowrank::W_FLOOR;
use crate::objective::{LossBreakdown, ObjectiveMode};
use crate::rng::{self, Purpose};
use crate::special::HALF_LN_2PI;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Epoch key reserved for evaluation noise streams.
pub const EVAL_EPOCH: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub latent: usize,
    pub dropout: f64,
    /// One shared w per example instead of a d-vector.
    pub scalar_w: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab", self.vocab),
            ("embed_dim", self.embed),
            ("hidden_dim", self.hidden),
            ("latent_dim", self.latent),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Parameter tensors in declaration (and serialisation) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamId {
    Embedding,
    EncWx,
    EncWh,
    EncB,
    DecWx,
    DecWh,
    DecB,
    InitHW,
    InitHB,
    InitCW,
    InitCB,
    OutW,
    OutB,
    MuW,
    BnGamma,
    BnBeta,
    LogvarW,
    LogvarB,
    WHeadW,
    WHeadB,
    AHeadW,
    AHeadB,
}

impl ParamId {
    pub const ALL: [ParamId; 22] = [
        ParamId::Embedding,
        ParamId::EncWx,
        ParamId::EncWh,
        ParamId::EncB,
        ParamId::DecWx,
        ParamId::DecWh,
        ParamId::DecB,
        ParamId::InitHW,
        ParamId::InitHB,
        ParamId::InitCW,
        ParamId::InitCB,
        ParamId::OutW,
        ParamId::OutB,
        ParamId::MuW,
        ParamId::BnGamma,
        ParamId::BnBeta,
        ParamId::LogvarW,
        ParamId::LogvarB,
        ParamId::WHeadW,
        ParamId::WHeadB,
        ParamId::AHeadW,
        ParamId::AHeadB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::Embedding => "embedding",
            ParamId::EncWx => "enc_wx",
            ParamId::EncWh => "enc_wh",
            ParamId::EncB => "enc_b",
            ParamId::DecWx => "dec_wx",
            ParamId::DecWh => "dec_wh",
            ParamId::DecB => "dec_b",
            ParamId::InitHW => "init_h_w",
            ParamId::InitHB => "init_h_b",
            ParamId::InitCW => "init_c_w",
            ParamId::InitCB => "init_c_b",
            ParamId::OutW => "out_w",
            ParamId::OutB => "out_b",
            ParamId::MuW => "mu_w",
            ParamId::BnGamma => "bn_gamma",
            ParamId::BnBeta => "bn_beta",
            ParamId::LogvarW => "logvar_w",
            ParamId::LogvarB => "logvar_b",
            ParamId::WHeadW => "w_head_w",
            ParamId::WHeadB => "w_head_b",
            ParamId::AHeadW => "a_head_w",
            ParamId::AHeadB => "a_head_b",
        }
    }

    fn shape(self, c: &ModelConfig) -> (usize, usize) {
        let (v, e, h, d) = (c.vocab, c.embed, c.hidden, c.latent);
        let wd = if c.scalar_w { 1 } else { d };
        match self {
            ParamId::Embedding => (v, e),
            ParamId::EncWx => (e, 4 * h),
            ParamId::EncWh | ParamId::DecWh => (h, 4 * h),
            ParamId::EncB | ParamId::DecB => (1, 4 * h),
            ParamId::DecWx => (e + d, 4 * h),
            ParamId::InitHW | ParamId::InitCW => (d, h),
            ParamId::InitHB | ParamId::InitCB => (1, h),
            ParamId::OutW => (h, v),
            ParamId::OutB => (1, v),
            ParamId::MuW | ParamId::LogvarW | ParamId::AHeadW => (h, d),
            ParamId::BnGamma | ParamId::BnBeta | ParamId::LogvarB | ParamId::AHeadB => (1, d),
            ParamId::WHeadW => (h, wd),
            ParamId::WHeadB => (1, wd),
        }
    }
}

/// Trainable tensors plus the running statistics of the μ batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: Vec<Array2<f64>>,
    pub bn_mean: Vec<f64>,
    pub bn_var: Vec<f64>,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, Purpose::Init, 0, 0);
        let recurrent = Uniform::new_inclusive(-0.1, 0.1);
        let head_scale = 1.0 / (config.hidden as f64).sqrt();
        let head = Uniform::new_inclusive(-head_scale, head_scale);
        let tensors = ParamId::ALL
            .iter()
            .map(|&id| {
                let shape = id.shape(config);
                match id {
                    ParamId::BnGamma => Array2::ones(shape),
                    ParamId::EncB
                    | ParamId::DecB
                    | ParamId::InitHB
                    | ParamId::InitCB
                    | ParamId::OutB
                    | ParamId::BnBeta
                    | ParamId::LogvarB
                    | ParamId::WHeadB
                    | ParamId::AHeadB => Array2::zeros(shape),
                    ParamId::MuW | ParamId::LogvarW | ParamId::WHeadW | ParamId::AHeadW => {
                        Array2::from_shape_simple_fn(shape, || rng.sample(head))
                    }
                    _ => Array2::from_shape_simple_fn(shape, || rng.sample(recurrent)),
                }
            })
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            tensors,
            bn_mean: vec![0.0; config.latent],
            bn_var: vec![1.0; config.latent],
        })
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.tensors[id as usize]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.tensors[id as usize]
    }

    /// Checks every tensor against the configured shapes.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.tensors.len() != ParamId::ALL.len() {
            return Err(Error::shape("ModelParams", ParamId::ALL.len(), self.tensors.len()));
        }
        for (&id, t) in ParamId::ALL.iter().zip(&self.tensors) {
            let want = id.shape(&self.config);
            if t.dim() != want {
                return Err(Error::shape(id.name(), format!("{want:?}"), format!("{:?}", t.dim())));
            }
            if t.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("parameter {}", id.name())));
            }
        }
        let d = self.config.latent;
        if self.bn_mean.len() != d || self.bn_var.len() != d {
            return Err(Error::shape("batch norm running stats", d, self.bn_mean.len()));
        }
        Ok(())
    }

    /// Folds batch statistics into the running estimates (unbiased variance).
    pub fn update_running_stats(&mut self, mean: &[f64], var: &[f64], batch: usize) {
        let unbias = if batch > 1 { batch as f64 / (batch as f64 - 1.0) } else { 1.0 };
        for i in 0..self.bn_mean.len() {
            self.bn_mean[i] = (1.0 - BN_MOMENTUM) * self.bn_mean[i] + BN_MOMENTUM * mean[i];
            self.bn_var[i] = (1.0 - BN_MOMENTUM) * self.bn_var[i] + BN_MOMENTUM * var[i] * unbias;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Dropout on, batch norm on batch statistics.
    Train,
    /// Dropout off, batch norm on running statistics.
    Eval,
}

/// Inverted dropout: keep with probability 1 − rate and rescale.
pub fn dropout(x: &Array2<f64>, rate: f64, phase: Phase, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout must be in [0, 1), got {rate}")));
    }
    if phase == Phase::Eval || rate == 0.0 {
        return Ok(x.clone());
    }
    Ok(x * &dropout_mask(x.dim(), rate, rng))
}

fn dropout_mask(shape: (usize, usize), rate: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let keep = 1.0 - rate;
    Array2::from_shape_simple_fn(shape, || if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
}

/// z = μ + exp(½ logσ²) ⊙ ε.
pub fn reparam_z(mu: &[f64], logvar: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != logvar.len() || mu.len() != eps.len() {
        return Err(Error::shape("reparam_z", mu.len(), logvar.len().max(eps.len())));
    }
    Ok(mu
        .iter()
        .zip(logvar)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// Exogenous randomness for one batch.
#[derive(Debug, Clone)]
pub struct Noise {
    pub eps_z: Array2<f64>,
    pub eps_q: Array2<f64>,
    /// Masks over encoder and decoder input embeddings (time-major rows).
    pub enc_mask: Option<Array2<f64>>,
    pub dec_mask: Option<Array2<f64>>,
}

impl Noise {
    /// Draws from streams keyed by `(seed, purpose, epoch, batch)`.
    #[allow(clippy::too_many_arguments)]
    pub fn draw(
        config: &ModelConfig,
        batch: &Batch,
        phase: Phase,
        seed: u64,
        epoch: u64,
        index: u64,
        shared_noise: bool,
    ) -> Self {
        let (b, d) = (batch.size(), config.latent);
        let normal = |purpose| {
            let mut r = rng::stream(seed, purpose, epoch, index);
            Array2::from_shape_vec((b, d), rng::normals(&mut r, b * d)).expect("b×d")
        };
        let eps_z = normal(Purpose::LatentNoise);
        let eps_q = if shared_noise { eps_z.clone() } else { normal(Purpose::CopulaNoise) };
        let (enc_mask, dec_mask) = if phase == Phase::Train && config.dropout > 0.0 {
            let mut r = rng::stream(seed, Purpose::Dropout, epoch, index);
            let t = batch.width;
            let enc = dropout_mask((t * b, config.embed), config.dropout, &mut r);
            let dec = dropout_mask((t.saturating_sub(1) * b, config.embed), config.dropout, &mut r);
            (Some(enc), Some(dec))
        } else {
            (None, None)
        };
        Noise {
            eps_z,
            eps_q,
            enc_mask,
            dec_mask,
        }
    }

    /// Evaluation noise: one stream per corpus position, so totals do not
    /// depend on how the corpus is batched. No dropout.
    pub fn per_example(config: &ModelConfig, batch: &Batch, seed: u64, shared_noise: bool) -> Self {
        let d = config.latent;
        let draw = |purpose| {
            let mut out = Array2::zeros((batch.size(), d));
            for (r, &i) in batch.indices.iter().enumerate() {
                let mut s = rng::stream(seed, purpose, EVAL_EPOCH, i as u64);
                out.row_mut(r).assign(&ndarray::Array1::from(rng::normals(&mut s, d)));
            }
            out
        };
        let eps_z = draw(Purpose::LatentNoise);
        let eps_q = if shared_noise { eps_z.clone() } else { draw(Purpose::CopulaNoise) };
        Noise::fixed(eps_z, eps_q)
    }

    pub fn fixed(eps_z: Array2<f64>, eps_q: Array2<f64>) -> Self {
        Noise {
            eps_z,
            eps_q,
            enc_mask: None,
            dec_mask: None,
        }
    }
}

/// Weights of the terms in the per-batch objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub mode: ObjectiveMode,
    pub lambda: f64,
    pub anneal_w: f64,
    /// Scale λ by the annealing weight as well.
    pub anneal_copula: bool,
}

impl LossWeights {
    /// λ actually applied; zero in mean-field mode.
    pub fn effective_lambda(&self) -> f64 {
        match self.mode {
            ObjectiveMode::MeanField => 0.0,
            _ if self.anneal_copula => self.lambda * self.anneal_w,
            _ => self.lambda,
        }
    }
}

/// A recorded forward pass over one batch.
#[derive(Debug)]
pub struct Pass {
    pub record: Record,
    pub params: Vec<Var>,
    pub loss: Var,
    pub rec: Var,
    pub kl: Var,
    pub log_copula: Var,
    pub sum_log_marg: Var,
    pub mu: Var,
    pub mu_bn: Option<Var>,
    pub logvar: Var,
    pub w: Var,
    pub a: Var,
    pub q: Var,
    pub z: Var,
    pub batch_size: usize,
    pub tokens: usize,
    pub weights: LossWeights,
}

/// Per-row values read off a pass.
fn column(record: &Record, v: Var) -> Vec<f64> {
    record.value(v).column(0).to_vec()
}

impl Pass {
    /// Batch totals (summed over sentences, not averaged).
    pub fn totals(&self) -> LossBreakdown {
        let r = &self.record;
        let rec = r.value(self.rec).sum();
        let kl = r.value(self.kl).sum();
        let lc = r.value(self.log_copula).sum();
        let slm = r.value(self.sum_log_marg).sum();
        let elbo = rec + self.weights.anneal_w * kl;
        LossBreakdown {
            rec_nll: rec,
            kl,
            log_copula: lc,
            sum_log_marginals: slm,
            elbo_nll: elbo,
            modified_objective: elbo - self.weights.effective_lambda() * (lc + slm),
        }
    }

    pub fn kl_rows(&self) -> Vec<f64> {
        column(&self.record, self.kl)
    }

    pub fn log_copula_rows(&self) -> Vec<f64> {
        column(&self.record, self.log_copula)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        self.record.value(v)
    }

    pub fn loss_value(&self) -> f64 {
        self.record.scalar(self.loss)
    }

    pub fn gradients(&self) -> Result<Vec<Array2<f64>>> {
        let mut g: Gradients = self.record.backward(self.loss, 1.0)?;
        Ok(self.params.iter().map(|&v| g.take(v)).collect())
    }

    /// Batch mean/variance of the pre-norm μ in train mode.
    pub fn bn_stats(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        self.mu_bn.and_then(|v| self.record.batch_norm_stats(v))
    }
}

struct Lstm {
    wh: Var,
    hidden: usize,
}

impl Lstm {
    /// One step; `xg` already holds the input and bias contributions.
    fn step(&self, rec: &mut Record, xg: Var, h: Var, c: Var) -> (Var, Var) {
        let n = self.hidden;
        let hh = rec.matmul(h, self.wh);
        let g = rec.add(xg, hh);
        let i = rec.slice_cols(g, 0, n);
        let i = rec.sigmoid(i);
        let f = rec.slice_cols(g, n, 2 * n);
        let f = rec.sigmoid(f);
        let u = rec.slice_cols(g, 2 * n, 3 * n);
        let u = rec.tanh(u);
        let o = rec.slice_cols(g, 3 * n, 4 * n);
        let o = rec.sigmoid(o);
        let fc = rec.mul(f, c);
        let iu = rec.mul(i, u);
        let c = rec.add(fc, iu);
        let tc = rec.tanh(c);
        let h = rec.mul(o, tc);
        (h, c)
    }
}

fn time_major(batch: &Batch, steps: usize, offset: usize) -> Vec<usize> {
    let mut ids = Vec::with_capacity(steps * batch.size());
    for t in 0..steps {
        for r in 0..batch.size() {
            ids.push(batch.tokens[r * batch.width + t + offset]);
        }
    }
    ids
}

/// Records the full objective for one batch.
pub fn forward(params: &ModelParams, batch: &Batch, noise: &Noise, phase: Phase, weights: LossWeights) -> Result<Pass> {
    let cfg = &params.config;
    let (b, d, hdim) = (batch.size(), cfg.latent, cfg.hidden);
    if b == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    if noise.eps_z.dim() != (b, d) || noise.eps_q.dim() != (b, d) {
        return Err(Error::shape("noise", format!("{b}x{d}"), format!("{:?}", noise.eps_z.dim())));
    }
    if let Some(&bad) = batch.tokens.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", cfg.vocab)));
    }
    let mut rec = Record::new();
    let p: Vec<Var> = params.tensors.iter().map(|t| rec.input(t.clone())).collect();
    let pv = |id: ParamId| p[id as usize];

    // encoder over all `width` positions; each row keeps the state at its own length
    let t_enc = batch.width;
    let mut enc_states = Vec::with_capacity(t_enc + 1);
    let lstm = Lstm {
        wh: pv(ParamId::EncWh),
        hidden: hdim,
    };
    if t_enc > 0 {
        let emb = rec.gather(pv(ParamId::Embedding), time_major(batch, t_enc, 0));
        let emb = match &noise.enc_mask {
            Some(m) => {
                let m = rec.constant(m.clone());
                rec.mul(emb, m)
            }
            None => emb,
        };
        let xg = rec.matmul(emb, pv(ParamId::EncWx));
        let xg = rec.add(xg, pv(ParamId::EncB));
        let mut h = rec.constant(Array2::zeros((b, hdim)));
        let mut c = h;
        for t in 0..t_enc {
            let x = rec.slice_rows(xg, t * b, (t + 1) * b);
            (h, c) = lstm.step(&mut rec, x, h, c);
            enc_states.push(h);
        }
    }
    enc_states.push(rec.constant(Array2::zeros((b, hdim))));
    let all = rec.concat_rows(&enc_states);
    let pick: Vec<usize> = batch
        .lengths
        .iter()
        .enumerate()
        .map(|(r, &len)| if len == 0 { t_enc * b + r } else { (len - 1) * b + r })
        .collect();
    let h = rec.gather(all, pick);

    // inference heads
    let mu_pre = rec.matmul(h, pv(ParamId::MuW));
    let bn_mode = match phase {
        Phase::Train => BatchNormMode::Train { eps: BN_EPS },
        Phase::Eval => BatchNormMode::Eval {
            mean: params.bn_mean.clone(),
            var: params.bn_var.clone(),
            eps: BN_EPS,
        },
    };
    let mu = rec.batch_norm(mu_pre, pv(ParamId::BnGamma), pv(ParamId::BnBeta), bn_mode);
    let mu_bn = (phase == Phase::Train).then_some(mu);
    let lv = rec.matmul(h, pv(ParamId::LogvarW));
    let logvar = rec.add(lv, pv(ParamId::LogvarB));
    let wp = rec.matmul(h, pv(ParamId::WHeadW));
    let wp = rec.add(wp, pv(ParamId::WHeadB));
    let mut w = rec.relu_floor(wp, W_FLOOR);
    if cfg.scalar_w {
        let ones = rec.constant(Array2::ones((b, d)));
        w = rec.mul(w, ones);
    }
    let ap = rec.matmul(h, pv(ParamId::AHeadW));
    let ap = rec.add(ap, pv(ParamId::AHeadB));
    let a = rec.tanh(ap);

    let eps_z = rec.constant(noise.eps_z.clone());
    let eps_q = rec.constant(noise.eps_q.clone());
    let a2 = rec.mul(a, a);
    let diag = rec.add(w, a2);
    let chol = rec.chol_rank1(w, a);
    let log_diag = rec.log(diag);

    let (z, q, kl, sum_log_marg) = if weights.mode == ObjectiveMode::FullCov {
        // z = μ + Lε, marginal variances Σ_ii
        let q = rec.lower_matvec(chol, eps_z);
        let z = rec.add(mu, q);
        let tr = rec.sum_cols(diag);
        let mu2 = rec.mul(mu, mu);
        let mu2 = rec.sum_cols(mu2);
        let ld = rec.log_det(w, a);
        let k = rec.add(tr, mu2);
        let k = rec.sub(k, ld);
        let k = rec.offset(k, -(d as f64));
        let kl = rec.scale(k, 0.5);
        let q2 = rec.mul(q, q);
        let qd = rec.div(q2, diag);
        let t = rec.add(log_diag, qd);
        let t = rec.sum_cols(t);
        let t = rec.scale(t, -0.5);
        let slm = rec.offset(t, -(d as f64) * HALF_LN_2PI);
        (z, q, kl, slm)
    } else {
        let half = rec.scale(logvar, 0.5);
        let sigma = rec.exp(half);
        let se = rec.mul(sigma, eps_z);
        let z = rec.add(mu, se);
        let q = rec.lower_matvec(chol, eps_q);
        // −½ Σ (1 + lv − μ² − e^lv)
        let mu2 = rec.mul(mu, mu);
        let ev = rec.exp(logvar);
        let k = rec.sub(logvar, mu2);
        let k = rec.sub(k, ev);
        let k = rec.sum_cols(k);
        let k = rec.offset(k, d as f64);
        let kl = rec.scale(k, -0.5);
        // Σ log N(z_i; μ_i, σ_i) with (z − μ)/σ = ε
        let e2 = noise.eps_z.mapv(|e| e * e).sum_axis(Axis(1));
        let e2 = rec.constant(e2.insert_axis(Axis(1)));
        let lvs = rec.sum_cols(logvar);
        let t = rec.add(lvs, e2);
        let t = rec.scale(t, -0.5);
        let slm = rec.offset(t, -(d as f64) * HALF_LN_2PI);
        (z, q, kl, slm)
    };

    // log c_Σ(q) = ½Σ log Σ_ii − ½ log|Σ| + ½(qᵀD⁻¹q − qᵀΣ⁻¹q)
    let ld = rec.log_det(w, a);
    let q2 = rec.mul(q, q);
    let qd = rec.div(q2, diag);
    let t = rec.add(log_diag, qd);
    let t = rec.sum_cols(t);
    let t = rec.sub(t, ld);
    let iq = rec.inv_quad(w, a, q);
    let t = rec.sub(t, iq);
    let log_copula = rec.scale(t, 0.5);

    // decoder, teacher forced
    let t_dec = batch.width.saturating_sub(1);
    let h0 = rec.matmul(z, pv(ParamId::InitHW));
    let mut hd = rec.add(h0, pv(ParamId::InitHB));
    let c0 = rec.matmul(z, pv(ParamId::InitCW));
    let mut cd = rec.add(c0, pv(ParamId::InitCB));
    let rec_rows = if t_dec > 0 {
        let wx = pv(ParamId::DecWx);
        let wx_e = rec.slice_rows(wx, 0, cfg.embed);
        let wx_z = rec.slice_rows(wx, cfg.embed, cfg.embed + d);
        let zg = rec.matmul(z, wx_z);
        let zg = rec.add(zg, pv(ParamId::DecB));
        let emb = rec.gather(pv(ParamId::Embedding), time_major(batch, t_dec, 0));
        let emb = match &noise.dec_mask {
            Some(m) => {
                let m = rec.constant(m.clone());
                rec.mul(emb, m)
            }
            None => emb,
        };
        let xg = rec.matmul(emb, wx_e);
        let dec = Lstm {
            wh: pv(ParamId::DecWh),
            hidden: hdim,
        };
        let mut outs = Vec::with_capacity(t_dec);
        for t in 0..t_dec {
            let x = rec.slice_rows(xg, t * b, (t + 1) * b);
            let x = rec.add(x, zg);
            (hd, cd) = dec.step(&mut rec, x, hd, cd);
            outs.push(hd);
        }
        let hs = rec.concat_rows(&outs);
        let logits = rec.matmul(hs, pv(ParamId::OutW));
        let logits = rec.add(logits, pv(ParamId::OutB));
        let targets = time_major(batch, t_dec, 1);
        let mut tw = Vec::with_capacity(targets.len());
        for t in 0..t_dec {
            for r in 0..b {
                tw.push(if t + 1 < batch.lengths[r] { 1.0 } else { 0.0 });
            }
        }
        let xent = rec.softmax_xent(logits, targets, tw);
        // back to one row per sentence: sum the t_dec blocks
        let mut per = rec.slice_rows(xent, 0, b);
        for t in 1..t_dec {
            let blk = rec.slice_rows(xent, t * b, (t + 1) * b);
            per = rec.add(per, blk);
        }
        per
    } else {
        rec.constant(Array2::zeros((b, 1)))
    };

    let rec_sum = rec.sum(rec_rows);
    let kl_sum = rec.sum(kl);
    let lc_sum = rec.sum(log_copula);
    let slm_sum = rec.sum(sum_log_marg);
    let kl_w = rec.scale(kl_sum, weights.anneal_w);
    let elbo = rec.add(rec_sum, kl_w);
    let reg = rec.add(lc_sum, slm_sum);
    let reg = rec.scale(reg, weights.effective_lambda());
    let total = rec.sub(elbo, reg);
    let loss = rec.scale(total, 1.0 / b as f64);
    rec.status()?;

    Ok(Pass {
        record: rec,
        params: p,
        loss,
        rec: rec_rows,
        kl,
        log_copula,
        sum_log_marg,
        mu,
        mu_bn,
        logvar,
        w,
        a,
        q,
        z,
        batch_size: b,
        tokens: batch.target_count(),
        weights,
    })
}

/// Posterior parameters for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorParams {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
    pub w: Vec<f64>,
    pub a: Vec<f64>,
}

fn affine(x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    x.dot(w) + b
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Plain LSTM cell update on already-summed gate pre-activations.
fn cell(g: &Array2<f64>, c: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let n = c.ncols();
    let i = g.slice(s![.., 0..n]).mapv(sigmoid);
    let f = g.slice(s![.., n..2 * n]).mapv(sigmoid);
    let u = g.slice(s![.., 2 * n..3 * n]).mapv(f64::tanh);
    let o = g.slice(s![.., 3 * n..4 * n]).mapv(sigmoid);
    let c = &f * c + &i * &u;
    let h = &o * &c.mapv(f64::tanh);
    (h, c)
}

impl ModelParams {
    /// Final encoder hidden state for each sequence (zeros for an empty one).
    /// Train mode applies input dropout from `rng`.
    pub fn encode(&self, seqs: &[Vec<usize>], phase: Phase, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
        let cfg = &self.config;
        let mut out = Array2::zeros((seqs.len(), cfg.hidden));
        for (r, seq) in seqs.iter().enumerate() {
            if let Some(&bad) = seq.iter().find(|&&t| t >= cfg.vocab) {
                return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", cfg.vocab)));
            }
            let emb = self.get(ParamId::Embedding).select(Axis(0), seq);
            let emb = dropout(&emb, cfg.dropout, phase, rng)?;
            let xg = affine(&emb, self.get(ParamId::EncWx), self.get(ParamId::EncB));
            let mut h = Array2::zeros((1, cfg.hidden));
            let mut c = Array2::zeros((1, cfg.hidden));
            for t in 0..seq.len() {
                let g = &xg.slice(s![t..t + 1, ..]) + &h.dot(self.get(ParamId::EncWh));
                (h, c) = cell(&g, &c);
            }
            out.row_mut(r).assign(&h.row(0));
        }
        Ok(out)
    }

    /// Heads applied to encoder states; train mode normalises μ by the batch.
    pub fn infer_posterior(&self, h: &Array2<f64>, phase: Phase) -> Result<Vec<PosteriorParams>> {
        let d = self.config.latent;
        if h.ncols() != self.config.hidden {
            return Err(Error::shape("infer_posterior", self.config.hidden, h.ncols()));
        }
        let pre = h.dot(self.get(ParamId::MuW));
        let (mean, var) = match phase {
            Phase::Train => {
                if h.nrows() < 2 {
                    return Err(Error::Config("batch norm in train mode needs batch size >= 2".into()));
                }
                (pre.mean_axis(Axis(0)).expect("rows").to_vec(), pre.var_axis(Axis(0), 0.0).to_vec())
            }
            Phase::Eval => (self.bn_mean.clone(), self.bn_var.clone()),
        };
        let (gamma, beta) = (self.get(ParamId::BnGamma), self.get(ParamId::BnBeta));
        let lv = affine(h, self.get(ParamId::LogvarW), self.get(ParamId::LogvarB));
        let wp = affine(h, self.get(ParamId::WHeadW), self.get(ParamId::WHeadB));
        let ap = affine(h, self.get(ParamId::AHeadW), self.get(ParamId::AHeadB));
        let mut out = Vec::with_capacity(h.nrows());
        for r in 0..h.nrows() {
            let mu: Vec<f64> = (0..d)
                .map(|i| (pre[[r, i]] - mean[i]) / (var[i] + BN_EPS).sqrt() * gamma[[0, i]] + beta[[0, i]])
                .collect();
            let w: Vec<f64> = (0..d)
                .map(|i| wp[[r, if self.config.scalar_w { 0 } else { i }]].max(0.0).max(W_FLOOR))
                .collect();
            let post = PosteriorParams {
                mu,
                logvar: lv.row(r).to_vec(),
                w,
                a: ap.row(r).mapv(f64::tanh).to_vec(),
            };
            if post.mu.iter().chain(&post.logvar).chain(&post.w).any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("posterior head output for row {r}")));
            }
            out.push(post);
        }
        Ok(out)
    }

    fn decoder_init(&self, z: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let e = self.config.embed;
        let wx = self.get(ParamId::DecWx);
        let h = affine(z, self.get(ParamId::InitHW), self.get(ParamId::InitHB));
        let c = affine(z, self.get(ParamId::InitCW), self.get(ParamId::InitCB));
        let zg = z.dot(&wx.slice(s![e.., ..])) + self.get(ParamId::DecB);
        (h, c, zg)
    }

    fn decoder_step(&self, ids: &[usize], h: &Array2<f64>, c: &Array2<f64>, zg: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let e = self.config.embed;
        let emb = self.get(ParamId::Embedding).select(Axis(0), ids);
        let g = emb.dot(&self.get(ParamId::DecWx).slice(s![..e, ..])) + h.dot(self.get(ParamId::DecWh)) + zg;
        cell(&g, c)
    }

    /// Teacher-forced negative log-likelihood (nats) of `tokens[1..]` given
    /// `tokens[..len-1]` and `z`.
    pub fn decode_nll(&self, z: &[f64], tokens: &[usize], phase: Phase, rng: &mut ChaCha8Rng) -> Result<f64> {
        let cfg = &self.config;
        if z.len() != cfg.latent {
            return Err(Error::shape("decode_nll", cfg.latent, z.len()));
        }
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("decode_nll: z".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", cfg.vocab)));
        }
        let z = Array2::from_shape_vec((1, cfg.latent), z.to_vec()).expect("row");
        let (mut h, mut c, zg) = self.decoder_init(&z);
        let mut total = 0.0;
        for t in 0..tokens.len().saturating_sub(1) {
            let emb = self.get(ParamId::Embedding).select(Axis(0), &[tokens[t]]);
            let emb = dropout(&emb, cfg.dropout, phase, rng)?;
            let g = emb.dot(&self.get(ParamId::DecWx).slice(s![..cfg.embed, ..]))
                + h.dot(self.get(ParamId::DecWh))
                + &zg;
            (h, c) = cell(&g, &c);
            let logits = affine(&h, self.get(ParamId::OutW), self.get(ParamId::OutB));
            let row = logits.row(0);
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = m + row.mapv(|x| (x - m).exp()).sum().ln();
            total += lse - row[tokens[t + 1]];
        }
        Ok(total)
    }

    /// Greedy decoding from each row of `z`. Output excludes bos, ends with
    /// eos when one was produced, and has at most `max_len` ids.
    pub fn greedy_decode(&self, z: &Array2<f64>, max_len: usize) -> Result<Vec<Vec<usize>>> {
        if z.ncols() != self.config.latent {
            return Err(Error::shape("greedy_decode", self.config.latent, z.ncols()));
        }
        let n = z.nrows();
        let (mut h, mut c, zg) = self.decoder_init(z);
        let mut prev = vec![BOS; n];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut done = vec![false; n];
        for _ in 0..max_len {
            if done.iter().all(|&x| x) {
                break;
            }
            (h, c) = self.decoder_step(&prev, &h, &c, &zg);
            let logits = affine(&h, self.get(ParamId::OutW), self.get(ParamId::OutB));
            for r in 0..n {
                if done[r] {
                    continue;
                }
                let row = logits.row(r);
                let mut best = EOS;
                for (k, &x) in row.iter().enumerate() {
                    if k != PAD && k != BOS && x > row[best] {
                        best = k;
                    }
                }
                out[r].push(best);
                prev[r] = best;
                done[r] = best == EOS;
            }
        }
        Ok(out)
    }
}

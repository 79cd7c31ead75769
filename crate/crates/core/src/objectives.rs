//! Variational objectives and their estimators.
//!
//! Every loss is a negated ELBO, minimized. All six methods share the
//! capacity-annealed KL term `|KL(q(z|x) ‖ p(z)) − C|`; they differ in the weight
//! of that term and in the method-specific penalty added to it:
//!
//! | method       | capacity weight | penalty                         |
//! |--------------|-----------------|---------------------------------|
//! | β-VAE        | β               | none                            |
//! | β-TCVAE      | 1               | (β − 1) · TC                    |
//! | Factor-VAE   | 1               | γ · density-ratio TC estimate   |
//! | Info-VAE     | 1               | λ · MMD²(q(z), p(z))            |
//! | DIP-VAE-I/II | 1               | covariance penalty              |

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{contract, dim_err, Error, Result};
use crate::nets::Discriminator;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    BetaTcVae,
    FactorVae,
    BetaVae,
    InfoVae,
    DipVaeI,
    DipVaeII,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::BetaTcVae,
        Method::FactorVae,
        Method::BetaVae,
        Method::InfoVae,
        Method::DipVaeI,
        Method::DipVaeII,
    ];

    /// Identifier used in config files and on the command line.
    pub fn key(self) -> &'static str {
        match self {
            Method::BetaTcVae => "beta_tcvae",
            Method::FactorVae => "factor_vae",
            Method::BetaVae => "beta_vae",
            Method::InfoVae => "info_vae",
            Method::DipVaeI => "dip_vae_i",
            Method::DipVaeII => "dip_vae_ii",
        }
    }

    /// Name used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            Method::BetaTcVae => "beta-TCVAE",
            Method::FactorVae => "Factor-VAE",
            Method::BetaVae => "beta-VAE",
            Method::InfoVae => "Info-VAE",
            Method::DipVaeI => "DIP-VAE-I",
            Method::DipVaeII => "DIP-VAE-II",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.key() == s || m.label() == s).ok_or_else(|| {
            let keys: Vec<_> = Method::ALL.iter().map(|m| m.key()).collect();
            Error::Config(format!("unknown method {s:?}; expected one of {}", keys.join(", ")))
        })
    }
}

/// Method weights. Only the fields relevant to `method` are read.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MethodParams {
    pub method: Method,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub lambda_d: f64,
    pub lambda_od: f64,
}

impl MethodParams {
    pub fn defaults(method: Method) -> Self {
        Self { method, beta: 2.0, gamma: 2.0, lambda: 1000.0, lambda_d: 10.0, lambda_od: 1.0 }
    }

    /// β = 1, the unannealed VAE objective used for pre-training.
    pub fn plain_vae() -> Self {
        Self { beta: 1.0, ..Self::defaults(Method::BetaVae) }
    }
}

/// Linear ramp of the KL target from 0 to `max` nats over `ramp_steps` iterations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CapacitySchedule {
    pub max: f64,
    pub ramp_steps: u64,
}

impl Default for CapacitySchedule {
    fn default() -> Self {
        Self { max: 25.0, ramp_steps: 2000 }
    }
}

impl CapacitySchedule {
    pub fn at(&self, iter: u64) -> f64 {
        if self.ramp_steps == 0 || iter >= self.ramp_steps {
            return self.max;
        }
        (iter as f64 / self.ramp_steps as f64) * self.max
    }
}

/// Scalar parts of one batch's objective, in nats per sample. `total` equals
/// [`LossBreakdown::combine`] of the other fields bit for bit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub capacity: f64,
    pub capacity_weight: f64,
    pub capacity_distance: f64,
    pub penalty: f64,
}

impl LossBreakdown {
    pub fn combine(recon: f64, capacity_weight: f64, capacity_distance: f64, penalty: f64) -> f64 {
        recon + capacity_weight * capacity_distance + penalty
    }

    fn from_parts(recon: f64, kl: f64, capacity: f64, capacity_weight: f64, penalty: f64) -> Self {
        let capacity_distance = capacity_distance(kl, capacity);
        Self {
            total: Self::combine(recon, capacity_weight, capacity_distance, penalty),
            recon,
            kl,
            capacity,
            capacity_weight,
            capacity_distance,
            penalty,
        }
    }
}

pub fn capacity_distance(kl: f64, capacity: f64) -> f64 {
    (kl - capacity).abs()
}

pub fn beta_tcvae_loss(recon: f64, kl: f64, tc: f64, beta: f64, capacity: f64) -> LossBreakdown {
    LossBreakdown::from_parts(recon, kl, capacity, 1.0, (beta - 1.0) * tc)
}

pub fn beta_vae_loss(recon: f64, kl: f64, beta: f64, capacity: f64) -> LossBreakdown {
    LossBreakdown::from_parts(recon, kl, capacity, beta, 0.0)
}

pub fn factor_vae_loss(recon: f64, kl: f64, capacity: f64, gamma: f64, density_ratio: f64) -> LossBreakdown {
    LossBreakdown::from_parts(recon, kl, capacity, 1.0, gamma * density_ratio)
}

pub fn info_vae_loss(recon: f64, kl: f64, capacity: f64, lambda: f64, mmd2: f64) -> LossBreakdown {
    LossBreakdown::from_parts(recon, kl, capacity, 1.0, lambda * mmd2)
}

pub fn dip_vae_loss(recon: f64, kl: f64, capacity: f64, dip_penalty: f64) -> LossBreakdown {
    LossBreakdown::from_parts(recon, kl, capacity, 1.0, dip_penalty)
}

/// Diagonal-Gaussian posterior parameters for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Tensor,
    pub logvar: Tensor,
}

impl GaussianPosterior {
    pub fn new(mu: Tensor, logvar: Tensor) -> Result<Self> {
        if mu.shape().len() != 2 || mu.shape() != logvar.shape() {
            return dim_err(format!("posterior mu {:?} and logvar {:?} must be equal N×d", mu.shape(), logvar.shape()));
        }
        if !mu.is_finite() || !logvar.is_finite() {
            return Err(Error::Domain("posterior parameters must be finite".into()));
        }
        Ok(Self { mu, logvar })
    }

    pub fn batch_size(&self) -> usize {
        self.mu.shape()[0]
    }

    pub fn latent_size(&self) -> usize {
        self.mu.shape()[1]
    }

    /// Closed-form KL to N(0, I) per sample and dimension, row-major N×d.
    pub fn kl_terms(&self) -> Vec<f64> {
        self.mu
            .data()
            .iter()
            .zip(self.logvar.data())
            .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
            .collect()
    }

    pub fn kl_per_sample(&self) -> Vec<f64> {
        self.kl_terms().chunks(self.latent_size()).map(|r| r.iter().sum()).collect()
    }

    /// Reparameterized draw `μ + σ ⊙ noise`.
    pub fn sample(&self, noise: &Tensor) -> Result<Tensor> {
        if noise.shape() != self.mu.shape() {
            return dim_err(format!("noise {:?} vs posterior {:?}", noise.shape(), self.mu.shape()));
        }
        let data = self
            .mu
            .data()
            .iter()
            .zip(self.logvar.data())
            .zip(noise.data())
            .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
            .collect();
        Tensor::new(self.mu.shape().to_vec(), data)
    }

    /// Batch-mean KL of each latent dimension.
    pub fn kl_per_dim(&self) -> Vec<f64> {
        let d = self.latent_size();
        let mut out = vec![0.0; d];
        for row in self.kl_terms().chunks(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let n = self.batch_size() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }
}

/// `z = μ + exp(logvar / 2) ⊙ noise`.
pub fn reparameterize(tape: &mut Tape, mu: Var, logvar: Var, noise: &Tensor) -> Result<Var> {
    if tape.shape(mu) != noise.shape() || tape.shape(logvar) != noise.shape() {
        return dim_err(format!(
            "reparameterize: mu {:?}, logvar {:?}, noise {:?}",
            tape.shape(mu),
            tape.shape(logvar),
            noise.shape()
        ));
    }
    let half = tape.scale(logvar, 0.5);
    let std = tape.exp(half);
    let eps = tape.constant(noise.clone());
    let spread = tape.mul(std, eps)?;
    tape.add(mu, spread)
}

/// Bernoulli negative log-likelihood of `target` under `sigmoid(logits)`,
/// summed over pixels and averaged over the batch.
pub fn recon_loss(tape: &mut Tape, logits: Var, target: &Tensor) -> Result<Var> {
    if tape.shape(logits) != target.shape() {
        return dim_err(format!("recon: logits {:?} vs target {:?}", tape.shape(logits), target.shape()));
    }
    if let Some(t) = target.data().iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Domain(format!("reconstruction target {t} outside [0, 1]")));
    }
    // −[t ln σ(l) + (1 − t) ln(1 − σ(l))] = softplus(l) − t·l
    let n = target.shape()[0] as f64;
    let sp = tape.softplus(logits);
    let t = tape.constant(target.clone());
    let tl = tape.mul(t, logits)?;
    let nll = tape.sub(sp, tl)?;
    let total = tape.sum_all(nll);
    Ok(tape.scale(total, 1.0 / n))
}

/// Closed-form `KL(q(z|x) ‖ N(0, I))` per sample, shape (N).
pub fn kl_per_sample(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let m2 = tape.square(mu);
    let var = tape.exp(logvar);
    let s = tape.add(m2, var)?;
    let s = tape.sub(s, logvar)?;
    let s = tape.add_scalar(s, -1.0);
    let s = tape.sum(s, &[1])?;
    Ok(tape.scale(s, 0.5))
}

/// How the minibatch density estimates of the aggregate posterior are normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TcNormalization {
    /// `ln q(z) ≈ logsumexp_j ln q(z|x_j) − ln N`: the batch mixture density, a
    /// consistent estimate whose value is 0 for factorized aggregates.
    Batch,
    /// Divides by `N·M` for dataset size `M`, as in the reference minibatch
    /// weighted sampler. Gradients match [`TcNormalization::Batch`]; the value
    /// is shifted by exactly `(d − 1)·ln M`.
    BatchTimesDataset(usize),
}

/// Minibatch-weighted estimate of `KL(q(z) ‖ ∏_j q(z_j))` from samples `z`
/// (N×d) of the posteriors `(mu, logvar)` (N×d).
pub fn total_correlation(tape: &mut Tape, z: Var, mu: Var, logvar: Var, norm: TcNormalization) -> Result<Var> {
    let n = tape.shape(z)[0];
    if n < 2 {
        return contract("total correlation needs a batch of at least 2");
    }
    let log_norm = match norm {
        TcNormalization::Batch => (n as f64).ln(),
        TcNormalization::BatchTimesDataset(m) => ((n * m) as f64).ln(),
    };
    let log_qzx = tape.pairwise_gaussian_log_density(z, mu, logvar)?; // N×N×d
    let joint = tape.sum(log_qzx, &[2])?;
    let joint = tape.logsumexp(joint, 1)?;
    let log_qz = tape.add_scalar(joint, -log_norm);
    let marg = tape.logsumexp(log_qzx, 1)?; // N×d
    let marg = tape.add_scalar(marg, -log_norm);
    let log_prod = tape.sum(marg, &[1])?;
    let diff = tape.sub(log_qz, log_prod)?;
    Ok(tape.mean_all(diff))
}

/// Shuffles every latent column independently across the batch.
pub fn permute_dims<R: Rng + ?Sized>(z: &Tensor, rng: &mut R) -> Result<Tensor> {
    if z.shape().len() != 2 {
        return dim_err(format!("permute_dims expects N×d, got {:?}", z.shape()));
    }
    let (n, d) = (z.shape()[0], z.shape()[1]);
    if n < 2 {
        return contract("permute_dims needs at least 2 samples");
    }
    let mut out = z.clone();
    let mut order: Vec<usize> = (0..n).collect();
    for k in 0..d {
        order.shuffle(rng);
        for (i, &src) in order.iter().enumerate() {
            out.data_mut()[i * d + k] = z.data()[src * d + k];
        }
    }
    Ok(out)
}

/// Size of each half when a Factor-VAE batch is split into a VAE half and a
/// discriminator half.
pub fn factor_vae_half(batch_size: usize) -> Result<usize> {
    if batch_size < 4 || batch_size % 2 != 0 {
        return contract(format!("Factor-VAE needs an even batch of at least 4, got {batch_size}"));
    }
    Ok(batch_size / 2)
}

fn column_contrast(tape: &mut Tape, logits: Var, weights: [f64; 2]) -> Result<Var> {
    if tape.shape(logits).len() != 2 || tape.shape(logits)[1] != 2 {
        return dim_err(format!("expected N×2 discriminator logits, got {:?}", tape.shape(logits)));
    }
    let w = tape.constant(Tensor::new(vec![2, 1], weights.to_vec())?);
    tape.matmul(logits, w)
}

/// Density-ratio TC estimate `mean(logit_real − logit_permuted)`.
pub fn density_ratio(tape: &mut Tape, logits: Var) -> Result<Var> {
    let d = column_contrast(tape, logits, [1.0, -1.0])?;
    Ok(tape.mean_all(d))
}

/// Cross-entropy of the discriminator: real samples are class 0, permuted
/// samples class 1, averaged over both halves.
pub fn discriminator_loss(tape: &mut Tape, logits_real: Var, logits_perm: Var) -> Result<Var> {
    let mut ce = |logits: Var, class: usize| -> Result<Var> {
        let lse = tape.logsumexp(logits, 1)?;
        let mut w = [0.0; 2];
        w[class] = 1.0;
        let picked = column_contrast(tape, logits, w)?;
        let picked = tape.reshape(picked, &[tape.shape(lse)[0]])?;
        let nll = tape.sub(lse, picked)?;
        Ok(tape.mean_all(nll))
    };
    let real = ce(logits_real, 0)?;
    let perm = ce(logits_perm, 1)?;
    let s = tape.add(real, perm)?;
    Ok(tape.scale(s, 0.5))
}

/// Mixture of RBF kernels `k(x, y) = Σ_s w_s exp(−‖x − y‖² / h_s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RbfMixture {
    pub bandwidths: Vec<f64>,
}

impl RbfMixture {
    /// Bandwidths {1, 2, 4, 8, 16}·2d with equal weights.
    pub fn multiscale(latent_size: usize) -> Self {
        let base = 2.0 * latent_size as f64;
        Self { bandwidths: [1.0, 2.0, 4.0, 8.0, 16.0].iter().map(|s| s * base).collect() }
    }

    pub fn single(bandwidth: f64) -> Self {
        Self { bandwidths: vec![bandwidth] }
    }

    fn mean_kernel(&self, tape: &mut Tape, sq_dist: Var) -> Var {
        let w = 1.0 / self.bandwidths.len() as f64;
        let mut acc: Option<Var> = None;
        for &h in &self.bandwidths {
            let e = tape.scale(sq_dist, -1.0 / h);
            let k = tape.exp(e);
            let m = tape.mean_all(k);
            let m = tape.scale(m, w);
            acc = Some(match acc {
                None => m,
                Some(a) => tape.add(a, m).expect("scalars"),
            });
        }
        acc.expect("at least one bandwidth")
    }
}

/// Biased (V-statistic) MMD² between sample sets `x` and `y`.
pub fn mmd2(tape: &mut Tape, x: Var, y: Var, kernel: &RbfMixture) -> Result<Var> {
    if tape.shape(x) != tape.shape(y) {
        return dim_err(format!("mmd: sample sets {:?} and {:?} differ", tape.shape(x), tape.shape(y)));
    }
    let dxx = tape.pairwise_sq_dist(x, x)?;
    let dyy = tape.pairwise_sq_dist(y, y)?;
    let dxy = tape.pairwise_sq_dist(x, y)?;
    let kxx = kernel.mean_kernel(tape, dxx);
    let kyy = kernel.mean_kernel(tape, dyy);
    let kxy = kernel.mean_kernel(tape, dxy);
    let s = tape.add(kxx, kyy)?;
    let cross = tape.scale(kxy, 2.0);
    tape.sub(s, cross)
}

/// `λ · MMD²(z, z_prior)` with the multi-scale kernel.
pub fn info_vae_mmd(tape: &mut Tape, z: Var, z_prior: &Tensor, lambda: f64) -> Result<Var> {
    let d = tape.shape(z).get(1).copied().unwrap_or(1);
    let p = tape.constant(z_prior.clone());
    let m = mmd2(tape, z, p, &RbfMixture::multiscale(d))?;
    Ok(tape.scale(m, lambda))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DipVariant {
    I,
    II,
}

/// The matrix DIP regularizes: `Cov(μ)` (I) or `Cov(μ) + diag(mean σ²)` (II).
/// Covariances use the 1/N normalization.
pub fn dip_covariance(tape: &mut Tape, mu: Var, logvar: Var, variant: DipVariant) -> Result<Var> {
    let (n, d) = (tape.shape(mu)[0], tape.shape(mu)[1]);
    if n < 2 {
        return contract("DIP covariance needs at least 2 samples");
    }
    let mean = tape.mean(mu, &[0])?;
    let mean = tape.reshape(mean, &[1, d])?;
    let ones_n = tape.constant(Tensor::ones(&[n, 1]));
    let spread = tape.matmul(ones_n, mean)?;
    let centered = tape.sub(mu, spread)?;
    let ct = tape.transpose(centered)?;
    let cov = tape.matmul(ct, centered)?;
    let cov = tape.scale(cov, 1.0 / n as f64);
    match variant {
        DipVariant::I => Ok(cov),
        DipVariant::II => {
            let var = tape.exp(logvar);
            let mvar = tape.mean(var, &[0])?;
            let mvar = tape.reshape(mvar, &[1, d])?;
            let ones_d = tape.constant(Tensor::ones(&[d, 1]));
            let rows = tape.matmul(ones_d, mvar)?;
            let eye = tape.constant(Tensor::eye(d));
            let diag = tape.mul(rows, eye)?;
            tape.add(cov, diag)
        }
    }
}

/// `λ_od Σ_{i≠j} C_ij² + λ_d Σ_i (C_ii − 1)²` of the DIP covariance.
pub fn dip_penalty(tape: &mut Tape, mu: Var, logvar: Var, variant: DipVariant, lambda_d: f64, lambda_od: f64) -> Result<Var> {
    let cov = dip_covariance(tape, mu, logvar, variant)?;
    let d = tape.shape(cov)[0];
    let eye = Tensor::eye(d);
    let off_mask = tape.constant(eye.map(|x| 1.0 - x));
    let eye = tape.constant(eye);
    let off = tape.mul(cov, off_mask)?;
    let off = tape.square(off);
    let off = tape.sum_all(off);
    let diag = tape.mul(cov, eye)?;
    let diag = tape.sub(diag, eye)?;
    let diag = tape.square(diag);
    let diag = tape.sum_all(diag);
    let off = tape.scale(off, lambda_od);
    let diag = tape.scale(diag, lambda_d);
    tape.add(off, diag)
}

/// Graph nodes of one VAE forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
    pub logits: Var,
}

/// Method-specific inputs beyond the forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct PenaltyInputs<'a> {
    /// Factor-VAE: its weights enter the VAE loss frozen.
    pub discriminator: Option<&'a Discriminator>,
    /// Info-VAE: draws from N(0, I) matching `z`'s shape.
    pub prior_sample: Option<&'a Tensor>,
}

/// Builds the full objective of `params.method` on the tape and returns its
/// root together with the evaluated parts.
pub fn objective(
    tape: &mut Tape,
    params: &MethodParams,
    capacity: f64,
    fwd: &Forward,
    target: &Tensor,
    extra: PenaltyInputs<'_>,
) -> Result<(Var, LossBreakdown)> {
    let recon = recon_loss(tape, fwd.logits, target)?;
    let kl = kl_per_sample(tape, fwd.mu, fwd.logvar)?;
    let kl = tape.mean_all(kl);
    let (weight, penalty) = match params.method {
        Method::BetaVae => (params.beta, None),
        Method::BetaTcVae => {
            let tc = total_correlation(tape, fwd.z, fwd.mu, fwd.logvar, TcNormalization::Batch)?;
            (1.0, Some(tape.scale(tc, params.beta - 1.0)))
        }
        Method::FactorVae => {
            let disc = extra
                .discriminator
                .ok_or_else(|| Error::Contract("Factor-VAE objective needs a discriminator".into()))?;
            let logits = disc.forward(tape, fwd.z, true)?;
            let dr = density_ratio(tape, logits)?;
            (1.0, Some(tape.scale(dr, params.gamma)))
        }
        Method::InfoVae => {
            let prior = extra
                .prior_sample
                .ok_or_else(|| Error::Contract("Info-VAE objective needs prior samples".into()))?;
            (1.0, Some(info_vae_mmd(tape, fwd.z, prior, params.lambda)?))
        }
        Method::DipVaeI | Method::DipVaeII => {
            let variant = if params.method == Method::DipVaeI { DipVariant::I } else { DipVariant::II };
            (1.0, Some(dip_penalty(tape, fwd.mu, fwd.logvar, variant, params.lambda_d, params.lambda_od)?))
        }
    };
    let gap = tape.add_scalar(kl, -capacity);
    let dist = tape.abs(gap);
    let weighted = tape.scale(dist, weight);
    let mut total = tape.add(recon, weighted)?;
    if let Some(p) = penalty {
        total = tape.add(total, p)?;
    }
    let value = |v: Var| tape.value(v).item();
    let breakdown = LossBreakdown {
        total: value(total),
        recon: value(recon),
        kl: value(kl),
        capacity,
        capacity_weight: weight,
        capacity_distance: value(dist),
        penalty: penalty.map_or(0.0, value),
    };
    Ok((total, breakdown))
}

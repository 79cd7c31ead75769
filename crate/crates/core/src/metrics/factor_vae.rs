use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{column, variance};
use crate::dataset::{Batch, Sampler, ToyDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Source of representations for the voting metric.
pub trait LatentSampler {
    fn num_factors(&self) -> usize;
    /// Representations (n×d) of `n` uniformly drawn samples.
    fn sample(&mut self, n: usize) -> Result<Tensor>;
    /// Representations (n×d) of `n` samples sharing one random value of factor `k`.
    fn sample_fixed(&mut self, k: usize, n: usize) -> Result<Tensor>;
}

/// Draws batches from a dataset and maps them to representations with `represent`.
pub struct DatasetSampler<'a, F> {
    data: &'a ToyDataset,
    sampler: Sampler,
    represent: F,
}

impl<'a, F> DatasetSampler<'a, F>
where
    F: FnMut(&ToyDataset, &Batch) -> Result<Tensor>,
{
    pub fn new(data: &'a ToyDataset, seed: u64, represent: F) -> Self {
        Self { data, sampler: Sampler::new(seed), represent }
    }
}

impl<F> LatentSampler for DatasetSampler<'_, F>
where
    F: FnMut(&ToyDataset, &Batch) -> Result<Tensor>,
{
    fn num_factors(&self) -> usize {
        self.data.space().num_factors()
    }

    fn sample(&mut self, n: usize) -> Result<Tensor> {
        let b = self.sampler.sample_batch(self.data, n)?;
        (self.represent)(self.data, &b)
    }

    fn sample_fixed(&mut self, k: usize, n: usize) -> Result<Tensor> {
        let b = self.sampler.sample_fixed_factor(self.data, k, n)?;
        (self.represent)(self.data, &b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FactorVaeConfig {
    pub train_votes: usize,
    pub eval_votes: usize,
    pub batch_size: usize,
    /// Samples used for the global per-dimension scale.
    pub reference_size: usize,
    /// Dimensions whose reference std falls below this are ignored.
    pub collapse_threshold: f64,
    pub seed: u64,
}

impl Default for FactorVaeConfig {
    fn default() -> Self {
        Self { train_votes: 800, eval_votes: 200, batch_size: 64, reference_size: 4096, collapse_threshold: 1e-6, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorVaeScore {
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub active_dims: Vec<usize>,
}

/// Accuracy of the majority-vote classifier fitted on `table` (d×k vote
/// counts, row-major) against `(dim, factor)` votes. Ties go to the lowest factor.
pub fn majority_vote_accuracy(table: &[usize], d: usize, k: usize, votes: &[(usize, usize)]) -> Result<f64> {
    if table.len() != d * k {
        return Err(Error::Dimension(format!("vote table has {} entries, expected {d}×{k}", table.len())));
    }
    if votes.is_empty() {
        return Err(Error::Contract("no votes to score".into()));
    }
    let predict: Vec<usize> = (0..d)
        .map(|j| {
            let row = &table[j * k..(j + 1) * k];
            row.iter().enumerate().fold(0, |best, (f, &c)| if c > row[best] { f } else { best })
        })
        .collect();
    let mut hits = 0;
    for &(dim, factor) in votes {
        if dim >= d || factor >= k {
            return Err(Error::Domain(format!("vote ({dim}, {factor}) outside {d}×{k}")));
        }
        hits += usize::from(predict[dim] == factor);
    }
    Ok(hits as f64 / votes.len() as f64)
}

fn votes<S: LatentSampler>(
    sampler: &mut S,
    rng: &mut ChaCha8Rng,
    count: usize,
    cfg: &FactorVaeConfig,
    scale: &[f64],
    active: &[usize],
) -> Result<Vec<(usize, usize)>> {
    let k = sampler.num_factors();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let f = rng.random_range(0..k);
        let z = sampler.sample_fixed(f, cfg.batch_size)?;
        let best = active
            .iter()
            .map(|&j| (j, variance(&column(&z, j)) / (scale[j] * scale[j])))
            .fold((usize::MAX, f64::INFINITY), |acc, (j, v)| if v < acc.1 { (j, v) } else { acc });
        out.push((best.0, f));
    }
    Ok(out)
}

/// Majority-vote accuracy at predicting the fixed factor of a batch from its
/// lowest-variance latent after global rescaling.
pub fn factor_vae_metric<S: LatentSampler>(sampler: &mut S, cfg: &FactorVaeConfig) -> Result<FactorVaeScore> {
    if cfg.batch_size < 2 || cfg.reference_size < 2 || cfg.train_votes == 0 || cfg.eval_votes == 0 {
        return Err(Error::Config("factor-VAE metric needs batches ≥ 2 and at least one vote of each kind".into()));
    }
    let reference = sampler.sample(cfg.reference_size)?;
    if reference.shape().len() != 2 {
        return Err(Error::Dimension(format!("representation must be N×d, got {:?}", reference.shape())));
    }
    let d = reference.shape()[1];
    let scale: Vec<f64> = (0..d).map(|j| variance(&column(&reference, j)).sqrt()).collect();
    let active: Vec<usize> = (0..d).filter(|&j| scale[j] >= cfg.collapse_threshold).collect();
    if active.is_empty() {
        return Err(Error::Contract("every latent dimension has collapsed".into()));
    }
    let k = sampler.num_factors();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = votes(sampler, &mut rng, cfg.train_votes, cfg, &scale, &active)?;
    let eval = votes(sampler, &mut rng, cfg.eval_votes, cfg, &scale, &active)?;
    let mut table = vec![0usize; d * k];
    for &(j, f) in &train {
        table[j * k + f] += 1;
    }
    Ok(FactorVaeScore {
        accuracy: majority_vote_accuracy(&table, d, k, &eval)?,
        train_accuracy: majority_vote_accuracy(&table, d, k, &train)?,
        active_dims: active,
    })
}

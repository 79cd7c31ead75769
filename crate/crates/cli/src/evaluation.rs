use vaebench_core::dataset::{Batch, Sampler, ToyDataset};
use vaebench_core::metrics::{
    evaluate_all, DatasetSampler, DciConfig, DciScores, FactorMatrix, FactorVaeConfig, MetricScores,
};
use vaebench_core::nets::Vae;
use vaebench_core::objectives::GaussianPosterior;
use vaebench_core::Tensor;

use crate::config::RunConfig;
use crate::error::Result;

/// Images pushed through the encoder at once.
const ENCODE_CHUNK: usize = 256;

/// Records and factor labels of the fixed evaluation subset.
#[derive(Clone, Debug)]
pub struct EvalSubset {
    pub batch: Batch,
    pub factors: FactorMatrix,
}

impl EvalSubset {
    /// `size` records drawn with `seed`; the same seed always yields the same subset.
    pub fn draw(data: &ToyDataset, size: usize, seed: u64) -> Result<Self> {
        let batch = Sampler::new(seed).sample_batch(data, size)?;
        let factors = FactorMatrix::new(&batch.factors, data.space().cardinalities())?;
        Ok(Self { batch, factors })
    }
}

/// Posterior means and log-variances of `records`, encoded in chunks.
pub fn encode_records(vae: &Vae, data: &ToyDataset, records: &[usize]) -> Result<(Tensor, Tensor)> {
    Ok(encode(vae, data, records)?)
}

fn encode(vae: &Vae, data: &ToyDataset, records: &[usize]) -> vaebench_core::Result<(Tensor, Tensor)> {
    let d = vae.latent_size();
    let mut mu = Vec::with_capacity(records.len() * d);
    let mut lv = Vec::with_capacity(records.len() * d);
    for chunk in records.chunks(ENCODE_CHUNK) {
        let (m, l) = vae.encode_batch(&data.images(chunk)?)?;
        mu.extend_from_slice(m.data());
        lv.extend_from_slice(l.data());
    }
    let shape = vec![records.len(), d];
    Ok((Tensor::new(shape.clone(), mu)?, Tensor::new(shape, lv)?))
}

/// Scores of one evaluation, plus the DCI components not shown in tables.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub scores: MetricScores,
    pub dci: DciScores,
}

pub fn metric_configs(cfg: &RunConfig) -> (FactorVaeConfig, DciConfig) {
    let fv = FactorVaeConfig { seed: cfg.seed_eval, ..FactorVaeConfig::default() };
    let dci = DciConfig { seed: cfg.seed_eval, ..DciConfig::default() };
    (fv, dci)
}

/// All five metrics on the subset, with posterior means as representations.
pub fn evaluate(vae: &Vae, data: &ToyDataset, subset: &EvalSubset, cfg: &RunConfig) -> Result<Evaluation> {
    let (rep, _) = encode_records(vae, data, &subset.batch.records)?;
    let mut sampler = DatasetSampler::new(data, cfg.seed_eval, |d: &ToyDataset, b: &Batch| {
        Ok(encode(vae, d, &b.records)?.0)
    });
    let (fv, dci_cfg) = metric_configs(cfg);
    let (scores, dci) = evaluate_all(&rep, &subset.factors, &mut sampler, &fv, &dci_cfg)?;
    Ok(Evaluation { scores, dci })
}

/// Mean KL to the prior of each latent over the subset.
pub fn kl_per_dim(vae: &Vae, data: &ToyDataset, records: &[usize]) -> Result<Vec<f64>> {
    let (mu, lv) = encode_records(vae, data, records)?;
    Ok(GaussianPosterior::new(mu, lv)?.kl_per_dim())
}

/// Latents whose mean KL exceeds `threshold`, most informative first. Ties
/// keep index order.
pub fn non_ignored(kl: &[f64], threshold: f64) -> Vec<usize> {
    let mut dims: Vec<usize> = (0..kl.len()).filter(|&j| kl[j] > threshold).collect();
    dims.sort_by(|&a, &b| kl[b].total_cmp(&kl[a]).then(a.cmp(&b)));
    dims
}

pub fn detect_non_ignored(vae: &Vae, data: &ToyDataset, records: &[usize], threshold: f64) -> Result<Vec<usize>> {
    Ok(non_ignored(&kl_per_dim(vae, data, records)?, threshold))
}

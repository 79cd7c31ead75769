//! Disentanglement metrics over a representation matrix (N×d latent means) and
//! the matching ground-truth factor matrix (N×k discrete indices).

mod dci;
mod factor_vae;
mod info;
mod irs;
mod sap;
mod table;

pub use dci::{dci, dci_from_importance, DciConfig, DciScores};
pub use factor_vae::{
    factor_vae_metric, majority_vote_accuracy, DatasetSampler, FactorVaeConfig, FactorVaeScore, LatentSampler,
};
pub use info::{discretize, entropy, mig, mutual_info_matrix, Codes, DEFAULT_BINS};
pub use irs::{irs, irs_detail, IrsScores};
pub use sap::{sap, sap_matrix};
pub use table::{normalized_sum, MetricRow, MetricScores, MetricTable, METRIC_NAMES};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::FactorTuple;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ground-truth factor indices, row-major N×k.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FactorMatrix {
    n: usize,
    k: usize,
    values: Vec<usize>,
    cards: Vec<usize>,
}

impl FactorMatrix {
    pub fn new(rows: &[FactorTuple], cards: &[usize]) -> Result<Self> {
        if rows.is_empty() || cards.is_empty() {
            return Err(Error::Dimension("factor matrix needs at least one row and one factor".into()));
        }
        let k = cards.len();
        let mut values = Vec::with_capacity(rows.len() * k);
        for (i, t) in rows.iter().enumerate() {
            if t.0.len() != k {
                return Err(Error::Dimension(format!("row {i} has {} factors, expected {k}", t.0.len())));
            }
            for (j, (&v, &c)) in t.0.iter().zip(cards).enumerate() {
                if v >= c {
                    return Err(Error::Domain(format!("row {i} factor {j}: {v} out of range 0..{c}")));
                }
            }
            values.extend_from_slice(&t.0);
        }
        Ok(Self { n: rows.len(), k, values, cards: cards.to_vec() })
    }

    pub fn num_samples(&self) -> usize {
        self.n
    }

    pub fn num_factors(&self) -> usize {
        self.k
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cards
    }

    pub fn get(&self, i: usize, k: usize) -> usize {
        self.values[i * self.k + k]
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.values[i * self.k..(i + 1) * self.k]
    }

    pub fn column(&self, k: usize) -> Vec<usize> {
        (0..self.n).map(|i| self.get(i, k)).collect()
    }

    /// Rows reassigned by a random permutation, which breaks their link to the representation.
    pub fn shuffled<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..self.n).collect();
        order.shuffle(rng);
        let values = order.iter().flat_map(|&i| self.row(i).to_vec()).collect();
        Self { values, ..self.clone() }
    }
}

/// Checks a representation matrix against its factors and returns `(N, d)`.
pub(crate) fn check_inputs(rep: &Tensor, factors: &FactorMatrix) -> Result<(usize, usize)> {
    if rep.shape().len() != 2 {
        return Err(Error::Dimension(format!("representation must be N×d, got {:?}", rep.shape())));
    }
    let (n, d) = (rep.shape()[0], rep.shape()[1]);
    if n != factors.num_samples() {
        return Err(Error::Dimension(format!("{n} representations for {} factor rows", factors.num_samples())));
    }
    if n < 2 {
        return Err(Error::Contract("metrics need at least 2 samples".into()));
    }
    if !rep.is_finite() {
        return Err(Error::Domain("representation has non-finite entries".into()));
    }
    Ok((n, d))
}

pub(crate) fn column(rep: &Tensor, j: usize) -> Vec<f64> {
    let d = rep.shape()[1];
    rep.data().iter().skip(j).step_by(d).copied().collect()
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance.
pub(crate) fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// All five headline scores of one representation.
pub fn evaluate_all<S: LatentSampler>(
    rep: &Tensor,
    factors: &FactorMatrix,
    sampler: &mut S,
    fv: &FactorVaeConfig,
    dci_cfg: &DciConfig,
) -> Result<(MetricScores, DciScores)> {
    let d = dci(rep, factors, dci_cfg)?;
    let scores = MetricScores {
        dci: d.disentanglement,
        factor_vae: factor_vae_metric(sampler, fv)?.accuracy,
        sap: sap(rep, factors)?,
        mig: mig(rep, factors, DEFAULT_BINS)?,
        irs: irs(rep, factors)?,
    };
    Ok((scores, d))
}

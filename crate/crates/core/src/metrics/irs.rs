use std::collections::BTreeMap;

use super::{check_inputs, column, mean, variance, FactorMatrix};
use crate::error::Result;
use crate::tensor::Tensor;

/// Interventional robustness score.
///
/// For latent j and target factor k, each value v of k contributes the largest
/// gap between `E[z_j | k = v, rest = u]` over observed nuisance settings u and
/// `E[z_j | k = v]`, weighted by the frequency of v and normalized by the
/// largest absolute deviation of z_j. A latent's score is `1 −` that deviation
/// for its most robust factor. The aggregate weights latents by their variance.
pub fn irs(rep: &Tensor, factors: &FactorMatrix) -> Result<f64> {
    Ok(irs_detail(rep, factors)?.aggregate)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IrsScores {
    pub aggregate: f64,
    /// Per-latent score, `None` for constant latents.
    pub per_latent: Vec<Option<f64>>,
    /// Most robust factor of each latent.
    pub best_factor: Vec<Option<usize>>,
}

pub fn irs_detail(rep: &Tensor, factors: &FactorMatrix) -> Result<IrsScores> {
    let (n, d) = check_inputs(rep, factors)?;
    let k = factors.num_factors();

    // full factor tuple -> member rows; keys are ordered so sums are deterministic
    let mut groups: BTreeMap<&[usize], Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        groups.entry(factors.row(i)).or_default().push(i);
    }
    let groups: Vec<(&[usize], Vec<usize>)> = groups.into_iter().collect();

    let mut per_latent = vec![None; d];
    let mut best_factor = vec![None; d];
    let mut weighted_sum = 0.0;
    let mut total_var = 0.0;
    for j in 0..d {
        let z = column(rep, j);
        let mu = mean(&z);
        let max_dev = z.iter().map(|v| (v - mu).abs()).fold(0.0, f64::max);
        let var = variance(&z);
        if max_dev <= 0.0 || var <= 0.0 {
            continue;
        }
        let cell_means: Vec<f64> = groups.iter().map(|(_, rows)| rows.iter().map(|&i| z[i]).sum::<f64>() / rows.len() as f64).collect();

        let mut best = (f64::NEG_INFINITY, 0);
        for f in 0..k {
            let card = factors.cardinalities()[f];
            let mut sum = vec![0.0; card];
            let mut count = vec![0usize; card];
            for i in 0..n {
                let v = factors.get(i, f);
                sum[v] += z[i];
                count[v] += 1;
            }
            let cond: Vec<f64> = sum.iter().zip(&count).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect();
            let mut dev = vec![0.0_f64; card];
            for ((key, _), &m) in groups.iter().zip(&cell_means) {
                let v = key[f];
                dev[v] = dev[v].max((m - cond[v]).abs());
            }
            let weighted: f64 = dev.iter().zip(&count).map(|(dv, &c)| dv * c as f64 / n as f64).sum();
            let score = (1.0 - weighted / max_dev).clamp(0.0, 1.0);
            if score > best.0 {
                best = (score, f);
            }
        }
        per_latent[j] = Some(best.0);
        best_factor[j] = Some(best.1);
        weighted_sum += var * best.0;
        total_var += var;
    }
    let aggregate = if total_var > 0.0 { (weighted_sum / total_var).clamp(0.0, 1.0) } else { 0.0 };
    Ok(IrsScores { aggregate, per_latent, best_factor })
}

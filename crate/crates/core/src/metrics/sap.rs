use super::{check_inputs, column, mean, variance, FactorMatrix};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// R² of the 1-D least-squares fit of each factor on each latent, row-major d×k.
/// Latents with zero variance score 0.
pub fn sap_matrix(rep: &Tensor, factors: &FactorMatrix) -> Result<Vec<f64>> {
    let (_, d) = check_inputs(rep, factors)?;
    let k = factors.num_factors();
    let fcols: Vec<Vec<f64>> = (0..k).map(|f| factors.column(f).iter().map(|&v| v as f64).collect()).collect();
    for (f, c) in fcols.iter().enumerate() {
        if variance(c) <= 0.0 {
            return Err(Error::Contract(format!("factor {f} is constant in this sample")));
        }
    }
    let mut out = vec![0.0; d * k];
    for j in 0..d {
        let z = column(rep, j);
        let vz = variance(&z);
        if vz <= 0.0 {
            continue;
        }
        let mz = mean(&z);
        for (f, y) in fcols.iter().enumerate() {
            let my = mean(y);
            let cov = z.iter().zip(y).map(|(a, b)| (a - mz) * (b - my)).sum::<f64>() / z.len() as f64;
            out[j * k + f] = (cov * cov / (vz * variance(y))).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Separated attribute predictability: mean over factors of the gap between the
/// two best latent R² scores.
pub fn sap(rep: &Tensor, factors: &FactorMatrix) -> Result<f64> {
    let s = sap_matrix(rep, factors)?;
    let (d, k) = (rep.shape()[1], factors.num_factors());
    let mut total = 0.0;
    for f in 0..k {
        let mut col: Vec<f64> = (0..d).map(|j| s[j * k + f]).collect();
        col.sort_by(|a, b| b.total_cmp(a));
        total += col[0] - col.get(1).copied().unwrap_or(0.0);
    }
    Ok(total / k as f64)
}

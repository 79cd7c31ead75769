use super::{check_inputs, column, FactorMatrix};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BINS: usize = 20;

/// Per-dimension histogram codes, row-major N×d.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Codes {
    pub n: usize,
    pub d: usize,
    pub bins: usize,
    pub codes: Vec<usize>,
}

impl Codes {
    pub fn column(&self, j: usize) -> Vec<usize> {
        self.codes.iter().skip(j).step_by(self.d).copied().collect()
    }
}

/// Equal-width binning of each column between its own min and max.
pub fn discretize(rep: &Tensor, bins: usize) -> Result<Codes> {
    if bins < 2 {
        return Err(Error::Domain(format!("need at least 2 bins, got {bins}")));
    }
    if rep.shape().len() != 2 {
        return Err(Error::Dimension(format!("representation must be N×d, got {:?}", rep.shape())));
    }
    let (n, d) = (rep.shape()[0], rep.shape()[1]);
    let mut codes = vec![0; n * d];
    for j in 0..d {
        let col = column(rep, j);
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            continue;
        }
        for (i, x) in col.iter().enumerate() {
            let b = ((x - lo) / (hi - lo) * bins as f64).floor() as usize;
            codes[i * d + j] = b.min(bins - 1);
        }
    }
    Ok(Codes { n, d, bins, codes })
}

fn counts(xs: &[usize], size: usize) -> Vec<usize> {
    let mut c = vec![0; size];
    for &x in xs {
        c[x] += 1;
    }
    c
}

/// Plug-in entropy in nats of a discrete sample.
pub fn entropy(xs: &[usize], size: usize) -> f64 {
    let n = xs.len() as f64;
    counts(xs, size)
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn mutual_info(a: &[usize], na: usize, b: &[usize], nb: usize) -> f64 {
    let n = a.len() as f64;
    let mut joint = vec![0usize; na * nb];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * nb + y] += 1;
    }
    let (ca, cb) = (counts(a, na), counts(b, nb));
    let mut mi = 0.0;
    for x in 0..na {
        for y in 0..nb {
            let c = joint[x * nb + y];
            if c > 0 {
                let pxy = c as f64 / n;
                mi += pxy * (c as f64 * n / (ca[x] as f64 * cb[y] as f64)).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Plug-in MI in nats between every code column and every factor, row-major d×k.
pub fn mutual_info_matrix(codes: &Codes, factors: &FactorMatrix) -> Result<Vec<f64>> {
    if codes.n != factors.num_samples() {
        return Err(Error::Dimension(format!("{} codes for {} factor rows", codes.n, factors.num_samples())));
    }
    let k = factors.num_factors();
    let fcols: Vec<Vec<usize>> = (0..k).map(|f| factors.column(f)).collect();
    let mut out = Vec::with_capacity(codes.d * k);
    for j in 0..codes.d {
        let c = codes.column(j);
        for (f, fc) in fcols.iter().enumerate() {
            out.push(mutual_info(&c, codes.bins, fc, factors.cardinalities()[f]));
        }
    }
    Ok(out)
}

/// Mutual information gap: mean over factors of the normalized gap between the
/// two most informative latents.
pub fn mig(rep: &Tensor, factors: &FactorMatrix, bins: usize) -> Result<f64> {
    let (_, d) = check_inputs(rep, factors)?;
    let codes = discretize(rep, bins)?;
    let mi = mutual_info_matrix(&codes, factors)?;
    let k = factors.num_factors();
    let mut total = 0.0;
    for f in 0..k {
        let h = entropy(&factors.column(f), factors.cardinalities()[f]);
        if h <= 0.0 {
            return Err(Error::Contract(format!("factor {f} has zero entropy in this sample")));
        }
        let mut col: Vec<f64> = (0..d).map(|j| mi[j * k + f]).collect();
        col.sort_by(|a, b| b.total_cmp(a));
        let second = col.get(1).copied().unwrap_or(0.0);
        total += (col[0] - second) / h;
    }
    Ok((total / k as f64).clamp(0.0, 1.0))
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_inputs, column, mean, variance, FactorMatrix};
use crate::error::{Error, Result};
use crate::kernels::gemm;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DciConfig {
    /// L1 weight on probe coefficients, relative to the mean cross-entropy.
    pub l1: f64,
    /// L1 weight of the refit on the selected latents that measures informativeness.
    pub refit_l1: f64,
    pub refit_max_iter: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for DciConfig {
    fn default() -> Self {
        Self { l1: 0.05, refit_l1: 1e-3, refit_max_iter: 500, train_fraction: 0.8, seed: 0, max_iter: 1000, tol: 1e-5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DciScores {
    pub disentanglement: f64,
    pub completeness: f64,
    /// Mean held-out probe accuracy over factors.
    pub informativeness: f64,
    /// Row-major d×k importance matrix.
    pub importance: Vec<f64>,
}

fn normalized_entropy(weights: &[f64], base: usize) -> f64 {
    if base < 2 {
        return 0.0;
    }
    let total: f64 = weights.iter().sum();
    let h: f64 = weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| {
            let p = w / total;
            -p * p.ln()
        })
        .sum();
    h / (base as f64).ln()
}

/// Disentanglement and completeness of a d×k importance matrix. Rows or
/// columns with zero total importance carry zero weight.
pub fn dci_from_importance(importance: &[f64], d: usize, k: usize) -> Result<(f64, f64)> {
    if importance.len() != d * k {
        return Err(Error::Dimension(format!("importance has {} entries, expected {d}×{k}", importance.len())));
    }
    if importance.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Domain("importance entries must be finite and non-negative".into()));
    }
    let total: f64 = importance.iter().sum();
    if total <= 0.0 {
        return Ok((0.0, 0.0));
    }
    let mut dis = 0.0;
    for j in 0..d {
        let row = &importance[j * k..(j + 1) * k];
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            dis += s / total * (1.0 - normalized_entropy(row, k));
        }
    }
    let mut comp = 0.0;
    for f in 0..k {
        let col: Vec<f64> = (0..d).map(|j| importance[j * k + f]).collect();
        let s: f64 = col.iter().sum();
        if s > 0.0 {
            comp += s / total * (1.0 - normalized_entropy(&col, d));
        }
    }
    Ok((dis.clamp(0.0, 1.0), comp.clamp(0.0, 1.0)))
}

/// L1-regularized multinomial logistic regression fitted by FISTA with
/// adaptive restart. Returns class-major coefficients (c×d) and biases.
struct Probe {
    classes: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Probe {
    fn logits(&self, x: &[f64], n: usize, d: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
        let c = self.classes;
        let mut out = vec![0.0; n * c];
        for row in out.chunks_mut(c) {
            row.copy_from_slice(b);
        }
        gemm(n, d, c, x, false, w, true, 1.0, &mut out);
        out
    }

    /// Mean cross-entropy and the softmax residual `P − Y`.
    fn loss_and_residual(&self, x: &[f64], y: &[usize], d: usize, w: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
        let (n, c) = (y.len(), self.classes);
        let mut r = self.logits(x, n, d, w, b);
        let mut loss = 0.0;
        for (row, &label) in r.chunks_mut(c).zip(y) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + s.ln();
            loss += lse - row[label];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
            row[label] -= 1.0;
        }
        (loss / n as f64, r)
    }

    fn fit(x: &[f64], y: &[usize], d: usize, classes: usize, l1: f64, max_iter: usize, tol: f64) -> Self {
        let n = y.len();
        let mut probe = Self { classes, weights: vec![0.0; classes * d], bias: vec![0.0; classes] };
        // Softmax cross-entropy has curvature at most ½ per logit, so ½(λ_max(XᵀX/n) + 1)
        // bounds the gradient's Lipschitz constant including the bias column.
        let lip = 0.5 * (gram_max_eigen(x, n, d) + 1.0);
        let step = 1.0 / lip;
        let thresh = l1 * step;

        let (mut w, mut b) = (probe.weights.clone(), probe.bias.clone());
        let (mut yw, mut yb) = (w.clone(), b.clone());
        let mut t = 1.0_f64;
        for _ in 0..max_iter {
            let (_, r) = probe.loss_and_residual(x, y, d, &yw, &yb);
            let mut gw = vec![0.0; classes * d];
            gemm(classes, n, d, &r, true, x, false, 0.0, &mut gw);
            let mut nw = vec![0.0; classes * d];
            for i in 0..classes * d {
                let v = yw[i] - step * gw[i] / n as f64;
                nw[i] = v.signum() * (v.abs() - thresh).max(0.0);
            }
            let mut nb = yb.clone();
            for (cidx, nbv) in nb.iter_mut().enumerate() {
                let g: f64 = r.iter().skip(cidx).step_by(classes).sum::<f64>() / n as f64;
                *nbv -= step * g;
            }
            let delta = nw.iter().zip(&w).chain(nb.iter().zip(&b)).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
            // gradient-based adaptive restart: drop momentum once it points uphill
            let uphill: f64 = yw
                .iter()
                .zip(&nw)
                .zip(&w)
                .chain(yb.iter().zip(&nb).zip(&b))
                .map(|((yv, nv), ov)| (yv - nv) * (nv - ov))
                .sum();
            if uphill > 0.0 {
                t = 1.0;
            }
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let mom = (t - 1.0) / t_next;
            for i in 0..classes * d {
                yw[i] = nw[i] + mom * (nw[i] - w[i]);
            }
            for i in 0..classes {
                yb[i] = nb[i] + mom * (nb[i] - b[i]);
            }
            t = t_next;
            w = nw;
            b = nb;
            if delta < tol {
                break;
            }
        }
        probe.weights = w;
        probe.bias = b;
        probe
    }

    fn accuracy(&self, x: &[f64], y: &[usize], d: usize) -> f64 {
        let logits = self.logits(x, y.len(), d, &self.weights, &self.bias);
        let hits = logits
            .chunks(self.classes)
            .zip(y)
            .filter(|(row, &label)| {
                let best = row.iter().enumerate().fold(0, |bi, (i, v)| if *v > row[bi] { i } else { bi });
                best == label
            })
            .count();
        hits as f64 / y.len() as f64
    }
}

fn gram_max_eigen(x: &[f64], n: usize, d: usize) -> f64 {
    let mut g = vec![0.0; d * d];
    gemm(d, n, d, x, true, x, false, 0.0, &mut g);
    g.iter_mut().for_each(|v| *v /= n as f64);
    // Gershgorin bound: cheap, safe and tight enough for standardized features.
    (0..d).map(|i| (0..d).map(|j| g[i * d + j].abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Standardizes columns with statistics of `train` rows; constant columns become 0.
fn standardize(rep: &Tensor, train: &[usize], rows: &[usize]) -> Vec<f64> {
    let d = rep.shape()[1];
    let mut out = vec![0.0; rows.len() * d];
    for j in 0..d {
        let col = column(rep, j);
        let tr: Vec<f64> = train.iter().map(|&i| col[i]).collect();
        let (m, s) = (mean(&tr), variance(&tr).sqrt());
        for (r, &i) in rows.iter().enumerate() {
            out[r * d + j] = if s > 0.0 { (col[i] - m) / s } else { 0.0 };
        }
    }
    out
}

fn mask_columns(x: &[f64], d: usize, keep: &[bool]) -> Vec<f64> {
    x.iter().enumerate().map(|(i, &v)| if keep[i % d] { v } else { 0.0 }).collect()
}

/// DCI scores from L1-regularized linear probes, one per factor. Importance of
/// latent j for factor k is the mean absolute probe coefficient over classes.
/// Informativeness is the held-out accuracy of a lightly regularized refit on
/// the latents each probe selected.
pub fn dci(rep: &Tensor, factors: &FactorMatrix, cfg: &DciConfig) -> Result<DciScores> {
    let (n, d) = check_inputs(rep, factors)?;
    if !(0.0 < cfg.train_fraction && cfg.train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction {} must lie in (0, 1)", cfg.train_fraction)));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_train = ((n as f64 * cfg.train_fraction).round() as usize).clamp(1, n - 1);
    let (train, test) = order.split_at(n_train);
    let xtr = standardize(rep, train, train);
    let xte = standardize(rep, train, test);

    let k = factors.num_factors();
    let mut importance = vec![0.0; d * k];
    let mut acc = 0.0;
    for f in 0..k {
        let classes = factors.cardinalities()[f];
        let ytr: Vec<usize> = train.iter().map(|&i| factors.get(i, f)).collect();
        let yte: Vec<usize> = test.iter().map(|&i| factors.get(i, f)).collect();
        let probe = Probe::fit(&xtr, &ytr, d, classes, cfg.l1, cfg.max_iter, cfg.tol);
        for j in 0..d {
            importance[j * k + f] = (0..classes).map(|c| probe.weights[c * d + j].abs()).sum::<f64>() / classes as f64;
        }
        let keep: Vec<bool> = (0..d).map(|j| importance[j * k + f] > 0.0).collect();
        let refit = Probe::fit(&mask_columns(&xtr, d, &keep), &ytr, d, classes, cfg.refit_l1, cfg.refit_max_iter, cfg.tol);
        acc += refit.accuracy(&mask_columns(&xte, d, &keep), &yte, d);
    }
    let (disentanglement, completeness) = dci_from_importance(&importance, d, k)?;
    Ok(DciScores { disentanglement, completeness, informativeness: acc / k as f64, importance })
}

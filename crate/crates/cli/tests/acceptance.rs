//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines are always shown.
//! The process exits nonzero when any criterion fails, except for criterion 1
//! when it fails in exactly the documented way (see README).

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vaebench::schedule::PlateauScheduler;
use vaebench_core::dataset::{render, FactorSpace, FactorTuple, Sampler, ToyDataset};
use vaebench_core::gradcheck::{check_inputs, check_params, DEFAULT_STEP};
use vaebench_core::metrics::*;
use vaebench_core::nets::{Discriminator, DiscriminatorConfig, EncoderConfig, Vae};
use vaebench_core::objectives::*;
use vaebench_core::{Tape, Tensor, Var};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values in ±[0.1, 1.5], clear of the kinks of relu and abs.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..1.5);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

// ---------------------------------------------------------------- 1

const PUBLISHED: [(&str, [f64; 5], f64); 6] = [
    ("beta-TCVAE", [0.392, 0.458, 0.132, 0.203, 0.646], 4.706),
    ("Factor-VAE", [0.389, 0.449, 0.136, 0.203, 0.577], 4.611),
    ("beta-VAE", [0.373, 0.501, 0.135, 0.212, 0.517], 4.599),
    ("Info-VAE", [0.381, 0.523, 0.128, 0.210, 0.514], 4.591),
    ("DIP-VAE-I", [0.385, 0.587, 0.127, 0.188, 0.358], 4.351),
    ("DIP-VAE-II", [0.359, 0.584, 0.111, 0.163, 0.340], 4.023),
];

/// Returns the check and whether it failed in the documented way only.
fn normalized_sum_regression() -> (Check, bool) {
    let mut table = MetricTable::default();
    for (m, s, _) in PUBLISHED {
        table.push(m, MetricScores::from_array(s));
    }
    let sums = match table.normalized_sums() {
        Ok(s) => s,
        Err(e) => return (Err(e.to_string()), false),
    };
    let ranked: Vec<String> = table.ranked().unwrap().into_iter().map(|(r, _)| r.method).collect();
    let ranking_ok = ranked.iter().zip(PUBLISHED).all(|(a, b)| a == b.0);
    let misses: Vec<String> = PUBLISHED
        .iter()
        .zip(&sums)
        .filter(|(p, s)| (*s - p.2).abs() > 0.005)
        .map(|(p, s)| format!("{} {:.4} vs {} (off {:.4})", p.0, s, p.2, (s - p.2).abs()))
        .collect();
    let detail = format!(
        "sums [{}], ranking {}",
        sums.iter().map(|s| format!("{s:.4}")).collect::<Vec<_>>().join(", "),
        if ranking_ok { "matches" } else { "differs" }
    );
    if misses.is_empty() && ranking_ok {
        return (Ok(detail), false);
    }
    let documented = ranking_ok && misses.len() == 1 && misses[0].starts_with("DIP-VAE-I ");
    let note = if documented {
        "; known unattainable: the printed 3-decimal scores give this sum, the published one was computed from unrounded scores"
    } else {
        ""
    };
    (Err(format!("{detail}; outside ±0.005: {}{note}", misses.join("; "))), documented)
}

// ---------------------------------------------------------------- 2

/// Latents equal to factor indices, followed by pure-noise dims.
fn perfect_rep(factors: &[FactorTuple], noise: usize, sd: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let k = factors[0].0.len();
    let mut data = Vec::with_capacity(factors.len() * (k + noise));
    for t in factors {
        data.extend(t.0.iter().map(|&v| v as f64));
        data.extend((0..noise).map(|_| sd * rng.sample::<f64, _>(StandardNormal)));
    }
    Tensor::new(vec![factors.len(), k + noise], data).unwrap()
}

fn metrics_on_perfect_and_shuffled() -> Check {
    let (n, noise, sd) = (4096, 3, 0.1);
    let ds = ToyDataset::generate(FactorSpace::default(), 2, 2).map_err(|e| e.to_string())?;
    let batch = Sampler::new(7).sample_batch(&ds, n).map_err(|e| e.to_string())?;
    let fm = FactorMatrix::new(&batch.factors, ds.space().cardinalities()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let rep = perfect_rep(&batch.factors, noise, sd, &mut rng);
    let e = |x: vaebench_core::Error| x.to_string();

    let mig_p = mig(&rep, &fm, DEFAULT_BINS).map_err(e)?;
    let dci_p = dci(&rep, &fm, &DciConfig::default()).map_err(e)?.disentanglement;
    let sap_p = sap(&rep, &fm).map_err(e)?;
    let irs_p = irs(&rep, &fm).map_err(e)?;
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let mut perfect = DatasetSampler::new(&ds, 8, |_: &ToyDataset, b: &vaebench_core::dataset::Batch| {
        Ok(perfect_rep(&b.factors, noise, sd, &mut r))
    });
    let fv_p = factor_vae_metric(&mut perfect, &FactorVaeConfig::default()).map_err(e)?.accuracy;

    let shuffled = fm.shuffled(&mut rng);
    let mig_s = mig(&rep, &shuffled, DEFAULT_BINS).map_err(e)?;
    let dci_s = dci(&rep, &shuffled, &DciConfig::default()).map_err(e)?.disentanglement;
    let sap_s = sap(&rep, &shuffled).map_err(e)?;
    let irs_s = irs(&rep, &shuffled).map_err(e)?;
    // Representations of unrelated records: labels carry no information.
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let mut unrelated = DatasetSampler::new(&ds, 9, |d: &ToyDataset, b: &vaebench_core::dataset::Batch| {
        let other = Sampler::new(r.random()).sample_batch(d, b.len())?;
        Ok(perfect_rep(&other.factors, noise, sd, &mut r))
    });
    let fv_s = factor_vae_metric(&mut unrelated, &FactorVaeConfig::default()).map_err(e)?.accuracy;
    let chance = 1.0 / fm.num_factors() as f64;

    let detail = format!(
        "perfect MIG {mig_p:.3} DCI {dci_p:.3} FactorVAE {fv_p:.3} SAP {sap_p:.3} IRS {irs_p:.3}; \
         shuffled MIG {mig_s:.3} DCI {dci_s:.3} FactorVAE {fv_s:.3} SAP {sap_s:.3} IRS {irs_s:.3}"
    );
    ensure(
        mig_p >= 0.95 && dci_p >= 0.95 && fv_p == 1.0 && sap_p >= 0.9 && irs_p >= 0.95,
        || format!("perfect representation below threshold: {detail}"),
    )?;
    ensure(
        mig_s <= 0.1 && dci_s <= 0.1 && sap_s <= 0.1 && irs_s <= 0.1 && fv_s <= chance + 0.1,
        || format!("shuffled labels above threshold: {detail}"),
    )?;
    Ok(detail)
}

// ---------------------------------------------------------------- 3

const FD_TOL: f64 = 1e-4;

/// Fresh biases are exactly zero, which parks relu units fed only by padding
/// on their kink. Gradients are checked at a generic point instead.
fn jitter_biases(store: &mut vaebench_core::params::ParamStore, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut().filter(|p| p.name.ends_with(".bias")) {
        let shape = p.value.shape().to_vec();
        p.value = normal(&shape, rng).map(|v| 0.1 * v);
    }
}

/// Contracts `v` against fixed random weights so every output element matters.
fn probe(t: &mut Tape, v: Var, seed: u64) -> vaebench_core::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let w = normal(t.shape(v), &mut rng);
    let w = t.constant(w);
    let p = t.mul(v, w)?;
    Ok(t.sum_all(p))
}

fn layer_checks(seed: u64, worst: &mut BTreeMap<&'static str, f64>) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = |x: vaebench_core::Error| x.to_string();
    let mut record = |name: &'static str, errs: Vec<f64>| -> Result<(), String> {
        let m = errs.iter().cloned().fold(0.0, f64::max);
        let slot = worst.entry(name).or_insert(0.0);
        *slot = slot.max(m);
        ensure(m < FD_TOL, || format!("{name} seed {seed}: relative error {m:e}"))
    };

    let (x, w, b) = (normal(&[4, 5], &mut rng), normal(&[5, 3], &mut rng), normal(&[3], &mut rng));
    record("dense", check_inputs(&[x, w, b], DEFAULT_STEP, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        let y = t.add_bias(y, v[2])?;
        probe(t, y, seed)
    }).map_err(e)?)?;

    let (x, k, b) = (normal(&[2, 2, 6, 6], &mut rng), normal(&[3, 2, 3, 3], &mut rng), normal(&[3], &mut rng));
    record("conv2d", check_inputs(&[x, k, b], DEFAULT_STEP, |t, v| {
        let y = t.conv2d(v[0], v[1], 2, 1)?;
        let y = t.add_bias(y, v[2])?;
        probe(t, y, seed)
    }).map_err(e)?)?;

    let (x, k) = (normal(&[2, 3, 3, 3], &mut rng), normal(&[3, 2, 4, 4], &mut rng));
    record("deconv2d", check_inputs(&[x, k], DEFAULT_STEP, |t, v| {
        let y = t.deconv2d(v[0], v[1], 2, 1)?;
        probe(t, y, seed)
    }).map_err(e)?)?;

    let kinked = away_from_zero(&[3, 4], &mut rng);
    record("relu", check_inputs(std::slice::from_ref(&kinked), DEFAULT_STEP, |t, v| {
        let y = t.relu(v[0]);
        probe(t, y, seed)
    }).map_err(e)?)?;
    record("leaky_relu", check_inputs(std::slice::from_ref(&kinked), DEFAULT_STEP, |t, v| {
        let y = t.leaky_relu(v[0], 0.2);
        probe(t, y, seed)
    }).map_err(e)?)?;
    record("abs", check_inputs(std::slice::from_ref(&kinked), DEFAULT_STEP, |t, v| {
        let y = t.abs(v[0]);
        probe(t, y, seed)
    }).map_err(e)?)?;

    let smooth = normal(&[3, 4], &mut rng);
    record("sigmoid/softplus/exp/square", check_inputs(std::slice::from_ref(&smooth), DEFAULT_STEP, |t, v| {
        let a = t.sigmoid(v[0]);
        let b = t.softplus(v[0]);
        let c = t.exp(v[0]);
        let d = t.square(v[0]);
        let ab = t.add(a, b)?;
        let cd = t.sub(c, d)?;
        let y = t.mul(ab, cd)?;
        probe(t, y, seed)
    }).map_err(e)?)?;

    let positive = uniform(&[3, 4], 0.2, 3.0, &mut rng);
    record("log", check_inputs(&[positive], DEFAULT_STEP, |t, v| {
        let y = t.log(v[0])?;
        probe(t, y, seed)
    }).map_err(e)?)?;

    let m = normal(&[3, 4, 2], &mut rng);
    record("logsumexp/sum/mean", check_inputs(&[m], DEFAULT_STEP, |t, v| {
        let a = t.logsumexp(v[0], 1)?;
        let s = t.sum(v[0], &[2])?;
        let mn = t.mean(v[0], &[0])?;
        let pa = probe(t, a, seed)?;
        let ps = probe(t, s, seed + 1)?;
        let pm = probe(t, mn, seed + 2)?;
        let y = t.add(pa, ps)?;
        t.add(y, pm)
    }).map_err(e)?)?;

    let x = normal(&[4, 6], &mut rng);
    record("reshape/slice/transpose", check_inputs(&[x], DEFAULT_STEP, |t, v| {
        let r = t.reshape(v[0], &[6, 4])?;
        let tr = t.transpose(r)?;
        let s = t.slice_cols(tr, 2, 3)?;
        probe(t, s, seed)
    }).map_err(e)?)?;

    let (z, mu, lv) = (normal(&[4, 3], &mut rng), normal(&[5, 3], &mut rng), uniform(&[5, 3], -1.0, 1.0, &mut rng));
    record("pairwise_gaussian", check_inputs(&[z, mu, lv], DEFAULT_STEP, |t, v| {
        let y = t.pairwise_gaussian_log_density(v[0], v[1], v[2])?;
        probe(t, y, seed)
    }).map_err(e)?)?;
    let (a, b) = (normal(&[4, 3], &mut rng), normal(&[5, 3], &mut rng));
    record("pairwise_sq_dist", check_inputs(&[a, b], DEFAULT_STEP, |t, v| {
        let y = t.pairwise_sq_dist(v[0], v[1])?;
        probe(t, y, seed)
    }).map_err(e)?)?;

    let mut disc = Discriminator::new(DiscriminatorConfig { latent_size: 3, hidden: vec![6, 5], leak: 0.2 }, seed).map_err(e)?;
    jitter_biases(&mut disc.params, &mut rng);
    let zin = normal(&[4, 3], &mut rng);
    let errs = check_params(&disc.params, DEFAULT_STEP, |t, store| {
        let mut d = disc.clone();
        d.params = store.clone();
        let zv = t.constant(zin.clone());
        let y = d.forward(t, zv, false)?;
        probe(t, y, seed)
    })
    .map_err(e)?;
    record("discriminator", errs.into_iter().map(|(_, x)| x).collect())?;
    Ok(())
}

fn loss_checks(seed: u64, worst: &mut BTreeMap<&'static str, f64>) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let e = |x: vaebench_core::Error| x.to_string();
    let cfg = EncoderConfig { image_size: 4, channels: 2, ladder: vec![3], latent_size: 2 };
    let mut vae = Vae::new(cfg, seed).map_err(e)?;
    jitter_biases(&mut vae.params, &mut rng);
    let n = 4;
    let x = uniform(&[n, 2, 4, 4], 0.0, 1.0, &mut rng);
    let noise = normal(&[n, 2], &mut rng);
    let prior = normal(&[n, 2], &mut rng);
    let disc = Discriminator::new(DiscriminatorConfig { latent_size: 2, hidden: vec![8, 8], leak: 0.2 }, seed).map_err(e)?;
    // Capacity is drawn away from the batch KL so |KL − C| is smooth.
    let capacity = rng.random_range(0.0..0.2);
    for m in Method::ALL {
        let params = MethodParams::defaults(m);
        let errs = check_params(&vae.params, DEFAULT_STEP, |t, store| {
            let mut net = vae.clone();
            net.params = store.clone();
            let xv = t.constant(x.clone());
            let (mu, logvar) = net.encode(t, xv)?;
            let z = reparameterize(t, mu, logvar, &noise)?;
            let logits = net.decode(t, z)?;
            let fwd = Forward { mu, logvar, z, logits };
            let extra = PenaltyInputs { discriminator: Some(&disc), prior_sample: Some(&prior) };
            Ok(objective(t, &params, capacity, &fwd, &x, extra)?.0)
        })
        .map_err(e)?;
        let worst_param = errs.iter().map(|p| p.1).fold(0.0, f64::max);
        let slot = worst.entry(m.key()).or_insert(0.0);
        *slot = slot.max(worst_param);
        if let Some((name, err)) = errs.iter().find(|p| p.1 >= FD_TOL) {
            return Err(format!("{m} seed {seed} parameter {name}: relative error {err:e}"));
        }
    }
    Ok(())
}

fn gradient_integrity() -> Check {
    let mut worst = BTreeMap::new();
    let seeds = 20;
    for seed in 0..seeds {
        layer_checks(seed, &mut worst)?;
        loss_checks(seed, &mut worst)?;
    }
    let overall = worst.values().cloned().fold(0.0, f64::max);
    Ok(format!("{} checks × {seeds} seeds, worst relative error {overall:.1e}", worst.len()))
}

// ---------------------------------------------------------------- 4

fn posterior_fixture(seed: u64) -> (Tensor, Tensor, Tensor, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d, p) = (6, 3, 5);
    (
        normal(&[n, d], &mut rng),
        normal(&[n, d], &mut rng).map(|v| 0.3 * v),
        normal(&[n, d], &mut rng),
        normal(&[n, p], &mut rng),
        uniform(&[n, p], 0.0, 1.0, &mut rng),
    )
}

fn breakdown(params: &MethodParams, capacity: f64, seed: u64) -> vaebench_core::Result<LossBreakdown> {
    let (mu, lv, noise, logits, target) = posterior_fixture(seed);
    let mut t = Tape::new();
    let (mu, logvar, logits) = (t.leaf(mu), t.leaf(lv), t.leaf(logits));
    let z = reparameterize(&mut t, mu, logvar, &noise)?;
    let fwd = Forward { mu, logvar, z, logits };
    Ok(objective(&mut t, params, capacity, &fwd, &target, PenaltyInputs::default())?.1)
}

fn objective_identities() -> Check {
    let e = |x: vaebench_core::Error| x.to_string();
    for seed in 0..20 {
        let capacity = seed as f64 * 0.1;
        let tc = breakdown(&MethodParams { beta: 1.0, ..MethodParams::defaults(Method::BetaTcVae) }, capacity, seed).map_err(e)?;
        let bv = breakdown(&MethodParams { beta: 1.0, ..MethodParams::defaults(Method::BetaVae) }, capacity, seed).map_err(e)?;
        ensure(tc.total.to_bits() == bv.total.to_bits(), || {
            format!("seed {seed}: beta-TCVAE(1) total {} != beta-VAE(1) total {}", tc.total, bv.total)
        })?;

        let plain = breakdown(&MethodParams::plain_vae(), 0.0, seed).map_err(e)?;
        let (mu, lv, ..) = posterior_fixture(seed);
        let closed: Vec<f64> = GaussianPosterior::new(mu, lv).map_err(e)?.kl_per_sample();
        let kl = closed.iter().sum::<f64>() / closed.len() as f64;
        ensure(plain.capacity_distance == plain.kl && (plain.kl - kl).abs() < 1e-12, || {
            format!("seed {seed}: C = 0 term {} vs closed-form KL {kl}", plain.capacity_distance)
        })?;
        ensure(plain.total.to_bits() == (plain.recon + plain.kl).to_bits(), || {
            format!("seed {seed}: total {} != recon + KL {}", plain.total, plain.recon + plain.kl)
        })?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tape::new();
        let z = t.constant(normal(&[8, 1], &mut rng));
        let m = t.constant(normal(&[8, 1], &mut rng));
        let l = t.constant(normal(&[8, 1], &mut rng).map(|v| 0.4 * v));
        let tcv = total_correlation(&mut t, z, m, l, TcNormalization::Batch).map_err(e)?;
        let tc_lit = total_correlation(&mut t, z, m, l, TcNormalization::BatchTimesDataset(3072)).map_err(e)?;
        ensure(t.value(tcv).item() == 0.0 && t.value(tc_lit).item() == 0.0, || {
            format!("seed {seed}: one-dimensional TC {} / {}", t.value(tcv).item(), t.value(tc_lit).item())
        })?;
    }
    let c = CapacitySchedule::default();
    ensure(c.at(0) == 0.0 && c.at(2000) == 25.0 && c.at(1000) == 12.5, || {
        format!("capacity_at(0) = {}, capacity_at(2000) = {}", c.at(0), c.at(2000))
    })?;
    Ok("20 seeds: TCVAE(1) ≡ β-VAE(1) bitwise, C(0)=0, C(2000)=25, C=0 gives plain KL, TC(d=1)=0".into())
}

// ---------------------------------------------------------------- 5

/// Joint-histogram MI by full scans per cell.
fn naive_mi(a: &[usize], na: usize, b: &[usize], nb: usize) -> f64 {
    let n = a.len() as f64;
    let mut mi = 0.0;
    for x in 0..na {
        let px = a.iter().filter(|&&p| p == x).count() as f64 / n;
        for y in 0..nb {
            let joint = a.iter().zip(b).filter(|&(&p, &q)| p == x && q == y).count() as f64 / n;
            let py = b.iter().filter(|&&q| q == y).count() as f64 / n;
            if joint > 0.0 {
                mi += joint * (joint / (px * py)).ln();
            }
        }
    }
    mi
}

fn tc_estimate(z: &Tensor, mu: &Tensor, lv: &Tensor) -> f64 {
    let mut t = Tape::new();
    let (z, mu, lv) = (t.constant(z.clone()), t.constant(mu.clone()), t.constant(lv.clone()));
    let v = total_correlation(&mut t, z, mu, lv, TcNormalization::Batch).unwrap();
    t.value(v).item()
}

fn estimator_oracles() -> Check {
    let e = |x: vaebench_core::Error| x.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    // MI against the naive oracle.
    let ds = ToyDataset::generate(FactorSpace::default(), 2, 2).map_err(e)?;
    let batch = Sampler::new(5).sample_batch(&ds, 1500).map_err(e)?;
    let fm = FactorMatrix::new(&batch.factors, ds.space().cardinalities()).map_err(e)?;
    let mut rep = perfect_rep(&batch.factors, 2, 1.0, &mut rng);
    for row in rep.data_mut().chunks_mut(7) {
        row[0] += 0.7 * row[5];
        row[2] += rng.sample::<f64, _>(StandardNormal);
    }
    let codes = discretize(&rep, DEFAULT_BINS).map_err(e)?;
    let mi = mutual_info_matrix(&codes, &fm).map_err(e)?;
    let k = fm.num_factors();
    let mut mi_err: f64 = 0.0;
    for j in 0..7 {
        for f in 0..k {
            let o = naive_mi(&codes.column(j), DEFAULT_BINS, &fm.column(f), fm.cardinalities()[f]);
            mi_err = mi_err.max((mi[j * k + f] - o).abs());
        }
    }
    ensure(mi_err <= 1e-12, || format!("MI differs from oracle by {mi_err:e}"))?;

    // DIP covariance against a two-pass oracle.
    let (n, d) = (25, 4);
    let mu = normal(&[n, d], &mut rng).map(|x| 2.0 * x + 1.0);
    let lv = normal(&[n, d], &mut rng).map(|x| 0.5 * x);
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| mu.data()[i * d + j]).sum::<f64>() / n as f64).collect();
    let mut t = Tape::new();
    let (m, l) = (t.constant(mu.clone()), t.constant(lv.clone()));
    let c1 = dip_covariance(&mut t, m, l, DipVariant::I).map_err(e)?;
    let c2 = dip_covariance(&mut t, m, l, DipVariant::II).map_err(e)?;
    let mut cov_err: f64 = 0.0;
    for a in 0..d {
        for b in 0..d {
            let o = (0..n).map(|i| (mu.data()[i * d + a] - mean[a]) * (mu.data()[i * d + b] - mean[b])).sum::<f64>() / n as f64;
            let extra = if a == b { (0..n).map(|i| lv.data()[i * d + a].exp()).sum::<f64>() / n as f64 } else { 0.0 };
            cov_err = cov_err.max((t.value(c1).data()[a * d + b] - o).abs());
            cov_err = cov_err.max((t.value(c2).data()[a * d + b] - o - extra).abs());
        }
    }
    ensure(cov_err <= 1e-10, || format!("DIP covariance differs from oracle by {cov_err:e}"))?;

    // MMD² of a sample set with itself.
    let x = normal(&[16, 5], &mut rng);
    let mut t = Tape::new();
    let (a, b) = (t.constant(x.clone()), t.constant(x));
    let v = mmd2(&mut t, a, b, &RbfMixture::multiscale(5)).map_err(e)?;
    let mmd_self = t.value(v).item();
    ensure(mmd_self == 0.0, || format!("MMD² of identical sets is {mmd_self:e}"))?;

    // TC on duplicated dims: positive in at least 45 of 50 seeds.
    let centers = [-2.0, 0.0, 2.0];
    let sigma: f64 = 0.5;
    let mut positive = 0;
    for seed in 0..50 {
        let mut r = ChaCha8Rng::seed_from_u64(500 + seed);
        let n = 32;
        let mut mu = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let c = centers[r.random_range(0..3)];
            mu.extend([c, c]);
        }
        let mu = Tensor::new(vec![n, 2], mu).unwrap();
        let lv = Tensor::full(&[n, 2], (sigma * sigma).ln());
        let z = GaussianPosterior::new(mu.clone(), lv.clone()).map_err(e)?.sample(&normal(&[n, 2], &mut r)).map_err(e)?;
        if tc_estimate(&z, &mu, &lv) > 0.0 {
            positive += 1;
        }
    }
    ensure(positive >= 45, || format!("duplicated-dims TC positive in {positive}/50 seeds"))?;

    // TC on a factorized aggregate posterior: the batch is the full product
    // grid of per-dimension means, so q(z) equals the product of its marginals.
    let mut worst_fact: f64 = 0.0;
    for seed in 0..50 {
        let mut r = ChaCha8Rng::seed_from_u64(900 + seed);
        let (ka, kb) = (r.random_range(3..7), r.random_range(3..7));
        let xs: Vec<f64> = (0..ka).map(|_| r.random_range(-2.5..2.5)).collect();
        let ys: Vec<f64> = (0..kb).map(|_| r.random_range(-2.5..2.5)).collect();
        let mut mu = Vec::new();
        for &a in &xs {
            for &b in &ys {
                mu.extend([a, b]);
            }
        }
        let n = ka * kb;
        let mu = Tensor::new(vec![n, 2], mu).unwrap();
        let lv = Tensor::full(&[n, 2], r.random_range(-2.0..0.0));
        let z = GaussianPosterior::new(mu.clone(), lv.clone()).map_err(e)?.sample(&normal(&[n, 2], &mut r)).map_err(e)?;
        worst_fact = worst_fact.max(tc_estimate(&z, &mu, &lv).abs());
    }
    ensure(worst_fact < 0.05, || format!("factorized TC reaches {worst_fact:e}"))?;

    Ok(format!(
        "MI err {mi_err:.1e}, covariance err {cov_err:.1e}, MMD²(x,x) = {mmd_self}, duplicated TC > 0 in {positive}/50, \
         factorized |TC| ≤ {worst_fact:.1e}"
    ))
}

// ---------------------------------------------------------------- 6

fn scheduler_conformance() -> Check {
    // (epoch loss, lr after the epoch, stale epochs after the epoch), derived by hand
    // from: reduce by 0.95 after two epochs without strict improvement, floor 1e-4.
    let script: [(f64, f64, usize); 12] = [
        (10.0, 0.001, 0),
        (10.0, 0.001, 1),
        (10.0, 0.00095, 0),
        (9.0, 0.00095, 0),
        (9.5, 0.00095, 1),
        (9.5, 0.0009025, 0),
        (8.0, 0.0009025, 0),
        (8.0, 0.0009025, 1),
        (7.9, 0.0009025, 0),
        (8.5, 0.0009025, 1),
        (8.5, 0.000857375, 0),
        (8.5, 0.000857375, 1),
    ];
    let mut s = PlateauScheduler::new(0.001, 0.95, 1e-4, 2);
    for (i, &(loss, lr, stale)) in script.iter().enumerate() {
        let got = s.step(loss);
        ensure((got - lr).abs() < 1e-15 && s.stale_epochs() == stale, || {
            format!("epoch {}: lr {got} stale {} (expected {lr}, {stale})", i + 1, s.stale_epochs())
        })?;
    }
    let mut s = PlateauScheduler::new(0.000104, 0.95, 1e-4, 2);
    let floor_trace: Vec<f64> = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0].iter().map(|&l| s.step(l)).collect();
    let expected = [0.000104, 0.000104, 0.0001, 0.0001, 0.0001, 0.0001, 0.0001];
    ensure(floor_trace.iter().zip(expected).all(|(a, b)| (a - b).abs() < 1e-18), || {
        format!("floor trace {floor_trace:?}")
    })?;
    Ok(format!("{} scripted epochs and floor clamp match state for state", script.len()))
}

// ---------------------------------------------------------------- 7

fn vaebench(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_vaebench")).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("`vaebench {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

struct Pipeline {
    elapsed: Duration,
    decline: f64,
    grid: (u32, u32),
    report: String,
}

fn pipeline(root: &Path) -> Result<Pipeline, String> {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let start = Instant::now();
    let data = root.join("data.toyd");
    let (pre, run, ev, tr, rep) = (root.join("pre"), root.join("run"), root.join("eval"), root.join("trav"), root.join("report"));
    vaebench(&["generate-data", "--image-size", "16", "--out", &s(&data)])?;
    vaebench(&["pretrain", "--image-size", "16", "--data", &s(&data), "--out", &s(&pre)])?;
    let ckpt = pre.join("pretrained.ckpt");
    vaebench(&[
        "train", "--image-size", "16", "--method", "beta_vae", "--set", "max_iters=2000",
        "--data", &s(&data), "--init", &s(&ckpt), "--out", &s(&run),
    ])?;
    let final_ckpt = run.join("checkpoint.ckpt");
    vaebench(&["traverse", "--image-size", "16", "--method", "beta_vae", "--data", &s(&data), "--checkpoint", &s(&final_ckpt), "--out", &s(&tr)])?;
    vaebench(&["evaluate", "--image-size", "16", "--method", "beta_vae", "--data", &s(&data), "--checkpoint", &s(&final_ckpt), "--out", &s(&ev)])?;
    let report = vaebench(&["report", "--in", &s(&ev.join("metrics.csv")), "--out", &s(&rep)])?;
    let elapsed = start.elapsed();

    let log = std::fs::read_to_string(run.join("train_log.csv")).map_err(|e| e.to_string())?;
    let totals: Vec<f64> = log.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    ensure(totals.len() == 2000, || format!("training log has {} rows", totals.len()))?;
    let epoch = 3072 / 64;
    let last_epoch = totals[totals.len() - epoch..].iter().sum::<f64>() / epoch as f64;
    let decline = 1.0 - last_epoch / totals[0];

    let png = tr.join("traversal_beta_vae.png");
    let img = image::open(&png).map_err(|e| format!("{}: {e}", png.display()))?;
    let grid = (img.width(), img.height());

    let csv = std::fs::read_to_string(rep.join("report.csv")).map_err(|e| e.to_string())?;
    let lines: Vec<&str> = csv.lines().collect();
    ensure(
        lines.len() == 2
            && lines[0] == "method,dci,factorvae,sap,mig,irs,normalized_sum"
            && lines[1].split(',').count() == 7
            && lines[1].starts_with("beta-VAE,"),
        || format!("malformed report.csv:\n{csv}"),
    )?;
    ensure(report.contains("Normalized Sum") && report.contains("beta-VAE"), || format!("malformed report:\n{report}"))?;
    ensure(
        std::fs::read(ev.join("metrics.csv")).ok() == std::fs::read(run.join("metrics.csv")).ok(),
        || "standalone evaluation differs from the final training evaluation".into(),
    )?;
    Ok(Pipeline { elapsed, decline, grid, report })
}

fn end_to_end_smoke() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let first = pipeline(&a)?;
    ensure(first.elapsed < Duration::from_secs(600), || format!("pipeline took {:.0?}", first.elapsed))?;
    ensure(first.decline >= 0.30, || format!("total loss fell only {:.1}%", 100.0 * first.decline))?;
    ensure(first.grid.0 > 20 && first.grid.1 > 20, || format!("traversal image is {:?}", first.grid))?;
    let second = pipeline(&b)?;
    let (fa, fb) = (files_under(&a), files_under(&b));
    let names_a: HashSet<_> = fa.keys().collect();
    let names_b: HashSet<_> = fb.keys().collect();
    ensure(names_a == names_b, || "reruns produced different file sets".into())?;
    let differing: Vec<String> = fa.iter().filter(|(k, v)| fb[*k] != **v).map(|(k, _)| k.display().to_string()).collect();
    ensure(differing.is_empty(), || format!("rerun differs in {}", differing.join(", ")))?;
    let _ = second.report;
    Ok(format!(
        "pipeline {:.0?} (rerun {:.0?}), total loss -{:.1}% vs iteration 0, traversal {}×{} px, {} files byte-identical on rerun",
        first.elapsed,
        second.elapsed,
        100.0 * first.decline,
        first.grid.0,
        first.grid.1,
        fa.len()
    ))
}

// ---------------------------------------------------------------- 8

fn dataset_integrity() -> Check {
    let e = |x: vaebench_core::Error| x.to_string();
    let space = FactorSpace::default();
    let ds = ToyDataset::generate(space.clone(), 16, 16).map_err(e)?;
    ensure(ds.len() == 3072 && ds.is_exhaustive(), || format!("{} records", ds.len()))?;

    let mut seen = HashSet::new();
    for t in space.enumerate() {
        seen.insert(render(&space, &t, 64, 64).map_err(e)?);
    }
    ensure(seen.len() == 3072, || format!("only {} distinct 64×64 renders", seen.len()))?;

    let bytes = ds.to_bytes();
    let back = ToyDataset::from_bytes(&bytes).map_err(e)?;
    ensure(back.to_bytes() == bytes && back.len() == ds.len(), || "file round trip changed bytes".into())?;
    let file = tempfile::NamedTempFile::new().map_err(|e| e.to_string())?;
    ds.write(file.path()).map_err(e)?;
    ensure(std::fs::read(file.path()).map_err(|e| e.to_string())? == bytes, || "written file differs".into())?;

    let n = 30_720;
    let batch = Sampler::new(3).sample_batch(&ds, n).map_err(e)?;
    let mut worst_z = f64::NEG_INFINITY;
    for (f, &k) in space.cardinalities().iter().enumerate() {
        let mut counts = vec![0usize; k];
        for t in &batch.factors {
            counts[t.0[f]] += 1;
        }
        let expected = n as f64 / k as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // Wilson–Hilferty normal approximation of the χ² tail.
        let df = (k - 1) as f64;
        let z = ((chi2 / df).cbrt() - (1.0 - 2.0 / (9.0 * df))) / (2.0 / (9.0 * df)).sqrt();
        worst_z = worst_z.max(z);
    }
    ensure(worst_z < 3.0, || format!("χ² uniformity z = {worst_z:.2}"))?;
    Ok(format!("3072 records, 3072 distinct 64×64 renders, byte-exact round trip, worst χ² z {worst_z:.2}"))
}

// ----------------------------------------------------------------

fn main() {
    // ACCEPTANCE_ONLY=3,5 runs a subset.
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut unexpected = Vec::new();
    let mut report = |no: usize, name: &str, limit: Option<Duration>, known: bool, check: Box<dyn FnOnce() -> Check>| {
        if only.as_ref().is_some_and(|o| !o.contains(&no)) {
            println!("SKIP  {no}. {name}");
            return;
        }
        let start = Instant::now();
        let mut result = check();
        let took = start.elapsed();
        if let (Some(limit), Ok(_)) = (limit, &result) {
            if took > limit {
                result = Err(format!("took {took:.1?}, limit {limit:?}"));
            }
        }
        match &result {
            Ok(d) => println!("PASS  {no}. {name} [{took:.2?}]: {d}"),
            Err(d) => println!("FAIL  {no}. {name} [{took:.2?}]: {d}"),
        }
        if result.is_err() && !known {
            unexpected.push(no);
        }
    };

    let (c1, documented) = normalized_sum_regression();
    report(1, "normalized-sum regression", Some(Duration::from_secs(1)), documented, Box::new(move || c1));
    report(2, "metrics on perfect and shuffled representations", Some(Duration::from_secs(60)), false, Box::new(metrics_on_perfect_and_shuffled));
    report(3, "gradient integrity", Some(Duration::from_secs(120)), false, Box::new(gradient_integrity));
    report(4, "objective identities", None, false, Box::new(objective_identities));
    report(5, "estimator oracles", None, false, Box::new(estimator_oracles));
    report(6, "scheduler conformance", None, false, Box::new(scheduler_conformance));
    report(7, "end-to-end smoke", None, false, Box::new(end_to_end_smoke));
    report(8, "dataset integrity", None, false, Box::new(dataset_integrity));

    if unexpected.is_empty() {
        println!("acceptance: all criteria pass except the documented known-unattainable case(s)");
    } else {
        println!("acceptance: unexpected failures in criteria {unexpected:?}");
        std::process::exit(1);
    }
}

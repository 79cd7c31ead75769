use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vaebench_core::dataset::{Sampler, ToyDataset};
use vaebench_core::nets::{Discriminator, DiscriminatorConfig, EncoderConfig, Vae};
use vaebench_core::objectives::{
    discriminator_loss, factor_vae_half, objective, permute_dims, reparameterize, CapacitySchedule,
    Forward, LossBreakdown, Method, MethodParams, PenaltyInputs,
};
use vaebench_core::params::load_checkpoint;
use vaebench_core::{Adam, Tape, Tensor};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::evaluation::{evaluate, EvalSubset, Evaluation};
use crate::schedule::PlateauScheduler;

/// Stream ids of the auxiliary generators, far from the sampler's per-call streams.
const NOISE_STREAM: u64 = u64::MAX;
const PERMUTE_STREAM: u64 = u64::MAX - 1;

/// Discriminator optimizer settings.
pub const DISCRIMINATOR_LR: f64 = 1e-4;
pub const DISCRIMINATOR_BETAS: (f64, f64) = (0.5, 0.9);

pub const TRAIN_LOG_HEADER: &str = "iter,total,recon,kl,capacity,penalty,lr";
pub const EVAL_LOG_HEADER: &str = "iter,dci,factorvae,sap,mig,irs";
pub const DCI_LOG_HEADER: &str = "iter,disentanglement,completeness,informativeness";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iter: u64,
    pub loss: LossBreakdown,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    /// Number of completed iterations when the evaluation ran.
    pub iter: u64,
    pub eval: Evaluation,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
    pub evals: Vec<EvalRow>,
}

impl TrainingLog {
    pub fn loss_csv(&self) -> String {
        let mut s = format!("{TRAIN_LOG_HEADER}\n");
        for r in &self.rows {
            let l = &r.loss;
            let _ = writeln!(s, "{},{},{},{},{},{},{}", r.iter, l.total, l.recon, l.kl, l.capacity, l.penalty, r.lr);
        }
        s
    }

    pub fn eval_csv(&self) -> String {
        let mut s = format!("{EVAL_LOG_HEADER}\n");
        for r in &self.evals {
            let m = &r.eval.scores;
            let _ = writeln!(s, "{},{},{},{},{},{}", r.iter, m.dci, m.factor_vae, m.sap, m.mig, m.irs);
        }
        s
    }

    pub fn dci_csv(&self) -> String {
        let mut s = format!("{DCI_LOG_HEADER}\n");
        for r in &self.evals {
            let d = &r.eval.dci;
            let _ = writeln!(s, "{},{},{},{}", r.iter, d.disentanglement, d.completeness, d.informativeness);
        }
        s
    }
}

/// What one optimization run does.
#[derive(Clone, Debug)]
pub struct Phase {
    pub params: MethodParams,
    /// `None` holds the capacity at zero.
    pub capacity: Option<CapacitySchedule>,
    pub iters: u64,
    pub evaluate: bool,
}

impl Phase {
    pub fn pretrain(cfg: &RunConfig) -> Self {
        Self { params: MethodParams::plain_vae(), capacity: None, iters: cfg.pretrain_iters, evaluate: false }
    }

    pub fn train(cfg: &RunConfig) -> Self {
        Self { params: cfg.method, capacity: Some(cfg.capacity), iters: cfg.max_iters, evaluate: true }
    }
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub vae: Vae,
    pub log: TrainingLog,
    pub initial_hash: String,
    pub final_hash: String,
}

/// Freshly initialized networks for `cfg`.
pub fn init_vae(cfg: &RunConfig) -> Result<Vae> {
    Ok(Vae::new(EncoderConfig::for_image_size(cfg.image_size, cfg.latent_size)?, cfg.seed_weights)?)
}

/// Networks for `cfg` with weights read from a checkpoint file.
pub fn load_vae(cfg: &RunConfig, path: &std::path::Path) -> Result<Vae> {
    let mut vae = init_vae(cfg)?;
    let records = load_checkpoint(path).map_err(|e| match e {
        vaebench_core::Error::Io(source) => HarnessError::File { path: path.to_path_buf(), source },
        other => HarnessError::Format { path: path.display().to_string(), msg: other.to_string() },
    })?;
    vae.params.load_from(&records)?;
    Ok(vae)
}

pub fn check_dataset(cfg: &RunConfig, data: &ToyDataset) -> Result<()> {
    if data.height() != cfg.image_size || data.width() != cfg.image_size {
        return Err(HarnessError::Config(format!(
            "dataset is {}x{} but image_size is {}",
            data.height(),
            data.width(),
            cfg.image_size
        )));
    }
    if data.is_empty() {
        return Err(HarnessError::Config("dataset has no records".into()));
    }
    Ok(())
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<Tensor> {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Ok(Tensor::new(vec![rows, cols], data)?)
}

/// Iterations per epoch: one pass over the record table.
pub fn steps_per_epoch(data: &ToyDataset, batch_size: usize) -> u64 {
    data.len().div_ceil(batch_size).max(1) as u64
}

/// Runs `phase` starting from `vae`.
///
/// Every iteration draws a batch (twice the batch size for Factor-VAE, whose
/// second half feeds the discriminator), takes one Adam step on the method's
/// loss, and logs the breakdown computed before the step. The learning rate
/// is updated from the epoch-mean total loss at each epoch boundary.
pub fn run(cfg: &RunConfig, data: &ToyDataset, mut vae: Vae, phase: &Phase) -> Result<Outcome> {
    check_dataset(cfg, data)?;
    let b = cfg.batch_size;
    let d = vae.latent_size();
    let method = phase.params.method;
    let draw = if method == Method::FactorVae {
        factor_vae_half(2 * b)?;
        2 * b
    } else {
        b
    };
    let mut discriminator = match method {
        Method::FactorVae => Some(Discriminator::new(DiscriminatorConfig::new(d), cfg.seed_weights.wrapping_add(1))?),
        _ => None,
    };
    let mut disc_adam = Adam::with_betas(DISCRIMINATOR_LR, DISCRIMINATOR_BETAS.0, DISCRIMINATOR_BETAS.1);

    let subset = if phase.evaluate { Some(EvalSubset::draw(data, cfg.eval_size, cfg.seed_eval)?) } else { None };
    let mut sampler = Sampler::new(cfg.seed_data);
    let mut noise_rng = Sampler::rng_for(cfg.seed_data, NOISE_STREAM);
    let mut perm_rng = Sampler::rng_for(cfg.seed_data, PERMUTE_STREAM);
    let mut adam = Adam::new(cfg.lr);
    let mut scheduler = PlateauScheduler::new(cfg.lr, cfg.lr_factor, cfg.lr_min, cfg.patience);
    let epoch_len = steps_per_epoch(data, b);
    let mut epoch_sum = 0.0;
    let mut epoch_count = 0u64;
    let mut log = TrainingLog::default();
    let mut last: Option<LossBreakdown> = None;
    let initial_hash = vae.params.content_hash();

    for iter in 0..phase.iters {
        let batch = sampler.sample_batch(data, draw)?;
        let target = data.images(&batch.records[..b])?;
        let noise = normal(&mut noise_rng, b, d)?;
        let prior = match method {
            Method::InfoVae => Some(normal(&mut noise_rng, b, d)?),
            _ => None,
        };
        let disc_noise = match method {
            Method::FactorVae => Some(normal(&mut noise_rng, b, d)?),
            _ => None,
        };
        let capacity = phase.capacity.map_or(0.0, |c| c.at(iter));

        let mut tape = Tape::new();
        let x = tape.constant(target.clone());
        let (mu, logvar) = vae.encode(&mut tape, x)?;
        let z = reparameterize(&mut tape, mu, logvar, &noise)?;
        let logits = vae.decode(&mut tape, z)?;
        let fwd = Forward { mu, logvar, z, logits };
        let extra = PenaltyInputs {
            discriminator: discriminator.as_ref(),
            prior_sample: prior.as_ref(),
        };
        let (loss, breakdown) = objective(&mut tape, &phase.params, capacity, &fwd, &target, extra)?;
        if !breakdown.total.is_finite() {
            return Err(HarnessError::NonFinite { iter, last });
        }
        let grads = tape.backward(loss)?;
        vae.params.zero_grad();
        grads.accumulate_into(&tape, &mut vae.params);
        adam.step(&mut vae.params);

        if let (Some(disc), Some(noise2)) = (discriminator.as_mut(), disc_noise.as_ref()) {
            let real = tape.value(z).clone();
            let (mu2, lv2) = vae.encode_batch(&data.images(&batch.records[b..])?)?;
            let z2: Vec<f64> = mu2
                .data()
                .iter()
                .zip(lv2.data())
                .zip(noise2.data())
                .map(|((m, l), e)| m + (0.5 * l).exp() * e)
                .collect();
            let permuted = permute_dims(&Tensor::new(vec![b, d], z2)?, &mut perm_rng)?;
            let mut dt = Tape::new();
            let real = dt.constant(real);
            let permuted = dt.constant(permuted);
            let lr_ = disc.forward(&mut dt, real, false)?;
            let lp = disc.forward(&mut dt, permuted, false)?;
            let dloss = discriminator_loss(&mut dt, lr_, lp)?;
            if !dt.value(dloss).item().is_finite() {
                return Err(HarnessError::NonFinite { iter, last: Some(breakdown) });
            }
            let dgrads = dt.backward(dloss)?;
            disc.params.zero_grad();
            dgrads.accumulate_into(&dt, &mut disc.params);
            disc_adam.step(&mut disc.params);
        }

        log.rows.push(LogRow { iter, loss: breakdown, lr: adam.lr });
        last = Some(breakdown);
        epoch_sum += breakdown.total;
        epoch_count += 1;
        if epoch_count == epoch_len {
            adam.lr = scheduler.step(epoch_sum / epoch_count as f64);
            epoch_sum = 0.0;
            epoch_count = 0;
        }

        if let Some(subset) = &subset {
            let done = iter + 1;
            if done % cfg.eval_interval == 0 || done == phase.iters {
                let eval = evaluate(&vae, data, subset, cfg)?;
                log.evals.push(EvalRow { iter: done, eval });
            }
        }
    }
    let final_hash = vae.params.content_hash();
    Ok(Outcome { vae, log, initial_hash, final_hash })
}

/// Plain-VAE pre-training from fresh weights.
pub fn pretrain(cfg: &RunConfig, data: &ToyDataset) -> Result<Outcome> {
    run(cfg, data, init_vae(cfg)?, &Phase::pretrain(cfg))
}

/// Method training from `init`.
pub fn train(cfg: &RunConfig, data: &ToyDataset, init: Vae) -> Result<Outcome> {
    run(cfg, data, init, &Phase::train(cfg))
}

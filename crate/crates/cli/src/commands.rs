//! Subcommand bodies. Each reads its inputs, writes artifacts under an output
//! directory and returns a short summary for the terminal.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use vaebench_core::dataset::{FactorSpace, Sampler, ToyDataset};
use vaebench_core::metrics::{MetricScores, MetricTable};
use vaebench_core::objectives::Method;

use crate::config::RunConfig;
use crate::error::{file_err, HarnessError, Result};
use crate::evaluation::{detect_non_ignored, encode_records, evaluate, EvalSubset, Evaluation};
use crate::report::{read_tables, render};
use crate::trainer::{self, load_vae, Outcome};
use crate::traversal::{sweep_values, traverse};

pub const CONFIG_FILE: &str = "config.cfg";
pub const PRETRAINED_CHECKPOINT: &str = "pretrained.ckpt";
pub const CHECKPOINT: &str = "checkpoint.ckpt";
pub const PRETRAIN_LOG: &str = "pretrain_log.csv";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const EVAL_LOG: &str = "eval_log.csv";
pub const DCI_LOG: &str = "dci_log.csv";
pub const METRICS: &str = "metrics.csv";
pub const SUMMARY: &str = "summary.txt";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TEXT: &str = "report.txt";

/// Stream of the generator picking the traversal sample.
const TRAVERSE_STREAM: u64 = u64::MAX - 2;

/// Config sources shared by every subcommand, applied in field order.
#[derive(Clone, Debug, Default)]
pub struct ConfigArgs {
    pub config: Option<PathBuf>,
    pub method: Option<String>,
    pub image_size: Option<usize>,
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(m) = &self.method {
            cfg.set("method", m)?;
        }
        if let Some(s) = self.image_size {
            cfg.image_size = s;
        }
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(file_err(path))
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(file_err(dir))
}

pub fn read_dataset(path: &Path) -> Result<ToyDataset> {
    if !path.is_file() {
        return Err(HarnessError::File {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found"),
        });
    }
    ToyDataset::read(path).map_err(|e| match e {
        vaebench_core::Error::Io(source) => HarnessError::File { path: path.to_path_buf(), source },
        other => HarnessError::Format { path: path.display().to_string(), msg: other.to_string() },
    })
}

/// Renders the exhaustive dataset at the configured image size.
pub fn generate_data(cfg: &RunConfig, out: &Path) -> Result<String> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        prepare_dir(parent)?;
    }
    let data = ToyDataset::generate(FactorSpace::default(), cfg.image_size, cfg.image_size)?;
    data.write(out).map_err(|e| match e {
        vaebench_core::Error::Io(source) => HarnessError::File { path: out.to_path_buf(), source },
        other => other.into(),
    })?;
    Ok(format!("wrote {} records of {}x{} to {}", data.len(), cfg.image_size, cfg.image_size, out.display()))
}

fn summary(outcome: &Outcome, iters: u64) -> String {
    format!("iterations={iters}\ninitial_hash={}\nfinal_hash={}\n", outcome.initial_hash, outcome.final_hash)
}

pub fn pretrain(cfg: &RunConfig, data_path: &Path, out: &Path) -> Result<String> {
    let data = read_dataset(data_path)?;
    prepare_dir(out)?;
    let outcome = trainer::pretrain(cfg, &data)?;
    outcome.vae.params.save(&out.join(PRETRAINED_CHECKPOINT))?;
    write(&out.join(PRETRAIN_LOG), outcome.log.loss_csv())?;
    write(&out.join(CONFIG_FILE), cfg.to_text())?;
    write(&out.join(SUMMARY), summary(&outcome, cfg.pretrain_iters))?;
    let first = outcome.log.rows.first().map(|r| r.loss.recon);
    let last = outcome.log.rows.last().map(|r| r.loss.recon);
    Ok(format!(
        "pre-trained {} iterations; recon {:.3} -> {:.3}; checkpoint {}",
        cfg.pretrain_iters,
        first.unwrap_or(f64::NAN),
        last.unwrap_or(f64::NAN),
        out.join(PRETRAINED_CHECKPOINT).display()
    ))
}

fn metrics_csv(cfg: &RunConfig, scores: MetricScores) -> Result<String> {
    let mut table = MetricTable::default();
    table.push(cfg.method.method.label(), scores);
    Ok(table.to_csv()?)
}

fn format_eval(e: &Evaluation) -> String {
    let m = &e.scores;
    format!(
        "dci={:.4} (completeness {:.4}, informativeness {:.4}) factorvae={:.4} sap={:.4} mig={:.4} irs={:.4}",
        m.dci, e.dci.completeness, e.dci.informativeness, m.factor_vae, m.sap, m.mig, m.irs
    )
}

pub fn train(cfg: &RunConfig, data_path: &Path, init: Option<&Path>, out: &Path) -> Result<String> {
    let data = read_dataset(data_path)?;
    let vae = match init {
        Some(p) => load_vae(cfg, p)?,
        None => trainer::init_vae(cfg)?,
    };
    prepare_dir(out)?;
    let outcome = trainer::train(cfg, &data, vae)?;
    outcome.vae.params.save(&out.join(CHECKPOINT))?;
    write(&out.join(TRAIN_LOG), outcome.log.loss_csv())?;
    write(&out.join(EVAL_LOG), outcome.log.eval_csv())?;
    write(&out.join(DCI_LOG), outcome.log.dci_csv())?;
    write(&out.join(CONFIG_FILE), cfg.to_text())?;
    write(&out.join(SUMMARY), summary(&outcome, cfg.max_iters))?;
    let final_eval = outcome
        .log
        .evals
        .last()
        .ok_or_else(|| HarnessError::Config("training ran no evaluation".into()))?;
    write(&out.join(METRICS), metrics_csv(cfg, final_eval.eval.scores)?)?;
    Ok(format!(
        "trained {} for {} iterations; final {}",
        cfg.method.method.label(),
        cfg.max_iters,
        format_eval(&final_eval.eval)
    ))
}

pub fn evaluate_checkpoint(cfg: &RunConfig, data_path: &Path, checkpoint: &Path, out: &Path) -> Result<String> {
    let data = read_dataset(data_path)?;
    trainer::check_dataset(cfg, &data)?;
    let vae = load_vae(cfg, checkpoint)?;
    let subset = EvalSubset::draw(&data, cfg.eval_size, cfg.seed_eval)?;
    let eval = evaluate(&vae, &data, &subset, cfg)?;
    prepare_dir(out)?;
    write(&out.join(METRICS), metrics_csv(cfg, eval.scores)?)?;
    Ok(format_eval(&eval))
}

/// Renders sweeps of the non-ignored latents around one random sample.
pub fn traverse_checkpoint(cfg: &RunConfig, data_path: &Path, checkpoint: &Path, out: &Path) -> Result<String> {
    let data = read_dataset(data_path)?;
    trainer::check_dataset(cfg, &data)?;
    let vae = load_vae(cfg, checkpoint)?;
    let subset = EvalSubset::draw(&data, cfg.eval_size, cfg.seed_eval)?;
    let dims = detect_non_ignored(&vae, &data, &subset.batch.records, cfg.kl_threshold)?;
    let record = Sampler::rng_for(cfg.seed_eval, TRAVERSE_STREAM).random_range(0..data.len());
    let (mu, _) = encode_records(&vae, &data, &[record])?;
    let grid = traverse(&vae, mu.data(), &dims, &sweep_values(cfg.traversal_steps, cfg.traversal_range))?;
    prepare_dir(out)?;
    let png = out.join(format!("traversal_{}.png", cfg.method.method.key()));
    if !grid.write_png(&png)? {
        return Ok(format!(
            "warning: no latent exceeds the KL threshold {}; traversal grid is empty, nothing written",
            cfg.kl_threshold
        ));
    }
    let mut s = format!("traversed record {record}; latents");
    for j in &dims {
        let _ = write!(s, " {j}");
    }
    let _ = write!(s, "; wrote {}", png.display());
    Ok(s)
}

pub fn report(inputs: &[PathBuf], out: Option<&Path>) -> Result<String> {
    let table = read_tables(inputs)?;
    let (csv, text) = render(&table)?;
    if let Some(dir) = out {
        prepare_dir(dir)?;
        write(&dir.join(REPORT_CSV), &csv)?;
        write(&dir.join(REPORT_TEXT), &text)?;
    }
    Ok(text.trim_end().to_string())
}

/// Valid method keys, for help text.
pub fn method_keys() -> String {
    Method::ALL.iter().map(|m| m.key()).collect::<Vec<_>>().join(", ")
}

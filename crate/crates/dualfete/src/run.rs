//! Single training runs and checkpoint evaluation.

use std::path::Path;

use dualfete_core::metrics::{evaluate, perturbed_eval, Perturbation, HD95_MISSING};
use dualfete_core::segnet::{self, NetConfig};
use dualfete_core::synthdata::Dataset;
use dualfete_core::trainer::{train, MetricsRecord, TrainConfig, TrainerState};
use dualfete_core::ModelParams;
use serde::Serialize;

use crate::checkpoint;
use crate::error::Result;
use crate::report::{self, create_dir, write_json, write_log};

pub const CONFIG_ECHO: &str = "config.echo.json";
pub const ROLES: [&str; 3] = ["phi", "psi", "student"];

pub fn checkpoint_name(role: &str) -> String {
    format!("{role}.dfte")
}

/// Save all three models into `dir`.
pub fn save_models(dir: &Path, state: &TrainerState) -> Result<()> {
    for (role, params) in ROLES.iter().zip([&state.phi, &state.psi, &state.student]) {
        checkpoint::save(&dir.join(checkpoint_name(role)), params)?;
    }
    Ok(())
}

/// Train and write `config.echo.json`, `log.csv`, one checkpoint per model and `meta.json`.
pub fn train_to_dir(cfg: &TrainConfig, data: &Dataset, out: &Path) -> Result<(TrainerState, Vec<MetricsRecord>)> {
    let started = report::unix_now();
    create_dir(out)?;
    write_json(&out.join(CONFIG_ECHO), cfg)?;
    let (state, history) = train(cfg, data)?;
    write_log(&out.join(report::LOG), &history)?;
    save_models(out, &state)?;
    report::write_meta(out, "train", started)?;
    Ok((state, history))
}

#[derive(Debug, Clone, Serialize)]
pub struct PerturbReport {
    pub kind: &'static str,
    pub k: usize,
    pub dice_mean: f64,
    pub dice_std_mean: f64,
    pub entropy_mean: f64,
    pub entropy_std_mean: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub dice: f64,
    /// Mean over images with a defined value; null when none has one.
    pub hd95: Option<f64>,
    pub entropy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<PerturbReport>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Averages of the per-sample perturbation statistics.
pub fn perturbation_report(net: &NetConfig, params: &ModelParams, data: &Dataset, perturbation: Perturbation, k: usize, seed: u64) -> Result<PerturbReport> {
    let stats = perturbed_eval(net, params, &data.test, k, perturbation, seed)?;
    Ok(PerturbReport {
        kind: match perturbation {
            Perturbation::None => "none",
            Perturbation::StrongAug => "strong",
            Perturbation::Dropout => "dropout",
        },
        k,
        dice_mean: mean(stats.iter().map(|s| s.dice_mean)),
        dice_std_mean: mean(stats.iter().map(|s| s.dice_std)),
        entropy_mean: mean(stats.iter().map(|s| s.entropy_mean)),
        entropy_std_mean: mean(stats.iter().map(|s| s.entropy_std)),
    })
}

/// Evaluate a checkpoint on the test split. The architecture is read off the parameter shapes.
pub fn eval_checkpoint(path: &Path, data: &Dataset, perturb: Option<(Perturbation, usize)>, dropout_rate: f64, seed: u64) -> Result<EvalReport> {
    let params = checkpoint::load(path)?;
    let first = data.test.first().or(data.labeled.first()).ok_or_else(|| crate::error::HarnessError::Format { path: path.into(), detail: "dataset has no test samples".into() })?;
    let net = NetConfig { dropout_rate, ..segnet::infer_config(&params, first.image.height, first.image.width)? };
    net.validate()?;
    let s = evaluate(&net, &params, &data.test, 16)?;
    let perturbation = perturb.map(|(p, k)| perturbation_report(&net, &params, data, p, k, seed)).transpose()?;
    Ok(EvalReport { samples: data.test.len(), dice: s.dice, hd95: (s.hd95 != HD95_MISSING).then_some(s.hd95), entropy: s.entropy, perturbation })
}

//! Experiment suites: ablation grids over `TrainConfig` variants on one
//! shared synthetic dataset, each writing per-run directories plus a
//! `summary.csv` with a fixed schema.
//!
//! Layout: `<out>/<variant>/seed<k>/` for ordinary suites. The pretrain-then-constrain
//! suite writes `<out>/seed<k>/phase1/` and `<out>/seed<k>/<variant>/`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use dualfete_core::metrics::{evaluate, Perturbation};
use dualfete_core::synthdata::{synthetic_dataset, DataConfig, Dataset, SegSample};
use dualfete_core::trainer::{pseudo_label_stats, run_with, Attributors, ForcedSign, Mode, Pairing, PseudoLabelStats, TrainConfig, TrainerState};

use crate::config::synthetic_for;
use crate::error::{HarnessError, Result};
use crate::report::{self, create_dir, write_json, write_log, Summary};
use crate::run::{perturbation_report, save_models, train_to_dir};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteName {
    Headline,
    Table2,
    Fig3,
    Fig5,
    Table3,
}

impl SuiteName {
    pub const ALL: [SuiteName; 5] = [SuiteName::Headline, SuiteName::Table2, SuiteName::Fig3, SuiteName::Fig5, SuiteName::Table3];
}

impl FromStr for SuiteName {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        SuiteName::ALL.into_iter().find(|n| n.to_string() == s).ok_or_else(|| HarnessError::UnknownSuite(s.into()))
    }
}

impl fmt::Display for SuiteName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SuiteName::Headline => "headline",
            SuiteName::Table2 => "table2",
            SuiteName::Fig3 => "fig3",
            SuiteName::Fig5 => "fig5",
            SuiteName::Table3 => "table3",
        })
    }
}

/// Phase lengths of the pretrain-then-constrain protocol.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fig3Sizes {
    pub phase1_steps: u64,
    pub phase2_steps: u64,
    pub eval_interval: u64,
    /// Unlabeled samples (unaugmented) used to track teacher agreement.
    pub probe_samples: usize,
}

/// Everything a suite run needs besides its name.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOptions {
    /// Base training configuration every variant starts from.
    pub base: TrainConfig,
    pub data: DataConfig,
    pub seeds: Vec<u64>,
    pub fig3: Fig3Sizes,
    /// Base configuration for the pretrain-then-constrain study.
    pub fig3_base: TrainConfig,
    pub threads: usize,
}

/// Threads for concurrent runs, from `DUALFETE_THREADS` (default 1).
pub fn env_threads() -> usize {
    std::env::var("DUALFETE_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

/// Desk-scale training configuration shared by the training suites.
pub fn desk_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.net.height = 24;
    c.net.width = 24;
    c.net.base_channels = 4;
    c.net.depth = 2;
    c.steps = 600;
    c.eval_interval = 100;
    c.eval_batch = 25;
    // At the default rate the student collapses to background while the
    // teachers still emit all-background labels and never recovers.
    c.student.lr = 0.01;
    c.probe_eta = Some(0.05);
    c
}

/// Desk-scale base for the pretrain-then-constrain study: cross-supervision without strong views.
pub fn desk_fig3_config() -> TrainConfig {
    let mut c = desk_config();
    c.mode = Mode::DualNoFeedback;
    c.strong_aug = false;
    c.eval_interval = 50;
    c.forced_magnitude = Some(1.0);
    c
}

impl SuiteOptions {
    pub fn desk() -> Self {
        let base = desk_config();
        Self {
            data: synthetic_for(&base.net, 0),
            base,
            seeds: vec![0, 1, 2],
            fig3: Fig3Sizes { phase1_steps: 600, phase2_steps: 200, eval_interval: 50, probe_samples: 32 },
            fig3_base: desk_fig3_config(),
            threads: env_threads(),
        }
    }

    /// Tiny sizes for smoke tests of the plumbing.
    pub fn quick() -> Self {
        let mut base = desk_config();
        base.net.height = 8;
        base.net.width = 8;
        base.net.base_channels = 2;
        base.net.depth = 1;
        base.steps = 4;
        base.eval_interval = 2;
        base.batch_labeled = 2;
        base.batch_unlabeled = 2;
        let mut fig3_base = base.clone();
        fig3_base.mode = Mode::DualNoFeedback;
        fig3_base.strong_aug = false;
        let data = DataConfig { n_train: 40, n_test: 4, labeled_ratio: 0.1, ..synthetic_for(&base.net, 0) };
        Self { base, data, seeds: vec![0], fig3: Fig3Sizes { phase1_steps: 4, phase2_steps: 4, eval_interval: 2, probe_samples: 4 }, fig3_base, threads: env_threads() }
    }
}

/// A named configuration inside a suite.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: TrainConfig,
}

fn variant(name: &str, base: &TrainConfig, edit: impl FnOnce(&mut TrainConfig)) -> Variant {
    let mut config = base.clone();
    edit(&mut config);
    Variant { name: name.into(), config }
}

/// Variant grid of a training suite (every suite except fig3).
pub fn variants(name: SuiteName, base: &TrainConfig) -> Vec<Variant> {
    match name {
        SuiteName::Headline => vec![
            variant("fully_supervised", base, |c| c.mode = Mode::FullySupervised),
            variant("dual_no_feedback", base, |c| c.mode = Mode::DualNoFeedback),
            variant("dualfete", base, |c| c.mode = Mode::Dualfete),
            variant("mismatched", base, |c| {
                c.mode = Mode::Dualfete;
                c.pairing = Pairing::Mismatched;
            }),
        ],
        SuiteName::Table2 => vec![
            variant("baseline", base, |c| {
                c.mode = Mode::SingleTeacherFeedback;
                c.forced_sign = ForcedSign::Zero;
            }),
            variant("single_feedback", base, |c| c.mode = Mode::SingleTeacherFeedback),
            variant("agree_only", base, |c| c.attributors = Attributors::AgreeOnly),
            variant("disagree_only", base, |c| c.attributors = Attributors::DisagreeOnly),
            variant("mismatched", base, |c| c.pairing = Pairing::Mismatched),
            variant("dualfete", base, |_| {}),
            variant("single_feedback_strong", base, |c| {
                c.mode = Mode::SingleTeacherFeedback;
                c.strong_aug_likelihood = true;
            }),
            variant("dualfete_strong", base, |c| c.strong_aug_likelihood = true),
        ],
        SuiteName::Fig5 => [0.5, 0.6, 0.7, 0.8, 0.9]
            .into_iter()
            .flat_map(|t| {
                [
                    variant(&format!("t{t}"), base, |c| c.confidence_threshold = t),
                    variant(&format!("t{t}_strong"), base, |c| {
                        c.confidence_threshold = t;
                        c.strong_aug_likelihood = true;
                    }),
                ]
            })
            .collect(),
        SuiteName::Table3 => vec![
            variant("feedback_only", base, |c| {
                c.mode = Mode::Dualfete;
                c.cross_supervision = false;
            }),
            variant("cs_only", base, |c| c.mode = Mode::DualNoFeedback),
        ],
        SuiteName::Fig3 => fig3_variants(base),
    }
}

/// Phase-2 constraints of the pretrain-then-constrain protocol.
pub fn fig3_variants(phase2_base: &TrainConfig) -> Vec<Variant> {
    let fb = |name: &str, sign: ForcedSign, cs: bool| {
        variant(name, phase2_base, |c| {
            c.mode = Mode::Dualfete;
            c.forced_sign = sign;
            c.cross_supervision = cs;
        })
    };
    vec![
        variant("cs_only", phase2_base, |c| {
            c.mode = Mode::DualNoFeedback;
            c.cross_supervision = true;
        }),
        fb("agree_neg", ForcedSign::AgreeNeg, false),
        fb("agree_neg+cs", ForcedSign::AgreeNeg, true),
        fb("disagree_neg", ForcedSign::DisagreeNeg, false),
        fb("disagree_pos", ForcedSign::DisagreePos, false),
        fb("both", ForcedSign::None, false),
    ]
}

/// Run `jobs` on up to `threads` workers, keeping input order in the output.
fn parallel<J: Sync, T: Send>(jobs: &[J], threads: usize, f: impl Fn(&J) -> Result<T> + Sync) -> Result<Vec<T>> {
    let next = Mutex::new(0usize);
    let results: Vec<Mutex<Option<Result<T>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("job counter");
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= jobs.len() {
                    break;
                }
                *results[i].lock().expect("job slot") = Some(f(&jobs[i]));
            });
        }
    });
    results.into_iter().map(|m| m.into_inner().expect("job slot").expect("every job ran")).collect()
}

pub const TRAIN_KEYS: [&str; 2] = ["variant", "seed"];
pub const TRAIN_VALUES: [&str; 5] = ["score", "dice_student", "dice_phi", "dice_psi", "hd95_student"];
pub const FIG5_VALUES: [&str; 7] = ["threshold", "strong_likelihood", "score", "dice_student", "dice_phi", "dice_psi", "hd95_student"];
pub const TABLE3_VALUES: [&str; 7] = ["dice_student", "strong_dice_mean", "strong_dice_std", "strong_entropy_mean", "dropout_dice_std", "dropout_entropy_mean", "dropout_entropy_std"];
pub const FIG3_VALUES: [&str; 9] = ["phase1_disagreement", "phase1_pl_error", "phase1_fg_fraction", "final_disagreement", "final_pl_error", "final_fg_fraction", "max_disagreement", "final_dice_phi", "final_dice_psi"];

/// Dropout rate used only when evaluating under dropout perturbation.
pub const EVAL_DROPOUT: f64 = 0.2;
pub const PERTURB_PASSES: usize = 6;

struct Finished {
    score: f64,
    dice: [f64; 3],
    hd95: f64,
}

fn finish(cfg: &TrainConfig, state: &TrainerState, data: &Dataset) -> Result<Finished> {
    let ev = |p| evaluate(&cfg.net, p, &data.test, cfg.eval_batch);
    let (s, phi, psi) = (ev(&state.student)?, ev(&state.phi)?, ev(&state.psi)?);
    // The student is never trained in the supervised baseline; its teacher is the model.
    let score = if cfg.mode == Mode::FullySupervised { phi.dice } else { s.dice };
    Ok(Finished { score, dice: [s.dice, phi.dice, psi.dice], hd95: s.hd95 })
}

fn seed_config(v: &Variant, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..v.config.clone() }
}

/// Run a suite into `out` and return its summary (also written as `summary.csv`).
pub fn run_suite(name: SuiteName, opts: &SuiteOptions, out: &Path) -> Result<Summary> {
    let started = report::unix_now();
    create_dir(out)?;
    let data = synthetic_dataset(&opts.data)?;
    write_json(&out.join("data.json"), &opts.data)?;
    let summary = match name {
        SuiteName::Fig3 => run_fig3(opts, &data, out)?,
        _ => run_training_suite(name, opts, &data, out)?,
    };
    summary.write(&out.join(report::SUMMARY))?;
    report::write_meta(out, &format!("suite {name}"), started)?;
    Ok(summary)
}

fn run_training_suite(name: SuiteName, opts: &SuiteOptions, data: &Dataset, out: &Path) -> Result<Summary> {
    let grid = variants(name, &opts.base);
    let jobs: Vec<(&Variant, u64)> = grid.iter().flat_map(|v| opts.seeds.iter().map(move |&s| (v, s))).collect();
    let run_dir = |v: &Variant, seed: u64| -> PathBuf { out.join(&v.name).join(format!("seed{seed}")) };
    let mut summary = match name {
        SuiteName::Fig5 => Summary::new(&TRAIN_KEYS, &FIG5_VALUES),
        SuiteName::Table3 => Summary::new(&TRAIN_KEYS, &TABLE3_VALUES),
        _ => Summary::new(&TRAIN_KEYS, &TRAIN_VALUES),
    };
    let rows = parallel(&jobs, opts.threads, |&(v, seed)| -> Result<Vec<f64>> {
        let mut cfg = seed_config(v, seed);
        if name == SuiteName::Table3 {
            cfg.net.dropout_rate = EVAL_DROPOUT;
        }
        let dir = run_dir(v, seed);
        let (state, _) = train_to_dir(&cfg, data, &dir)?;
        let f = finish(&cfg, &state, data)?;
        Ok(match name {
            SuiteName::Fig5 => vec![cfg.confidence_threshold, cfg.strong_aug_likelihood as u8 as f64, f.score, f.dice[0], f.dice[1], f.dice[2], f.hd95],
            SuiteName::Table3 => {
                let strong = perturbation_report(&cfg.net, &state.student, data, Perturbation::StrongAug, PERTURB_PASSES, seed)?;
                let drop = perturbation_report(&cfg.net, &state.student, data, Perturbation::Dropout, PERTURB_PASSES, seed)?;
                write_json(&dir.join("perturbation.json"), &[&strong, &drop])?;
                vec![f.dice[0], strong.dice_mean, strong.dice_std_mean, strong.entropy_mean, drop.dice_std_mean, drop.entropy_mean, drop.entropy_std_mean]
            }
            _ => vec![f.score, f.dice[0], f.dice[1], f.dice[2], f.hd95],
        })
    })?;
    for ((v, seed), values) in jobs.iter().zip(rows) {
        summary.push(vec![v.name.clone(), seed.to_string()], values);
    }
    Ok(summary)
}

pub const PROBE_LOG: &str = "probe.csv";
pub const PHASE1: &str = "phase1";

fn write_probe_log(path: &Path, rows: &[(u64, PseudoLabelStats)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "disagreement", "pl_error", "fg_fraction"])?;
    for (step, s) in rows {
        w.write_record([step.to_string(), s.disagreement.to_string(), s.pl_error.to_string(), s.fg_fraction.to_string()])?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// Train `cfg.steps` from `state`, logging to `dir` and returning the probe-set trajectory.
fn tracked_run(state: &mut TrainerState, cfg: &TrainConfig, data: &Dataset, probe: &[SegSample], dir: &Path) -> Result<Vec<(u64, PseudoLabelStats)>> {
    create_dir(dir)?;
    write_json(&dir.join(crate::run::CONFIG_ECHO), cfg)?;
    let mut history = Vec::new();
    let mut track = Vec::new();
    run_with(state, cfg, data, &mut history, |st, rec| {
        track.push((rec.step, pseudo_label_stats(&cfg.net, &st.phi, &st.psi, probe, cfg.eval_batch)?));
        Ok(())
    })?;
    write_log(&dir.join(report::LOG), &history)?;
    write_probe_log(&dir.join(PROBE_LOG), &track)?;
    save_models(dir, state)?;
    Ok(track)
}

/// Pretrain with cross-supervision, then branch the same state into each constraint variant.
fn run_fig3(opts: &SuiteOptions, data: &Dataset, out: &Path) -> Result<Summary> {
    let sizes = opts.fig3;
    let probe: Vec<SegSample> = data.unlabeled.iter().take(sizes.probe_samples.max(1)).cloned().collect();
    let phase1_cfg = TrainConfig { steps: sizes.phase1_steps, eval_interval: sizes.eval_interval, ..opts.fig3_base.clone() };
    // Phase 2: no ramp, fresh poly schedule over its own length.
    let phase2_base = TrainConfig { steps: sizes.phase2_steps, ramp_steps: Some(0), ..phase1_cfg.clone() };
    let grid = fig3_variants(&phase2_base);

    let phase1 = parallel(&opts.seeds, opts.threads, |&seed| -> Result<(TrainerState, PseudoLabelStats)> {
        let cfg = TrainConfig { seed, ..phase1_cfg.clone() };
        let mut state = TrainerState::new(&cfg, data)?;
        let track = tracked_run(&mut state, &cfg, data, &probe, &out.join(format!("seed{seed}")).join(PHASE1))?;
        let last = track.last().map(|t| t.1).unwrap_or(pseudo_label_stats(&cfg.net, &state.phi, &state.psi, &probe, cfg.eval_batch)?);
        Ok((state, last))
    })?;

    let jobs: Vec<(usize, &Variant)> = (0..opts.seeds.len()).flat_map(|i| grid.iter().map(move |v| (i, v))).collect();
    let rows = parallel(&jobs, opts.threads, |&(i, v)| -> Result<Vec<f64>> {
        let seed = opts.seeds[i];
        let (start, p1) = &phase1[i];
        let cfg = seed_config(v, seed);
        let dir = out.join(format!("seed{seed}")).join(&v.name);
        let mut state = start.clone();
        let track = tracked_run(&mut state, &cfg, data, &probe, &dir)?;
        let last = track.last().map(|t| t.1).unwrap_or(*p1);
        let max_disag = track.iter().map(|t| t.1.disagreement).fold(p1.disagreement, f64::max);
        let f = finish(&cfg, &state, data)?;
        Ok(vec![p1.disagreement, p1.pl_error, p1.fg_fraction, last.disagreement, last.pl_error, last.fg_fraction, max_disag, f.dice[1], f.dice[2]])
    })?;
    let mut summary = Summary::new(&TRAIN_KEYS, &FIG3_VALUES);
    for ((i, v), values) in jobs.iter().zip(rows) {
        summary.push(vec![v.name.clone(), opts.seeds[*i].to_string()], values);
    }
    Ok(summary)
}


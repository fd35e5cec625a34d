//! Dual-teacher training loop: pseudo-label fusion, feedback probes,
//! receiver-weighted likelihood losses, weak-to-strong cross-supervision and
//! the student update, plus the ablation modes built on top of it.

use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::feedback::{
    cross_entropy_on_tape, feedback_loss_dual_on_tape, feedback_loss_single_on_tape, labeled_loss, probe_delta_from_direction, seg_loss_on_tape,
    LabeledBatch, Reduction,
};
use crate::grid::{Grid, LabelMap};
use crate::metrics::{batch_mean, disagreement, evaluate, foreground, pl_error};
use crate::params::{sgd_step, BoundParams, GradientVector, ModelParams};
use crate::pseudo::{fuse_dual, receiver_masks, Mask, PseudoBundle};
use crate::rng::{self, Stream};
use crate::segnet::{self, Dropout, NetConfig};
use crate::synthdata::{apply_positional_to_label, images_tensor, strong_augment, weak_augment, AugmentationSpec, Dataset, SegSample};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum Mode {
    /// Teachers learn from labeled data only; the student is never touched.
    FullySupervised,
    /// Teacher `phi` alone, with vanilla feedback over all pseudo-labels.
    SingleTeacherFeedback,
    /// Both teachers with cross-supervision, no feedback loss.
    DualNoFeedback,
    #[default]
    Dualfete,
}

impl Mode {
    fn is_dual(self) -> bool {
        matches!(self, Mode::DualNoFeedback | Mode::Dualfete)
    }
}

/// Which confidence side receives each feedback type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum Pairing {
    /// Agreement feedback on the lower-confidence teacher, disagreement on the higher.
    #[default]
    Matched,
    Mismatched,
}

/// Which feedback types reach the teachers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum Attributors {
    #[default]
    Both,
    AgreeOnly,
    DisagreeOnly,
}

/// Override of the probed feedback values. Forced variants zero the feedback they do not name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum ForcedSign {
    #[default]
    None,
    Zero,
    AgreeNeg,
    DisagreeNeg,
    DisagreePos,
    BothNeg,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 0.05, momentum: 0.9, weight_decay: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub seed: u64,
    /// Initialization seeds; derived from `seed` when absent.
    pub phi_seed: Option<u64>,
    pub psi_seed: Option<u64>,
    pub student_seed: Option<u64>,
    pub net: NetConfig,
    pub steps: u64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub student: OptimConfig,
    pub teacher: OptimConfig,
    /// Exponent of the `(1 - t/steps)^p` learning-rate decay.
    pub poly_power: f64,
    /// Probe step size; tracks the decayed student lr when absent.
    pub probe_eta: Option<f64>,
    pub normalize_probe: bool,
    pub lambda_max: f64,
    /// Ramp length in steps; 30% of `steps` when absent, no ramp when 0.
    pub ramp_steps: Option<u64>,
    pub confidence_threshold: f64,
    pub mode: Mode,
    pub pairing: Pairing,
    pub attributors: Attributors,
    pub forced_sign: ForcedSign,
    /// Smallest magnitude a forced feedback value takes.
    pub forced_floor: f64,
    /// Fixed magnitude for forced feedback instead of `max(|delta|, floor)`.
    pub forced_magnitude: Option<f64>,
    pub cross_supervision: bool,
    /// Cross-supervise on strong views; weak views are reused otherwise.
    pub strong_aug: bool,
    /// Feedback likelihood measured on the strong view.
    pub strong_aug_likelihood: bool,
    pub likelihood_reduction: Reduction,
    pub finetune_steps: u64,
    pub finetune_lr: f64,
    pub eval_interval: u64,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            phi_seed: None,
            psi_seed: None,
            student_seed: None,
            net: NetConfig::default(),
            steps: 1500,
            batch_labeled: 4,
            batch_unlabeled: 8,
            student: OptimConfig::default(),
            teacher: OptimConfig::default(),
            poly_power: 0.9,
            probe_eta: None,
            normalize_probe: true,
            lambda_max: 1.0,
            ramp_steps: None,
            confidence_threshold: 0.7,
            mode: Mode::Dualfete,
            pairing: Pairing::Matched,
            attributors: Attributors::Both,
            forced_sign: ForcedSign::None,
            forced_floor: 0.01,
            forced_magnitude: None,
            cross_supervision: true,
            strong_aug: true,
            strong_aug_likelihood: false,
            likelihood_reduction: Reduction::Mean,
            finetune_steps: 0,
            finetune_lr: 0.01,
            eval_interval: 100,
            eval_batch: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        ensure!((0.0..=1.0).contains(&self.confidence_threshold), "TrainConfig", "confidence_threshold {} outside [0, 1]", self.confidence_threshold);
        ensure!(self.batch_labeled > 0 && self.batch_unlabeled > 0, "TrainConfig", "batch sizes must be positive");
        ensure!(self.eval_interval > 0 && self.eval_batch > 0, "TrainConfig", "eval_interval and eval_batch must be positive");
        for (name, o) in [("student", &self.student), ("teacher", &self.teacher)] {
            ensure!(o.lr >= 0.0 && o.momentum >= 0.0 && o.weight_decay >= 0.0, "TrainConfig", "{} optimizer values must be non-negative", name);
        }
        if let Some(eta) = self.probe_eta {
            ensure!(eta > 0.0, "TrainConfig", "probe_eta must be positive, got {}", eta);
        }
        ensure!(self.forced_floor >= 0.0 && self.lambda_max >= 0.0, "TrainConfig", "forced_floor and lambda_max must be non-negative");
        Ok(())
    }

    pub fn init_seeds(&self) -> (u64, u64, u64) {
        (
            self.phi_seed.unwrap_or_else(|| rng::derive(self.seed, 1)),
            self.psi_seed.unwrap_or_else(|| rng::derive(self.seed, 2)),
            self.student_seed.unwrap_or_else(|| rng::derive(self.seed, 3)),
        )
    }

    fn ramp_len(&self) -> u64 {
        self.ramp_steps.unwrap_or(self.steps * 3 / 10)
    }

    fn forced(&self, raw_agree: f64, raw_disagree: f64) -> (f64, f64) {
        let mag = |d: f64| self.forced_magnitude.unwrap_or_else(|| d.abs().max(self.forced_floor));
        match self.forced_sign {
            ForcedSign::None => (raw_agree, raw_disagree),
            ForcedSign::Zero => (0.0, 0.0),
            ForcedSign::AgreeNeg => (-mag(raw_agree), 0.0),
            ForcedSign::DisagreeNeg => (0.0, -mag(raw_disagree)),
            ForcedSign::DisagreePos => (0.0, mag(raw_disagree)),
            ForcedSign::BothNeg => (-mag(raw_agree), -mag(raw_disagree)),
        }
    }
}

/// `lambda_max * exp(-5 (1 - min(step / ramp_steps, 1))^2)`; a zero-length ramp is already complete.
pub fn ramp_up(step: u64, ramp_steps: u64, lambda_max: f64) -> f64 {
    let t = if ramp_steps == 0 { 1.0 } else { (step as f64 / ramp_steps as f64).min(1.0) };
    lambda_max * libm::exp(-5.0 * (1.0 - t) * (1.0 - t))
}

fn poly_decay(t: u64, steps: u64, power: f64) -> f64 {
    if steps == 0 {
        return 1.0;
    }
    libm::pow(1.0 - (t as f64 / steps as f64).min(1.0), power)
}

/// One logged row. Train-side values describe the step that was just taken.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss_l_phi: f64,
    pub loss_l_psi: f64,
    pub loss_df_phi: f64,
    pub loss_df_psi: f64,
    pub loss_cs_phi: f64,
    pub loss_cs_psi: f64,
    pub loss_student: f64,
    pub delta_a: f64,
    pub delta_d: f64,
    pub lambda: f64,
    pub pl_error_train: f64,
    pub disag_train: f64,
    pub dice_test_student: f64,
    pub dice_test_phi: f64,
    pub dice_test_psi: f64,
    pub hd95_test_student: f64,
    pub fg_pixel_frac_pl: f64,
}

impl MetricsRecord {
    pub const COLUMNS: [&'static str; 18] = [
        "step",
        "loss_l_phi",
        "loss_l_psi",
        "loss_df_phi",
        "loss_df_psi",
        "loss_cs_phi",
        "loss_cs_psi",
        "loss_student",
        "delta_a",
        "delta_d",
        "lambda",
        "pl_error_train",
        "disag_train",
        "dice_test_student",
        "dice_test_phi",
        "dice_test_psi",
        "hd95_test_student",
        "fg_pixel_frac_pl",
    ];

    /// Everything after `step`, in column order.
    pub fn values(&self) -> [f64; 17] {
        [
            self.loss_l_phi,
            self.loss_l_psi,
            self.loss_df_phi,
            self.loss_df_psi,
            self.loss_cs_phi,
            self.loss_cs_psi,
            self.loss_student,
            self.delta_a,
            self.delta_d,
            self.lambda,
            self.pl_error_train,
            self.disag_train,
            self.dice_test_student,
            self.dice_test_phi,
            self.dice_test_psi,
            self.hd95_test_student,
            self.fg_pixel_frac_pl,
        ]
    }
}

/// Seeded round-robin over a shuffled index set, reshuffled after each pass.
#[derive(Debug, Clone)]
struct Sampler {
    n: usize,
    order: Vec<usize>,
    pos: usize,
    rng: Stream,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed);
        let order = rng::permutation(&mut rng, n);
        Self { n, order, pos: 0, rng }
    }

    fn next_batch(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k && self.n > 0 {
            if self.pos == self.order.len() {
                self.order = rng::permutation(&mut self.rng, self.n);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainerState {
    pub phi: ModelParams,
    pub psi: ModelParams,
    pub student: ModelParams,
    pub vel_phi: GradientVector,
    pub vel_psi: GradientVector,
    pub vel_student: GradientVector,
    pub step: u64,
    labeled: Sampler,
    unlabeled: Sampler,
    aug: Stream,
}

impl TrainerState {
    pub fn new(config: &TrainConfig, data: &Dataset) -> Result<Self> {
        config.validate()?;
        let (sp, ss, st) = config.init_seeds();
        let phi = segnet::build(&config.net, sp)?;
        let psi = segnet::build(&config.net, ss)?;
        let student = segnet::build(&config.net, st)?;
        Ok(Self {
            vel_phi: phi.zeros_like(),
            vel_psi: psi.zeros_like(),
            vel_student: student.zeros_like(),
            phi,
            psi,
            student,
            step: 0,
            labeled: Sampler::new(data.labeled.len(), rng::derive(config.seed, 10)),
            unlabeled: Sampler::new(data.unlabeled.len(), rng::derive(config.seed, 11)),
            aug: rng::stream(rng::derive(config.seed, 12)),
        })
    }
}

fn check(term: &'static str, step: u64, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { term, step })
    }
}

/// Positional part of each strong view applied to per-image maps; the
/// pasted region comes from the next image in the batch, like the images.
fn follow<T: Copy>(specs: &[AugmentationSpec], grids: &[Grid<T>], fill: T) -> Vec<Grid<T>> {
    let n = grids.len();
    (0..n).map(|i| apply_positional_to_label(&specs[i], &grids[i], Some(&grids[(i + 1) % n]), fill)).collect()
}

/// Weak-to-strong cross-supervision: segmentation loss of the strong-view
/// predictions against the counterpart's transformed pseudo-labels, kept
/// where the counterpart's transformed confidence reaches `threshold`.
pub fn cross_sup_loss_on_tape(
    tape: &mut Tape,
    strong_probs: Var,
    other_labels_weak: &[LabelMap],
    other_conf_weak: &[Grid<f64>],
    specs: &[AugmentationSpec],
    threshold: f64,
) -> Result<Var> {
    ensure!(
        other_labels_weak.len() == specs.len() && other_conf_weak.len() == specs.len(),
        "cross_sup_loss",
        "{} labels, {} confidences, {} specs",
        other_labels_weak.len(),
        other_conf_weak.len(),
        specs.len()
    );
    let targets = follow(specs, other_labels_weak, 0u8);
    let mask: Vec<Mask> = follow(specs, other_conf_weak, 0.0).iter().map(|c| c.map(|v| (v >= threshold) as u8)).collect();
    seg_loss_on_tape(tape, strong_probs, &targets, Some(&mask))
}

/// Value of [`cross_sup_loss_on_tape`] for fixed strong-view probabilities.
pub fn cross_sup_loss(
    strong_prob_maps: &Tensor,
    other_labels_weak: &[LabelMap],
    other_conf_weak: &[Grid<f64>],
    specs: &[AugmentationSpec],
    threshold: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(strong_prob_maps.clone());
    let l = cross_sup_loss_on_tape(&mut tape, p, other_labels_weak, other_conf_weak, specs, threshold)?;
    tape.value(l).item()
}

/// A teacher's forwards for one step, recorded on its own tape.
struct TeacherPass {
    tape: Tape,
    bound: BoundParams,
    weak: Var,
    labeled: Var,
    strong: Var,
}

fn teacher_pass(net: &NetConfig, params: &ModelParams, weak: &Tensor, labeled: &Tensor, strong: Option<&Tensor>) -> Result<TeacherPass> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let xw = tape.constant(weak.clone());
    let weak_v = segnet::forward_on_tape(&mut tape, net, &bound, xw, Dropout::Off)?;
    let xl = tape.constant(labeled.clone());
    let labeled_v = segnet::forward_on_tape(&mut tape, net, &bound, xl, Dropout::Off)?;
    let strong_v = match strong {
        Some(s) => {
            let xs = tape.constant(s.clone());
            segnet::forward_on_tape(&mut tape, net, &bound, xs, Dropout::Off)?
        }
        None => weak_v,
    };
    Ok(TeacherPass { tape, bound, weak: weak_v, labeled: labeled_v, strong: strong_v })
}

/// Per-teacher inputs for its objective.
struct TeacherTerms<'a> {
    own_labels: &'a [LabelMap],
    other_labels: &'a [LabelMap],
    other_conf: &'a [Grid<f64>],
    recv_agree: &'a [Mask],
    recv_disagree: &'a [Mask],
}

#[derive(Debug, Clone, Copy, Default)]
struct TeacherLosses {
    l: f64,
    df: f64,
    cs: f64,
}

struct StepContext<'a> {
    cfg: &'a TrainConfig,
    step: u64,
    lab: &'a LabeledBatch,
    specs: &'a [AugmentationSpec],
    delta_agree: f64,
    delta_disagree: f64,
    lambda: f64,
    lr: f64,
    cross: bool,
}

/// Builds `L_l + L_df + lambda * L_cs` on the teacher's tape and takes one SGD step.
fn update_teacher(
    ctx: &StepContext<'_>,
    mut pass: TeacherPass,
    terms: Option<TeacherTerms<'_>>,
    params: &mut ModelParams,
    velocity: &mut GradientVector,
    names: [&'static str; 3],
) -> Result<TeacherLosses> {
    let cfg = ctx.cfg;
    let tape = &mut pass.tape;
    let mut out = TeacherLosses::default();
    let ll = cross_entropy_on_tape(tape, pass.labeled, &ctx.lab.labels, None)?;
    out.l = check(names[0], ctx.step, tape.value(ll).item()?)?;
    let mut total = ll;
    if let Some(t) = terms {
        if ctx.delta_agree != 0.0 || ctx.delta_disagree != 0.0 {
            let df = if cfg.strong_aug_likelihood {
                let own = follow(ctx.specs, t.own_labels, 0u8);
                let ra = follow(ctx.specs, t.recv_agree, 0u8);
                let rd = follow(ctx.specs, t.recv_disagree, 0u8);
                feedback_loss_dual_on_tape(tape, pass.strong, &own, ctx.delta_agree, ctx.delta_disagree, &ra, &rd, cfg.likelihood_reduction)?
            } else {
                feedback_loss_dual_on_tape(tape, pass.weak, t.own_labels, ctx.delta_agree, ctx.delta_disagree, t.recv_agree, t.recv_disagree, cfg.likelihood_reduction)?
            };
            out.df = check(names[1], ctx.step, tape.value(df).item()?)?;
            total = tape.add(total, df)?;
        }
        if ctx.cross {
            let cs = cross_sup_loss_on_tape(tape, pass.strong, t.other_labels, t.other_conf, ctx.specs, cfg.confidence_threshold)?;
            out.cs = check(names[2], ctx.step, tape.value(cs).item()?)?;
            let weighted = tape.scale(cs, ctx.lambda);
            total = tape.add(total, weighted)?;
        }
    }
    let grads = params.gradients(&pass.bound, &tape.backward(total)?);
    let (p, v) = sgd_step(params, &grads, velocity, ctx.lr, cfg.teacher.momentum, cfg.teacher.weight_decay)?;
    *params = p;
    *velocity = v;
    Ok(out)
}

/// Student forward shared by the probes and the student's own update.
struct StudentPass {
    tape: Tape,
    bound: BoundParams,
    probs: Var,
}

impl StudentPass {
    fn new(net: &NetConfig, params: &ModelParams, images: &Tensor) -> Result<Self> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.constant(images.clone());
        let probs = segnet::forward_on_tape(&mut tape, net, &bound, x, Dropout::Off)?;
        Ok(Self { tape, bound, probs })
    }

    fn seg_grad(&mut self, params: &ModelParams, targets: &[LabelMap], mask: Option<&[Mask]>) -> Result<(f64, GradientVector)> {
        let l = seg_loss_on_tape(&mut self.tape, self.probs, targets, mask)?;
        let g = params.gradients(&self.bound, &self.tape.backward(l)?);
        Ok((self.tape.value(l).item()?, g))
    }
}

fn fg_fraction(labels: &[LabelMap]) -> f64 {
    let total: usize = labels.iter().map(|l| l.data.len()).sum();
    let fg: usize = labels.iter().map(|l| l.count_nonzero()).sum();
    if total == 0 {
        0.0
    } else {
        fg as f64 / total as f64
    }
}

fn train_side_metrics(rec: &mut MetricsRecord, bundle: &PseudoBundle, targets: &[LabelMap], weak_u: &[SegSample]) -> Result<()> {
    let gt: Vec<LabelMap> = weak_u.iter().map(|s| s.label.clone()).collect();
    rec.pl_error_train = batch_mean(targets, &gt, pl_error)?;
    rec.disag_train = batch_mean(&bundle.label_phi, &bundle.label_psi, |a, b| disagreement(&foreground(a), &foreground(b)))?;
    rec.fg_pixel_frac_pl = fg_fraction(targets);
    Ok(())
}

/// One stochastic step. `t` indexes the step within the current schedule
/// (learning-rate decay and ramp-up); `state.step` counts every step taken.
pub fn train_step(state: &mut TrainerState, config: &TrainConfig, labeled: &[SegSample], unlabeled: &[SegSample], t: u64) -> Result<MetricsRecord> {
    ensure!(!labeled.is_empty() && !unlabeled.is_empty(), "train_step", "empty batch ({} labeled, {} unlabeled)", labeled.len(), unlabeled.len());
    let cfg = config;
    let net = &cfg.net;
    let step = state.step;
    let frac = poly_decay(t, cfg.steps, cfg.poly_power);
    let (lr_s, lr_t) = (cfg.student.lr * frac, cfg.teacher.lr * frac);
    let lambda = ramp_up(t, cfg.ramp_len(), cfg.lambda_max);

    // Views. Strong views are always drawn so every mode consumes the same randomness.
    let weak_l: Vec<SegSample> = labeled.iter().map(|s| weak_augment(s, &mut state.aug).0).collect();
    let weak_u: Vec<SegSample> = unlabeled.iter().map(|s| weak_augment(s, &mut state.aug).0).collect();
    let nu = weak_u.len();
    let strong: Vec<(Grid<f64>, AugmentationSpec)> = (0..nu).map(|i| strong_augment(&weak_u[i].image, &weak_u[(i + 1) % nu], &mut state.aug)).collect();
    let lab = LabeledBatch::from_samples(&weak_l)?;
    let u_images = images_tensor(weak_u.iter().map(|s| &s.image))?;
    let (s_images, specs): (Option<Tensor>, Vec<AugmentationSpec>) = if cfg.strong_aug {
        (Some(images_tensor(strong.iter().map(|s| &s.0))?), strong.into_iter().map(|s| s.1).collect())
    } else {
        (None, (0..nu).map(|_| AugmentationSpec::identity()).collect())
    };
    let cross = cfg.mode.is_dual() && cfg.cross_supervision;
    let needs_strong = cross || (cfg.mode == Mode::Dualfete && cfg.strong_aug_likelihood);
    let strong_in = if needs_strong { s_images.as_ref() } else { None };

    // Teacher forwards and fusion.
    let phi_pass = teacher_pass(net, &state.phi, &u_images, &lab.images, strong_in)?;
    let psi_pass = teacher_pass(net, &state.psi, &u_images, &lab.images, strong_in)?;
    let bundle = fuse_dual(phi_pass.tape.value(phi_pass.weak), psi_pass.tape.value(psi_pass.weak))?;
    let targets: &[LabelMap] = if cfg.mode == Mode::SingleTeacherFeedback { &bundle.label_phi } else { &bundle.fused };

    let mut rec = MetricsRecord { step, lambda, ..Default::default() };
    train_side_metrics(&mut rec, &bundle, targets, &weak_u)?;

    // Probes and the student update.
    let (mut delta_agree, mut delta_disagree) = (0.0, 0.0);
    if cfg.mode != Mode::FullySupervised {
        let mut sp = StudentPass::new(net, &state.student, &u_images)?;
        let eta = cfg.probe_eta.unwrap_or(lr_s);
        if eta > 0.0 {
            let base = labeled_loss(net, &state.student, &lab)?;
            let probe = |sp: &mut StudentPass, mask: Option<&[Mask]>| -> Result<f64> {
                let (_, dir) = sp.seg_grad(&state.student, targets, mask)?;
                Ok(probe_delta_from_direction(net, &state.student, &lab, base, &dir, eta, cfg.normalize_probe)?.delta)
            };
            if cfg.mode == Mode::SingleTeacherFeedback {
                delta_agree = check("delta", step, probe(&mut sp, None)?)?;
            } else {
                delta_agree = check("delta_a", step, probe(&mut sp, Some(&bundle.agree_mask))?)?;
                delta_disagree = check("delta_d", step, probe(&mut sp, Some(&bundle.disagree_mask))?)?;
            }
        }
        (delta_agree, delta_disagree) = match cfg.mode {
            Mode::DualNoFeedback => (0.0, 0.0),
            Mode::SingleTeacherFeedback => (cfg.forced(delta_agree, 0.0).0, 0.0),
            _ => {
                let (a, d) = cfg.forced(delta_agree, delta_disagree);
                match cfg.attributors {
                    Attributors::Both => (a, d),
                    Attributors::AgreeOnly => (a, 0.0),
                    Attributors::DisagreeOnly => (0.0, d),
                }
            }
        };
        let (ls, g) = sp.seg_grad(&state.student, targets, None)?;
        rec.loss_student = check("loss_student", step, ls)?;
        let (p, v) = sgd_step(&state.student, &g, &state.vel_student, lr_s, cfg.student.momentum, cfg.student.weight_decay)?;
        state.student = p;
        state.vel_student = v;
    }
    rec.delta_a = delta_agree;
    rec.delta_d = delta_disagree;

    // Teacher updates.
    let ctx = StepContext { cfg, step, lab: &lab, specs: &specs, delta_agree, delta_disagree, lambda, lr: lr_t, cross };
    match cfg.mode {
        Mode::FullySupervised => {
            let a = update_teacher(&ctx, phi_pass, None, &mut state.phi, &mut state.vel_phi, ["loss_l_phi", "", ""])?;
            let b = update_teacher(&ctx, psi_pass, None, &mut state.psi, &mut state.vel_psi, ["loss_l_psi", "", ""])?;
            rec.loss_l_phi = a.l;
            rec.loss_l_psi = b.l;
        }
        Mode::SingleTeacherFeedback => {
            let mut pass = phi_pass;
            let ll = cross_entropy_on_tape(&mut pass.tape, pass.labeled, &lab.labels, None)?;
            rec.loss_l_phi = check("loss_l_phi", step, pass.tape.value(ll).item()?)?;
            let mut total = ll;
            if delta_agree != 0.0 {
                let fb = feedback_loss_single_on_tape(&mut pass.tape, pass.weak, &bundle.label_phi, delta_agree, cfg.likelihood_reduction)?;
                rec.loss_df_phi = check("loss_df_phi", step, pass.tape.value(fb).item()?)?;
                total = pass.tape.add(total, fb)?;
            }
            let grads = state.phi.gradients(&pass.bound, &pass.tape.backward(total)?);
            let (p, v) = sgd_step(&state.phi, &grads, &state.vel_phi, lr_t, cfg.teacher.momentum, cfg.teacher.weight_decay)?;
            state.phi = p;
            state.vel_phi = v;
        }
        Mode::DualNoFeedback | Mode::Dualfete => {
            let recv = receiver_masks(&bundle);
            let recv = if cfg.pairing == Pairing::Mismatched { recv.mismatched() } else { recv };
            let phi_terms = TeacherTerms {
                own_labels: &bundle.label_phi,
                other_labels: &bundle.label_psi,
                other_conf: &bundle.conf_psi,
                recv_agree: &recv.phi_agree,
                recv_disagree: &recv.phi_disagree,
            };
            let psi_terms = TeacherTerms {
                own_labels: &bundle.label_psi,
                other_labels: &bundle.label_phi,
                other_conf: &bundle.conf_phi,
                recv_agree: &recv.psi_agree,
                recv_disagree: &recv.psi_disagree,
            };
            let a = update_teacher(&ctx, phi_pass, Some(phi_terms), &mut state.phi, &mut state.vel_phi, ["loss_l_phi", "loss_df_phi", "loss_cs_phi"])?;
            let b = update_teacher(&ctx, psi_pass, Some(psi_terms), &mut state.psi, &mut state.vel_psi, ["loss_l_psi", "loss_df_psi", "loss_cs_psi"])?;
            (rec.loss_l_phi, rec.loss_df_phi, rec.loss_cs_phi) = (a.l, a.df, a.cs);
            (rec.loss_l_psi, rec.loss_df_psi, rec.loss_cs_psi) = (b.l, b.df, b.cs);
        }
    }
    state.step += 1;
    Ok(rec)
}

/// Test-set columns of a record.
pub fn fill_test_metrics(rec: &mut MetricsRecord, config: &TrainConfig, state: &TrainerState, test: &[SegSample]) -> Result<()> {
    if test.is_empty() {
        return Ok(());
    }
    let s = evaluate(&config.net, &state.student, test, config.eval_batch)?;
    rec.dice_test_student = s.dice;
    rec.hd95_test_student = s.hd95;
    rec.dice_test_phi = evaluate(&config.net, &state.phi, test, config.eval_batch)?.dice;
    rec.dice_test_psi = evaluate(&config.net, &state.psi, test, config.eval_batch)?.dice;
    Ok(())
}

/// Teacher agreement statistics on a fixed, unaugmented sample set.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PseudoLabelStats {
    pub disagreement: f64,
    pub pl_error: f64,
    pub fg_fraction: f64,
}

/// Fuses both teachers' predictions on `samples` and scores the fused labels against ground truth.
pub fn pseudo_label_stats(net: &NetConfig, phi: &ModelParams, psi: &ModelParams, samples: &[SegSample], batch: usize) -> Result<PseudoLabelStats> {
    ensure!(!samples.is_empty(), "pseudo_label_stats", "empty sample set");
    let (mut disag, mut err, mut fg, mut pixels) = (0.0, 0.0, 0usize, 0usize);
    for chunk in samples.chunks(batch.max(1)) {
        let x = images_tensor(chunk.iter().map(|s| &s.image))?;
        let bundle = fuse_dual(&segnet::forward(net, phi, &x, Dropout::Off)?, &segnet::forward(net, psi, &x, Dropout::Off)?)?;
        for (i, s) in chunk.iter().enumerate() {
            disag += disagreement(&foreground(&bundle.label_phi[i]), &foreground(&bundle.label_psi[i]))?;
            err += pl_error(&bundle.fused[i], &s.label)?;
            fg += bundle.fused[i].count_nonzero();
            pixels += bundle.fused[i].data.len();
        }
    }
    let n = samples.len() as f64;
    Ok(PseudoLabelStats { disagreement: disag / n, pl_error: err / n, fg_fraction: fg as f64 / pixels as f64 })
}

fn pick(samples: &[SegSample], idx: &[usize]) -> Vec<SegSample> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}

/// Run `config.steps` steps from `state`, appending a record every
/// `eval_interval` steps and after the last one.
pub fn run(state: &mut TrainerState, config: &TrainConfig, data: &Dataset, history: &mut Vec<MetricsRecord>) -> Result<()> {
    run_with(state, config, data, history, |_, _| Ok(()))
}

/// [`run`] with a hook called after each recorded step.
pub fn run_with(
    state: &mut TrainerState,
    config: &TrainConfig,
    data: &Dataset,
    history: &mut Vec<MetricsRecord>,
    mut on_record: impl FnMut(&TrainerState, &MetricsRecord) -> Result<()>,
) -> Result<()> {
    config.validate()?;
    ensure!(!data.labeled.is_empty() && !data.unlabeled.is_empty(), "train", "dataset needs labeled and unlabeled samples");
    for t in 0..config.steps {
        let lab = pick(&data.labeled, &state.labeled.next_batch(config.batch_labeled));
        let unl = pick(&data.unlabeled, &state.unlabeled.next_batch(config.batch_unlabeled));
        let mut rec = train_step(state, config, &lab, &unl, t)?;
        if (t + 1) % config.eval_interval == 0 || t + 1 == config.steps {
            fill_test_metrics(&mut rec, config, state, &data.test)?;
            on_record(state, &rec)?;
            history.push(rec);
        }
    }
    Ok(())
}

/// Full run: fresh state, `config.steps` steps, then optional student fine-tuning.
pub fn train(config: &TrainConfig, data: &Dataset) -> Result<(TrainerState, Vec<MetricsRecord>)> {
    let mut state = TrainerState::new(config, data)?;
    let mut history = Vec::new();
    if config.steps == 0 {
        return Ok((state, history));
    }
    run(&mut state, config, data, &mut history)?;
    if config.finetune_steps > 0 {
        state.student = finetune_student(&config.net, &state.student, &data.labeled, config.finetune_steps, config.finetune_lr, config.batch_labeled, rng::derive(config.seed, 13))?;
    }
    Ok((state, history))
}

/// Supervised SGD (momentum 0.9) on the segmentation loss over labeled samples.
pub fn finetune_student(net: &NetConfig, params: &ModelParams, labeled: &[SegSample], steps: u64, lr: f64, batch: usize, seed: u64) -> Result<ModelParams> {
    let mut p = params.clone();
    if steps == 0 {
        return Ok(p);
    }
    ensure!(!labeled.is_empty() && batch > 0, "finetune_student", "need labeled samples and a positive batch size");
    let mut vel = p.zeros_like();
    let mut sampler = Sampler::new(labeled.len(), seed);
    for t in 0..steps {
        let b = LabeledBatch::from_samples(&pick(labeled, &sampler.next_batch(batch)))?;
        let mut sp = StudentPass::new(net, &p, &b.images)?;
        let (l, g) = sp.seg_grad(&p, &b.labels, None)?;
        check("loss_finetune", t, l)?;
        let (np, nv) = sgd_step(&p, &g, &vel, lr, 0.9, 0.0)?;
        p = np;
        vel = nv;
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_dataset, split};
    use alloc::vec;

    fn tiny(mode: Mode) -> (TrainConfig, Dataset) {
        let net = NetConfig { height: 8, width: 8, base_channels: 2, depth: 1, num_classes: 2, dropout_rate: 0.0 };
        let cfg = TrainConfig { net, steps: 6, batch_labeled: 2, batch_unlabeled: 3, mode, eval_interval: 3, eval_batch: 4, ..Default::default() };
        let data = split(generate_dataset(7, 16, 8, 8, 0.4).unwrap(), 0.25, 7).unwrap();
        (cfg, data)
    }

    #[test]
    fn ramp_closed_form() {
        assert!((ramp_up(0, 10, 2.0) - 2.0 * libm::exp(-5.0)).abs() < 1e-15);
        assert_eq!(ramp_up(10, 10, 2.0), 2.0);
        assert_eq!(ramp_up(25, 10, 2.0), 2.0);
        assert_eq!(ramp_up(0, 0, 1.5), 1.5);
        let mut prev = 0.0;
        for s in 0..20 {
            let v = ramp_up(s, 12, 1.0);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn zero_steps_returns_initial_state() {
        let (mut cfg, data) = tiny(Mode::Dualfete);
        cfg.steps = 0;
        let (state, hist) = train(&cfg, &data).unwrap();
        assert!(hist.is_empty());
        assert_eq!(state.step, 0);
        assert_eq!(state.student, segnet::build(&cfg.net, cfg.init_seeds().2).unwrap());
    }

    #[test]
    fn fully_supervised_leaves_student_alone() {
        let (cfg, data) = tiny(Mode::FullySupervised);
        let (state, hist) = train(&cfg, &data).unwrap();
        let (p, _, s) = cfg.init_seeds();
        assert_eq!(state.student, segnet::build(&cfg.net, s).unwrap());
        assert_ne!(state.phi, segnet::build(&cfg.net, p).unwrap());
        assert_eq!(hist.len(), 2);
    }

    #[test]
    fn dualfete_is_deterministic_and_finite() {
        let (cfg, data) = tiny(Mode::Dualfete);
        let (_, a) = train(&cfg, &data).unwrap();
        let (_, b) = train(&cfg, &data).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|r| r.values().iter().all(|v| v.is_finite())));
    }

    #[test]
    fn identical_teachers_have_no_disagreement_feedback() {
        let (mut cfg, data) = tiny(Mode::Dualfete);
        cfg.phi_seed = Some(5);
        cfg.psi_seed = Some(5);
        cfg.eval_interval = 1;
        let (_, hist) = train(&cfg, &data).unwrap();
        assert_eq!(hist[0].delta_d, 0.0);
        assert_eq!(hist[0].disag_train, 0.0);
    }

    #[test]
    fn no_feedback_equals_zero_forced_feedback() {
        let (cfg, data) = tiny(Mode::DualNoFeedback);
        let forced = TrainConfig { mode: Mode::Dualfete, forced_sign: ForcedSign::Zero, ..cfg.clone() };
        assert_eq!(train(&cfg, &data).unwrap().1, train(&forced, &data).unwrap().1);
    }

    #[test]
    fn swapping_teacher_seeds_swaps_trajectories() {
        let (mut cfg, data) = tiny(Mode::Dualfete);
        cfg.phi_seed = Some(11);
        cfg.psi_seed = Some(12);
        let (sa, ha) = train(&cfg, &data).unwrap();
        cfg.phi_seed = Some(12);
        cfg.psi_seed = Some(11);
        let (sb, hb) = train(&cfg, &data).unwrap();
        assert_eq!(sa.phi, sb.psi);
        assert_eq!(sa.psi, sb.phi);
        for (a, b) in ha.iter().zip(&hb) {
            assert_eq!((a.loss_l_phi, a.loss_df_phi, a.loss_cs_phi), (b.loss_l_psi, b.loss_df_psi, b.loss_cs_psi));
            assert_eq!(a.dice_test_student, b.dice_test_student);
        }
    }

    #[test]
    fn cross_sup_threshold_extremes() {
        let lab = vec![Grid::from_vec(2, 2, vec![1u8, 0, 0, 1]).unwrap()];
        let conf = vec![Grid::from_vec(2, 2, vec![0.9, 0.6, 0.6, 0.6]).unwrap()];
        let specs = vec![AugmentationSpec::identity()];
        let p = Tensor::new(vec![1, 2, 2, 2], vec![0.3, 0.6, 0.8, 0.1, 0.7, 0.4, 0.2, 0.9]).unwrap();
        assert_eq!(cross_sup_loss(&p, &lab, &conf, &specs, 1.0 + 1e-9).unwrap(), 0.0);
        let all = crate::feedback::seg_loss(&p, &lab, None).unwrap();
        assert_eq!(cross_sup_loss(&p, &lab, &conf, &specs, 0.0).unwrap(), all);
        // only pixel 0 (label 1, p1 = 0.7) survives: CE = -ln 0.7, Dice over that pixel.
        let one = cross_sup_loss(&p, &lab, &conf, &specs, 0.7).unwrap();
        let ce = -libm::log(0.7);
        let d0 = (2.0 * 0.0 + 1e-5) / (0.3 + 0.0 + 1e-5);
        let d1 = (2.0 * 0.7 + 1e-5) / (0.7 + 1.0 + 1e-5);
        let dice = 1.0 - (d0 + d1) / 2.0;
        assert!((one - 0.5 * (ce + dice)).abs() < 1e-12, "{one}");
    }

    #[test]
    fn finetune_zero_steps_is_identity() {
        let (cfg, data) = tiny(Mode::Dualfete);
        let p = segnet::build(&cfg.net, 1).unwrap();
        assert_eq!(finetune_student(&cfg.net, &p, &data.labeled, 0, 0.1, 2, 0).unwrap(), p);
    }

    #[test]
    fn non_finite_loss_names_the_term() {
        let (mut cfg, data) = tiny(Mode::Dualfete);
        cfg.teacher.lr = 1e200;
        cfg.steps = 3;
        match train(&cfg, &data) {
            Err(Error::NonFinite { term, .. }) => assert!(term.starts_with("loss") || term.starts_with("delta"), "{term}"),
            other => panic!("expected a non-finite abort, got {:?}", other.map(|_| ())),
        }
    }
}

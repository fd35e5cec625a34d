//! Loss terms and the student feedback probe.
//!
//! The probe takes a virtual SGD step on the student using the gradient of
//! the segmentation loss over one attributor region and reports how much
//! the student's labeled cross-entropy dropped. Teachers then scale the log
//! likelihood of their own pseudo-labels on their receiver regions by that
//! signal.

use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::{ensure, Result};
use crate::grid::{broadcast_channels, one_hot, Grid, LabelMap};
use crate::params::{axpy_params, grad_norm, scale_grads, GradientVector, ModelParams};
use crate::pseudo::{argmax_label, Mask};
use crate::segnet::{self, Dropout, NetConfig};
use crate::synthdata::{images_tensor, SegSample};
use crate::tensor::Tensor;

/// Probabilities are clamped into `[PROB_FLOOR, 1 - PROB_FLOOR]` before any log.
pub const PROB_FLOOR: f64 = 1e-9;
/// Additive smoothing in the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;
/// Probe directions with a smaller norm are not normalized.
pub const ZERO_NORM: f64 = 1e-12;

/// Images with ground truth, ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub images: Tensor,
    pub labels: Vec<LabelMap>,
}

impl LabeledBatch {
    pub fn from_samples(samples: &[SegSample]) -> Result<Self> {
        ensure!(!samples.is_empty(), "LabeledBatch", "empty batch");
        Ok(Self { images: images_tensor(samples.iter().map(|s| &s.image))?, labels: samples.iter().map(|s| s.label.clone()).collect() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// How the masked log-likelihood is aggregated over the receiver region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum Reduction {
    /// Mean log-probability: `log(prod p) / |mask|`.
    #[default]
    Mean,
    /// Raw log of the cumulative product.
    Sum,
}

/// Feedback from the two attributor regions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackSignal {
    pub delta_agree: f64,
    pub delta_disagree: f64,
    pub eta: f64,
    pub normalized: bool,
    pub grad_norm_agree: f64,
    pub grad_norm_disagree: f64,
}

fn mask_weights(mask: Option<&[Mask]>, labels: &[LabelMap]) -> Result<Option<Vec<Grid<f64>>>> {
    match mask {
        None => Ok(None),
        Some(m) => {
            ensure!(m.len() == labels.len(), "mask", "{} masks for {} images", m.len(), labels.len());
            for (mi, li) in m.iter().zip(labels) {
                ensure!(mi.same_dims(li), "mask", "mask {}x{} vs label {}x{}", mi.height, mi.width, li.height, li.width);
            }
            Ok(Some(m.iter().map(|g| g.map(f64::from)).collect()))
        }
    }
}

fn support(mask: Option<&[Grid<f64>]>, labels: &[LabelMap]) -> f64 {
    match mask {
        None => labels.iter().map(|l| l.data.len()).sum::<usize>() as f64,
        Some(m) => m.iter().map(|g| g.data.iter().sum::<f64>()).sum(),
    }
}

fn clamped_log(tape: &mut Tape, probs: Var) -> Var {
    let c = tape.clamp(probs, PROB_FLOOR, 1.0 - PROB_FLOOR);
    tape.log(c)
}

fn classes_of(tape: &Tape, probs: Var) -> Result<usize> {
    Ok(tape.value(probs).dims4()?.1)
}

/// Pixel-averaged cross-entropy over mask=1 pixels; a constant 0 on empty support.
pub fn cross_entropy_on_tape(tape: &mut Tape, probs: Var, targets: &[LabelMap], mask: Option<&[Mask]>) -> Result<Var> {
    let w = mask_weights(mask, targets)?;
    let count = support(w.as_deref(), targets);
    if count == 0.0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let weights = one_hot(targets, classes_of(tape, probs)?, w.as_deref())?;
    let logp = clamped_log(tape, probs);
    let s = tape.weighted_sum(logp, weights)?;
    Ok(tape.scale(s, -1.0 / count))
}

/// `1 - mean_c (2 I_c + eps) / (P_c + G_c + eps)` pooled over the batch and mask.
pub fn soft_dice_loss_on_tape(tape: &mut Tape, probs: Var, targets: &[LabelMap], mask: Option<&[Mask]>) -> Result<Var> {
    let w = mask_weights(mask, targets)?;
    let count = support(w.as_deref(), targets);
    if count == 0.0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let classes = classes_of(tape, probs)?;
    let (h, wd) = (targets[0].height, targets[0].width);
    let m: Vec<Grid<f64>> = w.unwrap_or_else(|| targets.iter().map(|_| Grid::filled(h, wd, 1.0)).collect());
    let target_w = one_hot(targets, classes, Some(&m))?;
    let mask_w = broadcast_channels(&m, classes)?;
    let plane = h * wd;
    let mut total: Option<Var> = None;
    for c in 0..classes {
        let pick = |t: &Tensor| {
            let mut out = t.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                if (i / plane) % classes != c {
                    *v = 0.0;
                }
            }
            out
        };
        let (wi, wp) = (pick(&target_w), pick(&mask_w));
        let g_c = wi.sum();
        let inter = tape.weighted_sum(probs, wi)?;
        let pred = tape.weighted_sum(probs, wp)?;
        let num = tape.affine(inter, 2.0, DICE_SMOOTH);
        let den = tape.affine(pred, 1.0, g_c + DICE_SMOOTH);
        let dice = tape.div(num, den)?;
        total = Some(match total {
            None => dice,
            Some(t) => tape.add(t, dice)?,
        });
    }
    let total = total.expect("at least two classes");
    Ok(tape.affine(total, -1.0 / classes as f64, 1.0))
}

/// `0.5 * CE + 0.5 * soft Dice`, both restricted to mask=1 pixels.
pub fn seg_loss_on_tape(tape: &mut Tape, probs: Var, targets: &[LabelMap], mask: Option<&[Mask]>) -> Result<Var> {
    if let Some(m) = mask {
        if m.iter().all(|g| g.count_nonzero() == 0) {
            return Ok(tape.constant(Tensor::scalar(0.0)));
        }
    }
    let ce = cross_entropy_on_tape(tape, probs, targets, mask)?;
    let dice = soft_dice_loss_on_tape(tape, probs, targets, mask)?;
    let sum = tape.add(ce, dice)?;
    Ok(tape.scale(sum, 0.5))
}

/// Value of [`seg_loss_on_tape`] for fixed probability maps.
pub fn seg_loss(prob_maps: &Tensor, targets: &[LabelMap], mask: Option<&[Mask]>) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(prob_maps.clone());
    let l = seg_loss_on_tape(&mut tape, p, targets, mask)?;
    tape.value(l).item()
}

/// Mean (or summed) log-probability of `own_labels` over the receiver mask; 0 on an empty mask.
pub fn masked_log_likelihood_on_tape(tape: &mut Tape, probs: Var, own_labels: &[LabelMap], receiver: Option<&[Mask]>, reduction: Reduction) -> Result<Var> {
    let w = mask_weights(receiver, own_labels)?;
    let count = support(w.as_deref(), own_labels);
    if count == 0.0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let weights = one_hot(own_labels, classes_of(tape, probs)?, w.as_deref())?;
    let logp = clamped_log(tape, probs);
    let s = tape.weighted_sum(logp, weights)?;
    Ok(match reduction {
        Reduction::Mean => tape.scale(s, 1.0 / count),
        Reduction::Sum => s,
    })
}

pub fn masked_log_likelihood(prob_maps: &Tensor, own_labels: &[LabelMap], receiver: Option<&[Mask]>, reduction: Reduction) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(prob_maps.clone());
    let l = masked_log_likelihood_on_tape(&mut tape, p, own_labels, receiver, reduction)?;
    tape.value(l).item()
}

/// `-delta * log P` over every pixel.
pub fn feedback_loss_single_on_tape(tape: &mut Tape, probs: Var, own_labels: &[LabelMap], delta: f64, reduction: Reduction) -> Result<Var> {
    let ll = masked_log_likelihood_on_tape(tape, probs, own_labels, None, reduction)?;
    Ok(tape.scale(ll, -delta))
}

/// `-delta_a * log P(agree receiver) - delta_d * log P(disagree receiver)`.
#[allow(clippy::too_many_arguments)]
pub fn feedback_loss_dual_on_tape(
    tape: &mut Tape,
    probs: Var,
    own_labels: &[LabelMap],
    delta_agree: f64,
    delta_disagree: f64,
    receiver_agree: &[Mask],
    receiver_disagree: &[Mask],
    reduction: Reduction,
) -> Result<Var> {
    let la = masked_log_likelihood_on_tape(tape, probs, own_labels, Some(receiver_agree), reduction)?;
    let ld = masked_log_likelihood_on_tape(tape, probs, own_labels, Some(receiver_disagree), reduction)?;
    let ta = tape.scale(la, -delta_agree);
    let td = tape.scale(ld, -delta_disagree);
    tape.add(ta, td)
}

/// Teacher forward on `images`, its own argmax labels, and `L_fb` with gradients.
pub fn feedback_loss_single(net: &NetConfig, teacher: &ModelParams, images: &Tensor, delta: f64) -> Result<(f64, GradientVector)> {
    ensure!(delta.is_finite(), "feedback_loss_single", "non-finite delta {}", delta);
    let mut tape = Tape::new();
    let bound = teacher.bind(&mut tape);
    let x = tape.constant(images.clone());
    let probs = segnet::forward_on_tape(&mut tape, net, &bound, x, Dropout::Off)?;
    let own = argmax_label(tape.value(probs))?;
    let loss = feedback_loss_single_on_tape(&mut tape, probs, &own, delta, Reduction::Mean)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).item()?, teacher.gradients(&bound, &grads)))
}

/// `L_df` for one teacher given its receiver masks, with gradients.
pub fn feedback_loss_dual(
    net: &NetConfig,
    teacher: &ModelParams,
    images: &Tensor,
    signal: &FeedbackSignal,
    receiver_agree: &[Mask],
    receiver_disagree: &[Mask],
) -> Result<(f64, GradientVector)> {
    let mut tape = Tape::new();
    let bound = teacher.bind(&mut tape);
    let x = tape.constant(images.clone());
    let probs = segnet::forward_on_tape(&mut tape, net, &bound, x, Dropout::Off)?;
    let own = argmax_label(tape.value(probs))?;
    let loss = feedback_loss_dual_on_tape(&mut tape, probs, &own, signal.delta_agree, signal.delta_disagree, receiver_agree, receiver_disagree, Reduction::Mean)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).item()?, teacher.gradients(&bound, &grads)))
}

/// Mean pixel cross-entropy of the network on a labeled batch.
pub fn labeled_loss(net: &NetConfig, params: &ModelParams, batch: &LabeledBatch) -> Result<f64> {
    ensure!(!batch.is_empty(), "labeled_loss", "empty batch");
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let x = tape.constant(batch.images.clone());
    let probs = segnet::forward_on_tape(&mut tape, net, &bound, x, Dropout::Off)?;
    let l = cross_entropy_on_tape(&mut tape, probs, &batch.labels, None)?;
    tape.value(l).item()
}

/// Labeled cross-entropy and its gradient.
pub fn labeled_loss_grad(net: &NetConfig, params: &ModelParams, batch: &LabeledBatch) -> Result<(f64, GradientVector)> {
    ensure!(!batch.is_empty(), "labeled_loss", "empty batch");
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(batch.images.clone());
    let probs = segnet::forward_on_tape(&mut tape, net, &bound, x, Dropout::Off)?;
    let l = cross_entropy_on_tape(&mut tape, probs, &batch.labels, None)?;
    let grads = tape.backward(l)?;
    Ok((tape.value(l).item()?, params.gradients(&bound, &grads)))
}

/// Gradient of the masked segmentation loss of `params` against `targets`.
pub fn seg_loss_grad(net: &NetConfig, params: &ModelParams, images: &Tensor, targets: &[LabelMap], mask: Option<&[Mask]>) -> Result<(f64, GradientVector)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(images.clone());
    let probs = segnet::forward_on_tape(&mut tape, net, &bound, x, Dropout::Off)?;
    let l = seg_loss_on_tape(&mut tape, probs, targets, mask)?;
    let grads = tape.backward(l)?;
    Ok((tape.value(l).item()?, params.gradients(&bound, &grads)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    pub delta: f64,
    /// Norm of the probe direction before any normalization.
    pub grad_norm: f64,
}

/// The (optionally unit-normalized) probe direction and its raw norm.
pub fn probe_direction(direction: &GradientVector, normalize: bool) -> Result<(GradientVector, f64)> {
    let norm = grad_norm(direction);
    if normalize && norm > ZERO_NORM {
        Ok((scale_grads(direction, 1.0 / norm)?, norm))
    } else {
        Ok((direction.clone(), norm))
    }
}

/// `L_l(theta) - L_l(theta - eta * dir)` for a precomputed direction and base loss.
pub fn probe_delta_from_direction(
    net: &NetConfig,
    student: &ModelParams,
    labeled: &LabeledBatch,
    base_loss: f64,
    direction: &GradientVector,
    eta: f64,
    normalize: bool,
) -> Result<ProbeResult> {
    ensure!(eta > 0.0, "probe_delta", "eta must be positive, got {}", eta);
    let (dir, norm) = probe_direction(direction, normalize)?;
    if norm == 0.0 {
        return Ok(ProbeResult { delta: 0.0, grad_norm: 0.0 });
    }
    let stepped = axpy_params(student, &dir, eta)?;
    let after = labeled_loss(net, &stepped, labeled)?;
    Ok(ProbeResult { delta: base_loss - after, grad_norm: norm })
}

/// Virtual one-step feedback for the pseudo-labels inside `attributor_mask`.
/// The student parameters are only read.
#[allow(clippy::too_many_arguments)]
pub fn probe_delta(
    net: &NetConfig,
    student: &ModelParams,
    labeled: &LabeledBatch,
    unlabeled_images: &Tensor,
    targets: &[LabelMap],
    attributor_mask: &[Mask],
    eta: f64,
    normalize: bool,
) -> Result<ProbeResult> {
    ensure!(eta > 0.0, "probe_delta", "eta must be positive, got {}", eta);
    let (_, direction) = seg_loss_grad(net, student, unlabeled_images, targets, Some(attributor_mask))?;
    if grad_norm(&direction) == 0.0 {
        return Ok(ProbeResult { delta: 0.0, grad_norm: 0.0 });
    }
    let base = labeled_loss(net, student, labeled)?;
    probe_delta_from_direction(net, student, labeled, base, &direction, eta, normalize)
}

/// Per-pixel agreement masks of ones, shaped like `labels`.
pub fn full_masks(labels: &[LabelMap]) -> Vec<Mask> {
    labels.iter().map(|l| Grid::filled(l.height, l.width, 1u8)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::params::sgd_step;
    use crate::rng;
    use crate::synthdata::generate_dataset;
    use rand::Rng;

    fn binary_maps(p1: &[f64], h: usize, w: usize) -> Tensor {
        let mut d: Vec<f64> = p1.iter().map(|p| 1.0 - p).collect();
        d.extend_from_slice(p1);
        Tensor::new(vec![1, 2, h, w], d).unwrap()
    }

    fn lab(v: &[u8], h: usize, w: usize) -> Vec<LabelMap> {
        vec![Grid::from_vec(h, w, v.to_vec()).unwrap()]
    }

    fn tiny_net() -> NetConfig {
        NetConfig { height: 8, width: 8, base_channels: 2, depth: 1, num_classes: 2, dropout_rate: 0.0 }
    }

    fn batch(seed: u64, n: usize, cfg: &NetConfig) -> LabeledBatch {
        LabeledBatch::from_samples(&generate_dataset(seed, n, cfg.height, cfg.width, 0.3).unwrap()).unwrap()
    }

    #[test]
    fn seg_loss_two_by_two_hand_computation() {
        let p1 = [0.9, 0.2, 0.6, 0.3];
        let target = [1u8, 0, 0, 1];
        let loss = seg_loss(&binary_maps(&p1, 2, 2), &lab(&target, 2, 2), None).unwrap();
        // CE by hand
        let ce = -(0.9f64.ln() + 0.8f64.ln() + 0.4f64.ln() + 0.3f64.ln()) / 4.0;
        // class 0: p0 = [0.1, 0.8, 0.4, 0.7], g0 = [0, 1, 1, 0]
        let d0 = (2.0 * (0.8 + 0.4) + DICE_SMOOTH) / (2.0 + 2.0 + DICE_SMOOTH);
        // class 1: p1 = [0.9, 0.2, 0.6, 0.3], g1 = [1, 0, 0, 1]
        let d1 = (2.0 * (0.9 + 0.3) + DICE_SMOOTH) / (2.0 + 2.0 + DICE_SMOOTH);
        let expected = 0.5 * ce + 0.5 * (1.0 - 0.5 * (d0 + d1));
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn seg_loss_masked_hand_computation() {
        let p1 = [0.9, 0.2, 0.6, 0.3];
        let target = [1u8, 0, 0, 1];
        let mask = lab(&[1, 0, 1, 0], 2, 2);
        let loss = seg_loss(&binary_maps(&p1, 2, 2), &lab(&target, 2, 2), Some(&mask)).unwrap();
        let ce = -(0.9f64.ln() + 0.4f64.ln()) / 2.0;
        let d0 = (2.0 * 0.4 + DICE_SMOOTH) / (0.1 + 0.4 + 1.0 + DICE_SMOOTH);
        let d1 = (2.0 * 0.9 + DICE_SMOOTH) / (0.9 + 0.6 + 1.0 + DICE_SMOOTH);
        let expected = 0.5 * ce + 0.5 * (1.0 - 0.5 * (d0 + d1));
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn seg_loss_edge_cases() {
        let target = [1u8, 0, 0, 1];
        let perfect = binary_maps(&[1.0, 0.0, 0.0, 1.0], 2, 2);
        assert!(seg_loss(&perfect, &lab(&target, 2, 2), None).unwrap() < 1e-6);

        let mut tape = Tape::new();
        let p = tape.param(binary_maps(&[0.3, 0.6, 0.1, 0.8], 2, 2));
        let l = seg_loss_on_tape(&mut tape, p, &lab(&target, 2, 2), Some(&lab(&[0, 0, 0, 0], 2, 2))).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);
        let g = tape.backward(l).unwrap();
        assert!(g.get(p).is_none());
    }

    #[test]
    fn masked_log_likelihood_cases() {
        let labels = lab(&[1, 0, 1], 1, 3);
        let certain = binary_maps(&[1.0 - 1e-9, 1e-9, 1.0 - 1e-9], 1, 3);
        assert!(masked_log_likelihood(&certain, &labels, None, Reduction::Mean).unwrap().abs() < 1e-8);
        let uniform = binary_maps(&[0.5, 0.5, 0.5], 1, 3);
        let m = lab(&[0, 1, 1], 1, 3);
        assert!((masked_log_likelihood(&uniform, &labels, Some(&m), Reduction::Mean).unwrap() - 0.5f64.ln()).abs() < 1e-15);
        assert_eq!(masked_log_likelihood(&uniform, &labels, Some(&lab(&[0, 0, 0], 1, 3)), Reduction::Mean).unwrap(), 0.0);

        // direct product oracle on a 3-pixel mask
        let probs = binary_maps(&[0.7, 0.35, 0.9], 1, 3);
        let own = lab(&[1, 0, 1], 1, 3);
        let product: f64 = 0.7 * 0.65 * 0.9;
        let mean = masked_log_likelihood(&probs, &own, None, Reduction::Mean).unwrap();
        assert!((mean - product.ln() / 3.0).abs() < 1e-14);
        let sum = masked_log_likelihood(&probs, &own, None, Reduction::Sum).unwrap();
        assert!((sum - product.ln()).abs() < 1e-14);
    }

    #[test]
    fn labeled_loss_closed_forms() {
        let cfg = tiny_net();
        let mut params = segnet::build(&cfg, 1).unwrap();
        // zero head -> uniform predictions
        let names: Vec<String> = params.names().map(Into::into).collect();
        let mut entries: Vec<(String, Tensor)> = names.iter().map(|n| (n.clone(), params.get(n).unwrap().clone())).collect();
        for (n, t) in &mut entries {
            if n.starts_with("head") {
                *t = Tensor::zeros(t.shape());
            }
        }
        params = ModelParams::new(entries).unwrap();
        let b = batch(3, 2, &cfg);
        assert!((labeled_loss(&cfg, &params, &b).unwrap() - core::f64::consts::LN_2).abs() < 1e-12);
        assert!(labeled_loss(&cfg, &params, &LabeledBatch { images: Tensor::zeros(&[0, 1, 8, 8]), labels: vec![] }).is_err());

        let mut tape = Tape::new();
        let perfect: Vec<f64> = b.labels.iter().flat_map(|l| {
            let mut v: Vec<f64> = l.data.iter().map(|&c| if c == 0 { 1.0 } else { 0.0 }).collect();
            v.extend(l.data.iter().map(|&c| if c == 1 { 1.0 } else { 0.0 }));
            v
        }).collect();
        let p = tape.constant(Tensor::new(vec![2, 2, 8, 8], perfect).unwrap());
        let ce = cross_entropy_on_tape(&mut tape, p, &b.labels, None).unwrap();
        assert!(tape.value(ce).item().unwrap() < 1e-6);
    }

    #[test]
    fn probe_with_empty_attributor_is_zero() {
        let cfg = tiny_net();
        let student = segnet::build(&cfg, 2).unwrap();
        let lb = batch(5, 2, &cfg);
        let ub = batch(6, 3, &cfg);
        let empty: Vec<Mask> = ub.labels.iter().map(|l| Grid::filled(l.height, l.width, 0)).collect();
        let r = probe_delta(&cfg, &student, &lb, &ub.images, &ub.labels, &empty, 0.05, true).unwrap();
        assert_eq!(r.delta, 0.0);
    }

    #[test]
    fn probe_is_pure() {
        let cfg = tiny_net();
        let student = segnet::build(&cfg, 2).unwrap();
        let before = student.clone();
        let lb = batch(5, 2, &cfg);
        let ub = batch(6, 3, &cfg);
        let r = probe_delta(&cfg, &student, &lb, &ub.images, &ub.labels, &full_masks(&ub.labels), 0.05, false).unwrap();
        assert!(r.delta.is_finite());
        assert_eq!(student, before);
    }

    #[test]
    fn probe_rate_converges_to_directional_derivative() {
        let cfg = tiny_net();
        let student = segnet::build(&cfg, 7).unwrap();
        let lb = batch(15, 2, &cfg);
        let ub = batch(16, 3, &cfg);
        let masks = full_masks(&ub.labels);
        let d3 = probe_delta(&cfg, &student, &lb, &ub.images, &ub.labels, &masks, 1e-3, false).unwrap().delta / 1e-3;
        let d4 = probe_delta(&cfg, &student, &lb, &ub.images, &ub.labels, &masks, 1e-4, false).unwrap().delta / 1e-4;
        let (_, dir) = seg_loss_grad(&cfg, &student, &ub.images, &ub.labels, Some(&masks)).unwrap();
        let (_, gl) = labeled_loss_grad(&cfg, &student, &lb).unwrap();
        let inner = gl.dot(&dir).unwrap();
        assert!(((d3 - d4) / d4).abs() < 0.05, "{d3} vs {d4}");
        assert!(((d4 - inner) / inner).abs() < 0.05, "{d4} vs {inner}");
    }

    #[test]
    fn single_feedback_loss_sign_behaviour() {
        let cfg = tiny_net();
        let teacher = segnet::build(&cfg, 21).unwrap();
        let images = batch(22, 2, &cfg).images;
        let ll = |p: &ModelParams| {
            let probs = segnet::forward(&cfg, p, &images, Dropout::Off).unwrap();
            let own = argmax_label(&probs).unwrap();
            masked_log_likelihood(&probs, &own, None, Reduction::Mean).unwrap()
        };
        let (l0, g0) = feedback_loss_single(&cfg, &teacher, &images, 0.0).unwrap();
        assert_eq!(l0, 0.0);
        assert_eq!(grad_norm(&g0), 0.0);
        let base = ll(&teacher);
        for (delta, increases) in [(0.5, true), (-0.5, false)] {
            let (_, g) = feedback_loss_single(&cfg, &teacher, &images, delta).unwrap();
            let (stepped, _) = sgd_step(&teacher, &g, &teacher.zeros_like(), 1e-3, 0.0, 0.0).unwrap();
            assert_eq!(ll(&stepped) > base, increases);
        }
    }

    #[test]
    fn dual_feedback_loss_additivity_and_linearity() {
        let cfg = tiny_net();
        let mut r = rng::stream(4);
        let probs_t = {
            let p1: Vec<f64> = (0..64).map(|_| r.gen_range(0.01..0.99)).collect();
            binary_maps(&p1, 8, 8)
        };
        let own = argmax_label(&probs_t).unwrap();
        let ma: Vec<Mask> = vec![Grid::from_vec(8, 8, (0..64).map(|_| r.gen_range(0..2u8)).collect()).unwrap()];
        let md: Vec<Mask> = vec![ma[0].map(|v| 1 - v)];
        let eval = |da: f64, dd: f64, a: &[Mask], d: &[Mask]| {
            let mut tape = Tape::new();
            let p = tape.constant(probs_t.clone());
            let l = feedback_loss_dual_on_tape(&mut tape, p, &own, da, dd, a, d, Reduction::Mean).unwrap();
            tape.value(l).item().unwrap()
        };
        let la = -0.3 * masked_log_likelihood(&probs_t, &own, Some(&ma), Reduction::Mean).unwrap();
        let ld = 0.7 * masked_log_likelihood(&probs_t, &own, Some(&md), Reduction::Mean).unwrap();
        assert!((eval(0.3, -0.7, &ma, &md) - (la + ld)).abs() < 1e-14);
        assert_eq!(eval(0.0, 0.0, &ma, &md), 0.0);
        let empty = vec![Grid::filled(8, 8, 0u8)];
        assert_eq!(eval(0.4, -2.0, &empty, &empty), 0.0);
        let a1 = eval(0.3, 0.0, &ma, &md);
        let a2 = eval(0.6, 0.0, &ma, &md);
        assert_eq!(a2, 2.0 * a1);
        let _ = cfg;
    }

    #[test]
    fn dual_feedback_sign_semantics() {
        let cfg = tiny_net();
        let teacher = segnet::build(&cfg, 31).unwrap();
        let images = batch(32, 2, &cfg).images;
        let probs = segnet::forward(&cfg, &teacher, &images, Dropout::Off).unwrap();
        let own = argmax_label(&probs).unwrap();
        let mut r = rng::stream(33);
        let ma: Vec<Mask> = own.iter().map(|l| Grid::from_vec(8, 8, (0..l.data.len()).map(|_| r.gen_range(0..2u8)).collect()).unwrap()).collect();
        let md: Vec<Mask> = ma.iter().map(|m| m.map(|v| 1 - v)).collect();
        let ll_grad = |mask: &[Mask]| {
            let mut tape = Tape::new();
            let bound = teacher.bind(&mut tape);
            let x = tape.constant(images.clone());
            let p = segnet::forward_on_tape(&mut tape, &cfg, &bound, x, Dropout::Off).unwrap();
            let l = masked_log_likelihood_on_tape(&mut tape, p, &own, Some(mask), Reduction::Mean).unwrap();
            teacher.gradients(&bound, &tape.backward(l).unwrap())
        };
        let (ga, gd) = (ll_grad(&ma), ll_grad(&md));
        for (da, dd) in [(0.5, 0.0), (-0.5, 0.0), (0.0, 0.5), (0.0, -0.5)] {
            let signal = FeedbackSignal { delta_agree: da, delta_disagree: dd, eta: 0.1, normalized: false, grad_norm_agree: 0.0, grad_norm_disagree: 0.0 };
            let (_, g) = feedback_loss_dual(&cfg, &teacher, &images, &signal, &ma, &md).unwrap();
            // directional derivative of the receiver likelihood along -grad L_df
            let step = scale_grads(&g, -1.0).unwrap();
            if da != 0.0 {
                assert_eq!(ga.dot(&step).unwrap() > 0.0, da > 0.0);
            }
            if dd != 0.0 {
                assert_eq!(gd.dot(&step).unwrap() > 0.0, dd > 0.0);
            }
        }
    }
}

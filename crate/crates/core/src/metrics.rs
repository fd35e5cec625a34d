//! Evaluation metrics: Dice, 95th-percentile Hausdorff distance, teacher
//! disagreement, pseudo-label error, entropy, and perturbation robustness.
//!
//! Conventions: Dice of two empty masks is 1. `hd95` is `None` when either
//! mask is empty; logs record that as [`HD95_MISSING`]. Batch-level
//! disagreement and pseudo-label error are per-image values averaged.

use alloc::vec::Vec;

use crate::error::{ensure, Result};
use crate::feedback::PROB_FLOOR;
use crate::grid::{Grid, LabelMap};
use crate::params::ModelParams;
use crate::pseudo::argmax_label;
use crate::rng;
use crate::segnet::{self, Dropout, NetConfig};
use crate::synthdata::{apply_positional_to_label, images_tensor, strong_augment, SegSample};
use crate::tensor::Tensor;

/// Value logged when hd95 is undefined (an empty mask).
pub const HD95_MISSING: f64 = -1.0;

/// Binary foreground mask (`class != 0`).
pub fn foreground(label: &LabelMap) -> Grid<u8> {
    label.map(|c| (c != 0) as u8)
}

pub fn dice(pred: &Grid<u8>, gt: &Grid<u8>) -> Result<f64> {
    ensure!(pred.same_dims(gt), "dice", "{}x{} vs {}x{}", pred.height, pred.width, gt.height, gt.width);
    let (mut inter, mut total) = (0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        let (a, b) = (a != 0, b != 0);
        inter += (a && b) as usize;
        total += a as usize + b as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

fn boundary(mask: &Grid<u8>) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height, mask.width);
    let bg = |y: isize, x: isize| y < 0 || x < 0 || y >= h as isize || x >= w as isize || mask.get(y as usize, x as usize) == 0;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) == 0 {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            if bg(yi - 1, xi) || bg(yi + 1, xi) || bg(yi, xi - 1) || bg(yi, xi + 1) {
                out.push((y, x));
            }
        }
    }
    out
}

/// Exact squared Euclidean distance to the nearest seed: a column pass
/// followed by a brute-force row pass, all in integers.
fn squared_distance_map(seeds: &[(usize, usize)], h: usize, w: usize) -> Vec<u64> {
    const FAR: u64 = u64::MAX / 4;
    let mut column = alloc::vec![FAR; h * w];
    for x in 0..w {
        let rows: Vec<usize> = seeds.iter().filter(|s| s.1 == x).map(|s| s.0).collect();
        if rows.is_empty() {
            continue;
        }
        for y in 0..h {
            let d = rows.iter().map(|&r| r.abs_diff(y) as u64).min().expect("nonempty");
            column[y * w + x] = d * d;
        }
    }
    let mut out = alloc::vec![FAR; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut best = FAR;
            for x2 in 0..w {
                let c = column[y * w + x2];
                if c < FAR {
                    let dx = x.abs_diff(x2) as u64;
                    best = best.min(c + dx * dx);
                }
            }
            out[y * w + x] = best;
        }
    }
    out
}

/// Percentile with linear interpolation between order statistics (`q` in `[0, 100]`).
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// 95th percentile of the pooled boundary-to-boundary nearest distances.
pub fn hd95(pred: &Grid<u8>, gt: &Grid<u8>) -> Result<Option<f64>> {
    ensure!(pred.same_dims(gt), "hd95", "{}x{} vs {}x{}", pred.height, pred.width, gt.height, gt.width);
    let (bp, bg) = (boundary(pred), boundary(gt));
    if bp.is_empty() || bg.is_empty() {
        return Ok(None);
    }
    let (h, w) = (pred.height, pred.width);
    let (to_gt, to_pred) = (squared_distance_map(&bg, h, w), squared_distance_map(&bp, h, w));
    let mut d: Vec<f64> = bp.iter().map(|&(y, x)| libm::sqrt(to_gt[y * w + x] as f64)).chain(bg.iter().map(|&(y, x)| libm::sqrt(to_pred[y * w + x] as f64))).collect();
    d.sort_by(f64::total_cmp);
    Ok(Some(percentile(&d, 95.0)))
}

/// `1 - Dice` between the two teachers' foreground masks.
pub fn disagreement(pred_phi: &Grid<u8>, pred_psi: &Grid<u8>) -> Result<f64> {
    Ok(1.0 - dice(pred_phi, pred_psi)?)
}

/// `1 - Dice` of the pseudo-label foreground against ground truth.
pub fn pl_error(pseudo: &LabelMap, gt: &LabelMap) -> Result<f64> {
    Ok(1.0 - dice(&foreground(pseudo), &foreground(gt))?)
}

/// Per-image mean of `f` over paired label maps.
pub fn batch_mean(a: &[LabelMap], b: &[LabelMap], f: impl Fn(&LabelMap, &LabelMap) -> Result<f64>) -> Result<f64> {
    ensure!(a.len() == b.len() && !a.is_empty(), "batch_mean", "{} vs {} maps", a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += f(x, y)?;
    }
    Ok(s / a.len() as f64)
}

/// `sum_pixels sum_c -p ln p` for each image of a `(B, C, H, W)` map.
pub fn entropy_sum(prob_maps: &Tensor) -> Result<Vec<f64>> {
    let (n, c, h, w) = prob_maps.dims4()?;
    let per = c * h * w;
    Ok((0..n)
        .map(|b| prob_maps.data()[b * per..(b + 1) * per].iter().map(|&p| if p <= 0.0 { 0.0 } else { -p * libm::log(p.max(PROB_FLOOR)) }).sum())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Perturbation {
    None,
    StrongAug,
    Dropout,
}

/// Mean and population standard deviation over perturbed passes of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbedStats {
    pub dice_mean: f64,
    pub dice_std: f64,
    pub entropy_mean: f64,
    pub entropy_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    (m, libm::sqrt(var))
}

/// Evaluate each test sample `k_passes` times under seeded perturbations.
/// Strong-aug passes paste from the next test sample and score against the
/// positionally transformed ground truth.
pub fn perturbed_eval(net: &NetConfig, params: &ModelParams, test_set: &[SegSample], k_passes: usize, perturbation: Perturbation, seed: u64) -> Result<Vec<PerturbedStats>> {
    ensure!(k_passes >= 2, "perturbed_eval", "need at least 2 passes, got {}", k_passes);
    ensure!(!test_set.is_empty(), "perturbed_eval", "empty test set");
    let mut out = Vec::with_capacity(test_set.len());
    for (i, sample) in test_set.iter().enumerate() {
        let donor = &test_set[(i + 1) % test_set.len()];
        let mut dices = Vec::with_capacity(k_passes);
        let mut ents = Vec::with_capacity(k_passes);
        for pass in 0..k_passes {
            let pass_seed = rng::derive(rng::derive(seed, i as u64), pass as u64);
            let (image, gt, dropout) = match perturbation {
                Perturbation::None => (sample.image.clone(), sample.label.clone(), Dropout::Off),
                Perturbation::Dropout => (sample.image.clone(), sample.label.clone(), Dropout::On { seed: pass_seed }),
                Perturbation::StrongAug => {
                    let (img, spec) = strong_augment(&sample.image, donor, &mut rng::stream(pass_seed));
                    let gt = apply_positional_to_label(&spec, &sample.label, Some(&donor.label), 0);
                    (img, gt, Dropout::Off)
                }
            };
            let probs = segnet::forward(net, params, &images_tensor([&image])?, dropout)?;
            let pred = &argmax_label(&probs)?[0];
            dices.push(dice(&foreground(pred), &foreground(&gt))?);
            ents.push(entropy_sum(&probs)?[0]);
        }
        let (dice_mean, dice_std) = mean_std(&dices);
        let (entropy_mean, entropy_std) = mean_std(&ents);
        out.push(PerturbedStats { dice_mean, dice_std, entropy_mean, entropy_std });
    }
    Ok(out)
}

/// Plain evaluation of a model on a labeled set: mean Dice and mean hd95 over defined images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub dice: f64,
    pub hd95: f64,
    pub entropy: f64,
}

pub fn evaluate(net: &NetConfig, params: &ModelParams, samples: &[SegSample], batch_size: usize) -> Result<EvalSummary> {
    ensure!(!samples.is_empty(), "evaluate", "empty evaluation set");
    let (mut dsum, mut hsum, mut hcount, mut esum) = (0.0, 0.0, 0usize, 0.0);
    for chunk in samples.chunks(batch_size.max(1)) {
        let probs = segnet::forward(net, params, &images_tensor(chunk.iter().map(|s| &s.image))?, Dropout::Off)?;
        let preds = argmax_label(&probs)?;
        for (e, (p, s)) in entropy_sum(&probs)?.into_iter().zip(preds.iter().zip(chunk)) {
            let (pf, gf) = (foreground(p), foreground(&s.label));
            dsum += dice(&pf, &gf)?;
            if let Some(h) = hd95(&pf, &gf)? {
                hsum += h;
                hcount += 1;
            }
            esum += e;
        }
    }
    let n = samples.len() as f64;
    Ok(EvalSummary { dice: dsum / n, hd95: if hcount == 0 { HD95_MISSING } else { hsum / hcount as f64 }, entropy: esum / n })
}

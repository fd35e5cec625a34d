//! Oracle checks shared by the `selftest` command and the acceptance suite.
//! Every oracle here is computed independently of the code path it checks:
//! finite differences instead of the tape, brute-force pair scans instead
//! of distance transforms, explicit enumeration instead of the fusion rules.

use dualfete_core::autograd::Tape;
use dualfete_core::bilevel::{sign_agreement, BilevelProblem};
use dualfete_core::feedback::{labeled_loss, labeled_loss_grad, masked_log_likelihood_on_tape, probe_delta_from_direction, seg_loss_grad, seg_loss_on_tape, LabeledBatch, Reduction};
use dualfete_core::grid::{Grid, LabelMap};
use dualfete_core::metrics::{dice, hd95};
use dualfete_core::params::axpy_params;
use dualfete_core::pseudo::{fuse_dual, receiver_masks, Mask};
use dualfete_core::rng::{self, Stream};
use dualfete_core::segnet::{self, Dropout, NetConfig};
use dualfete_core::synthdata::generate_dataset;
use dualfete_core::{ModelParams, Tensor};
use rand::Rng;

use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn random_labels(r: &mut Stream, n: usize, h: usize, w: usize, classes: usize) -> Vec<LabelMap> {
    (0..n).map(|_| Grid::from_vec(h, w, (0..h * w).map(|_| r.gen_range(0..classes) as u8).collect()).expect("dims")).collect()
}

fn random_masks(r: &mut Stream, n: usize, h: usize, w: usize, p: f64) -> Vec<Mask> {
    (0..n).map(|_| Grid::from_vec(h, w, (0..h * w).map(|_| r.gen_bool(p) as u8).collect()).expect("dims")).collect()
}

fn random_images(r: &mut Stream, n: usize, h: usize, w: usize) -> Tensor {
    Tensor::new(vec![n, 1, h, w], (0..n * h * w).map(|_| r.gen::<f64>()).collect()).expect("dims")
}

/// Scalar loss exercising every tape op the model and losses use.
struct GradProbe {
    net: NetConfig,
    images: Tensor,
    labels: Vec<LabelMap>,
    mask: Vec<Mask>,
    own: Vec<LabelMap>,
    receiver: Vec<Mask>,
    dropout: Dropout,
}

struct Evaluated {
    value: f64,
    grad: Option<Vec<f64>>,
    relu: Vec<bool>,
}

impl GradProbe {
    fn eval(&self, params: &ModelParams, grads: bool) -> Result<Evaluated> {
        let mut tape = Tape::new();
        let bound = if grads { params.bind(&mut tape) } else { params.bind_frozen(&mut tape) };
        let x = tape.constant(self.images.clone());
        let p = segnet::forward_on_tape(&mut tape, &self.net, &bound, x, self.dropout)?;
        let seg = seg_loss_on_tape(&mut tape, p, &self.labels, Some(&self.mask))?;
        let ll = masked_log_likelihood_on_tape(&mut tape, p, &self.own, Some(&self.receiver), Reduction::Sum)?;
        let e = tape.exp(p);
        let em = tape.mean(e)?;
        let a = tape.affine(ll, -0.01, 0.0);
        let s = tape.add(seg, a)?;
        let total = tape.add(s, em)?;
        let value = tape.value(total).item()?;
        let grad = if grads { Some(params.gradients(&bound, &tape.backward(total)?).flatten()) } else { None };
        Ok(Evaluated { value, grad, relu: tape.relu_pattern() })
    }
}

/// Backward pass against central differences on `n_nets` random small networks.
///
/// Coordinates whose probe evaluations switch any ReLU lie on a kink where
/// the loss is not differentiable; they are excluded and counted.
pub fn autograd_fd(n_nets: usize) -> Result<Check> {
    const H: f64 = 1e-4;
    const FLOOR: f64 = 1e-6;
    let (mut worst, mut coords, mut kinked) = (0.0f64, 0usize, 0usize);
    for seed in 0..n_nets as u64 {
        let mut r = rng::stream(rng::derive(0xA1, seed));
        let depth = 1 + (seed % 2) as usize;
        let classes = 2 + (seed % 3 == 2) as usize;
        let net = NetConfig { height: 8, width: 8, base_channels: 1 + (seed % 2) as usize, depth, num_classes: classes, dropout_rate: if seed % 4 == 3 { 0.3 } else { 0.0 } };
        let dropout = if net.dropout_rate > 0.0 { Dropout::On { seed } } else { Dropout::Off };
        let n = 2;
        let probe = GradProbe {
            images: random_images(&mut r, n, 8, 8),
            labels: random_labels(&mut r, n, 8, 8, classes),
            mask: random_masks(&mut r, n, 8, 8, 0.7),
            own: random_labels(&mut r, n, 8, 8, classes),
            receiver: random_masks(&mut r, n, 8, 8, 0.5),
            net,
            dropout,
        };
        let params = segnet::build(&net, seed)?;
        let base = probe.eval(&params, true)?;
        let analytic = base.grad.expect("requested");
        let mut p = params.clone();
        for (i, &a) in analytic.iter().enumerate() {
            let x0 = p.get_flat(i);
            let mut at = |dx: f64| -> Result<Evaluated> {
                p.set_flat(i, x0 + dx);
                let e = probe.eval(&p, false);
                p.set_flat(i, x0);
                e
            };
            let pts = [at(H)?, at(-H)?, at(2.0 * H)?, at(-2.0 * H)?];
            if pts.iter().any(|e| e.relu != base.relu) {
                kinked += 1;
                continue;
            }
            // Fourth-order central difference.
            let numeric = (8.0 * (pts[0].value - pts[1].value) - (pts[2].value - pts[3].value)) / (12.0 * H);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(rel);
            coords += 1;
        }
    }
    let kink_frac = kinked as f64 / (coords + kinked).max(1) as f64;
    Ok(Check {
        name: "autograd_fd",
        passed: worst < 1e-4 && kink_frac < 0.01,
        detail: format!("max relative error {worst:.3e} over {coords} coordinates on {n_nets} nets ({kinked} coordinates straddling a ReLU kink skipped)"),
    })
}

fn tiny_instance(seed: u64, hw: usize) -> Result<(NetConfig, ModelParams, ModelParams, LabeledBatch, LabeledBatch)> {
    let net = NetConfig { height: hw, width: hw, base_channels: 2, depth: 1, num_classes: 2, dropout_rate: 0.0 };
    let teacher = segnet::build(&net, rng::derive(seed, 1))?;
    let student = segnet::build(&net, rng::derive(seed, 2))?;
    let lab = LabeledBatch::from_samples(&generate_dataset(rng::derive(seed, 3), 2, hw, hw, 0.4)?)?;
    let un = LabeledBatch::from_samples(&generate_dataset(rng::derive(seed, 4), 2, hw, hw, 0.4)?)?;
    Ok((net, teacher, student, lab, un))
}

fn relu_pattern(net: &NetConfig, params: &ModelParams, images: &Tensor) -> Result<Vec<bool>> {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let x = tape.constant(images.clone());
    segnet::forward_on_tape(&mut tape, net, &bound, x, Dropout::Off)?;
    Ok(tape.relu_pattern())
}

/// Residual of `delta ~ eta <grad L_l(theta'), Delta>` and its convergence order as eta halves.
///
/// The expansion needs the labeled loss smooth along the probe step, so an
/// instance whose step crosses a ReLU kink is replaced by the next seed.
pub fn first_order_identity(n_instances: usize) -> Result<Check> {
    const MAX_DRAWS: u64 = 100;
    let etas = [1e-3, 5e-4, 2.5e-4];
    let (mut worst, mut done, mut crossed) = (f64::INFINITY, 0usize, 0usize);
    let mut seed = 0u64;
    while done < n_instances && seed < MAX_DRAWS {
        let (net, _, student, lab, un) = tiny_instance(rng::derive(0xA2, seed), 8)?;
        let mut r = rng::stream(seed);
        seed += 1;
        let mask = random_masks(&mut r, un.len(), 8, 8, 0.5);
        let (_, dir) = seg_loss_grad(&net, &student, &un.images, &un.labels, Some(&mask))?;
        let start = relu_pattern(&net, &student, &lab.images)?;
        let smooth = [0.5, 1.0].iter().map(|f| relu_pattern(&net, &axpy_params(&student, &dir, f * etas[0])?, &lab.images)).collect::<Result<Vec<_>>>()?.iter().all(|p| *p == start);
        if !smooth {
            crossed += 1;
            continue;
        }
        let base = labeled_loss(&net, &student, &lab)?;
        let mut res = Vec::new();
        for eta in etas {
            let delta = probe_delta_from_direction(&net, &student, &lab, base, &dir, eta, false)?.delta;
            let stepped = axpy_params(&student, &dir, eta)?;
            let (_, g) = labeled_loss_grad(&net, &stepped, &lab)?;
            res.push((delta - eta * g.dot(&dir)?).abs());
        }
        worst = worst.min((res[0] / res[2]).log2() / 2.0);
        done += 1;
    }
    Ok(Check {
        name: "first_order_identity",
        passed: done == n_instances && worst >= 1.8,
        detail: format!("minimum empirical order {worst:.3} over {done} instances ({crossed} draws crossing a ReLU kink replaced)"),
    })
}

/// Finite-difference bilevel gradient against the feedback-weighted likelihood gradient.
pub fn bilevel_sign_agreement(n_seeds: usize) -> Result<Check> {
    let (mut agree, mut considered, mut worst) = (0usize, 0usize, 1.0f64);
    for seed in 0..n_seeds as u64 {
        let (net, teacher, student, lab, un) = tiny_instance(rng::derive(0xA3, seed), 8)?;
        let problem = BilevelProblem { net: &net, student: &student, labeled: &lab, unlabeled: &un.images, eta: 0.05 };
        let (oracle, noise) = problem.oracle(&teacher, 1e-5)?;
        let fb = problem.feedback_gradient(&teacher)?;
        let (a, c) = sign_agreement(&oracle, &noise, &fb, 10.0, 1e-11);
        agree += a;
        considered += c;
        if c > 0 {
            worst = worst.min(a as f64 / c as f64);
        }
    }
    let rate = agree as f64 / considered.max(1) as f64;
    Ok(Check {
        name: "bilevel_sign_agreement",
        passed: considered > 0 && rate > 0.8,
        detail: format!("{agree}/{considered} above-noise coordinates agree ({:.1}%), worst seed {:.1}%", 100.0 * rate, 100.0 * worst),
    })
}

fn quantized_probs(r: &mut Stream, n: usize, c: usize, h: usize, w: usize) -> Tensor {
    // Coarse logits make exact ties between classes and between teachers common.
    let plane = h * w;
    let mut d = vec![0.0; n * c * plane];
    for b in 0..n {
        for p in 0..plane {
            let logits: Vec<f64> = (0..c).map(|_| r.gen_range(0..4) as f64).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for ch in 0..c {
                d[(b * c + ch) * plane + p] = logits[ch].exp() / z;
            }
        }
    }
    Tensor::new(vec![n, c, h, w], d).expect("dims")
}

/// Fusion, attributor and receiver laws checked pixel by pixel against explicit enumeration.
pub fn fusion_laws(n_instances: usize) -> Result<Check> {
    let mut violations = Vec::new();
    let mut pixels = 0usize;
    for inst in 0..n_instances as u64 {
        let mut r = rng::stream(rng::derive(0xA4, inst));
        let (n, c, h, w) = (r.gen_range(1..3), r.gen_range(2..4), r.gen_range(1..5), r.gen_range(1..5));
        let (pp, ps) = (quantized_probs(&mut r, n, c, h, w), quantized_probs(&mut r, n, c, h, w));
        let bundle = fuse_dual(&pp, &ps)?;
        let recv = receiver_masks(&bundle);
        let swapped = fuse_dual(&ps, &pp)?;
        let recv_sw = receiver_masks(&swapped);
        let plane = h * w;
        for b in 0..n {
            for px in 0..plane {
                pixels += 1;
                let at = |t: &Tensor, ch: usize| t.data()[(b * c + ch) * plane + px];
                // Lowest-index argmax by enumeration.
                let arg = |t: &Tensor| (0..c).fold(0, |best, ch| if at(t, ch) > at(t, best) { ch } else { best });
                let (lp, ls) = (arg(&pp), arg(&ps));
                let (cp, cs) = (at(&pp, lp), at(&ps, ls));
                let joint = (0..c).map(|ch| at(&pp, ch).max(at(&ps, ch))).fold(f64::MIN, f64::max);
                let fused = bundle.fused[b].data[px] as usize;
                let agree = bundle.agree_mask[b].data[px];
                let disagree = bundle.disagree_mask[b].data[px];
                let mut bad = |law: &str| violations.push(format!("instance {inst} image {b} pixel {px}: {law}"));
                if bundle.label_phi[b].data[px] as usize != lp || bundle.label_psi[b].data[px] as usize != ls {
                    bad("argmax");
                }
                if bundle.conf_phi[b].data[px] != cp || bundle.conf_psi[b].data[px] != cs {
                    bad("confidence");
                }
                if agree + disagree != 1 || (agree == 1) != (lp == ls) {
                    bad("attributor partition");
                }
                let expected = if lp == ls || cp >= cs { lp } else { ls };
                if fused != expected {
                    bad("fusion rule");
                }
                if at(&pp, fused).max(at(&ps, fused)) != joint {
                    bad("fusion optimality");
                }
                let (pa, pd, sa, sd) = (recv.phi_agree[b].data[px], recv.phi_disagree[b].data[px], recv.psi_agree[b].data[px], recv.psi_disagree[b].data[px]);
                if pa + sa > 1 || pd + sd > 1 {
                    bad("receiver disjointness");
                }
                if (pa | sa) > agree || (pd | sd) > disagree {
                    bad("receiver subset");
                }
                let lower_phi = (cp < cs) as u8;
                let lower_psi = (cs < cp) as u8;
                if pa != agree * lower_phi || sa != agree * lower_psi || pd != disagree * lower_psi || sd != disagree * lower_phi {
                    bad("receiver confidence side");
                }
                let tie_conflict = lp != ls && cp == cs;
                if swapped.label_phi[b].data[px] as usize != ls
                    || recv_sw.phi_agree[b].data[px] != sa
                    || recv_sw.psi_disagree[b].data[px] != pd
                    || (!tie_conflict && swapped.fused[b].data[px] != bundle.fused[b].data[px])
                {
                    bad("teacher symmetry");
                }
            }
        }
    }
    let detail = match violations.first() {
        None => format!("0 violations over {n_instances} instances ({pixels} pixels)"),
        Some(v) => format!("{} violations, first: {v}", violations.len()),
    };
    Ok(Check { name: "fusion_laws", passed: violations.is_empty(), detail })
}

fn brute_hd95(a: &Grid<u8>, b: &Grid<u8>) -> Option<f64> {
    let edge = |m: &Grid<u8>| -> Vec<(i64, i64)> {
        let (h, w) = (m.height as i64, m.width as i64);
        let on = |y: i64, x: i64| y >= 0 && x >= 0 && y < h && x < w && m.get(y as usize, x as usize) != 0;
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if on(y, x) && (!on(y - 1, x) || !on(y + 1, x) || !on(y, x - 1) || !on(y, x + 1)) {
                    out.push((y, x));
                }
            }
        }
        out
    };
    let (ea, eb) = (edge(a), edge(b));
    if ea.is_empty() || eb.is_empty() {
        return None;
    }
    let nearest = |from: &[(i64, i64)], to: &[(i64, i64)]| -> Vec<f64> {
        from.iter().map(|&(y, x)| to.iter().map(|&(v, u)| (((y - v) * (y - v) + (x - u) * (x - u)) as f64).sqrt()).fold(f64::INFINITY, f64::min)).collect()
    };
    let mut all = nearest(&ea, &eb);
    all.extend(nearest(&eb, &ea));
    all.sort_by(f64::total_cmp);
    let pos = 0.95 * (all.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(all.len() - 1);
    Some(all[lo] + (pos - lo as f64) * (all[hi] - all[lo]))
}

/// hd95 against an exhaustive all-pairs boundary scan, plus the Dice formula cases.
pub fn metric_oracles(n_pairs: usize) -> Result<Check> {
    let mut mismatches = 0usize;
    let mut defined = 0usize;
    for i in 0..n_pairs as u64 {
        let mut r = rng::stream(rng::derive(0xA5, i));
        let p = [0.1, 0.3, 0.5, 0.8][(i % 4) as usize];
        let a = Grid::from_vec(8, 8, (0..64).map(|_| r.gen_bool(p) as u8).collect())?;
        let b = Grid::from_vec(8, 8, (0..64).map(|_| r.gen_bool(p) as u8).collect())?;
        let (got, want) = (hd95(&a, &b)?, brute_hd95(&a, &b));
        defined += want.is_some() as usize;
        if got != want {
            mismatches += 1;
        }
    }
    let g = |v: &[u8]| Grid::from_vec(1, v.len(), v.to_vec()).expect("dims");
    let dice_ok = dice(&g(&[1, 1, 0, 0]), &g(&[1, 1, 0, 0]))? == 1.0
        && dice(&g(&[1, 1, 0, 0]), &g(&[1, 0, 0, 0]))? == 2.0 / 3.0
        && dice(&g(&[0, 0, 0, 0]), &g(&[0, 0, 0, 0]))? == 1.0
        && dice(&g(&[1, 0, 0, 0]), &g(&[0, 0, 0, 1]))? == 0.0;
    let single = hd95(&Grid::from_vec(8, 8, (0..64).map(|k| (k == 0) as u8).collect())?, &Grid::from_vec(8, 8, (0..64).map(|k| (k == 3 * 8 + 4) as u8).collect())?)?;
    let passed = mismatches == 0 && dice_ok && single == Some(5.0);
    Ok(Check {
        name: "metric_oracles",
        passed,
        detail: format!("hd95 {mismatches} mismatches over {n_pairs} pairs ({defined} defined); dice cases {}; offset (3,4) -> {single:?}", if dice_ok { "exact" } else { "WRONG" }),
    })
}

/// All oracle checks at their acceptance sizes.
pub fn run_all() -> Result<Vec<Check>> {
    Ok(vec![autograd_fd(20)?, first_order_identity(10)?, bilevel_sign_agreement(20)?, fusion_laws(1000)?, metric_oracles(200)?])
}

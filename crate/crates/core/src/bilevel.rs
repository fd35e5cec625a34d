//! Brute-force reference for the teacher's meta-gradient.
//!
//! The one-step meta-objective is `L_l(theta_S - eta * grad_S L_u(theta_T, theta_S))`.
//! With soft pseudo-labels (teacher probabilities as targets) it is
//! differentiable in the teacher, so central finite differences over every
//! teacher parameter give its exact gradient. The analytic counterpart is
//! the feedback-weighted log-likelihood gradient: for every pixel and class
//! a probe measures the feedback `delta` of a unit hard label, and the
//! teacher gradient is `-sum delta * q * grad log q` over those labels.
//! Soft cross-entropy is linear in the target, so the two agree up to the
//! first-order Taylor error of each probe.

use alloc::vec;

use crate::autograd::{Tape, Var};
use crate::error::{ensure, Result};
use crate::feedback::{labeled_loss, LabeledBatch, PROB_FLOOR};
use crate::params::{axpy_params, GradientVector, ModelParams};
use crate::pseudo::argmax_label;
use crate::segnet::{self, Dropout, NetConfig};
use crate::tensor::Tensor;

/// Largest teacher the finite-difference oracle accepts.
pub const MAX_ORACLE_PARAMS: usize = 2000;

/// One instance of the bilevel problem. Teacher and student share an architecture.
#[derive(Debug, Clone, Copy)]
pub struct BilevelProblem<'a> {
    pub net: &'a NetConfig,
    pub student: &'a ModelParams,
    pub labeled: &'a LabeledBatch,
    pub unlabeled: &'a Tensor,
    pub eta: f64,
}

fn clamped_log(tape: &mut Tape, p: Var) -> Var {
    let c = tape.clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR);
    tape.log(c)
}

impl BilevelProblem<'_> {
    fn teacher_probs(&self, teacher: &ModelParams) -> Result<Tensor> {
        segnet::forward(self.net, teacher, self.unlabeled, Dropout::Off)
    }

    /// Gradient wrt the student of the soft-target cross-entropy `-mean_pixels sum_c q_c log p_c`.
    pub fn inner_gradient(&self, soft_targets: &Tensor) -> Result<GradientVector> {
        let mut tape = Tape::new();
        let bound = self.student.bind(&mut tape);
        let x = tape.constant(self.unlabeled.clone());
        let p = segnet::forward_on_tape(&mut tape, self.net, &bound, x, Dropout::Off)?;
        let (n, _, h, w) = soft_targets.dims4()?;
        let logp = clamped_log(&mut tape, p);
        let s = tape.weighted_sum(logp, soft_targets.clone())?;
        let loss = tape.scale(s, -1.0 / (n * h * w) as f64);
        Ok(self.student.gradients(&bound, &tape.backward(loss)?))
    }

    /// `L_l(theta_S - eta * inner_gradient(teacher))`.
    pub fn meta_objective(&self, teacher: &ModelParams) -> Result<f64> {
        let q = self.teacher_probs(teacher)?;
        let delta = self.inner_gradient(&q)?;
        labeled_loss(self.net, &axpy_params(self.student, &delta, self.eta)?, self.labeled)
    }

    /// Central finite differences of [`Self::meta_objective`] over every
    /// teacher parameter, plus a per-coordinate noise estimate
    /// `|g(fd_step) - g(2 fd_step)|`.
    pub fn oracle(&self, teacher: &ModelParams, fd_step: f64) -> Result<(GradientVector, GradientVector)> {
        ensure!(teacher.num_elements() <= MAX_ORACLE_PARAMS, "bilevel_oracle", "{} teacher parameters exceed {}", teacher.num_elements(), MAX_ORACLE_PARAMS);
        ensure!(fd_step > 0.0, "bilevel_oracle", "fd_step must be positive");
        let mut grad = teacher.zeros_like();
        let mut noise = teacher.zeros_like();
        let mut probe = teacher.clone();
        for i in 0..teacher.num_elements() {
            let x0 = teacher.get_flat(i);
            let mut at = |dx: f64| -> Result<f64> {
                probe.set_flat(i, x0 + dx);
                let v = self.meta_objective(&probe);
                probe.set_flat(i, x0);
                v
            };
            let g1 = (at(fd_step)? - at(-fd_step)?) / (2.0 * fd_step);
            let g2 = (at(2.0 * fd_step)? - at(-2.0 * fd_step)?) / (4.0 * fd_step);
            grad.set_flat(i, g1);
            noise.set_flat(i, (g1 - g2).abs());
        }
        Ok((grad, noise))
    }

    /// Feedback `delta` for every unit hard label `(image, pixel, class)`,
    /// laid out like the teacher's probability maps.
    pub fn label_feedback(&self, classes: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.student.bind(&mut tape);
        let x = tape.constant(self.unlabeled.clone());
        let p = segnet::forward_on_tape(&mut tape, self.net, &bound, x, Dropout::Off)?;
        let shape = tape.value(p).shape().to_vec();
        ensure!(shape[1] == classes, "label_feedback", "{} classes vs map {:?}", classes, shape);
        let (n, _, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let pixels = (n * h * w) as f64;
        let logp = clamped_log(&mut tape, p);
        let base = labeled_loss(self.net, self.student, self.labeled)?;
        let total = n * classes * h * w;
        let mut out = vec![0.0; total];
        for (idx, slot) in out.iter_mut().enumerate() {
            let mut e = Tensor::zeros(&shape);
            e.data_mut()[idx] = -1.0 / pixels;
            let loss = tape.weighted_sum(logp, e)?;
            let dir = self.student.gradients(&bound, &tape.backward(loss)?);
            let stepped = axpy_params(self.student, &dir, self.eta)?;
            *slot = base - labeled_loss(self.net, &stepped, self.labeled)?;
        }
        Tensor::new(shape, out)
    }

    /// `grad_T [ -sum delta * sg(q) * log q ]` using [`Self::label_feedback`].
    pub fn feedback_gradient(&self, teacher: &ModelParams) -> Result<GradientVector> {
        let classes = self.net.num_classes;
        let deltas = self.label_feedback(classes)?;
        let mut tape = Tape::new();
        let bound = teacher.bind(&mut tape);
        let x = tape.constant(self.unlabeled.clone());
        let q = segnet::forward_on_tape(&mut tape, self.net, &bound, x, Dropout::Off)?;
        let weights = Tensor::new(deltas.shape().to_vec(), deltas.data().iter().zip(tape.value(q).data()).map(|(d, qv)| -d * qv).collect())?;
        let logq = clamped_log(&mut tape, q);
        let loss = tape.weighted_sum(logq, weights)?;
        Ok(teacher.gradients(&bound, &tape.backward(loss)?))
    }

    /// Single-scalar variant: one `delta` for the whole soft-target step,
    /// applied to the mean log-likelihood of the teacher's argmax labels.
    pub fn uniform_feedback_gradient(&self, teacher: &ModelParams) -> Result<GradientVector> {
        let q = self.teacher_probs(teacher)?;
        let dir = self.inner_gradient(&q)?;
        let base = labeled_loss(self.net, self.student, self.labeled)?;
        let delta = base - labeled_loss(self.net, &axpy_params(self.student, &dir, self.eta)?, self.labeled)?;
        let own = argmax_label(&q)?;
        let mut tape = Tape::new();
        let bound = teacher.bind(&mut tape);
        let x = tape.constant(self.unlabeled.clone());
        let p = segnet::forward_on_tape(&mut tape, self.net, &bound, x, Dropout::Off)?;
        let l = crate::feedback::feedback_loss_single_on_tape(&mut tape, p, &own, delta, crate::feedback::Reduction::Mean)?;
        Ok(teacher.gradients(&bound, &tape.backward(l)?))
    }
}

/// Finite-difference bilevel gradient with respect to the teacher.
pub fn bilevel_oracle(
    net: &NetConfig,
    teacher: &ModelParams,
    student: &ModelParams,
    labeled: &LabeledBatch,
    unlabeled: &Tensor,
    eta: f64,
    fd_step: f64,
) -> Result<GradientVector> {
    let problem = BilevelProblem { net, student, labeled, unlabeled, eta };
    Ok(problem.oracle(teacher, fd_step)?.0)
}

/// Sign agreement between `reference` and `candidate` on coordinates where
/// `|reference| > noise_factor * noise + abs_floor`. Returns `(agreeing, considered)`.
pub fn sign_agreement(reference: &GradientVector, noise: &GradientVector, candidate: &GradientVector, noise_factor: f64, abs_floor: f64) -> (usize, usize) {
    let (r, n, c) = (reference.flatten(), noise.flatten(), candidate.flatten());
    let mut agree = 0;
    let mut considered = 0;
    for i in 0..r.len() {
        if r[i].abs() > noise_factor * n[i] + abs_floor {
            considered += 1;
            if (r[i] > 0.0) == (c[i] > 0.0) && c[i] != 0.0 {
                agree += 1;
            }
        }
    }
    (agree, considered)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate_dataset;

    fn setup(seed: u64) -> (NetConfig, ModelParams, ModelParams, LabeledBatch, Tensor) {
        let net = NetConfig { height: 4, width: 4, base_channels: 1, depth: 1, num_classes: 2, dropout_rate: 0.0 };
        let teacher = segnet::build(&net, seed).unwrap();
        let student = segnet::build(&net, seed + 1000).unwrap();
        let lab = LabeledBatch::from_samples(&generate_dataset(seed, 2, 4, 4, 0.3).unwrap()).unwrap();
        let un = LabeledBatch::from_samples(&generate_dataset(seed + 1, 1, 4, 4, 0.3).unwrap()).unwrap().images;
        (net, teacher, student, lab, un)
    }

    #[test]
    fn zero_eta_gives_zero_gradient() {
        let (net, teacher, student, lab, un) = setup(3);
        let g = bilevel_oracle(&net, &teacher, &student, &lab, &un, 0.0, 1e-5).unwrap();
        assert!(g.flatten().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn head_bias_gradient_is_antisymmetric_for_uniform_teacher() {
        let (net, teacher, student, lab, un) = setup(4);
        let zeroed = ModelParams::new(teacher.iter().map(|(n, t)| (n.into(), Tensor::zeros(t.shape()))).collect()).unwrap();
        let g = bilevel_oracle(&net, &zeroed, &student, &lab, &un, 0.5, 1e-5).unwrap();
        let b = g.get("head.bias").unwrap().data();
        assert!((b[0] + b[1]).abs() < 1e-8, "{:?}", b);
        let mean: f64 = g.flatten().iter().sum::<f64>() / g.num_elements() as f64;
        assert!(mean.abs() < 1e-6);
    }

    #[test]
    fn oracle_rejects_large_models() {
        let net = NetConfig { height: 8, width: 8, base_channels: 8, depth: 2, num_classes: 2, dropout_rate: 0.0 };
        let big = segnet::build(&net, 0).unwrap();
        let lab = LabeledBatch::from_samples(&generate_dataset(0, 1, 8, 8, 0.3).unwrap()).unwrap();
        assert!(bilevel_oracle(&net, &big, &big, &lab, &lab.images, 0.1, 1e-5).is_err());
    }

    #[test]
    fn feedback_gradient_tracks_oracle() {
        let (net, teacher, student, lab, un) = setup(5);
        let problem = BilevelProblem { net: &net, student: &student, labeled: &lab, unlabeled: &un, eta: 0.05 };
        let (oracle, noise) = problem.oracle(&teacher, 1e-5).unwrap();
        let fb = problem.feedback_gradient(&teacher).unwrap();
        let (agree, considered) = sign_agreement(&oracle, &noise, &fb, 10.0, 1e-9);
        assert!(considered > 0);
        assert!(agree as f64 > 0.8 * considered as f64, "{agree}/{considered}");
    }
}

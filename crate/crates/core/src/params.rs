//! Named parameter sets, their gradients and the plain SGD update rules.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Ordered map from parameter name to tensor. Names and shapes are fixed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
}

/// Per-parameter gradient (or optimizer velocity) mirroring a [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    entries: Vec<(String, Tensor)>,
}

/// Parameters bound to leaf variables on a tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn check_names(op: &'static str, a: &[(String, Tensor)], b: &[(String, Tensor)]) -> Result<()> {
    ensure!(a.len() == b.len(), op, "{} tensors vs {}", a.len(), b.len());
    for ((na, ta), (nb, tb)) in a.iter().zip(b) {
        ensure!(na == nb, op, "name `{}` vs `{}`", na, nb);
        ensure!(ta.shape() == tb.shape(), op, "`{}` shape {:?} vs {:?}", na, ta.shape(), tb.shape());
    }
    Ok(())
}

macro_rules! named_tensors {
    ($ty:ident) => {
        impl $ty {
            pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
                for (i, (name, _)) in entries.iter().enumerate() {
                    ensure!(
                        entries[..i].iter().all(|(n, _)| n != name),
                        stringify!($ty),
                        "duplicate name `{}`",
                        name
                    );
                }
                Ok(Self { entries })
            }

            pub fn len(&self) -> usize {
                self.entries.len()
            }

            pub fn is_empty(&self) -> bool {
                self.entries.is_empty()
            }

            pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
                self.entries.iter().map(|(n, t)| (n.as_str(), t))
            }

            pub fn names(&self) -> impl Iterator<Item = &str> {
                self.entries.iter().map(|(n, _)| n.as_str())
            }

            pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
                self.entries.iter().map(|(_, t)| t)
            }

            pub fn get(&self, name: &str) -> Option<&Tensor> {
                self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
            }

            pub fn tensor(&self, index: usize) -> &Tensor {
                &self.entries[index].1
            }

            /// Total number of scalar elements.
            pub fn num_elements(&self) -> usize {
                self.entries.iter().map(|(_, t)| t.len()).sum()
            }

            /// All elements concatenated in entry order.
            pub fn flatten(&self) -> Vec<f64> {
                self.entries.iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
            }

            /// Overwrite element `flat` in the concatenated order.
            pub fn set_flat(&mut self, mut flat: usize, value: f64) {
                for (_, t) in &mut self.entries {
                    if flat < t.len() {
                        t.data_mut()[flat] = value;
                        return;
                    }
                    flat -= t.len();
                }
                panic!("flat index out of range");
            }

            pub fn get_flat(&self, mut flat: usize) -> f64 {
                for (_, t) in &self.entries {
                    if flat < t.len() {
                        return t.data()[flat];
                    }
                    flat -= t.len();
                }
                panic!("flat index out of range");
            }
        }
    };
}

named_tensors!(ModelParams);
named_tensors!(GradientVector);

impl ModelParams {
    /// Register every tensor as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams { vars: self.entries.iter().map(|(_, t)| tape.param(t.clone())).collect() }
    }

    /// Register every tensor as a constant (no gradient).
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundParams {
        BoundParams { vars: self.entries.iter().map(|(_, t)| tape.constant(t.clone())).collect() }
    }

    /// Collect gradients for a binding; parameters the loss never touched get zeros.
    pub fn gradients(&self, bound: &BoundParams, grads: &Gradients) -> GradientVector {
        let entries = self
            .entries
            .iter()
            .zip(&bound.vars)
            .map(|((n, t), v)| (n.clone(), grads.get_or_zeros(*v, t.shape())))
            .collect();
        GradientVector { entries }
    }

    pub fn zeros_like(&self) -> GradientVector {
        GradientVector { entries: self.entries.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape()))).collect() }
    }
}

impl GradientVector {
    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    /// Elementwise `self + other`.
    pub fn add(&self, other: &GradientVector) -> Result<GradientVector> {
        check_names("GradientVector::add", &self.entries, &other.entries)?;
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|((n, a), (_, b))| (n.clone(), Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).expect("shape")))
            .collect();
        Ok(GradientVector { entries })
    }

    /// Inner product over all elements.
    pub fn dot(&self, other: &GradientVector) -> Result<f64> {
        check_names("GradientVector::dot", &self.entries, &other.entries)?;
        Ok(self.entries.iter().zip(&other.entries).map(|((_, a), (_, b))| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>()).sum())
    }
}

/// `params - step * grads`, leaving both inputs untouched.
pub fn axpy_params(params: &ModelParams, grads: &GradientVector, step: f64) -> Result<ModelParams> {
    check_names("axpy_params", &params.entries, &grads.entries)?;
    let entries = params
        .entries
        .iter()
        .zip(&grads.entries)
        .map(|((n, p), (_, g))| {
            let data = p.data().iter().zip(g.data()).map(|(pv, gv)| pv - step * gv).collect();
            (n.clone(), Tensor::new(p.shape().to_vec(), data).expect("shape checked"))
        })
        .collect();
    Ok(ModelParams { entries })
}

/// SGD with momentum and L2 weight decay:
/// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`.
pub fn sgd_step(
    params: &ModelParams,
    grads: &GradientVector,
    velocity: &GradientVector,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(ModelParams, GradientVector)> {
    ensure!(lr >= 0.0, "sgd_step", "negative learning rate {}", lr);
    check_names("sgd_step", &params.entries, &grads.entries)?;
    check_names("sgd_step", &params.entries, &velocity.entries)?;
    let mut new_params = Vec::with_capacity(params.len());
    let mut new_vel = Vec::with_capacity(params.len());
    for (((n, p), (_, g)), (_, v)) in params.entries.iter().zip(&grads.entries).zip(&velocity.entries) {
        let mut pv = Vec::with_capacity(p.len());
        let mut vv = Vec::with_capacity(p.len());
        for ((&pi, &gi), &vi) in p.data().iter().zip(g.data()).zip(v.data()) {
            let v_next = momentum * vi + gi + weight_decay * pi;
            vv.push(v_next);
            pv.push(pi - lr * v_next);
        }
        new_params.push((n.clone(), Tensor::new(p.shape().to_vec(), pv)?));
        new_vel.push((n.clone(), Tensor::new(p.shape().to_vec(), vv)?));
    }
    Ok((ModelParams { entries: new_params }, GradientVector { entries: new_vel }))
}

/// Euclidean norm over every element of every tensor.
pub fn grad_norm(grads: &GradientVector) -> f64 {
    libm::sqrt(grads.entries.iter().flat_map(|(_, t)| t.data()).map(|v| v * v).sum())
}

pub fn scale_grads(grads: &GradientVector, s: f64) -> Result<GradientVector> {
    ensure!(s.is_finite(), "scale_grads", "non-finite scale {}", s);
    Ok(GradientVector { entries: grads.entries.iter().map(|(n, t)| (n.clone(), t.map(|v| v * s))).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn p(entries: &[(&str, &[f64])]) -> ModelParams {
        ModelParams::new(entries.iter().map(|(n, v)| (n.to_string(), Tensor::from_vec(v.to_vec()))).collect()).unwrap()
    }

    fn g(entries: &[(&str, &[f64])]) -> GradientVector {
        GradientVector::new(entries.iter().map(|(n, v)| (n.to_string(), Tensor::from_vec(v.to_vec()))).collect()).unwrap()
    }

    #[test]
    fn axpy_arithmetic() {
        let out = axpy_params(&p(&[("w", &[1.0, 2.0])]), &g(&[("w", &[1.0, 1.0])]), 0.5).unwrap();
        assert_eq!(out.get("w").unwrap().data(), &[0.5, 1.5]);
    }

    #[test]
    fn axpy_zero_step_is_identity() {
        let params = p(&[("a", &[0.1, -3.7]), ("b", &[1e-300])]);
        let out = axpy_params(&params, &g(&[("a", &[5.0, 6.0]), ("b", &[7.0])]), 0.0).unwrap();
        assert_eq!(out, params);
    }

    #[test]
    fn axpy_inverse() {
        let params = p(&[("a", &[0.1, -3.7, 2.2])]);
        let grads = g(&[("a", &[0.3, 1.9, -0.4])]);
        let back = axpy_params(&axpy_params(&params, &grads, 0.37).unwrap(), &grads, -0.37).unwrap();
        for (x, y) in back.flatten().iter().zip(params.flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn axpy_rejects_mismatch() {
        assert!(axpy_params(&p(&[("w", &[1.0])]), &g(&[("v", &[1.0])]), 1.0).is_err());
        assert!(axpy_params(&p(&[("w", &[1.0])]), &g(&[("w", &[1.0, 2.0])]), 1.0).is_err());
    }

    #[test]
    fn sgd_without_momentum_is_axpy() {
        let params = p(&[("w", &[0.5, -1.5])]);
        let grads = g(&[("w", &[0.2, 0.4])]);
        let (out, _) = sgd_step(&params, &grads, &params.zeros_like(), 0.1, 0.0, 0.0).unwrap();
        assert_eq!(out, axpy_params(&params, &grads, 0.1).unwrap());
    }

    #[test]
    fn sgd_momentum_recurrence() {
        let params = p(&[("w", &[1.0])]);
        let grads = g(&[("w", &[1.0])]);
        let (w1, v1) = sgd_step(&params, &grads, &params.zeros_like(), 0.1, 0.9, 0.0).unwrap();
        assert!((w1.flatten()[0] - 0.9).abs() < 1e-12);
        assert!((v1.flatten()[0] - 1.0).abs() < 1e-12);
        let (w2, v2) = sgd_step(&w1, &grads, &v1, 0.1, 0.9, 0.0).unwrap();
        assert!((v2.flatten()[0] - 1.9).abs() < 1e-12);
        assert!((w2.flatten()[0] - 0.71).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_shifts_gradient() {
        let params = p(&[("w", &[2.0, -4.0])]);
        let grads = g(&[("w", &[0.5, 0.5])]);
        let (_, v) = sgd_step(&params, &grads, &params.zeros_like(), 0.1, 0.0, 0.01).unwrap();
        assert_eq!(v.flatten(), vec![0.5 + 0.01 * 2.0, 0.5 - 0.01 * 4.0]);
        assert!(sgd_step(&params, &grads, &params.zeros_like(), -0.1, 0.0, 0.0).is_err());
    }

    #[test]
    fn norm_and_scaling() {
        let grads = g(&[("a", &[3.0]), ("b", &[4.0])]);
        assert_eq!(grad_norm(&grads), 5.0);
        let unit = scale_grads(&grads, 1.0 / grad_norm(&grads)).unwrap();
        assert!((grad_norm(&unit) - 1.0).abs() < 1e-12);
        assert_eq!(grad_norm(&g(&[("a", &[0.0, 0.0])])), 0.0);
        assert!(scale_grads(&grads, f64::NAN).is_err());
    }
}

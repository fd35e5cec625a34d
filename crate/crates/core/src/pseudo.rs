//! Pseudo-labels from one or two teachers, agreement/disagreement
//! attributors, and the confidence-ordered receiver masks.

use alloc::vec::Vec;

use crate::error::{ensure, Result};
use crate::grid::{Grid, LabelMap};
use crate::tensor::Tensor;

pub type Mask = Grid<u8>;

/// Fused pseudo-labels together with each teacher's own labels and confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoBundle {
    pub fused: Vec<LabelMap>,
    pub label_phi: Vec<LabelMap>,
    pub label_psi: Vec<LabelMap>,
    /// Probability each teacher assigns to its own predicted class.
    pub conf_phi: Vec<Grid<f64>>,
    pub conf_psi: Vec<Grid<f64>>,
    pub agree_mask: Vec<Mask>,
    pub disagree_mask: Vec<Mask>,
}

/// Per-teacher receiver masks for the agreement and disagreement feedback.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceiverMasks {
    pub phi_agree: Vec<Mask>,
    pub phi_disagree: Vec<Mask>,
    pub psi_agree: Vec<Mask>,
    pub psi_disagree: Vec<Mask>,
}

/// Per-pixel argmax over channels (lowest index wins ties) and the winning probability.
pub fn argmax_with_conf(prob_maps: &Tensor) -> Result<(Vec<LabelMap>, Vec<Grid<f64>>)> {
    let (n, c, h, w) = prob_maps.dims4()?;
    ensure!(c <= u8::MAX as usize + 1, "argmax_label", "{} classes do not fit in u8 ids", c);
    let plane = h * w;
    let d = prob_maps.data();
    let mut labels = Vec::with_capacity(n);
    let mut confs = Vec::with_capacity(n);
    for b in 0..n {
        let mut lab = Grid::filled(h, w, 0u8);
        let mut conf = Grid::filled(h, w, 0.0);
        for p in 0..plane {
            let (mut best, mut best_v) = (0usize, d[b * c * plane + p]);
            for ch in 1..c {
                let v = d[(b * c + ch) * plane + p];
                if v > best_v {
                    best = ch;
                    best_v = v;
                }
            }
            lab.data[p] = best as u8;
            conf.data[p] = best_v;
        }
        labels.push(lab);
        confs.push(conf);
    }
    Ok((labels, confs))
}

pub fn argmax_label(prob_maps: &Tensor) -> Result<Vec<LabelMap>> {
    Ok(argmax_with_conf(prob_maps)?.0)
}

/// Consensus where the teachers agree, the higher-confidence label where
/// they conflict (exact ties go to `phi`).
pub fn fuse_dual(probs_phi: &Tensor, probs_psi: &Tensor) -> Result<PseudoBundle> {
    ensure!(probs_phi.shape() == probs_psi.shape(), "fuse_dual", "teacher maps {:?} vs {:?}", probs_phi.shape(), probs_psi.shape());
    let (label_phi, conf_phi) = argmax_with_conf(probs_phi)?;
    let (label_psi, conf_psi) = argmax_with_conf(probs_psi)?;
    let n = label_phi.len();
    let mut fused = Vec::with_capacity(n);
    let mut agree_mask = Vec::with_capacity(n);
    let mut disagree_mask = Vec::with_capacity(n);
    for b in 0..n {
        let (lp, ls, cp, cs) = (&label_phi[b], &label_psi[b], &conf_phi[b], &conf_psi[b]);
        let mut f = lp.clone();
        let mut agree = Grid::filled(lp.height, lp.width, 0u8);
        for i in 0..lp.data.len() {
            if lp.data[i] == ls.data[i] {
                agree.data[i] = 1;
            } else if cs.data[i] > cp.data[i] {
                f.data[i] = ls.data[i];
            }
        }
        disagree_mask.push(agree.map(|a| 1 - a));
        agree_mask.push(agree);
        fused.push(f);
    }
    Ok(PseudoBundle { fused, label_phi, label_psi, conf_phi, conf_psi, agree_mask, disagree_mask })
}

/// Agreement receivers sit on the strictly lower-confidence teacher,
/// disagreement receivers on the strictly higher-confidence one. Ties get neither.
pub fn receiver_masks(bundle: &PseudoBundle) -> ReceiverMasks {
    let n = bundle.fused.len();
    let mut out = ReceiverMasks { phi_agree: Vec::with_capacity(n), phi_disagree: Vec::with_capacity(n), psi_agree: Vec::with_capacity(n), psi_disagree: Vec::with_capacity(n) };
    for b in 0..n {
        let (cp, cs, agree) = (&bundle.conf_phi[b], &bundle.conf_psi[b], &bundle.agree_mask[b]);
        let blank = Grid::filled(cp.height, cp.width, 0u8);
        let (mut pa, mut pd, mut sa, mut sd) = (blank.clone(), blank.clone(), blank.clone(), blank);
        for i in 0..cp.data.len() {
            let (phi_lower, psi_lower) = (cp.data[i] < cs.data[i], cs.data[i] < cp.data[i]);
            if agree.data[i] == 1 {
                pa.data[i] = phi_lower as u8;
                sa.data[i] = psi_lower as u8;
            } else {
                pd.data[i] = psi_lower as u8;
                sd.data[i] = phi_lower as u8;
            }
        }
        out.phi_agree.push(pa);
        out.phi_disagree.push(pd);
        out.psi_agree.push(sa);
        out.psi_disagree.push(sd);
    }
    out
}

impl ReceiverMasks {
    /// Mismatched pairing: each feedback type lands on the opposite
    /// confidence side (agreement on the higher, disagreement on the lower).
    /// Within a region the two sides are the two teachers, so this swaps them.
    pub fn mismatched(self) -> Self {
        Self { phi_agree: self.psi_agree, phi_disagree: self.psi_disagree, psi_agree: self.phi_agree, psi_disagree: self.phi_disagree }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    /// `(1, 2, 1, k)` map from per-pixel class-0 probabilities.
    fn binary(p0: &[f64]) -> Tensor {
        let mut d: Vec<f64> = p0.to_vec();
        d.extend(p0.iter().map(|p| 1.0 - p));
        Tensor::new(vec![1, 2, 1, p0.len()], d).unwrap()
    }

    #[test]
    fn argmax_examples() {
        let l = argmax_label(&binary(&[0.2, 0.5, 0.9])).unwrap();
        assert_eq!(l[0].data, vec![1, 0, 0]);
    }

    #[test]
    fn fusion_examples() {
        let b = fuse_dual(&binary(&[0.9, 0.6, 0.6]), &binary(&[0.8, 0.3, 0.4])).unwrap();
        assert_eq!(b.fused[0].data, vec![0, 1, 0]);
        assert_eq!(b.agree_mask[0].data, vec![1, 0, 0]);
        assert_eq!(b.disagree_mask[0].data, vec![0, 1, 1]);
        assert!(fuse_dual(&binary(&[0.5]), &binary(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn receiver_examples() {
        // agreement 0.8 vs 0.9, conflict 0.55 vs 0.7, agreement tie
        let b = fuse_dual(&binary(&[0.8, 0.55, 0.7]), &binary(&[0.9, 0.3, 0.7])).unwrap();
        let m = receiver_masks(&b);
        assert_eq!(m.phi_agree[0].data, vec![1, 0, 0]);
        assert_eq!(m.psi_agree[0].data, vec![0, 0, 0]);
        assert_eq!(m.psi_disagree[0].data, vec![0, 1, 0]);
        assert_eq!(m.phi_disagree[0].data, vec![0, 0, 0]);
        let x = m.mismatched();
        assert_eq!(x.psi_agree[0].data, vec![1, 0, 0]);
        assert_eq!(x.phi_disagree[0].data, vec![0, 1, 0]);
    }
}

//! Property tests for argmax, fusion and receiver masks.

use dualfete_core::pseudo::{argmax_with_conf, fuse_dual, receiver_masks, PseudoBundle};
use dualfete_core::tensor::Tensor;
use proptest::prelude::*;

/// Channel-normalized maps built from small integer weights, so exact
/// confidence ties and argmax ties are common.
fn prob_maps(n: usize, c: usize, h: usize, w: usize, weights: &[u8]) -> Tensor {
    let plane = h * w;
    let mut data = vec![0.0; n * c * plane];
    for b in 0..n {
        for p in 0..plane {
            let raw: Vec<f64> = (0..c).map(|ch| 1.0 + weights[((b * c + ch) * plane + p) % weights.len()] as f64).collect();
            let total: f64 = raw.iter().sum();
            for (ch, v) in raw.iter().enumerate() {
                data[(b * c + ch) * plane + p] = v / total;
            }
        }
    }
    Tensor::new(vec![n, c, h, w], data).unwrap()
}

fn pair() -> impl Strategy<Value = (Tensor, Tensor, usize)> {
    (1usize..3, 2usize..5, 1usize..5, 1usize..5).prop_flat_map(|(n, c, h, w)| {
        let len = n * c * h * w;
        (prop::collection::vec(0u8..4, len), prop::collection::vec(0u8..4, len)).prop_map(move |(a, b)| (prob_maps(n, c, h, w, &a), prob_maps(n, c, h, w, &b), c))
    })
}

fn pixels(b: &PseudoBundle) -> impl Iterator<Item = (usize, usize)> + '_ {
    (0..b.fused.len()).flat_map(move |k| (0..b.fused[k].data.len()).map(move |i| (k, i)))
}

proptest! {
    #[test]
    fn argmax_picks_a_maximal_class((p, _, c) in pair()) {
        let (labels, confs) = argmax_with_conf(&p).unwrap();
        let (_, _, h, w) = p.dims4().unwrap();
        let plane = h * w;
        for (b, (lab, conf)) in labels.iter().zip(&confs).enumerate() {
            for i in 0..plane {
                let col: Vec<f64> = (0..c).map(|ch| p.data()[(b * c + ch) * plane + i]).collect();
                let best = col.iter().cloned().fold(f64::MIN, f64::max);
                let first = col.iter().position(|&v| v == best).unwrap();
                prop_assert_eq!(lab.data[i] as usize, first);
                prop_assert_eq!(conf.data[i], best);
                prop_assert!(conf.data[i] >= 1.0 / c as f64 - 1e-12);
            }
        }
    }

    #[test]
    fn attributors_partition_and_fusion_follows_confidence((p, q, _) in pair()) {
        let b = fuse_dual(&p, &q).unwrap();
        for (k, i) in pixels(&b) {
            let (lp, ls) = (b.label_phi[k].data[i], b.label_psi[k].data[i]);
            let (cp, cs) = (b.conf_phi[k].data[i], b.conf_psi[k].data[i]);
            prop_assert_eq!(b.agree_mask[k].data[i] + b.disagree_mask[k].data[i], 1);
            prop_assert_eq!(b.agree_mask[k].data[i] == 1, lp == ls);
            let expected = if lp == ls || cp >= cs { lp } else { ls };
            prop_assert_eq!(b.fused[k].data[i], expected);
        }
    }

    #[test]
    fn receivers_sit_inside_their_region_on_the_right_side((p, q, _) in pair()) {
        let b = fuse_dual(&p, &q).unwrap();
        let r = receiver_masks(&b);
        for (k, i) in pixels(&b) {
            let (cp, cs) = (b.conf_phi[k].data[i], b.conf_psi[k].data[i]);
            let (pa, pd, sa, sd) = (r.phi_agree[k].data[i], r.phi_disagree[k].data[i], r.psi_agree[k].data[i], r.psi_disagree[k].data[i]);
            prop_assert!(pa <= b.agree_mask[k].data[i] && sa <= b.agree_mask[k].data[i]);
            prop_assert!(pd <= b.disagree_mask[k].data[i] && sd <= b.disagree_mask[k].data[i]);
            prop_assert!(pa + sa <= 1 && pd + sd <= 1);
            prop_assert_eq!(pa == 1, b.agree_mask[k].data[i] == 1 && cp < cs);
            prop_assert_eq!(sa == 1, b.agree_mask[k].data[i] == 1 && cs < cp);
            prop_assert_eq!(pd == 1, b.disagree_mask[k].data[i] == 1 && cp > cs);
            prop_assert_eq!(sd == 1, b.disagree_mask[k].data[i] == 1 && cs > cp);
            if cp == cs {
                prop_assert_eq!(pa + pd + sa + sd, 0);
            }
        }
    }

    #[test]
    fn swapping_teachers_swaps_roles((p, q, _) in pair()) {
        let a = fuse_dual(&p, &q).unwrap();
        let b = fuse_dual(&q, &p).unwrap();
        prop_assert_eq!(&a.agree_mask, &b.agree_mask);
        let (ra, rb) = (receiver_masks(&a), receiver_masks(&b));
        prop_assert_eq!(&ra.phi_agree, &rb.psi_agree);
        prop_assert_eq!(&ra.phi_disagree, &rb.psi_disagree);
        for (k, i) in pixels(&a) {
            if a.conf_phi[k].data[i] != a.conf_psi[k].data[i] {
                prop_assert_eq!(a.fused[k].data[i], b.fused[k].data[i]);
            }
        }
    }

    #[test]
    fn mismatching_twice_is_identity((p, q, _) in pair()) {
        let r = receiver_masks(&fuse_dual(&p, &q).unwrap());
        prop_assert_eq!(r.clone().mismatched().mismatched(), r);
    }
}

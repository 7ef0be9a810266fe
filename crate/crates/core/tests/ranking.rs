use ndarray::Array2;
use proptest::prelude::*;

use jukeprobe::metrics::{auc, average_precision, macro_auc, r_squared};

/// AUC by enumerating every positive/negative pair; ties count half.
fn pairwise_auc(s: &[f64], l: &[bool]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &pi) in l.iter().enumerate() {
        for (j, &pj) in l.iter().enumerate() {
            if pi && !pj {
                den += 1.0;
                num += match s[i].total_cmp(&s[j]) {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec((0u8..6).prop_map(|v| v as f64 / 5.0), n),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

proptest! {
    #[test]
    fn auc_agrees_with_pair_count((s, l) in scored()) {
        match (auc(&s, &l), pairwise_auc(&s, &l)) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}"),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn ranking_metrics_ignore_input_order((s, l) in scored(), rot in 0usize..40) {
        let k = rot % s.len();
        let (mut s2, mut l2) = (s.clone(), l.clone());
        s2.rotate_left(k);
        l2.rotate_left(k);
        prop_assert_eq!(auc(&s, &l), auc(&s2, &l2));
        let (a, b) = (average_precision(&s, &l), average_precision(&s2, &l2));
        match (a, b) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
            _ => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn ranking_metrics_are_monotone_invariant((s, l) in scored()) {
        let t: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() - 7.0).collect();
        prop_assert_eq!(auc(&s, &l), auc(&t, &l));
        prop_assert_eq!(average_precision(&s, &l), average_precision(&t, &l));
    }

    #[test]
    fn ap_is_a_fraction((s, l) in scored()) {
        if let Some(ap) = average_precision(&s, &l) {
            prop_assert!(ap > 0.0 && ap <= 1.0 + 1e-12);
        }
    }
}

#[test]
fn macro_auc_skips_single_class_tags() {
    let s = Array2::from_shape_vec((4, 2), vec![0.1, 0.9, 0.4, 0.8, 0.35, 0.7, 0.8, 0.6]).unwrap();
    let l = Array2::from_shape_vec((4, 2), vec![false, true, false, true, true, true, true, true]).unwrap();
    let m = macro_auc(s.view(), l.view()).unwrap();
    assert_eq!((m.valid_tags, m.excluded_tags), (1, 1));
    assert!((m.value - 0.75).abs() < 1e-12);
}

#[test]
fn r_squared_matches_closed_form() {
    let t = [1.0, 2.0, 3.0, 4.0];
    let p = [1.5, 2.0, 2.5, 4.5];
    let mean = 2.5;
    let ss_res: f64 = t.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum();
    let ss_tot: f64 = t.iter().map(|a| (a - mean) * (a - mean)).sum();
    let want = 1.0 - ss_res / ss_tot;
    assert!((r_squared(&p, &t).unwrap() - want).abs() < 1e-12);
}

mod common;

use proptest::prelude::*;

use common::{brute_erosion, oracle};
use dlabel::data::palette::BACKGROUND;
use dlabel::layers::loss::IGNORE;
use dlabel::metrics::{confusion, derive_metrics, erode_reference, evaluate_regimes, F1Mode, Regime};

fn labels(n: usize, classes: u8) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(prop_oneof![9 => 0..classes, 1 => Just(IGNORE)], n)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn metrics_match_pixel_oracle(classes in 2usize..7, pairs in (2u8..7).prop_flat_map(|c| (labels(100, c), labels(100, c)))) {
        let (pred, reference) = pairs;
        let pred: Vec<u8> = pred.iter().map(|&p| if p == IGNORE { 0 } else { p % classes as u8 }).collect();
        let reference: Vec<u8> = reference.iter().map(|&r| if r == IGNORE { r } else { r % classes as u8 }).collect();
        let cm = confusion(&pred, &reference, None, classes).unwrap();
        match (derive_metrics(&cm, F1Mode::Harmonic), oracle(&pred, &reference, classes)) {
            (Ok(m), Some(o)) => {
                prop_assert!(close(m.oa, o.oa) && close(m.kappa, o.kappa) && close(m.aa, o.aa) && close(m.f1, o.f1));
            }
            (Err(_), None) => {}
            _ => prop_assert!(false, "oracle and implementation disagree on emptiness"),
        }
    }

    #[test]
    fn consistent_relabeling_preserves_metrics(pairs in (labels(200, 5), labels(200, 5)), perm in Just((0u8..5).collect::<Vec<_>>()).prop_shuffle()) {
        let (pred, reference) = pairs;
        let pred: Vec<u8> = pred.iter().map(|&p| if p == IGNORE { 0 } else { p }).collect();
        let map = |v: &[u8]| -> Vec<u8> { v.iter().map(|&x| if x == IGNORE { x } else { perm[x as usize] }).collect() };
        let a = derive_metrics(&confusion(&pred, &reference, None, 5).unwrap(), F1Mode::Harmonic);
        let b = derive_metrics(&confusion(&map(&pred), &map(&reference), None, 5).unwrap(), F1Mode::Harmonic);
        if let (Ok(a), Ok(b)) = (a, b) {
            prop_assert!(close(a.oa, b.oa) && close(a.kappa, b.kappa) && close(a.aa, b.aa) && close(a.f1, b.f1));
        }
    }

    #[test]
    fn kappa_below_accuracy(pairs in (labels(150, 4), labels(150, 4))) {
        let (pred, reference) = pairs;
        let pred: Vec<u8> = pred.iter().map(|&p| if p == IGNORE { 1 } else { p }).collect();
        let cm = confusion(&pred, &reference, None, 4).unwrap();
        if let Ok(m) = derive_metrics(&cm, F1Mode::Harmonic) {
            let rows = (0..4).filter(|&c| cm.row(c) > 0).count();
            let cols = (0..4).filter(|&c| cm.col(c) > 0).count();
            prop_assert!(m.kappa <= m.oa + 1e-12);
            if m.oa > 0.0 && m.oa < 1.0 && rows > 1 && cols > 1 {
                prop_assert!(m.kappa < m.oa);
            }
            prop_assert!((-1.0..=1.0).contains(&m.kappa));
        }
    }

    #[test]
    fn erosion_matches_disc_oracle(h in 1usize..24, w in 1usize..24, seed in prop::collection::vec(0u8..4, 24 * 24), blocky in any::<bool>()) {
        // Blocky rasters have long runs, noisy ones have many edges.
        let reference: Vec<u8> = (0..h * w)
            .map(|i| if blocky { seed[(i / w / 6) * 4 + (i % w) / 6] % 3 } else { match seed[i] { 3 => IGNORE, v => v } })
            .collect();
        for r in [1usize, 2, 3] {
            prop_assert_eq!(erode_reference(&reference, h, w, r), brute_erosion(&reference, h, w, r as isize));
        }
    }
}

#[test]
fn no_background_drops_reference_background_only() {
    // Reference column of background, predictions of background elsewhere.
    let (h, w) = (4, 4);
    let reference: Vec<u8> = (0..16).map(|i| if i % 4 == 0 { BACKGROUND } else { 1 }).collect();
    let mut pred = reference.clone();
    pred[1] = BACKGROUND;
    let r = evaluate_regimes(&pred, &reference, h, w, 6, F1Mode::Harmonic).unwrap();
    let full = r.get(Regime::Full).unwrap();
    let nobk = r.get(Regime::NoBackground).unwrap();
    assert_eq!(full.pixels, 16);
    assert_eq!(nobk.pixels, 12);
    assert!(close(nobk.oa, 11.0 / 12.0));
    assert_eq!(nobk.class_accuracy[BACKGROUND as usize], None);
    assert_eq!(nobk.class_f1[BACKGROUND as usize], None);
}

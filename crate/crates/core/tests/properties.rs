//! Property tests for metrics and post-processing against the reference
//! implementations in `common`.

mod common;

use cotrain::metrics::{dsc, mad, paired_t_test_one_sided};
use cotrain::nets::{BranchAssignment, DualBranchOutput};
use cotrain::postprocess::{edt_hole_fill, largest_component_filter, postprocess_pipeline};
use cotrain::volume::{one_hot, Grid3, LabelMap, Shape3, Spacing, ZoneLabel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mask(rng: &mut impl Rng, shape: Shape3, density: f64) -> Grid3<bool> {
    Grid3::from_fn(shape, |_, _, _| rng.gen_bool(density))
}

fn one_hot_output(lm: &LabelMap) -> DualBranchOutput {
    let oh = one_hot(lm);
    DualBranchOutput {
        shape: lm.shape(),
        spacing: lm.spacing,
        probs: [oh.clone(), oh],
        recon: None,
    }
}

/// Random label map made of a few axis-aligned boxes over background.
fn blocky_labels(rng: &mut impl Rng, shape: Shape3) -> LabelMap {
    let mut g = Grid3::filled(shape, ZoneLabel::Background);
    let dims = [shape.depth, shape.height, shape.width];
    for _ in 0..rng.gen_range(1..6) {
        let zone = ZoneLabel::from_index(rng.gen_range(1..5)).unwrap();
        let lo: Vec<usize> = dims.iter().map(|&d| rng.gen_range(0..d)).collect();
        let hi: Vec<usize> = dims.iter().zip(&lo).map(|(&d, &l)| rng.gen_range(l..d) + 1).collect();
        for z in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for x in lo[2]..hi[2] {
                    g[shape.index(z, y, x)] = zone;
                }
            }
        }
    }
    LabelMap::new(g, Spacing::ISOTROPIC)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dsc_matches_oracle_and_is_symmetric(seed: u64, da in 0.05f64..0.9, db in 0.05f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = common::random_shape(&mut rng, 2, 6);
        let (p, g) = (random_mask(&mut rng, s, da), random_mask(&mut rng, s, db));
        let d = dsc(&p, &g).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, dsc(&g, &p).unwrap());
        prop_assert!((d - common::dsc(&p, &g)).abs() < 1e-12);
        prop_assert_eq!(dsc(&p, &p).unwrap(), 1.0);
        prop_assert_eq!(d == 1.0, p == g);
    }

    #[test]
    fn mad_matches_oracle_symmetric_and_scales(seed: u64, scale in 0.25f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = common::random_shape(&mut rng, 2, 6);
        let sp = Spacing::new([rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0)]).unwrap();
        let (p, g) = (random_mask(&mut rng, s, 0.3), random_mask(&mut rng, s, 0.3));
        match (mad(&p, &g, sp).unwrap(), mad(&g, &p, sp).unwrap()) {
            (Some(a), Some(b)) => {
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!((a - common::mad(&p, &g, sp)).abs() < 1e-9);
                let scaled = Spacing::new(sp.0.map(|v| v * scale)).unwrap();
                let c = mad(&p, &g, scaled).unwrap().unwrap();
                prop_assert!((c - scale * a).abs() < 1e-9 * (1.0 + c));
                prop_assert_eq!(dsc(&p, &g).unwrap(), common::dsc(&p, &g));
                prop_assert_eq!(mad(&p, &p, sp).unwrap(), Some(0.0));
            }
            (a, b) => prop_assert!(a.is_none() && b.is_none()),
        }
    }

    #[test]
    fn t_test_swapping_samples_negates_t(a in prop::collection::vec(-5.0f64..5.0, 2..12), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f64> = a.iter().map(|_| rng.gen_range(-5.0..5.0)).collect();
        let ab = paired_t_test_one_sided(&a, &b, 0.05).unwrap();
        let ba = paired_t_test_one_sided(&b, &a, 0.05).unwrap();
        prop_assert!((ab.t_statistic + ba.t_statistic).abs() < 1e-9 * (1.0 + ab.t_statistic.abs()));
        prop_assert!((ab.p_value + ba.p_value - 1.0).abs() < 1e-9);
        prop_assert_eq!(ab.dof, a.len() - 1);
        prop_assert_eq!(ab.significant, ab.p_value < 0.05);
    }

    #[test]
    fn pipeline_outputs_single_components_and_is_idempotent(seed: u64, blocky: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = common::random_shape(&mut rng, 3, 7);
        let out = if blocky {
            let mut o = one_hot_output(&blocky_labels(&mut rng, s));
            // blur the one-hot maps with noise so argmax fragments
            for branch in o.probs.iter_mut() {
                for i in 0..s.len() {
                    let w: Vec<f64> = (0..5).map(|z| branch[z][i] + rng.gen_range(0.0..0.8)).collect();
                    let t: f64 = w.iter().sum();
                    for z in 0..5 {
                        branch[z][i] = w[z] / t;
                    }
                }
            }
            o
        } else {
            common::random_output(&mut rng, s, false)
        };
        let assign = common::random_assignment(&mut rng);
        let lm = postprocess_pipeline(&out, &assign).unwrap();
        prop_assert_eq!(lm.shape(), s);
        for zone in ZoneLabel::FOREGROUND {
            prop_assert!(common::flood_fill_count(&lm.mask(zone)) <= 1, "{} fragmented", zone);
        }
        let again = postprocess_pipeline(&one_hot_output(&lm), &BranchAssignment::default()).unwrap();
        prop_assert!(again == lm);
    }

    #[test]
    fn filter_shrinks_zones_and_fill_only_touches_holes(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = common::random_shape(&mut rng, 3, 6);
        let lm = common::random_labels(&mut rng, s);
        let partial = largest_component_filter(&lm);
        for zone in ZoneLabel::FOREGROUND {
            let kept = partial.as_slice().iter().filter(|l| **l == Some(zone)).count();
            prop_assert!(kept <= lm.count(zone));
        }
        for (p, l) in partial.as_slice().iter().zip(lm.labels.as_slice()) {
            if *l == ZoneLabel::Background {
                prop_assert_eq!(*p, Some(ZoneLabel::Background));
            }
        }
        let filled = edt_hole_fill(&partial, lm.spacing).unwrap();
        for (p, f) in partial.as_slice().iter().zip(filled.labels.as_slice()) {
            if let Some(l) = p {
                prop_assert_eq!(l, f);
            }
        }
        prop_assert_eq!(filled.labels.as_slice().to_vec(), common::brute_force_fill(&partial, lm.spacing));
    }
}

#[test]
fn reported_pz_p_value_is_significant_at_five_percent() {
    // Shift the differences (1, 2, 3, 4) until the one-sided p equals 0.0189.
    let p_at = |c: f64| {
        let a: Vec<f64> = [1.0, 2.0, 3.0, 4.0].iter().map(|d| d + c).collect();
        paired_t_test_one_sided(&a, &[0.0; 4], 0.05).unwrap()
    };
    let (mut lo, mut hi) = (-1.0, 1.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if p_at(mid).p_value > 0.0189 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let r = p_at(0.5 * (lo + hi));
    assert!((r.p_value - 0.0189).abs() < 1e-9);
    assert!(r.significant);
    assert!((common::student_t3_upper_tail(r.t_statistic) - 0.0189).abs() < 1e-6);
}

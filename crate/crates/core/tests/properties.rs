use std::collections::BTreeSet;

use casecross::eval::{coverage_report, erl_envelope, erl_order, quantile_sorted, GlobalEnvelope, ReplicationCurve};
use casecross::frames::{build_time_stratified, build_unidirectional, CalendarMask};
use casecross::latent::{constrain_rw2, rw2_precision};
use casecross::likelihood::{cond_poisson_grad_hess, cond_poisson_loglik};
use casecross::linalg::gauss_hermite;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn mask_strategy() -> impl Strategy<Value = (usize, Vec<bool>)> {
    (7usize..120).prop_flat_map(|n| (Just(n), prop::collection::vec(prop::bool::weighted(0.15), n)))
}

fn mask_of(n: usize, drop: &[bool]) -> CalendarMask {
    CalendarMask::with_excluded(n, (1..=n).filter(|d| drop[d - 1])).unwrap()
}

proptest! {
    #[test]
    fn stratified_frames_partition_retained_days((n, drop) in mask_strategy(), weeks in 1usize..6) {
        let mask = mask_of(n, &drop);
        let frames = build_time_stratified(n, 7 * weeks, &mask).unwrap();
        let mut seen = BTreeSet::new();
        for (id, frame) in frames.frames().iter().enumerate() {
            prop_assert!(!frame.is_empty() && frame.len() <= weeks);
            let weekday = mask.weekday(frame[0]);
            for &d in frame {
                prop_assert!(seen.insert(d));
                prop_assert_eq!(frames.frame_of(d), Some(id));
                prop_assert_eq!(mask.weekday(d), weekday);
            }
        }
        let retained: BTreeSet<usize> = (1..=n).filter(|d| !drop[d - 1]).collect();
        prop_assert_eq!(seen, retained);
    }

    #[test]
    fn unidirectional_frames_look_back_by_weeks((n, drop) in mask_strategy(), k in 1usize..4) {
        let mask = mask_of(n, &drop);
        let frames = build_unidirectional(n, k, &mask).unwrap();
        for t in (1..=n).filter(|d| !drop[d - 1]) {
            let frame = frames.frame_for_day(t).unwrap();
            prop_assert!(frame.contains(&t) && frame.len() <= k + 1);
            prop_assert!(frame.iter().all(|&s| s <= t && (t - s) % 7 == 0 && !drop[s - 1]));
        }
    }

    #[test]
    fn loglik_ignores_frame_level_shifts(
        (n, drop) in mask_strategy(),
        seed_eta in prop::collection::vec(-2.0f64..2.0, 120),
        counts in prop::collection::vec(0u64..6, 120),
        shift in prop::collection::vec(-5.0f64..5.0, 40),
    ) {
        let mask = mask_of(n, &drop);
        let frames = build_time_stratified(n, 28, &mask).unwrap();
        let eta = seed_eta[..n].to_vec();
        let y: Vec<u64> = (1..=n).map(|d| if drop[d - 1] { 0 } else { counts[d - 1] }).collect();
        let mut shifted = eta.clone();
        for d in 1..=n {
            if let Some(k) = frames.frame_of(d) {
                shifted[d - 1] += shift[k % shift.len()];
            }
        }
        let a = cond_poisson_loglik(&y, &eta, &frames).unwrap();
        let b = cond_poisson_loglik(&y, &shifted, &frames).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
        prop_assert!(a <= 1e-12);
        let g = cond_poisson_grad_hess(&y, &eta, &frames).unwrap().gradient;
        for frame in frames.frames() {
            let total: f64 = frame.iter().map(|&d| g[d - 1]).sum();
            prop_assert!(total.abs() < 1e-9);
        }
    }

    #[test]
    fn rw2_null_space_and_constraint(k in 3usize..60, a in -5.0f64..5.0, b in -5.0f64..5.0, pick in 0usize..1000) {
        let q = rw2_precision(k).unwrap();
        let line: Vec<f64> = (0..k).map(|i| a + b * i as f64).collect();
        let r = q.mul_vec(&line);
        prop_assert!(r.iter().all(|v| v.abs() < 1e-9));
        let (c, constraint) = constrain_rw2(&q, pick % k).unwrap();
        prop_assert_eq!(c.n(), k - 2);
        prop_assert_eq!(constraint.pinned.1, constraint.pinned.0 + 1);
        prop_assert!(c.cholesky().is_some());
    }

    #[test]
    fn gauss_hermite_integrates_polynomials(order in 1usize..12, power in 0u32..24) {
        let (x, w) = gauss_hermite(order);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assume!(power < 2 * order as u32);
        let quad: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(power as i32)).sum();
        // E Z^p: zero for odd p, (p - 1)!! for even p.
        let exact = if power % 2 == 1 { 0.0 } else { (1..power).step_by(2).map(|v| v as f64).product() };
        prop_assert!((quad - exact).abs() < 1e-8 * exact.max(1.0));
    }

    #[test]
    fn quantiles_are_monotone(mut v in prop::collection::vec(-100.0f64..100.0, 1..50), p in 0.0f64..1.0, q in 0.0f64..1.0) {
        v.sort_by(f64::total_cmp);
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        prop_assert!(quantile_sorted(&v, lo) <= quantile_sorted(&v, hi));
        prop_assert!(quantile_sorted(&v, 0.0) == v[0] && quantile_sorted(&v, 1.0) == v[v.len() - 1]);
    }

    #[test]
    fn erl_envelope_moves_with_a_common_curve(
        values in prop::collection::vec(-3.0f64..3.0, 40 * 6),
        shift in prop::collection::vec(-10.0f64..10.0, 6),
        level in 0.05f64..1.0,
    ) {
        let d = DMatrix::from_row_slice(40, 6, &values);
        let shifted = DMatrix::from_fn(40, 6, |i, j| d[(i, j)] + shift[j]);
        prop_assert_eq!(erl_order(&d), erl_order(&shifted));
        let a = erl_envelope(&d, level).unwrap();
        let b = erl_envelope(&shifted, level).unwrap();
        for j in 0..6 {
            prop_assert!((a.lower[j] + shift[j] - b.lower[j]).abs() < 1e-9);
            prop_assert!((a.upper[j] + shift[j] - b.upper[j]).abs() < 1e-9);
            prop_assert!(a.lower[j] <= a.upper[j]);
        }
    }

    #[test]
    fn coverage_is_a_proportion_and_joint_is_the_smallest(
        truths in prop::collection::vec(-2.0f64..2.0, 5 * 4),
        half in prop::collection::vec(0.0f64..2.0, 5 * 4),
        env_half in 0.0f64..3.0,
    ) {
        let reps: Vec<ReplicationCurve> = (0..5)
            .map(|r| {
                let truth = truths[4 * r..4 * r + 4].to_vec();
                let h = &half[4 * r..4 * r + 4];
                ReplicationCurve {
                    grid: vec![0.0, 1.0, 2.0, 3.0],
                    n_obs: vec![25; 4],
                    truth,
                    median: vec![0.0; 4],
                    lower: h.iter().map(|v| -v).collect(),
                    upper: h.to_vec(),
                    envelope: Some(GlobalEnvelope {
                        level: 0.8,
                        lower: vec![-env_half; 4],
                        upper: vec![env_half; 4],
                        ordering: "erl".into(),
                    }),
                }
            })
            .collect();
        let report = coverage_report(&reps).unwrap();
        prop_assert!(report.coverage.iter().all(|c| (0.0..=1.0).contains(c)));
        prop_assert!(report.width.iter().all(|w| *w >= 0.0));
        // The envelope is the same band at every point, so joint coverage
        // cannot exceed the band's coverage at its worst point.
        let joint = report.joint_coverage.unwrap();
        let band_min = (0..4)
            .map(|j| reps.iter().filter(|r| r.truth[j].abs() <= env_half).count() as f64 / 5.0)
            .fold(1.0, f64::min);
        prop_assert!((0.0..=1.0).contains(&joint) && joint <= band_min);
    }
}

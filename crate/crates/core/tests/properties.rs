mod common;

use common::*;
use earshot::eval::{compute_metrics, compute_metrics_with, MetricsRecord, SwsDenominator};
use earshot::policy::{mask_query, QUERY_ASK};
use earshot::train::{gae_advantages, nav_reward, zeta_f, zeta_q};
use earshot::world::{geodesic_distance, step, Action, Heading, Pose};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn record() -> impl Strategy<Value = MetricsRecord> {
    (
        any::<bool>(),
        0.0..60.0f64,
        0.0..30.0f64,
        0u32..500,
        0u32..40,
        0.0..20.0f64,
        0u32..100,
        0u32..500,
    )
        .prop_map(|(success, path, short, acts, min, dtg, end, reach)| MetricsRecord {
            success,
            path_len: path,
            shortest_len: short,
            actions_taken: acts,
            min_actions: min,
            dtg: if success { dtg.min(1.0) } else { dtg },
            sound_end_step: end,
            reach_step: success.then_some(reach),
            queries: vec![],
            option_lengths: vec![],
        })
}

proptest! {
    #[test]
    fn weighted_success_never_exceeds_success(records in prop::collection::vec(record(), 1..60)) {
        let a = compute_metrics(&records).unwrap();
        prop_assert!(a.spl <= a.sr + 1e-12);
        prop_assert!(a.sna <= a.sr + 1e-12);
        prop_assert!(a.sws <= a.sr + 1e-12);
        let s = compute_metrics_with(&records, SwsDenominator::Successes).unwrap();
        prop_assert!((0.0..=1.0).contains(&s.sws));
    }

    #[test]
    fn per_query_penalty_is_non_positive(k in 1u32..50, soft in 1u32..6, nu in 1u32..6, r_neg in -5.0..-0.5f64) {
        prop_assert!(zeta_q(k, soft, nu, r_neg) <= 0.0);
    }

    #[test]
    fn frequency_penalty_vanishes_past_window(j in 0u32..100, tau in 1u32..30, r_f in -3.0..0.0f64) {
        let z = zeta_f(j, tau, r_f);
        prop_assert!(z <= 0.0);
        if j == 0 || j >= tau {
            prop_assert_eq!(z, 0.0);
        } else {
            prop_assert!((z * j as f64 - r_f).abs() < 1e-12);
        }
    }

    #[test]
    fn gae_agrees_with_explicit_sums(
        steps in prop::collection::vec((-3.0..10.0f64, -5.0..5.0f64, prop::bool::weighted(0.2), 1u32..4), 1..25),
        last in -5.0..5.0f64,
        gamma in 0.8..1.0f64,
        lambda in 0.0..1.0f64,
    ) {
        let r: Vec<f64> = steps.iter().map(|s| s.0).collect();
        let v: Vec<f64> = steps.iter().map(|s| s.1).collect();
        let d: Vec<bool> = steps.iter().map(|s| s.2).collect();
        let m: Vec<u32> = steps.iter().map(|s| s.3).collect();
        let (adv, _) = gae_advantages(&r, &v, &d, &m, last, gamma, lambda);
        let want = brute_force_gae(&r, &v, &d, &m, last, gamma, lambda);
        for (a, b) in adv.iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn cap_blocks_further_queries(p in 0.0..1.0f64, made in 0u32..8, cap in 0u32..6) {
        let probs = mask_query(&[1.0 - p, p], made, Some(cap));
        if made >= cap {
            prop_assert_eq!(probs[QUERY_ASK], 0.0);
        } else {
            prop_assert_eq!(probs[QUERY_ASK], p);
        }
    }

    #[test]
    fn navigation_rewards_telescope(seed in 0u64..10_000, len in 1usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = small_scene(seed, &mut rng);
        let cells: Vec<_> = scene.navigable_cells().collect();
        let goal = cells[rng.random_range(0..cells.len())];
        let c = cells[rng.random_range(0..cells.len())];
        let mut pose = Pose::new(c.x, c.y, Heading::from_index(rng.random_range(0..4)));
        let d0 = geodesic_distance(&scene, pose.cell(), goal).unwrap();
        let mut d = d0;
        let mut total = 0.0;
        for _ in 0..len {
            let a = Action::from_index(rng.random_range(1..Action::COUNT));
            pose = step(&scene, pose, a);
            let next = geodesic_distance(&scene, pose.cell(), goal).unwrap();
            total += nav_reward(d, next, false);
            d = next;
        }
        prop_assert!((total - (d0 - d - 0.01 * len as f64)).abs() < 1e-9);
    }

    #[test]
    fn geodesic_distance_is_a_metric(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = small_scene(seed, &mut rng);
        let cells: Vec<_> = scene.navigable_cells().collect();
        let pick = |rng: &mut ChaCha8Rng| cells[rng.random_range(0..cells.len())];
        let (a, b, c) = (pick(&mut rng), pick(&mut rng), pick(&mut rng));
        let ab = geodesic_distance(&scene, a, b).unwrap();
        prop_assert_eq!(ab, geodesic_distance(&scene, b, a).unwrap());
        prop_assert!(ab >= a.manhattan(b) as f64);
        let ac = geodesic_distance(&scene, a, c).unwrap();
        let cb = geodesic_distance(&scene, c, b).unwrap();
        prop_assert!(ab <= ac + cb);
    }
}

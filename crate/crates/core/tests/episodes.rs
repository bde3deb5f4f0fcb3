mod common;

use common::*;
use earshot::episode::{sample_duration, Regime};
use earshot::eval::{check_budget, evaluate, EpisodeSet};
use earshot::oracle::FeedbackMode;
use earshot::policy::{replay_log, run_episode, ControlConfig, OptionTag, Recording, Trigger};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

/// Mean of round(clamp(N(15, 9), 5, 500)) from the normal CDF.
fn clipped_rounded_mean() -> f64 {
    let n = Normal::new(15.0, 9.0).unwrap();
    let mut mean = 5.0 * n.cdf(5.5) + 500.0 * (1.0 - n.cdf(499.5));
    for k in 6..500 {
        let k = k as f64;
        mean += k * (n.cdf(k + 0.5) - n.cdf(k - 0.5));
    }
    mean
}

#[test]
fn sound_duration_mean_matches_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 200_000;
    let draws: Vec<u32> = (0..n).map(|_| sample_duration(&mut rng)).collect();
    assert!(draws.iter().all(|d| (5..=500).contains(d)));
    let mean = draws.iter().map(|&d| d as f64).sum::<f64>() / n as f64;
    let want = clipped_rounded_mean();
    // Four standard errors of a sample mean with std below 9.
    assert!((mean - want).abs() < 4.0 * 9.0 / (n as f64).sqrt(), "{mean} vs {want}");
}

fn episode_set(regime: Regime, count: usize) -> (Untrained, EpisodeSet) {
    let models = Untrained::new(5);
    let set = EpisodeSet::sample(test_scenes(4, 100), &models.split, regime, count, 4, 9).unwrap();
    (models, set)
}

fn control(trigger: Trigger, feedback: FeedbackMode) -> ControlConfig {
    ControlConfig {
        trigger,
        feedback,
        max_steps: 80,
        ..ControlConfig::default()
    }
}

#[test]
fn replayed_logs_reproduce_online_metrics() {
    for regime in Regime::ALL {
        let (models, set) = episode_set(regime, 6);
        for trigger in [Trigger::Never, Trigger::Learned, Trigger::RANDOM, Trigger::Uniform { period: 7 }, Trigger::MU] {
            for feedback in [FeedbackMode::Language, FeedbackMode::GtActions] {
                let cfg = control(trigger, feedback);
                let run = evaluate(&set, models.agents(), &cfg, 17, true, 1).unwrap();
                for (i, (si, spec)) in set.episodes.iter().enumerate() {
                    let replayed = replay_log(&set.scenes[*si], spec, &run.logs[i], cfg.success_radius).unwrap();
                    assert_eq!(replayed, run.records[i], "{} {}", trigger.name(), feedback.name());
                }
            }
        }
    }
}

#[test]
fn query_cap_and_option_length_hold_in_every_log() {
    let (models, set) = episode_set(Regime::Heard, 10);
    for k in 0..=4 {
        for trigger in [Trigger::Learned, Trigger::Uniform { period: 5 }, Trigger::Random { window: 40 }] {
            for feedback in [FeedbackMode::Language, FeedbackMode::GtActions] {
                let cfg = ControlConfig {
                    k_allowed: Some(k),
                    ..control(trigger, feedback)
                };
                let run = evaluate(&set, models.agents(), &cfg, 3, true, 1).unwrap();
                let asked: usize = run.records.iter().map(|r| r.queries.len()).sum();
                assert_eq!(asked > 0, k > 0, "{} k={k}", trigger.name());
                for (log, rec) in run.logs.iter().zip(&run.records) {
                    check_budget(log, k, cfg.option_steps).unwrap();
                    assert!(rec.option_lengths.iter().all(|&n| n as usize <= cfg.option_steps));
                    let flagged = log.iter().filter(|s| s.query_flag).count();
                    assert_eq!(flagged, rec.queries.len());
                }
            }
        }
    }
}

#[test]
fn gt_feedback_follows_the_shortest_path() {
    let (models, set) = episode_set(Regime::Heard, 8);
    let cfg = control(Trigger::Uniform { period: 4 }, FeedbackMode::GtActions);
    let run = evaluate(&set, models.agents(), &cfg, 5, true, 1).unwrap();
    let mut guided = 0;
    for log in &run.logs {
        assert!(log.iter().all(|s| s.option != OptionTag::Language));
        guided += log.iter().filter(|s| s.option == OptionTag::GtActions).count();
    }
    assert!(guided > 0);
}

#[test]
fn evaluation_ignores_worker_count() {
    let (models, set) = episode_set(Regime::Distractor, 9);
    let cfg = control(Trigger::Learned, FeedbackMode::Language);
    let one = evaluate(&set, models.agents(), &cfg, 21, true, 1).unwrap();
    let three = evaluate(&set, models.agents(), &cfg, 21, true, 3).unwrap();
    assert_eq!(one.records, three.records);
    assert_eq!(one.logs, three.logs);
}

#[test]
fn episodes_are_reproducible_from_their_seed() {
    let (models, set) = episode_set(Regime::Unheard, 3);
    let cfg = control(Trigger::RANDOM, FeedbackMode::Language);
    let rec = Recording {
        log: true,
        ..Recording::default()
    };
    for (si, spec) in &set.episodes {
        let a = run_episode(&set.scenes[*si], spec, models.agents(), &cfg, rec, 44).unwrap();
        let b = run_episode(&set.scenes[*si], spec, models.agents(), &cfg, rec, 44).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.record, b.record);
    }
}

use earshot::nn::Grads;
use earshot::percept::GoalDescriptor;
use earshot::policy::{sample_index, ActorCritic, NetConfig, PolicyInput, Transition};
use earshot::train::{ppo_loss, PpoConfig, PpoSample, PpoTrainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn state(s: usize) -> PolicyInput {
    let mut obs = vec![0.0; 2];
    obs[s] = 1.0;
    PolicyInput {
        obs,
        goal: vec![0.0; GoalDescriptor::DIM],
        ..PolicyInput::default()
    }
}

fn bandit_net(seed: u64) -> ActorCritic {
    ActorCritic::new(NetConfig { d: 8, d_core: 16 }, 2, 2, 0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn two_state_bandit_is_learned() {
    let mut net = bandit_net(1);
    let cfg = PpoConfig {
        lr: 3e-3,
        ..PpoConfig::default()
    };
    let mut trainer = PpoTrainer::new(&net, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let correct = |net: &ActorCritic| (0..2).map(|s| net.act(&state(s)).0[s]).fold(1.0, f64::min);
    let mut solved_at = None;
    for update in 0..200 {
        let batch: Vec<Transition> = (0..32)
            .map(|_| {
                let s = rng.random_range(0..2);
                let input = state(s);
                let (probs, value) = net.act(&input);
                let action = sample_index(&probs, &mut rng);
                Transition {
                    input,
                    action,
                    logp: probs[action].ln(),
                    value,
                    reward: if action == s { 1.0 } else { 0.0 },
                    done: true,
                    duration: 1,
                }
            })
            .collect();
        trainer.update(&mut net, &batch, &mut rng).unwrap();
        if correct(&net) > 0.9 {
            solved_at = Some(update);
            break;
        }
    }
    assert!(solved_at.is_some(), "P(correct) only {}", correct(&net));
}

#[test]
fn zero_advantage_with_exact_values_gives_no_gradient() {
    let net = bandit_net(3);
    let step = |s: usize, action: usize| {
        let input = state(s);
        let (probs, value) = net.act(&input);
        Transition {
            input,
            action,
            logp: probs[action].ln(),
            value,
            reward: 0.0,
            done: true,
            duration: 1,
        }
    };
    let steps = [step(0, 1), step(1, 0)];
    let cfg = PpoConfig {
        entropy_coef: 0.0,
        ..PpoConfig::default()
    };
    let batch: Vec<PpoSample<'_>> = steps
        .iter()
        .map(|t| PpoSample {
            step: t,
            advantage: 0.0,
            ret: t.value,
        })
        .collect();
    let mut grads = Grads::zeros_like(&net.store);
    let (loss, stats) = ppo_loss(&net, &batch, &cfg, Some(&mut grads)).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(stats.policy_loss, 0.0);
    assert!(grads.norm() < 1e-12);
}

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Graph, Grads, Var};
use crate::policy::{ActorCritic, Transition};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub lr: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            lr: 2.5e-4,
            clip: 0.2,
            epochs: 2,
            minibatches: 6,
            value_coef: 0.5,
            entropy_coef: 0.01,
            max_grad_norm: 0.5,
            gamma: 0.99,
            gae_lambda: 0.95,
            normalize_advantages: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("gamma must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) || !(self.clip > 0.0) {
            return Err(Error::Config("gae_lambda in [0, 1] and clip > 0 required".into()));
        }
        if self.epochs == 0 || self.minibatches == 0 {
            return Err(Error::Config("epochs and minibatches must be positive".into()));
        }
        Ok(())
    }
}

/// Generalized advantages for a sequence of decisions. Decision `i` spans
/// `durations[i]` primitive steps, so its successor is discounted by
/// `gamma^durations[i]`. `last_value` bootstraps a trailing unfinished
/// decision. Returns (advantages, returns).
pub fn gae_advantages(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    durations: &[u32],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n && durations.len() == n, "buffer length mismatch");
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = last_value;
    for i in (0..n).rev() {
        let live = if dones[i] { 0.0 } else { 1.0 };
        let disc = gamma.powi(durations[i] as i32);
        let delta = rewards[i] + disc * next_value * live - values[i];
        next_adv = delta + disc * lambda * live * next_adv;
        adv[i] = next_adv;
        next_value = values[i];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

pub fn transitions_gae(steps: &[Transition], last_value: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let rewards: Vec<f64> = steps.iter().map(|s| s.reward).collect();
    let values: Vec<f64> = steps.iter().map(|s| s.value).collect();
    let dones: Vec<bool> = steps.iter().map(|s| s.done).collect();
    let durations: Vec<u32> = steps.iter().map(|s| s.duration).collect();
    gae_advantages(&rewards, &values, &dones, &durations, last_value, gamma, lambda)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub grad_norm: f64,
    pub samples: usize,
}

/// One training sample: a decision with its advantage and return target.
#[derive(Debug, Clone, Copy)]
pub struct PpoSample<'a> {
    pub step: &'a Transition,
    pub advantage: f64,
    pub ret: f64,
}

/// Clipped surrogate, value and entropy terms averaged over `batch`.
/// Gradients of the total loss are accumulated into `grads` when given.
pub fn ppo_loss(net: &ActorCritic, batch: &[PpoSample<'_>], cfg: &PpoConfig, grads: Option<&mut Grads>) -> Result<(f64, PpoStats)> {
    if batch.is_empty() {
        return Err(Error::Training("empty PPO batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = grads;
    let mut stats = PpoStats {
        samples: batch.len(),
        ..PpoStats::default()
    };
    let mut total = 0.0;
    for s in batch {
        let mut g = Graph::new(&net.store);
        let (logits, value) = net.forward_graph(&mut g, &s.step.input);
        let lp = g.log_softmax(logits);
        let logp = g.pick(lp, s.step.action);
        let shifted = g.add_scalar(logp, -s.step.logp);
        let ratio = g.exp(shifted);
        let clipped = g.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
        let a = g.scale(ratio, s.advantage);
        let b = g.scale(clipped, s.advantage);
        let surr = g.min(a, b);
        let policy_loss = g.scale(surr, -1.0);
        let err = g.add_scalar(value, -s.ret);
        let sq = g.square(err);
        let value_loss = g.scale(sq, cfg.value_coef);
        let p = g.softmax(logits);
        let plogp = g.mul(p, lp);
        let neg_entropy = g.sum(plogp);
        let ent_term = g.scale(neg_entropy, cfg.entropy_coef);
        let loss = sum3(&mut g, policy_loss, value_loss, ent_term);
        let l = g.scalar(loss);
        if !l.is_finite() {
            return Err(Error::Training(format!(
                "non-finite PPO loss {l}: advantage {}, return {}, old logp {}, value {}",
                s.advantage,
                s.ret,
                s.step.logp,
                g.scalar(value)
            )));
        }
        total += l;
        let r = g.scalar(ratio);
        stats.policy_loss += g.scalar(policy_loss);
        stats.value_loss += g.scalar(sq);
        stats.entropy -= g.scalar(neg_entropy);
        stats.approx_kl += s.step.logp - g.scalar(logp);
        if (r - 1.0).abs() > cfg.clip {
            stats.clip_fraction += 1.0;
        }
        if let Some(gr) = grads.as_deref_mut() {
            g.backward(loss, scale, gr);
        }
    }
    stats.policy_loss *= scale;
    stats.value_loss *= scale;
    stats.entropy *= scale;
    stats.approx_kl *= scale;
    stats.clip_fraction *= scale;
    Ok((total * scale, stats))
}

fn sum3(g: &mut Graph<'_>, a: Var, b: Var, c: Var) -> Var {
    let ab = g.add(a, b);
    g.add(ab, c)
}

/// Optimizer state for one actor-critic.
#[derive(Debug, Clone)]
pub struct PpoTrainer {
    pub cfg: PpoConfig,
    opt: Adam,
}

impl PpoTrainer {
    pub fn new(net: &ActorCritic, cfg: PpoConfig) -> Self {
        let adam = AdamConfig {
            max_grad_norm: Some(cfg.max_grad_norm),
            ..AdamConfig::with_lr(cfg.lr)
        };
        Self {
            cfg,
            opt: Adam::new(adam, &net.store),
        }
    }

    /// Runs the configured epochs of minibatch updates over `steps`, which
    /// must consist of complete episodes.
    pub fn update<R: Rng + ?Sized>(&mut self, net: &mut ActorCritic, steps: &[Transition], rng: &mut R) -> Result<PpoStats> {
        if steps.is_empty() {
            return Err(Error::Training("empty rollout".into()));
        }
        let cfg = self.cfg;
        let (mut adv, ret) = transitions_gae(steps, 0.0, cfg.gamma, cfg.gae_lambda);
        if cfg.normalize_advantages && adv.len() > 1 {
            let (m, s) = crate::eval::mean_std(&adv);
            adv.iter_mut().for_each(|a| *a = (*a - m) / (s + 1e-8));
        }
        let samples: Vec<PpoSample<'_>> = steps
            .iter()
            .zip(adv.iter().zip(&ret))
            .map(|(step, (&advantage, &ret))| PpoSample { step, advantage, ret })
            .collect();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let per = samples.len().div_ceil(cfg.minibatches);
        let mut grads = Grads::zeros_like(&net.store);
        let mut summary = PpoStats::default();
        let mut batches = 0.0;
        for _ in 0..cfg.epochs {
            order.shuffle(rng);
            for chunk in order.chunks(per.max(1)) {
                let batch: Vec<PpoSample<'_>> = chunk.iter().map(|&i| samples[i]).collect();
                grads.zero();
                let (_, stats) = ppo_loss(net, &batch, &cfg, Some(&mut grads))?;
                if !grads.all_finite() {
                    return Err(Error::Training("non-finite PPO gradient".into()));
                }
                let norm = self.opt.step(&mut net.store, &grads);
                summary.policy_loss += stats.policy_loss;
                summary.value_loss += stats.value_loss;
                summary.entropy += stats.entropy;
                summary.clip_fraction += stats.clip_fraction;
                summary.approx_kl += stats.approx_kl;
                summary.grad_norm += norm;
                batches += 1.0;
            }
        }
        summary.policy_loss /= batches;
        summary.value_loss /= batches;
        summary.entropy /= batches;
        summary.clip_fraction /= batches;
        summary.approx_kl /= batches;
        summary.grad_norm /= batches;
        summary.samples = samples.len();
        net.check_finite()?;
        Ok(summary)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_advantage() {
        let (a, r) = gae_advantages(&[1.5], &[0.3], &[false], &[1], 2.0, 0.9, 0.95);
        assert!((a[0] - (1.5 + 0.9 * 2.0 - 0.3)).abs() < 1e-12);
        assert!((r[0] - (1.5 + 0.9 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn unit_discount_gives_monte_carlo_returns() {
        let rewards = [1.0, -2.0, 0.5, 3.0];
        let values = [0.7; 4];
        let (a, _) = gae_advantages(&rewards, &values, &[false, false, false, true], &[1; 4], 0.0, 1.0, 1.0);
        let mc = [2.5, 1.5, 3.5, 3.0];
        for i in 0..4 {
            assert!((a[i] - (mc[i] - 0.7)).abs() < 1e-12);
        }
    }

    #[test]
    fn episode_boundary_stops_bootstrap() {
        let (a, _) = gae_advantages(&[1.0, 1.0], &[0.0, 5.0], &[true, false], &[1, 1], 0.0, 0.9, 0.9);
        assert!((a[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn option_duration_discounts_successor() {
        let (a, _) = gae_advantages(&[2.0, 0.0], &[0.0, 4.0], &[false, true], &[3, 1], 0.0, 0.5, 0.0);
        assert!((a[0] - (2.0 + 0.125 * 4.0)).abs() < 1e-12);
    }
}

//! Audio-goal and when-to-query actor-critics, query triggers, and the
//! options controller.

mod controller;

pub use controller::{
    replay_log, run_episode, Agents, ControlConfig, EpisodeOutcome, OptionTag, Recording, StepLog, Transition,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax, Graph, ParamId, ParamStore, Var};
use crate::percept::GoalDescriptor;

/// Memory capacity of the audio-goal and query policies.
pub const POLICY_MEMORY: usize = 150;
pub const QUERY_CONTINUE: usize = 0;
pub const QUERY_ASK: usize = 1;
/// Extra inputs of the query policy: queries used, steps since last query,
/// elapsed time.
pub const QUERY_EXTRA: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub d: usize,
    pub d_core: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { d: 32, d_core: 64 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct AcIds {
    enc_w: ParamId,
    enc_b: ParamId,
    goal_w: ParamId,
    goal_b: ParamId,
    query_w: ParamId,
    query_b: ParamId,
    core_w: ParamId,
    core_b: ParamId,
    actor_w: ParamId,
    actor_b: ParamId,
    critic_w: ParamId,
    critic_b: ParamId,
}

/// Network input for one decision.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PolicyInput {
    pub obs: Vec<f64>,
    pub goal: Vec<f64>,
    pub extra: Vec<f64>,
    /// Cached encodings of past observations, row-major, `d` wide.
    pub memory: Vec<f64>,
}

/// Observation encoder, goal-conditioned attention over memory, and
/// actor/critic heads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActorCritic {
    pub store: ParamStore,
    pub cfg: NetConfig,
    pub obs_dim: usize,
    pub actions: usize,
    pub extra_dim: usize,
    ids: AcIds,
}

impl ActorCritic {
    pub fn new<R: Rng + ?Sized>(cfg: NetConfig, obs_dim: usize, actions: usize, extra_dim: usize, rng: &mut R) -> Self {
        let mut s = ParamStore::new();
        let d = cfg.d;
        let ids = AcIds {
            enc_w: s.normal("enc.w", d, obs_dim, 1.0, rng),
            enc_b: s.zeros("enc.b", d, 1),
            goal_w: s.normal("goal.w", d, GoalDescriptor::DIM, 1.0, rng),
            goal_b: s.zeros("goal.b", d, 1),
            query_w: s.normal("query.w", d, 2 * d, 1.0, rng),
            query_b: s.zeros("query.b", d, 1),
            core_w: s.normal("core.w", cfg.d_core, 3 * d + extra_dim, 1.0, rng),
            core_b: s.zeros("core.b", cfg.d_core, 1),
            actor_w: s.normal("actor.w", actions, cfg.d_core, 0.1, rng),
            actor_b: s.zeros("actor.b", actions, 1),
            critic_w: s.normal("critic.w", 1, cfg.d_core, 1.0, rng),
            critic_b: s.zeros("critic.b", 1, 1),
        };
        Self {
            store: s,
            cfg,
            obs_dim,
            actions,
            extra_dim,
            ids,
        }
    }

    /// Query policy warm-started from an audio policy: shared frozen encoder,
    /// copied trunk, fresh two-way actor biased towards continuing.
    pub fn query_from<R: Rng + ?Sized>(audio: &ActorCritic, ask_bias: f64, rng: &mut R) -> Self {
        let mut q = ActorCritic::new(audio.cfg, audio.obs_dim, 2, QUERY_EXTRA, rng);
        for (dst, src) in [
            (q.ids.enc_w, audio.ids.enc_w),
            (q.ids.enc_b, audio.ids.enc_b),
            (q.ids.goal_w, audio.ids.goal_w),
            (q.ids.goal_b, audio.ids.goal_b),
            (q.ids.query_w, audio.ids.query_w),
            (q.ids.query_b, audio.ids.query_b),
            (q.ids.core_b, audio.ids.core_b),
            (q.ids.critic_w, audio.ids.critic_w),
            (q.ids.critic_b, audio.ids.critic_b),
        ] {
            q.store.get_mut(dst).data = audio.store.get(src).data.clone();
        }
        let src = audio.store.get(audio.ids.core_w);
        let (rows, src_cols) = (src.rows, src.cols);
        let src_data = src.data.clone();
        let dst = q.store.get_mut(q.ids.core_w);
        for r in 0..rows {
            for c in 0..dst.cols {
                dst.data[r * dst.cols + c] = if c < src_cols { src_data[r * src_cols + c] } else { 0.0 };
            }
        }
        q.store.get_mut(q.ids.actor_b).data[QUERY_ASK] = ask_bias;
        q.freeze_encoder();
        q
    }

    pub fn freeze_encoder(&mut self) {
        self.store.set_frozen(self.ids.enc_w, true);
        self.store.set_frozen(self.ids.enc_b, true);
    }

    pub fn encoder_frozen(&self) -> bool {
        self.store.get(self.ids.enc_w).frozen
    }

    /// Observation encoding as cached in memory.
    pub fn encode(&self, obs: &[f64]) -> Vec<f64> {
        let mut g = Graph::new(&self.store);
        let x = g.input_slice(obs);
        let h = g.linear(self.ids.enc_w, self.ids.enc_b, x);
        let h = g.tanh(h);
        g.value(h).to_vec()
    }

    /// Builds the forward pass; returns (logits, value).
    pub fn forward_graph(&self, g: &mut Graph<'_>, input: &PolicyInput) -> (Var, Var) {
        let id = &self.ids;
        let x = g.input_slice(&input.obs);
        let h = g.linear(id.enc_w, id.enc_b, x);
        let h = g.tanh(h);
        let gv = g.input_slice(&input.goal);
        let q = g.linear(id.goal_w, id.goal_b, gv);
        let q = g.tanh(q);
        let qh = g.concat(&[q, h]);
        let u = g.linear(id.query_w, id.query_b, qh);
        let pooled = if input.memory.is_empty() {
            g.attend(u, &[h])
        } else {
            let m = g.input_slice(&input.memory);
            g.attend(u, &[m, h])
        };
        let mut parts = vec![pooled, h, q];
        if self.extra_dim > 0 {
            parts.push(g.input_slice(&input.extra));
        }
        let joined = g.concat(&parts);
        let c = g.linear(id.core_w, id.core_b, joined);
        let c = g.tanh(c);
        let logits = g.linear(id.actor_w, id.actor_b, c);
        let value = g.linear(id.critic_w, id.critic_b, c);
        (logits, value)
    }

    /// Action probabilities and value estimate.
    pub fn act(&self, input: &PolicyInput) -> (Vec<f64>, f64) {
        let mut g = Graph::new(&self.store);
        let (logits, value) = self.forward_graph(&mut g, input);
        (softmax(g.value(logits)), g.scalar(value))
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.store.all_finite() {
            Ok(())
        } else {
            Err(Error::Training("actor-critic weights are not finite".into()))
        }
    }
}

/// Rule deciding when to ask the oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trigger {
    Never,
    Learned,
    Random { window: u32 },
    Uniform { period: u32 },
    ModelUncertainty { threshold: f64 },
}

impl Trigger {
    pub const RANDOM: Trigger = Trigger::Random { window: 50 };
    pub const UNIFORM: Trigger = Trigger::Uniform { period: 15 };
    pub const MU: Trigger = Trigger::ModelUncertainty { threshold: 0.1 };
    pub const BASELINES: [Trigger; 4] = [Trigger::Learned, Trigger::RANDOM, Trigger::UNIFORM, Trigger::MU];

    pub fn name(&self) -> &'static str {
        match self {
            Trigger::Never => "none",
            Trigger::Learned => "learned",
            Trigger::Random { .. } => "random",
            Trigger::Uniform { .. } => "uniform",
            Trigger::ModelUncertainty { .. } => "mu",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Trigger::Random { window: 0 } | Trigger::Uniform { period: 0 } => {
                Err(Error::Config("trigger window/period must be positive".into()))
            }
            Trigger::ModelUncertainty { threshold } if !(threshold > 0.0) => {
                Err(Error::Config("uncertainty threshold must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

impl std::str::FromStr for Trigger {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Trigger::Never),
            "learned" => Ok(Trigger::Learned),
            "random" => Ok(Trigger::RANDOM),
            "uniform" => Ok(Trigger::UNIFORM),
            "mu" => Ok(Trigger::MU),
            _ => Err(Error::Config(format!("unknown trigger {s:?}"))),
        }
    }
}

/// True iff the gap between the two largest probabilities is at most `threshold`.
pub fn mu_trigger(probs: &[f64], threshold: f64) -> bool {
    let mut top = [f64::NEG_INFINITY; 2];
    for &p in probs {
        if p > top[0] {
            top = [p, top[0]];
        } else if p > top[1] {
            top[1] = p;
        }
    }
    top[0] - top[1] <= threshold
}

/// Zeroes the query probability once the hard cap is reached.
pub fn mask_query(probs: &[f64], queries_made: u32, k_allowed: Option<u32>) -> Vec<f64> {
    match k_allowed {
        Some(cap) if queries_made >= cap => {
            let mut out = vec![0.0; probs.len()];
            out[QUERY_CONTINUE] = 1.0;
            out
        }
        _ => probs.to_vec(),
    }
}

/// Random trigger schedule: `count` distinct steps in `[1, window]`.
pub fn random_schedule<R: Rng + ?Sized>(count: u32, window: u32, rng: &mut R) -> Vec<u32> {
    let n = count.min(window) as usize;
    let mut steps: Vec<u32> = rand::seq::index::sample(rng, window as usize, n)
        .into_iter()
        .map(|i| i as u32 + 1)
        .collect();
    steps.sort_unstable();
    steps
}

pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

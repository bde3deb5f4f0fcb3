use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mask_query, mu_trigger, random_schedule, sample_index, ActorCritic, PolicyInput, Trigger, QUERY_ASK, QUERY_CONTINUE};
use crate::episode::{Episode, EpisodeSpec};
use crate::error::{Error, Result};
use crate::eval::MetricsRecord;
use crate::language::{LangExample, LangPolicy, LangStepInput, BELIEF_SLOTS};
use crate::oracle::{answer_query, Feedback, FeedbackMode, Speaker};
use crate::percept::{
    argmax, encode_observation, fuse_goal, to_agent_frame, AudioSample, GoalDescriptor, GoalEstimator, Memory,
    ObservationEmbedding, PoseChange,
};
use crate::train::RewardConfig;
use crate::world::{step, Action, AudioParams, Pose, Scene};

/// Everything the controller consults while acting.
#[derive(Debug, Clone, Copy)]
pub struct Agents<'a> {
    pub estimator: &'a GoalEstimator,
    pub audio_policy: &'a ActorCritic,
    pub query_policy: Option<&'a ActorCritic>,
    pub lang_policy: Option<&'a LangPolicy>,
    pub speaker: &'a Speaker,
    pub signatures: &'a [Vec<f64>],
    pub audio: AudioParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlConfig {
    pub trigger: Trigger,
    pub feedback: FeedbackMode,
    /// Hard query cap; `None` leaves only the soft penalty.
    pub k_allowed: Option<u32>,
    pub option_steps: usize,
    pub segment_len: usize,
    pub max_steps: u32,
    pub success_radius: f64,
    pub use_memory: bool,
    pub memory_size: usize,
    pub greedy_audio: bool,
    pub mask_instruction: bool,
    pub reward: RewardConfig,
    pub gamma: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            trigger: Trigger::Never,
            feedback: FeedbackMode::Language,
            k_allowed: Some(3),
            option_steps: crate::oracle::DEFAULT_OPTION_STEPS,
            segment_len: crate::oracle::DEFAULT_SEGMENT_LEN,
            max_steps: 500,
            success_radius: 1.0,
            use_memory: true,
            memory_size: super::POLICY_MEMORY,
            greedy_audio: false,
            mask_instruction: false,
            reward: RewardConfig::default(),
            gamma: 0.99,
        }
    }
}

/// What to keep from an episode besides its metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Recording {
    pub audio_steps: bool,
    pub query_steps: bool,
    pub lang_pairs: bool,
    pub audio_samples: bool,
    pub log: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptionTag {
    Audio,
    Language,
    GtActions,
}

/// One primitive step of a trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub t: u32,
    pub pose: Pose,
    pub action: Action,
    pub option: OptionTag,
    pub reward: f64,
    pub query_flag: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub instruction: Option<Vec<usize>>,
}

/// A decision for policy-gradient training. `duration` is the number of
/// primitive steps it spanned, so the next state lies `gamma^duration` ahead.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub input: PolicyInput,
    pub action: usize,
    pub logp: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
    pub duration: u32,
}

#[derive(Debug, Clone, Default)]
pub struct EpisodeOutcome {
    pub record: Option<MetricsRecord>,
    pub log: Vec<StepLog>,
    pub audio_steps: Vec<Transition>,
    pub query_steps: Vec<Transition>,
    pub lang_pairs: Vec<LangExample>,
    pub audio_samples: Vec<AudioSample>,
}

impl EpisodeOutcome {
    pub fn metrics(&self) -> &MetricsRecord {
        self.record.as_ref().expect("finished episode")
    }
}

struct Runner<'a, 'e> {
    ep: &'e Episode<'a>,
    agents: Agents<'e>,
    cfg: &'e ControlConfig,
    rec: Recording,
    env_rng: ChaCha8Rng,
    pose: Pose,
    t: u32,
    prev_action: Option<Action>,
    obs: ObservationEmbedding,
    features: Vec<f64>,
    goal: GoalDescriptor,
    memory: Memory<Vec<f64>>,
    done: bool,
    success: bool,
    path_len: f64,
    actions_taken: u32,
    reach_step: Option<u32>,
    out: EpisodeOutcome,
}

impl<'a, 'e> Runner<'a, 'e> {
    fn observe(&mut self, change: &PoseChange) {
        self.obs = encode_observation(
            self.ep,
            &self.pose,
            self.t,
            self.prev_action,
            self.agents.signatures,
            &self.agents.audio,
            &mut self.env_rng,
        );
        self.features = self.obs.features();
        let estimate = self.agents.estimator.estimate(&self.obs.audio);
        self.goal = fuse_goal(&self.goal, &estimate, change, self.obs.audio.audible);
        if self.rec.audio_samples && self.obs.audio.audible && self.ep.spec.distractor.is_none() {
            let goal = self.ep.goal.cell;
            self.out.audio_samples.push(AudioSample {
                audio: self.obs.audio.clone(),
                location: to_agent_frame(
                    self.pose.heading,
                    (goal.x - self.pose.x) as f64,
                    (goal.y - self.pose.y) as f64,
                ),
                category: self.ep.goal.category,
            });
        }
    }

    fn memory_rows(&self) -> Vec<f64> {
        if !self.cfg.use_memory {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(self.memory.len() * self.agents.audio_policy.cfg.d);
        for row in self.memory.iter() {
            out.extend_from_slice(row);
        }
        out
    }

    /// Executes one primitive action; returns its navigation reward.
    fn advance(&mut self, action: Action, option: OptionTag, extra_reward: f64, query_flag: bool, instruction: Option<Vec<usize>>) -> f64 {
        let d_prev = self.ep.goal_distance(&self.pose);
        let before = self.pose;
        let reward;
        if action == Action::Stop {
            self.success = d_prev <= self.cfg.success_radius;
            reward = self.cfg.reward.step(d_prev, d_prev, self.success);
            if self.success {
                self.reach_step = Some(self.t);
            }
            self.done = true;
        } else {
            let next = step(self.ep.scene, self.pose, action);
            if next.cell() != self.pose.cell() {
                self.path_len += 1.0;
            }
            self.actions_taken += 1;
            let d_now = self.ep.goal_distance(&next);
            reward = self.cfg.reward.step(d_prev, d_now, false);
            if self.cfg.use_memory {
                let h = self.agents.audio_policy.encode(&self.features);
                self.memory.push(h);
            }
            self.pose = next;
            self.prev_action = Some(action);
        }
        if self.rec.log {
            self.out.log.push(StepLog {
                t: self.t,
                pose: before,
                action,
                option,
                reward: reward + extra_reward,
                query_flag,
                instruction,
            });
        }
        if !self.done {
            self.t += 1;
            let change = PoseChange::between(&before, &self.pose);
            self.observe(&change);
            if self.t >= self.cfg.max_steps {
                self.done = true;
            }
        }
        reward
    }
}

/// Runs one episode to completion. `seed` fixes every random stream.
pub fn run_episode(
    scene: &Scene,
    spec: &EpisodeSpec,
    agents: Agents<'_>,
    cfg: &ControlConfig,
    rec: Recording,
    seed: u64,
) -> Result<EpisodeOutcome> {
    cfg.trigger.validate()?;
    if cfg.option_steps == 0 {
        return Err(Error::Config("option_steps must be positive".into()));
    }
    let needs_lang = cfg.feedback == FeedbackMode::Language && cfg.trigger != Trigger::Never;
    if needs_lang && agents.lang_policy.is_none() {
        return Err(Error::Usage("language feedback needs a language policy".into()));
    }
    if cfg.trigger == Trigger::Learned && agents.query_policy.is_none() {
        return Err(Error::Usage("learned trigger needs a query policy".into()));
    }
    let ep = Episode::new(scene, spec.clone())?;
    let mut agent_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut oracle_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5851_f42d_4c95_7f2d);
    let mut r = Runner {
        ep: &ep,
        agents,
        cfg,
        rec,
        env_rng: ChaCha8Rng::seed_from_u64(seed),
        pose: spec.start,
        t: 0,
        prev_action: None,
        obs: ObservationEmbedding {
            visual: Vec::new(),
            audio: crate::world::AudioSignal::silent(0),
            prev_action: None,
            pose_delta: [0.0; 3],
            target: None,
        },
        features: Vec::new(),
        goal: GoalDescriptor::uninformed(),
        memory: Memory::new(cfg.memory_size),
        done: false,
        success: false,
        path_len: 0.0,
        actions_taken: 0,
        reach_step: None,
        out: EpisodeOutcome::default(),
    };
    r.observe(&PoseChange::IDENTITY);

    let soft = cfg.reward.soft_queries;
    let mut queries: Vec<u32> = Vec::new();
    let mut option_lengths: Vec<u32> = Vec::new();
    let mut last_query: Option<u32> = None;
    let mut schedule = match cfg.trigger {
        Trigger::Random { window } => random_schedule(cfg.k_allowed.unwrap_or(soft), window, &mut agent_rng),
        _ => Vec::new(),
    };
    schedule.reverse();
    let mut next_uniform = match cfg.trigger {
        Trigger::Uniform { period } => period,
        _ => u32::MAX,
    };

    while !r.done {
        let k = queries.len() as u32;
        let capped = cfg.k_allowed.is_some_and(|cap| k >= cap);
        let audio_input = PolicyInput {
            obs: r.features.clone(),
            goal: r.goal.features(),
            extra: Vec::new(),
            memory: r.memory_rows(),
        };
        let mut audio_eval: Option<(Vec<f64>, f64)> = None;
        let mut query_decision: Option<(PolicyInput, usize, f64, f64)> = None;
        let ask = match cfg.trigger {
            Trigger::Never => false,
            Trigger::Learned => {
                let qp = agents.query_policy.expect("checked above");
                let j = last_query.map_or(0, |q| r.t - q);
                let tau = cfg.reward.tau_f.max(1) as f64;
                let input = PolicyInput {
                    extra: vec![
                        k as f64 / soft.max(1) as f64,
                        (j as f64).min(tau) / tau,
                        (r.t as f64 / 200.0).min(1.0),
                    ],
                    ..audio_input.clone()
                };
                let (probs, value) = qp.act(&input);
                let probs = mask_query(&probs, k, cfg.k_allowed);
                let choice = sample_index(&probs, &mut agent_rng);
                query_decision = Some((input, choice, probs[choice].ln(), value));
                choice == QUERY_ASK
            }
            _ if capped => false,
            Trigger::Random { .. } => {
                if schedule.last().is_some_and(|&s| s <= r.t) {
                    schedule.pop();
                    true
                } else {
                    false
                }
            }
            Trigger::Uniform { period } => {
                if r.t >= next_uniform {
                    while next_uniform <= r.t {
                        next_uniform += period;
                    }
                    true
                } else {
                    false
                }
            }
            Trigger::ModelUncertainty { threshold } => {
                let (probs, value) = agents.audio_policy.act(&audio_input);
                let fire = mu_trigger(&probs, threshold);
                audio_eval = Some((probs, value));
                fire
            }
        };

        if ask {
            let k = k + 1;
            let j = last_query.map_or(0, |q| r.t - q);
            let (zq, zf) = cfg.reward.query_penalty(k, j);
            last_query = Some(r.t);
            queries.push(r.t);
            let feedback = answer_query(
                &ep,
                r.pose,
                cfg.feedback,
                agents.speaker,
                cfg.segment_len,
                cfg.option_steps,
                &mut oracle_rng,
            )?;
            let mut option_return = 0.0;
            let mut discount = 1.0;
            let mut steps = 0u32;
            let (tag, instruction) = match &feedback {
                Feedback::Language(i) => (OptionTag::Language, Some(i.tokens.clone())),
                Feedback::GtActions(_) => (OptionTag::GtActions, None),
            };
            let lang = match &feedback {
                Feedback::Language(ins) => {
                    let lp = agents.lang_policy.expect("checked above");
                    Some((lp, lp.instruction_vector(ins, cfg.mask_instruction)?))
                }
                Feedback::GtActions(_) => None,
            };
            let mut history: Vec<Vec<f64>> = Vec::new();
            let mut pair = LangExample {
                tokens: instruction.clone().unwrap_or_default(),
                steps: Vec::new(),
                teacher: Vec::new(),
            };
            for i in 0..cfg.option_steps {
                let action = match (&feedback, &lang) {
                    (Feedback::GtActions(acts), _) => acts[i],
                    (Feedback::Language(_), Some((lp, instr))) => {
                        if rec.lang_pairs {
                            pair.steps.push(LangStepInput {
                                obs: r.features.clone(),
                                goal: r.goal.features(),
                            });
                            pair.teacher.push(ep.oracle_action(r.pose));
                        }
                        let (probs, belief) = lp.lang_step(&r.features, &r.goal, instr, &history);
                        history.push(belief);
                        if history.len() > BELIEF_SLOTS - 1 {
                            history.remove(0);
                        }
                        Action::from_index(argmax(&probs))
                    }
                    _ => unreachable!("language feedback always carries a policy"),
                };
                let first = i == 0;
                let rew = r.advance(
                    action,
                    tag,
                    if first { zq + zf } else { 0.0 },
                    first,
                    if first { instruction.clone() } else { None },
                );
                option_return += discount * rew;
                discount *= cfg.gamma;
                steps += 1;
                if r.done {
                    break;
                }
            }
            option_lengths.push(steps);
            if rec.lang_pairs && !pair.steps.is_empty() {
                r.out.lang_pairs.push(pair);
            }
            if rec.query_steps {
                if let Some((input, choice, logp, value)) = query_decision {
                    r.out.query_steps.push(Transition {
                        input,
                        action: choice,
                        logp,
                        value,
                        reward: zq + zf + option_return,
                        done: r.done,
                        duration: steps,
                    });
                }
            }
        } else {
            let (probs, value) = audio_eval.unwrap_or_else(|| agents.audio_policy.act(&audio_input));
            let choice = if cfg.greedy_audio { argmax(&probs) } else { sample_index(&probs, &mut agent_rng) };
            let logp = probs[choice].ln();
            let rew = r.advance(Action::from_index(choice), OptionTag::Audio, 0.0, false, None);
            if rec.audio_steps {
                r.out.audio_steps.push(Transition {
                    input: audio_input,
                    action: choice,
                    logp,
                    value,
                    reward: rew,
                    done: r.done,
                    duration: 1,
                });
            }
            if rec.query_steps {
                if let Some((input, choice, logp, value)) = query_decision {
                    debug_assert_eq!(choice, QUERY_CONTINUE);
                    r.out.query_steps.push(Transition {
                        input,
                        action: choice,
                        logp,
                        value,
                        reward: rew,
                        done: r.done,
                        duration: 1,
                    });
                }
            }
        }
    }

    r.out.record = Some(MetricsRecord {
        success: r.success,
        path_len: r.path_len,
        shortest_len: ep.goal_distance(&spec.start),
        actions_taken: r.actions_taken,
        min_actions: ep.shortest_actions(),
        dtg: ep.goal_distance(&r.pose),
        sound_end_step: spec.sound_end(),
        reach_step: r.reach_step,
        queries,
        option_lengths,
    });
    Ok(r.out)
}

/// Recomputes an episode's metrics from its trajectory log alone.
pub fn replay_log(scene: &Scene, spec: &EpisodeSpec, log: &[StepLog], success_radius: f64) -> Result<MetricsRecord> {
    let ep = Episode::new(scene, spec.clone())?;
    let mut pose = spec.start;
    let mut record = MetricsRecord {
        success: false,
        path_len: 0.0,
        shortest_len: ep.goal_distance(&spec.start),
        actions_taken: 0,
        min_actions: ep.shortest_actions(),
        dtg: 0.0,
        sound_end_step: spec.sound_end(),
        reach_step: None,
        queries: Vec::new(),
        option_lengths: Vec::new(),
    };
    for (i, entry) in log.iter().enumerate() {
        if entry.pose != pose {
            return Err(Error::Input(format!("log step {i} starts from {:?}, replay is at {pose:?}", entry.pose)));
        }
        if entry.query_flag {
            record.queries.push(entry.t);
            record.option_lengths.push(1);
        } else if entry.option != OptionTag::Audio {
            match record.option_lengths.last_mut() {
                Some(n) => *n += 1,
                None => return Err(Error::Input(format!("log step {i} continues an option that never began"))),
            }
        }
        if entry.action == Action::Stop {
            if i + 1 != log.len() {
                return Err(Error::Input("log continues after Stop".into()));
            }
            record.success = ep.goal_distance(&pose) <= success_radius;
            if record.success {
                record.reach_step = Some(entry.t);
            }
        } else {
            let next = step(scene, pose, entry.action);
            if next.cell() != pose.cell() {
                record.path_len += 1.0;
            }
            record.actions_taken += 1;
            pose = next;
        }
    }
    record.dtg = ep.goal_distance(&pose);
    Ok(record)
}

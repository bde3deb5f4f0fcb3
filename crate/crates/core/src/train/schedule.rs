use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{PpoConfig, PpoStats, PpoTrainer, RewardConfig};
use crate::episode::{sample_episode, Regime, SplitConfig};
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, evaluate, mix_seed, EpisodeSet};
use crate::language::{online_finetune, pretrain_offline, LangConfig, LangExample, LangPolicy, LangTrainer, PretrainReport};
use crate::oracle::{FeedbackMode, Speaker, SpeakerConfig};
use crate::percept::{
    collect_audio_corpus, train_goal_estimator, AudioSample, EstimatorConfig, EstimatorTrainer, GoalEstimator,
    ObservationEmbedding,
};
use crate::policy::{run_episode, ActorCritic, Agents, ControlConfig, NetConfig, Recording, Transition, Trigger};
use crate::world::{generate_scene, AudioParams, Scene, SceneParams, NUM_CATEGORIES};

pub const CHECKPOINT_VERSION: u32 = 1;
const NUM_ACTIONS: usize = 4;

/// Every knob of the training schedule. Unknown keys are rejected; missing
/// keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub held_out_categories: usize,
    pub signature_dim: usize,
    pub min_start_distance: u32,
    pub max_steps: u32,
    pub estimator_corpus: usize,
    /// Minimum decisions per policy update; whole episodes are collected.
    pub rollout_steps: usize,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    pub memory_size: usize,
    pub lang_pairs: usize,
    pub lang_val_pairs: usize,
    pub query_steps: u64,
    pub query_feedback: FeedbackMode,
    /// Initial logit offset of the ask action in the query policy.
    pub ask_bias: f64,
    pub finetune_epochs: usize,
    /// Mask the ask action after K queries while training the query policy.
    pub hard_cap_in_training: bool,
    pub val_episodes: usize,
    pub scenes: SceneParams,
    pub audio: AudioParams,
    pub estimator: EstimatorConfig,
    pub net: NetConfig,
    pub ppo: PpoConfig,
    pub language: LangConfig,
    pub speaker: SpeakerConfig,
    pub reward: RewardConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            train_scenes: 40,
            val_scenes: 10,
            held_out_categories: 6,
            signature_dim: crate::episode::DEFAULT_SIGNATURE_DIM,
            min_start_distance: crate::episode::DEFAULT_MIN_START_DISTANCE,
            max_steps: 500,
            estimator_corpus: 20_000,
            rollout_steps: 150,
            stage1_steps: 1_500_000,
            stage2_steps: 500_000,
            memory_size: crate::policy::POLICY_MEMORY,
            lang_pairs: 20_000,
            lang_val_pairs: 1_000,
            query_steps: 300_000,
            query_feedback: FeedbackMode::Language,
            ask_bias: -2.0,
            finetune_epochs: 1,
            hard_cap_in_training: true,
            val_episodes: 400,
            scenes: SceneParams {
                width: 14,
                height: 14,
                rooms: 4,
                min_room: 3,
                num_objects: NUM_CATEGORIES,
            },
            audio: AudioParams::default(),
            estimator: EstimatorConfig::default(),
            net: NetConfig::default(),
            ppo: PpoConfig::default(),
            language: LangConfig::default(),
            speaker: SpeakerConfig::default(),
            reward: RewardConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Tiny budgets for smoke runs.
    pub fn smoke() -> Self {
        Self {
            train_scenes: 4,
            val_scenes: 2,
            estimator_corpus: 400,
            stage1_steps: 300,
            stage2_steps: 300,
            lang_pairs: 200,
            lang_val_pairs: 50,
            query_steps: 300,
            val_episodes: 4,
            max_steps: 60,
            scenes: SceneParams {
                width: 12,
                height: 12,
                rooms: 3,
                min_room: 3,
                num_objects: NUM_CATEGORIES,
            },
            estimator: EstimatorConfig {
                classifier_epochs: 2,
                regressor_epochs: 2,
                ..EstimatorConfig::default()
            },
            language: LangConfig {
                max_epochs: 2,
                ..LangConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.scenes.validate()?;
        self.ppo.validate()?;
        self.reward.validate()?;
        self.speaker.validate()?;
        if self.train_scenes == 0 || self.val_scenes == 0 {
            return Err(Error::Config("train_scenes and val_scenes must be positive".into()));
        }
        if self.rollout_steps == 0 || self.max_steps == 0 || self.memory_size == 0 {
            return Err(Error::Config("rollout_steps, max_steps and memory_size must be positive".into()));
        }
        if self.signature_dim == 0 {
            return Err(Error::Config("signature_dim must be positive".into()));
        }
        if self.reward.option_steps as usize != self.language.option_steps {
            return Err(Error::Config(format!(
                "reward.option_steps {} differs from language.option_steps {}",
                self.reward.option_steps, self.language.option_steps
            )));
        }
        if self.language.segment_len < self.language.option_steps {
            return Err(Error::Config("language.segment_len must cover option_steps".into()));
        }
        Ok(())
    }

    pub fn split(&self) -> Result<SplitConfig> {
        SplitConfig::unheard(self.seed, self.held_out_categories, self.signature_dim)
    }

    /// Controller settings shared by training and evaluation.
    pub fn control(&self, trigger: Trigger, use_memory: bool) -> ControlConfig {
        ControlConfig {
            trigger,
            feedback: self.query_feedback,
            k_allowed: None,
            option_steps: self.language.option_steps,
            segment_len: self.language.segment_len,
            max_steps: self.max_steps,
            use_memory,
            memory_size: self.memory_size,
            reward: self.reward,
            gamma: self.ppo.gamma,
            ..ControlConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneSet {
    Train,
    Val,
    Test,
}

impl SceneSet {
    pub fn name(self) -> &'static str {
        match self {
            SceneSet::Train => "train",
            SceneSet::Val => "val",
            SceneSet::Test => "test",
        }
    }
}

pub fn scene_seed(seed: u64, set: SceneSet, index: usize) -> u64 {
    let base = match set {
        SceneSet::Train => 1u64 << 32,
        SceneSet::Val => 2u64 << 32,
        SceneSet::Test => 3u64 << 32,
    };
    mix_seed(seed, base + index as u64)
}

pub fn generate_scenes(seed: u64, set: SceneSet, count: usize, params: &SceneParams) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| generate_scene(scene_seed(seed, set, i), params))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Estimator,
    AudioStage1,
    AudioStage2,
    Language,
    Query,
}

impl Phase {
    pub const ALL: [Phase; 5] = [
        Phase::Estimator,
        Phase::AudioStage1,
        Phase::AudioStage2,
        Phase::Language,
        Phase::Query,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Estimator => "estimator",
            Phase::AudioStage1 => "audio_stage1",
            Phase::AudioStage2 => "audio_stage2",
            Phase::Language => "language",
            Phase::Query => "query",
        }
    }

    pub fn index(self) -> usize {
        Phase::ALL.iter().position(|p| *p == self).expect("listed")
    }

    pub fn checkpoint_file(self) -> String {
        format!("{}.json", self.name())
    }

    pub fn log_file(self) -> String {
        format!("{}_log.csv", self.name())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown phase {s:?}")))
    }
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    version: u32,
    kind: String,
    model: T,
}

pub fn save_checkpoint<T: Serialize>(path: &Path, kind: &str, model: &T) -> Result<()> {
    let env = Envelope {
        version: CHECKPOINT_VERSION,
        kind: kind.to_string(),
        model,
    };
    let text = serde_json::to_string(&env)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    if !path.exists() {
        return Err(Error::Schedule(format!("missing checkpoint {}", path.display())));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let env: Envelope<T> =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if env.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: version {} (expected {CHECKPOINT_VERSION})",
            path.display(),
            env.version
        )));
    }
    if env.kind != kind {
        return Err(Error::Checkpoint(format!(
            "{}: holds {:?}, expected {kind:?}",
            path.display(),
            env.kind
        )));
    }
    Ok(env.model)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorArtifact {
    pub estimator: GoalEstimator,
    pub classifier_losses: Vec<f64>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AudioArtifact {
    pub policy: ActorCritic,
    /// Estimator after the on-policy location updates of this stage.
    pub estimator: GoalEstimator,
    pub val_success: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LanguageArtifact {
    pub policy: LangPolicy,
    pub report: PretrainReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryArtifact {
    pub policy: ActorCritic,
    /// Language policy after online finetuning.
    pub lang_policy: LangPolicy,
    pub mean_queries: Vec<f64>,
}

/// Per-iteration training statistics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub phase: String,
    pub iteration: usize,
    pub env_steps: u64,
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    pub mean_queries: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub aux_loss: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(
        "phase,iteration,env_steps,episodes,success_rate,mean_return,mean_queries,policy_loss,value_loss,entropy,clip_fraction,approx_kl,aux_loss\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.phase,
            r.iteration,
            r.env_steps,
            r.episodes,
            r.success_rate,
            r.mean_return,
            r.mean_queries,
            r.policy_loss,
            r.value_loss,
            r.entropy,
            r.clip_fraction,
            r.approx_kl,
            r.aux_loss
        );
    }
    s
}

/// Everything the schedule produces.
#[derive(Debug, Clone)]
pub struct Trained {
    pub split: SplitConfig,
    pub estimator: EstimatorArtifact,
    pub stage1: AudioArtifact,
    pub stage2: AudioArtifact,
    pub language: LanguageArtifact,
    pub query: QueryArtifact,
    pub log: Vec<LogRow>,
}

impl Trained {
    /// Estimator used at evaluation time.
    pub fn final_estimator(&self) -> &GoalEstimator {
        &self.stage2.estimator
    }
}

#[derive(Default)]
struct Rollout {
    transitions: Vec<Transition>,
    lang_pairs: Vec<LangExample>,
    audio_samples: Vec<AudioSample>,
    episodes: usize,
    successes: usize,
    returns: f64,
    queries: usize,
    steps: u64,
}

/// Runs the phases from `from` onwards. Earlier phases are loaded from `out`.
/// With `out` set, every phase writes its checkpoint and log there.
pub fn run_schedule(cfg: &TrainConfig, out: Option<&Path>, from: Phase) -> Result<Trained> {
    Schedule::new(cfg, out)?.run(from)
}

struct Schedule<'c> {
    cfg: &'c TrainConfig,
    out: Option<PathBuf>,
    split: SplitConfig,
    train: Vec<Scene>,
    val: Vec<Scene>,
    speaker: Speaker,
    log: Vec<LogRow>,
}

impl<'c> Schedule<'c> {
    fn new(cfg: &'c TrainConfig, out: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        let split = cfg.split()?;
        Ok(Self {
            cfg,
            out: out.map(Path::to_path_buf),
            train: generate_scenes(cfg.seed, SceneSet::Train, cfg.train_scenes, &cfg.scenes)?,
            val: generate_scenes(cfg.seed, SceneSet::Val, cfg.val_scenes, &cfg.scenes)?,
            speaker: Speaker::new(cfg.speaker)?,
            split,
            log: Vec::new(),
        })
    }

    fn rng(&self, phase: Phase) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed, 0xa000 + phase.index() as u64))
    }

    fn path(&self, file: &str) -> Option<PathBuf> {
        self.out.as_ref().map(|d| d.join(file))
    }

    fn obtain<T, F>(&mut self, phase: Phase, from: Phase, run: F) -> Result<T>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce(&mut Self) -> Result<T>,
    {
        if phase < from {
            let path = self
                .path(&phase.checkpoint_file())
                .ok_or_else(|| Error::Usage(format!("resuming at a later phase needs a checkpoint directory for {}", phase.name())))?;
            return load_checkpoint(&path, phase.name());
        }
        let first_row = self.log.len();
        let artifact = run(self)?;
        if let Some(path) = self.path(&phase.checkpoint_file()) {
            save_checkpoint(&path, phase.name(), &artifact)?;
            let log = self.path(&phase.log_file()).expect("out dir set");
            fs::write(&log, log_csv(&self.log[first_row..])).map_err(|e| Error::io(&log, e))?;
        }
        log::info!("phase {} done", phase.name());
        Ok(artifact)
    }

    fn run(mut self, from: Phase) -> Result<Trained> {
        if let Some(path) = self.path("split.json") {
            if from == Phase::Estimator {
                save_checkpoint(&path, "split", &self.split)?;
            } else {
                let saved: SplitConfig = load_checkpoint(&path, "split")?;
                if saved != self.split {
                    return Err(Error::Schedule("saved split differs from the configured one".into()));
                }
            }
        }
        let estimator = self.obtain(Phase::Estimator, from, |s| s.estimator_phase())?;
        let stage1 = self.obtain(Phase::AudioStage1, from, |s| s.audio_phase(Phase::AudioStage1, None, &estimator.estimator))?;
        let stage2 = self.obtain(Phase::AudioStage2, from, |s| {
            s.audio_phase(Phase::AudioStage2, Some(&stage1.policy), &stage1.estimator)
        })?;
        let language = self.obtain(Phase::Language, from, |s| s.language_phase())?;
        let query = self.obtain(Phase::Query, from, |s| s.query_phase(&stage2, &language))?;
        Ok(Trained {
            split: self.split,
            estimator,
            stage1,
            stage2,
            language,
            query,
            log: self.log,
        })
    }

    fn estimator_phase(&mut self) -> Result<EstimatorArtifact> {
        let mut rng = self.rng(Phase::Estimator);
        let samples = collect_audio_corpus(
            &self.train,
            &self.split,
            &self.split.train_categories,
            &self.cfg.audio,
            self.cfg.estimator_corpus,
            &mut rng,
        )?;
        let (estimator, classifier_losses) =
            train_goal_estimator(&samples, self.split.signature_dim(), &self.cfg.estimator, &mut rng)?;
        let accuracy = estimator.classifier_accuracy(&samples);
        for (i, loss) in classifier_losses.iter().enumerate() {
            self.log.push(LogRow {
                phase: Phase::Estimator.name().into(),
                iteration: i,
                aux_loss: *loss,
                ..LogRow::default()
            });
        }
        Ok(EstimatorArtifact {
            estimator,
            classifier_losses,
            accuracy,
        })
    }

    fn collect<R: Rng + ?Sized>(&self, agents: Agents<'_>, control: &ControlConfig, rec: Recording, rng: &mut R) -> Result<Rollout> {
        let mut roll = Rollout::default();
        while roll.transitions.len() < self.cfg.rollout_steps {
            let scene = &self.train[rng.random_range(0..self.train.len())];
            let spec = match sample_episode(scene, &self.split, Regime::Heard, self.cfg.min_start_distance, rng) {
                Ok(spec) => spec,
                Err(Error::Sampling(_)) => continue,
                Err(e) => return Err(e),
            };
            let mut outcome = run_episode(scene, &spec, agents, control, rec, rng.random())?;
            let steps = if rec.query_steps {
                std::mem::take(&mut outcome.query_steps)
            } else {
                std::mem::take(&mut outcome.audio_steps)
            };
            let m = outcome.metrics();
            roll.episodes += 1;
            roll.successes += usize::from(m.success);
            roll.queries += m.queries.len();
            roll.returns += steps.iter().map(|t| t.reward).sum::<f64>();
            roll.steps += steps.iter().map(|t| u64::from(t.duration)).sum::<u64>();
            roll.transitions.extend(steps);
            roll.lang_pairs.append(&mut outcome.lang_pairs);
            roll.audio_samples.append(&mut outcome.audio_samples);
        }
        Ok(roll)
    }

    fn push_row(&mut self, phase: Phase, iteration: usize, env_steps: u64, roll: &Rollout, stats: &PpoStats, aux: f64) {
        let n = roll.episodes.max(1) as f64;
        self.log.push(LogRow {
            phase: phase.name().into(),
            iteration,
            env_steps,
            episodes: roll.episodes,
            success_rate: roll.successes as f64 / n,
            mean_return: roll.returns / n,
            mean_queries: roll.queries as f64 / n,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            clip_fraction: stats.clip_fraction,
            approx_kl: stats.approx_kl,
            aux_loss: aux,
        });
    }

    fn audio_phase(&mut self, phase: Phase, init: Option<&ActorCritic>, estimator: &GoalEstimator) -> Result<AudioArtifact> {
        let mut rng = self.rng(phase);
        let use_memory = phase == Phase::AudioStage2;
        let budget = if use_memory { self.cfg.stage2_steps } else { self.cfg.stage1_steps };
        let obs_dim = ObservationEmbedding::dim(self.split.signature_dim());
        let mut net = match init {
            Some(p) => {
                let mut n = p.clone();
                n.freeze_encoder();
                n
            }
            None => ActorCritic::new(self.cfg.net, obs_dim, NUM_ACTIONS, 0, &mut rng),
        };
        let mut est = estimator.clone();
        let mut ppo = PpoTrainer::new(&net, self.cfg.ppo);
        let mut est_trainer = EstimatorTrainer::new(&est, &self.cfg.estimator);
        let control = self.cfg.control(Trigger::Never, use_memory);
        let rec = Recording {
            audio_steps: true,
            audio_samples: true,
            ..Recording::default()
        };
        let (mut steps, mut iteration) = (0u64, 0usize);
        while steps < budget {
            let roll = {
                let agents = self.agents(&est, &net, None, None);
                self.collect(agents, &control, rec, &mut rng)?
            };
            let stats = ppo.update(&mut net, &roll.transitions, &mut rng)?;
            let aux = if roll.audio_samples.is_empty() {
                0.0
            } else {
                est_trainer.regressor_update(&mut est, &roll.audio_samples, &mut rng)?
            };
            steps += roll.steps;
            self.push_row(phase, iteration, steps, &roll, &stats, aux);
            iteration += 1;
        }
        est.check_finite()?;
        let val_success = self.validate_audio(&net, &est, use_memory, phase)?;
        Ok(AudioArtifact {
            policy: net,
            estimator: est,
            val_success,
        })
    }

    fn agents<'a>(
        &'a self,
        estimator: &'a GoalEstimator,
        audio_policy: &'a ActorCritic,
        query_policy: Option<&'a ActorCritic>,
        lang_policy: Option<&'a LangPolicy>,
    ) -> Agents<'a> {
        Agents {
            estimator,
            audio_policy,
            query_policy,
            lang_policy,
            speaker: &self.speaker,
            signatures: &self.split.category_signatures,
            audio: self.cfg.audio,
        }
    }

    /// Success rate on fixed validation episodes, whose sound is brief.
    fn validate_audio(&self, net: &ActorCritic, est: &GoalEstimator, use_memory: bool, phase: Phase) -> Result<f64> {
        if self.cfg.val_episodes == 0 {
            return Ok(0.0);
        }
        let seed = mix_seed(self.cfg.seed, 0xb000);
        let set = EpisodeSet::sample(
            self.val.clone(),
            &self.split,
            Regime::Heard,
            self.cfg.val_episodes,
            self.cfg.min_start_distance,
            seed,
        )?;
        let control = self.cfg.control(Trigger::Never, use_memory);
        let run = evaluate(&set, self.agents(est, net, None, None), &control, seed, false, 1)?;
        let sr = compute_metrics(&run.records)?.sr;
        log::info!("{} validation success {sr:.3}", phase.name());
        Ok(sr)
    }

    fn language_phase(&mut self) -> Result<LanguageArtifact> {
        let mut rng = self.rng(Phase::Language);
        let (policy, report) = pretrain_offline(
            &self.train,
            &self.val,
            &self.speaker,
            &self.split,
            &self.cfg.language,
            self.cfg.lang_pairs,
            self.cfg.lang_val_pairs,
            &mut rng,
        )?;
        for (i, loss) in report.train_loss.iter().enumerate() {
            self.log.push(LogRow {
                phase: Phase::Language.name().into(),
                iteration: i,
                success_rate: report.val_step_accuracy[i][0],
                aux_loss: *loss,
                ..LogRow::default()
            });
        }
        Ok(LanguageArtifact { policy, report })
    }

    fn query_phase(&mut self, audio: &AudioArtifact, language: &LanguageArtifact) -> Result<QueryArtifact> {
        let mut rng = self.rng(Phase::Query);
        let mut q = ActorCritic::query_from(&audio.policy, self.cfg.ask_bias, &mut rng);
        let mut lang = language.policy.clone();
        let mut lang_trainer = LangTrainer::new(&lang, self.cfg.language.finetune_lr);
        let mut ppo = PpoTrainer::new(&q, self.cfg.ppo);
        let mut control = self.cfg.control(Trigger::Learned, true);
        if self.cfg.hard_cap_in_training {
            control.k_allowed = Some(self.cfg.reward.soft_queries);
        }
        let needs_lang = self.cfg.query_feedback == FeedbackMode::Language;
        let rec = Recording {
            query_steps: true,
            lang_pairs: needs_lang,
            ..Recording::default()
        };
        let (mut steps, mut iteration) = (0u64, 0usize);
        let mut mean_queries = Vec::new();
        while steps < self.cfg.query_steps {
            let roll = {
                let agents = self.agents(&audio.estimator, &audio.policy, Some(&q), Some(&lang));
                self.collect(agents, &control, rec, &mut rng)?
            };
            let stats = ppo.update(&mut q, &roll.transitions, &mut rng)?;
            let aux = online_finetune(&mut lang, &mut lang_trainer, &roll.lang_pairs, self.cfg.finetune_epochs, &mut rng)?;
            steps += roll.steps;
            mean_queries.push(roll.queries as f64 / roll.episodes.max(1) as f64);
            self.push_row(Phase::Query, iteration, steps, &roll, &stats, aux.unwrap_or(0.0));
            iteration += 1;
        }
        Ok(QueryArtifact {
            policy: q,
            lang_policy: lang,
            mean_queries,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_names_round_trip() {
        for p in Phase::ALL {
            assert_eq!(p.name().parse::<Phase>().unwrap(), p);
        }
        assert!("warmup".parse::<Phase>().is_err());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(TrainConfig::from_toml_str("seed = 3\nbogus = 1\n").is_err());
        assert!(TrainConfig::from_toml_str("[ppo]\nlr = 0.1\nwarp = 2\n").is_err());
    }

    #[test]
    fn partial_config_keeps_defaults() {
        let cfg = TrainConfig::from_toml_str("seed = 9\n[ppo]\nclip = 0.1\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.ppo.clip, 0.1);
        assert_eq!(cfg.ppo.lr, PpoConfig::default().lr);
        assert_eq!(cfg.stage1_steps, TrainConfig::default().stage1_steps);
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = TrainConfig::default();
        let back = TrainConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn mismatched_option_steps_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.reward.option_steps = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn checkpoint_kind_and_presence_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.json");
        assert!(matches!(load_checkpoint::<Vec<f64>>(&path, "x"), Err(Error::Schedule(_))));
        save_checkpoint(&path, "x", &vec![1.5, -0.25]).unwrap();
        assert_eq!(load_checkpoint::<Vec<f64>>(&path, "x").unwrap(), vec![1.5, -0.25]);
        assert!(matches!(load_checkpoint::<Vec<f64>>(&path, "y"), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn scene_seeds_differ_across_sets() {
        assert_ne!(scene_seed(1, SceneSet::Train, 0), scene_seed(1, SceneSet::Test, 0));
        assert_ne!(scene_seed(1, SceneSet::Train, 0), scene_seed(1, SceneSet::Train, 1));
    }
}

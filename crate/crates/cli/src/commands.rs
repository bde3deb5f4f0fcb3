use std::fs;
use std::io::{BufRead, BufReader, BufWriter};
use std::path::Path;

use earshot::episode::{Regime, SplitConfig};
use earshot::eval::{check_budget, run_suite, write_logs, EpisodeBank, EvalConfig, SuiteFilter, SuiteModels, TrajectoryLog};
use earshot::oracle::{FeedbackMode, Speaker};
use earshot::policy::{replay_log, Trigger};
use earshot::train::{
    generate_scenes, load_checkpoint, run_schedule, AudioArtifact, Phase, QueryArtifact, SceneSet, TrainConfig,
};
use earshot::world::{Scene, SceneParams};
use earshot::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenesConfig {
    pub count: usize,
}

impl Default for ScenesConfig {
    fn default() -> Self {
        Self { count: 50 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub scenes: ScenesConfig,
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.train.validate()?;
    cfg.eval.validate()?;
    Ok(cfg)
}

/// Scene set description written next to the scene files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub seed: u64,
    pub params: SceneParams,
    pub split: SplitConfig,
    pub files: Vec<String>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn gen_scenes(mut cfg: RunConfig, seed: Option<u64>, count: Option<usize>, out: &Path) -> Result<()> {
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let count = count.unwrap_or(cfg.scenes.count);
    if count == 0 {
        return Err(Error::Config("scene count must be positive".into()));
    }
    let scenes = generate_scenes(cfg.train.seed, SceneSet::Test, count, &cfg.train.scenes)?;
    create_dir(out)?;
    let mut files = Vec::with_capacity(count);
    for (i, scene) in scenes.iter().enumerate() {
        let name = format!("scene_{i:03}.json");
        write(&out.join(&name), &scene.to_json()?)?;
        files.push(name);
    }
    let manifest = SceneManifest {
        seed: cfg.train.seed,
        params: cfg.train.scenes,
        split: cfg.train.split()?,
        files,
    };
    write(&out.join(MANIFEST), &serde_json::to_string_pretty(&manifest)?)?;
    log::info!("wrote {count} scenes to {}", out.display());
    Ok(())
}

pub fn load_scenes(dir: &Path) -> Result<(SceneManifest, Vec<Scene>)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: SceneManifest = serde_json::from_str(&text)?;
    let scenes = manifest
        .files
        .iter()
        .map(|f| {
            let p = dir.join(f);
            Scene::from_json(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, scenes))
}

pub fn train(mut cfg: RunConfig, seed: Option<u64>, from: Phase, out: &Path) -> Result<()> {
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    create_dir(out)?;
    let resolved = toml::to_string(&cfg.train).map_err(|e| Error::Config(e.to_string()))?;
    write(&out.join("train_config.toml"), &resolved)?;
    let trained = run_schedule(&cfg.train, Some(out), from)?;
    let summary = serde_json::json!({
        "estimator_accuracy": trained.estimator.accuracy,
        "stage1_val_success": trained.stage1.val_success,
        "stage2_val_success": trained.stage2.val_success,
        "language_epochs": trained.language.report.epochs,
        "final_mean_queries": trained.query.mean_queries.last(),
    });
    write(&out.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    println!("{summary}");
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub seed: Option<u64>,
    pub regime: Option<Regime>,
    pub trigger: Option<Trigger>,
    pub feedback: Option<FeedbackMode>,
    pub k_allowed: Option<u32>,
    pub workers: Option<usize>,
    pub logs: bool,
}

pub fn eval(mut cfg: RunConfig, opts: EvalOptions, checkpoints: &Path, scenes_dir: &Path, out: &Path) -> Result<()> {
    if let Some(s) = opts.seed {
        cfg.eval.seed = s;
    }
    if let Some(k) = opts.k_allowed {
        cfg.eval.k_allowed = k;
    }
    if let Some(w) = opts.workers {
        cfg.eval.workers = w.max(1);
    }
    let split: SplitConfig = load_checkpoint(&checkpoints.join("split.json"), "split")?;
    let (manifest, scenes) = load_scenes(scenes_dir)?;
    if manifest.split != split {
        return Err(Error::Input("scene manifest split differs from the training split".into()));
    }
    let audio: AudioArtifact = load_checkpoint(
        &checkpoints.join(Phase::AudioStage2.checkpoint_file()),
        Phase::AudioStage2.name(),
    )?;
    let query: QueryArtifact = load_checkpoint(&checkpoints.join(Phase::Query.checkpoint_file()), Phase::Query.name())?;
    let speaker = Speaker::new(cfg.train.speaker)?;
    let models = SuiteModels {
        estimator: &audio.estimator,
        audio_policy: &audio.policy,
        query_policy: &query.policy,
        lang_policy: &query.lang_policy,
        speaker: &speaker,
        split: &split,
        audio: cfg.train.audio,
    };
    let base = cfg.train.control(Trigger::Never, true);
    let bank = EpisodeBank::new(&scenes, &split, &cfg.eval, cfg.train.min_start_distance)?;
    let filter = SuiteFilter {
        regime: opts.regime,
        trigger: opts.trigger,
        feedback: opts.feedback,
    };
    let output = run_suite(&models, &base, &bank, &cfg.eval, &filter, opts.logs)?;
    output.report.write(out)?;
    if opts.logs {
        for log in &output.logs {
            check_budget(&log.steps, log.k_allowed, base.option_steps)?;
        }
        let path = out.join("trajectories.jsonl");
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_logs(BufWriter::new(file), &output.logs)?;
    }
    print!("{}", output.report.csv());
    Ok(())
}

pub fn replay(scenes_dir: &Path, logs: &Path, index: usize) -> Result<()> {
    let (_, scenes) = load_scenes(scenes_dir)?;
    let file = fs::File::open(logs).map_err(|e| Error::io(logs, e))?;
    let line = BufReader::new(file)
        .lines()
        .nth(index)
        .ok_or_else(|| Error::Input(format!("no trajectory at index {index}")))?
        .map_err(|e| Error::io(logs, e))?;
    let log: TrajectoryLog = serde_json::from_str(&line)?;
    let scene = scenes
        .iter()
        .find(|s| s.seed == log.spec.scene_seed)
        .ok_or_else(|| Error::Input(format!("scene {} not in {}", log.spec.scene_seed, scenes_dir.display())))?;
    let record = replay_log(scene, &log.spec, &log.steps, 1.0)?;
    println!("{}", serde_json::to_string(&record)?);
    Ok(())
}

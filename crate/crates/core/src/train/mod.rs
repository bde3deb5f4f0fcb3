mod ppo;
mod rewards;
mod schedule;

pub use ppo::{gae_advantages, ppo_loss, transitions_gae, PpoConfig, PpoSample, PpoStats, PpoTrainer};
pub use rewards::*;
pub use schedule::{
    generate_scenes, load_checkpoint, log_csv, run_schedule, save_checkpoint, scene_seed, AudioArtifact,
    EstimatorArtifact, LanguageArtifact, LogRow, Phase, QueryArtifact, SceneSet, TrainConfig, Trained,
    CHECKPOINT_VERSION,
};

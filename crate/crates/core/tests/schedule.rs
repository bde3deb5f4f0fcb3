use std::fs;
use std::path::Path;

use earshot::train::{load_checkpoint, run_schedule, AudioArtifact, Phase, QueryArtifact, TrainConfig};
use earshot::Error;

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn smoke_schedule_writes_every_phase() {
    let dir = tempfile::tempdir().unwrap();
    let trained = run_schedule(&TrainConfig::smoke(), Some(dir.path()), Phase::Estimator).unwrap();
    for phase in Phase::ALL {
        assert!(dir.path().join(phase.checkpoint_file()).exists(), "{}", phase.name());
        assert!(dir.path().join(phase.log_file()).exists(), "{}", phase.name());
    }
    assert!(trained.stage2.policy.encoder_frozen());
    let stage2: AudioArtifact = load_checkpoint(&dir.path().join("audio_stage2.json"), "audio_stage2").unwrap();
    assert_eq!(stage2.val_success, trained.stage2.val_success);
    let query: QueryArtifact = load_checkpoint(&dir.path().join("query.json"), "query").unwrap();
    assert_eq!(query.mean_queries, trained.query.mean_queries);
}

#[test]
fn resuming_from_any_phase_reproduces_the_run() {
    let cfg = TrainConfig::smoke();
    let full = tempfile::tempdir().unwrap();
    run_schedule(&cfg, Some(full.path()), Phase::Estimator).unwrap();
    let reference = files(full.path());
    for phase in [Phase::AudioStage1, Phase::Language, Phase::Query] {
        let dir = tempfile::tempdir().unwrap();
        for (name, bytes) in &reference {
            let keep = Phase::ALL[..phase.index()]
                .iter()
                .any(|p| *name == p.checkpoint_file() || *name == p.log_file())
                || name == "split.json";
            if keep {
                fs::write(dir.path().join(name), bytes).unwrap();
            }
        }
        run_schedule(&cfg, Some(dir.path()), phase).unwrap();
        assert_eq!(files(dir.path()), reference, "resume from {}", phase.name());
    }
}

#[test]
fn resume_without_earlier_checkpoints_fails() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_schedule(&TrainConfig::smoke(), Some(dir.path()), Phase::Query).unwrap_err();
    assert!(matches!(err, Error::Schedule(_)), "{err:?}");
}

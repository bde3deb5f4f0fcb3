use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{
    compute_metrics_with, evaluate, mix_seed, query_histogram, silence_ratio_curve, Aggregate, EpisodeSet,
    MetricsRecord, Report, ReportRow, SwsDenominator,
};
use crate::episode::{EpisodeSpec, Regime, SplitConfig};
use crate::error::{Error, Result};
use crate::language::LangPolicy;
use crate::oracle::{FeedbackMode, Speaker};
use crate::percept::GoalEstimator;
use crate::policy::{ActorCritic, Agents, ControlConfig, OptionTag, StepLog, Trigger};
use crate::world::{AudioParams, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    /// Independent episode sets; metrics are reported as mean and std over them.
    pub seeds: u32,
    /// Episodes per seed, spread round-robin over the test scenes.
    pub episodes: usize,
    pub k_allowed: u32,
    pub sweep_k: Vec<u32>,
    pub hist_bin: u32,
    pub workers: usize,
    pub sws_denominator: SwsDenominator,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            seeds: 3,
            episodes: 200,
            k_allowed: 3,
            sweep_k: (0..=5).collect(),
            hist_bin: 10,
            workers: 1,
            sws_denominator: SwsDenominator::AllEpisodes,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 || self.episodes == 0 {
            return Err(Error::Config("seeds and episodes must be positive".into()));
        }
        if self.hist_bin == 0 {
            return Err(Error::Config("hist_bin must be at least 1".into()));
        }
        Ok(())
    }
}

/// Trained components evaluated together.
#[derive(Debug, Clone, Copy)]
pub struct SuiteModels<'a> {
    pub estimator: &'a GoalEstimator,
    pub audio_policy: &'a ActorCritic,
    pub query_policy: &'a ActorCritic,
    pub lang_policy: &'a LangPolicy,
    pub speaker: &'a Speaker,
    pub split: &'a SplitConfig,
    pub audio: AudioParams,
}

impl<'a> SuiteModels<'a> {
    pub fn agents(&self) -> Agents<'a> {
        Agents {
            estimator: self.estimator,
            audio_policy: self.audio_policy,
            query_policy: Some(self.query_policy),
            lang_policy: Some(self.lang_policy),
            speaker: self.speaker,
            signatures: &self.split.category_signatures,
            audio: self.audio,
        }
    }
}

/// Restricts which rows a suite run produces. `None` keeps everything.
#[derive(Debug, Clone, Default)]
pub struct SuiteFilter {
    pub regime: Option<Regime>,
    pub trigger: Option<Trigger>,
    pub feedback: Option<FeedbackMode>,
}

/// One evaluated configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub trigger: Trigger,
    pub feedback: FeedbackMode,
    pub regime: Regime,
    pub k_allowed: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub method: String,
    pub feedback: String,
    pub regime: String,
    pub k_allowed: u32,
    pub seed: u32,
    pub episode: usize,
    pub spec: EpisodeSpec,
    pub steps: Vec<StepLog>,
}

#[derive(Debug, Clone, Default)]
pub struct CellResult {
    pub per_seed: Vec<Aggregate>,
    pub records: Vec<MetricsRecord>,
    pub logs: Vec<TrajectoryLog>,
}

#[derive(Debug, Clone, Default)]
pub struct SuiteOutput {
    pub report: Report,
    pub logs: Vec<TrajectoryLog>,
    pub records: Vec<(Cell, Vec<MetricsRecord>)>,
}

/// Fixed episode sets, one per seed, for every regime.
pub struct EpisodeBank {
    sets: Vec<(Regime, Vec<EpisodeSet>)>,
}

impl EpisodeBank {
    pub fn new(scenes: &[Scene], split: &SplitConfig, cfg: &EvalConfig, min_start_distance: u32) -> Result<Self> {
        let mut sets = Vec::new();
        for (ri, regime) in Regime::ALL.into_iter().enumerate() {
            let per_seed = (0..cfg.seeds)
                .map(|s| {
                    let seed = mix_seed(cfg.seed, (ri as u64) << 16 | u64::from(s));
                    EpisodeSet::sample(scenes.to_vec(), split, regime, cfg.episodes, min_start_distance, seed)
                })
                .collect::<Result<Vec<_>>>()?;
            sets.push((regime, per_seed));
        }
        Ok(Self { sets })
    }

    pub fn sets(&self, regime: Regime) -> &[EpisodeSet] {
        &self.sets.iter().find(|(r, _)| *r == regime).expect("every regime sampled").1
    }
}

fn cell_control(base: &ControlConfig, cell: &Cell) -> ControlConfig {
    ControlConfig {
        trigger: if cell.k_allowed == 0 { Trigger::Never } else { cell.trigger },
        feedback: cell.feedback,
        k_allowed: Some(cell.k_allowed),
        ..*base
    }
}

/// Runs one configuration on every seed's episode set.
pub fn run_cell(
    models: &SuiteModels<'_>,
    base: &ControlConfig,
    bank: &EpisodeBank,
    cell: Cell,
    cfg: &EvalConfig,
    keep_logs: bool,
) -> Result<CellResult> {
    let control = cell_control(base, &cell);
    let mut out = CellResult::default();
    for (s, set) in bank.sets(cell.regime).iter().enumerate() {
        let seed = mix_seed(cfg.seed ^ 0xe7a1, s as u64);
        let run = evaluate(set, models.agents(), &control, seed, keep_logs, cfg.workers)?;
        out.per_seed.push(compute_metrics_with(&run.records, cfg.sws_denominator)?);
        out.records.extend(run.records.iter().cloned());
        if keep_logs {
            for (i, steps) in run.logs.into_iter().enumerate() {
                out.logs.push(TrajectoryLog {
                    method: cell.trigger.name().into(),
                    feedback: cell.feedback.name().into(),
                    regime: cell.regime.name().into(),
                    k_allowed: cell.k_allowed,
                    seed: s as u32,
                    episode: i,
                    spec: set.episodes[i].1.clone(),
                    steps,
                });
            }
        }
    }
    Ok(out)
}

/// Every method under both feedback modes in every regime at the configured
/// cap, plus the cap sweep, query histograms and silence curves on the heard
/// regime with language feedback.
pub fn run_suite(
    models: &SuiteModels<'_>,
    base: &ControlConfig,
    bank: &EpisodeBank,
    cfg: &EvalConfig,
    filter: &SuiteFilter,
    keep_logs: bool,
) -> Result<SuiteOutput> {
    cfg.validate()?;
    let mut out = SuiteOutput::default();
    let triggers: Vec<Trigger> = Trigger::BASELINES
        .into_iter()
        .filter(|t| filter.trigger.is_none_or(|f| f == *t))
        .collect();
    let feedbacks: Vec<FeedbackMode> = FeedbackMode::ALL
        .into_iter()
        .filter(|f| filter.feedback.is_none_or(|x| x == *f))
        .collect();
    let regimes: Vec<Regime> = Regime::ALL
        .into_iter()
        .filter(|r| filter.regime.is_none_or(|x| x == *r))
        .collect();
    for &regime in &regimes {
        for &feedback in &feedbacks {
            for &trigger in &triggers {
                let cell = Cell {
                    trigger,
                    feedback,
                    regime,
                    k_allowed: cfg.k_allowed,
                };
                let res = run_cell(models, base, bank, cell, cfg, keep_logs)?;
                out.report.rows.push(ReportRow::from_seeds(
                    trigger.name(),
                    feedback.name(),
                    regime.name(),
                    Some(cfg.k_allowed),
                    &res.per_seed,
                ));
                if regime == Regime::Heard && feedback == FeedbackMode::Language {
                    let tag = trigger.name().to_string();
                    out.report
                        .histograms
                        .push((tag.clone(), query_histogram(&res.records, cfg.hist_bin)?));
                    out.report.silence_curves.push((tag, silence_ratio_curve(&res.records)));
                }
                out.logs.extend(res.logs);
                out.records.push((cell, res.records));
            }
        }
    }
    let sweep_feedback = filter.feedback.unwrap_or(FeedbackMode::Language);
    let sweep_regime = filter.regime.unwrap_or(Regime::Heard);
    for &trigger in &triggers {
        for &k in &cfg.sweep_k {
            let cell = Cell {
                trigger,
                feedback: sweep_feedback,
                regime: sweep_regime,
                k_allowed: k,
            };
            let res = run_cell(models, base, bank, cell, cfg, false)?;
            out.report.sweep.push(ReportRow::from_seeds(
                trigger.name(),
                sweep_feedback.name(),
                sweep_regime.name(),
                Some(k),
                &res.per_seed,
            ));
        }
    }
    Ok(out)
}

/// Checks one trajectory against the query cap and the option length.
pub fn check_budget(steps: &[StepLog], k_allowed: u32, option_steps: usize) -> Result<()> {
    let queries = steps.iter().filter(|s| s.query_flag).count();
    if queries > k_allowed as usize {
        return Err(Error::Input(format!("{queries} queries exceed the cap {k_allowed}")));
    }
    let mut run: Option<usize> = None;
    for s in steps {
        if s.query_flag {
            run = (s.option == OptionTag::Language).then_some(1);
        } else if s.option == OptionTag::Language {
            let n = run.ok_or_else(|| Error::Input(format!("language step at t={} without a query", s.t)))? + 1;
            run = Some(n);
        } else {
            run = None;
        }
        if let Some(n) = run {
            if n > option_steps {
                return Err(Error::Input(format!("language option ran {n} steps at t={}", s.t)));
            }
        }
    }
    Ok(())
}

/// Trajectory logs as JSON lines.
pub fn write_logs<W: Write>(mut out: W, logs: &[TrajectoryLog]) -> Result<()> {
    for log in logs {
        serde_json::to_writer(&mut out, log)?;
        out.write_all(b"\n").map_err(|e| Error::io("<log stream>", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{Action, Heading, Pose};

    fn step(t: u32, option: OptionTag, query_flag: bool) -> StepLog {
        StepLog {
            t,
            pose: Pose::new(1, 1, Heading::N),
            action: Action::MoveForward,
            option,
            reward: 0.0,
            query_flag,
            instruction: None,
        }
    }

    #[test]
    fn budget_accepts_short_options() {
        let log = vec![
            step(0, OptionTag::Language, true),
            step(1, OptionTag::Language, false),
            step(2, OptionTag::Language, false),
            step(3, OptionTag::Audio, false),
            step(4, OptionTag::Language, true),
        ];
        check_budget(&log, 2, 3).unwrap();
        assert!(check_budget(&log, 1, 3).is_err());
    }

    #[test]
    fn budget_rejects_long_option() {
        let log: Vec<StepLog> = (0..4).map(|t| step(t, OptionTag::Language, t == 0)).collect();
        assert!(check_budget(&log, 3, 3).is_err());
        check_budget(&log, 3, 4).unwrap();
    }

    #[test]
    fn back_to_back_options_counted_separately() {
        let mut log: Vec<StepLog> = (0..3).map(|t| step(t, OptionTag::Language, t == 0)).collect();
        log.extend((3..6).map(|t| step(t, OptionTag::Language, t == 3)));
        check_budget(&log, 2, 3).unwrap();
    }
}

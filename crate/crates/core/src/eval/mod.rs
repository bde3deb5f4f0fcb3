//! Metrics, evaluation runs, sweeps and report emission.

mod metrics;
mod suite;

pub use metrics::{compute_metrics, compute_metrics_with, Aggregate, MetricsRecord, SwsDenominator};
pub use suite::{
    check_budget, run_cell, run_suite, write_logs, Cell, CellResult, EpisodeBank, EvalConfig, SuiteFilter,
    SuiteModels, SuiteOutput, TrajectoryLog,
};

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episode::{sample_episode, EpisodeSpec, Regime, SplitConfig};
use crate::error::{Error, Result};
use crate::language::{step_accuracy, LangExample, LangPolicy};
use crate::policy::{run_episode, Agents, ControlConfig, Recording, StepLog};
use crate::world::Scene;

/// Percentage of examples whose first `n` greedy actions match the teacher.
pub fn vln_step_n(policy: &LangPolicy, examples: &[LangExample], n: usize, masked: bool) -> Result<f64> {
    if n == 0 || n > policy.cfg.option_steps {
        return Err(Error::Input(format!("step count {n} outside 1..={}", policy.cfg.option_steps)));
    }
    Ok(100.0 * step_accuracy(policy, examples, masked)?[n - 1])
}

/// Cumulative success against the ratio of minimal actions to sound duration.
/// Each point is `(ratio, successes with ratio <= x / all episodes)`.
pub fn silence_ratio_curve(records: &[MetricsRecord]) -> Vec<(f64, f64)> {
    let total = records.len() as f64;
    let mut pts: Vec<(f64, bool)> = records
        .iter()
        .map(|r| (r.min_actions as f64 / r.sound_end_step.max(1) as f64, r.success))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::new();
    let mut hits = 0usize;
    for (x, s) in pts {
        hits += s as usize;
        let y = hits as f64 / total;
        match out.last_mut() {
            Some(last) if last.0 == x => last.1 = y,
            _ => out.push((x, y)),
        }
    }
    out
}

/// Counts of query steps per bin of `bin_width`; bin `i` covers
/// `[i * w, (i + 1) * w)`.
pub fn query_histogram(records: &[MetricsRecord], bin_width: u32) -> Result<Vec<(u32, usize)>> {
    if bin_width == 0 {
        return Err(Error::Input("bin width must be at least 1".into()));
    }
    let max = records.iter().flat_map(|r| r.queries.iter().copied()).max();
    let bins = max.map_or(1, |m| m / bin_width + 1) as usize;
    let mut out: Vec<(u32, usize)> = (0..bins).map(|i| (i as u32 * bin_width, 0)).collect();
    for q in records.iter().flat_map(|r| r.queries.iter()) {
        out[(q / bin_width) as usize].1 += 1;
    }
    Ok(out)
}

/// Standard deviation of query step indices.
pub fn query_spread(records: &[MetricsRecord]) -> f64 {
    let qs: Vec<f64> = records.iter().flat_map(|r| r.queries.iter().map(|&q| q as f64)).collect();
    mean_std(&qs).1
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Fixed evaluation episodes over a set of scenes.
#[derive(Debug, Clone)]
pub struct EpisodeSet {
    pub scenes: Vec<Scene>,
    /// `(scene index, spec)` pairs.
    pub episodes: Vec<(usize, EpisodeSpec)>,
}

impl EpisodeSet {
    /// `count` episodes spread round-robin over `scenes`. Scenes that cannot
    /// host an episode of `regime` are skipped.
    pub fn sample(
        scenes: Vec<Scene>,
        split: &SplitConfig,
        regime: Regime,
        count: usize,
        min_start_distance: u32,
        seed: u64,
    ) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::Input("episode set needs at least one scene".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut episodes = Vec::with_capacity(count);
        let mut cursor = 0usize;
        while episodes.len() < count {
            let mut placed = false;
            for _ in 0..scenes.len() {
                let si = cursor % scenes.len();
                cursor += 1;
                match sample_episode(&scenes[si], split, regime, min_start_distance, &mut rng) {
                    Ok(spec) => {
                        episodes.push((si, spec));
                        placed = true;
                        break;
                    }
                    Err(Error::Sampling(_)) => continue,
                    Err(e) => return Err(e),
                }
            }
            if !placed {
                return Err(Error::Sampling(format!("no scene can host a {} episode", regime.name())));
            }
        }
        Ok(Self { scenes, episodes })
    }
}

/// SplitMix64 finalizer, used to derive per-episode seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct EvalRun {
    pub records: Vec<MetricsRecord>,
    pub logs: Vec<Vec<StepLog>>,
}

/// Runs every episode of `set`. Results are ordered by episode and do not
/// depend on `workers`.
pub fn evaluate(
    set: &EpisodeSet,
    agents: Agents<'_>,
    cfg: &ControlConfig,
    seed: u64,
    keep_logs: bool,
    workers: usize,
) -> Result<EvalRun> {
    let rec = Recording {
        log: keep_logs,
        ..Recording::default()
    };
    let n = set.episodes.len();
    let workers = workers.clamp(1, n.max(1));
    let run_one = |i: usize| {
        let (si, spec) = &set.episodes[i];
        run_episode(&set.scenes[*si], spec, agents, cfg, rec, mix_seed(seed, i as u64))
    };
    let outcomes = if workers == 1 {
        (0..n).map(run_one).collect::<Result<Vec<_>>>()?
    } else {
        let chunks: Vec<Vec<usize>> = (0..workers).map(|w| (w..n).step_by(workers).collect()).collect();
        let mut slots: Vec<Option<_>> = (0..n).map(|_| None).collect();
        let results: Vec<Vec<(usize, Result<_>)>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunks
                .iter()
                .map(|idx| s.spawn(|| idx.iter().map(|&i| (i, run_one(i))).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
        });
        for (i, r) in results.into_iter().flatten() {
            slots[i] = Some(r?);
        }
        slots.into_iter().map(|s| s.expect("every episode ran")).collect()
    };
    let mut records = Vec::with_capacity(n);
    let mut logs = Vec::with_capacity(if keep_logs { n } else { 0 });
    for mut o in outcomes {
        records.push(o.record.take().expect("finished episode"));
        if keep_logs {
            logs.push(std::mem::take(&mut o.log));
        }
    }
    Ok(EvalRun { records, logs })
}

/// Mean and std over seeds of the aggregate metrics of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub feedback: String,
    pub regime: String,
    pub k_allowed: Option<u32>,
    pub seeds: usize,
    pub sr: (f64, f64),
    pub spl: (f64, f64),
    pub sna: (f64, f64),
    pub dtg: (f64, f64),
    pub sws: (f64, f64),
    pub queries: (f64, f64),
}

impl ReportRow {
    pub fn from_seeds(method: &str, feedback: &str, regime: &str, k_allowed: Option<u32>, per_seed: &[Aggregate]) -> Self {
        let stat = |f: &dyn Fn(&Aggregate) -> f64| mean_std(&per_seed.iter().map(f).collect::<Vec<_>>());
        Self {
            method: method.into(),
            feedback: feedback.into(),
            regime: regime.into(),
            k_allowed,
            seeds: per_seed.len(),
            sr: stat(&|a| a.sr),
            spl: stat(&|a| a.spl),
            sna: stat(&|a| a.sna),
            dtg: stat(&|a| a.dtg),
            sws: stat(&|a| a.sws),
            queries: stat(&|a| a.queries),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub sweep: Vec<ReportRow>,
    pub histograms: Vec<(String, Vec<(u32, usize)>)>,
    pub silence_curves: Vec<(String, Vec<(f64, f64)>)>,
}

fn rows_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from(
        "method,feedback,regime,k_allowed,seeds,sr_mean,sr_std,spl_mean,spl_std,sna_mean,sna_std,dtg_mean,dtg_std,sws_mean,sws_std,queries_mean,queries_std\n",
    );
    for r in rows {
        let k = r.k_allowed.map_or(String::new(), |k| k.to_string());
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.method, r.feedback, r.regime, k, r.seeds, r.sr.0, r.sr.1, r.spl.0, r.spl.1, r.sna.0, r.sna.1, r.dtg.0,
            r.dtg.1, r.sws.0, r.sws.1, r.queries.0, r.queries.1
        );
    }
    s
}

impl Report {
    pub fn csv(&self) -> String {
        rows_csv(&self.rows)
    }

    pub fn sweep_csv(&self) -> String {
        rows_csv(&self.sweep)
    }

    pub fn find(&self, method: &str, feedback: &str, regime: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.feedback == feedback && r.regime == regime)
    }

    /// Writes `report.csv`, `sweep.csv`, `report.json` and two-column CSVs
    /// for every histogram and curve.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        put("report.csv", self.csv())?;
        put("sweep.csv", self.sweep_csv())?;
        put("report.json", serde_json::to_string_pretty(self)?)?;
        for (name, h) in &self.histograms {
            let mut s = String::from("step,count\n");
            for (b, c) in h {
                let _ = writeln!(s, "{b},{c}");
            }
            put(&format!("hist_{name}.csv"), s)?;
        }
        for (name, c) in &self.silence_curves {
            let mut s = String::from("ratio,cumulative_success\n");
            for (x, y) in c {
                let _ = writeln!(s, "{x:.6},{y:.6}");
            }
            put(&format!("silence_{name}.csv"), s)?;
        }
        Ok(())
    }
}

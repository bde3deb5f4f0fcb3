use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Outcome of one evaluated episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub success: bool,
    /// Cells actually moved.
    pub path_len: f64,
    /// Geodesic start-goal distance.
    pub shortest_len: f64,
    /// Primitive actions executed, Stop excluded.
    pub actions_taken: u32,
    pub min_actions: u32,
    /// Terminal geodesic distance to the goal.
    pub dtg: f64,
    pub sound_end_step: u32,
    /// Step of the successful Stop.
    pub reach_step: Option<u32>,
    /// Step indices at which queries were answered.
    pub queries: Vec<u32>,
    /// Primitive steps executed by each language option.
    pub option_lengths: Vec<u32>,
}

impl MetricsRecord {
    pub fn spl(&self) -> f64 {
        if !self.success {
            return 0.0;
        }
        let l = self.shortest_len;
        let p = self.path_len;
        if l.max(p) == 0.0 {
            1.0
        } else {
            l / l.max(p)
        }
    }

    pub fn sna(&self) -> f64 {
        if !self.success {
            return 0.0;
        }
        let n = self.actions_taken as f64;
        let m = self.min_actions as f64;
        if n.max(m) == 0.0 {
            1.0
        } else {
            m / n.max(m)
        }
    }

    pub fn success_when_silent(&self) -> bool {
        self.success && self.reach_step.is_some_and(|r| r > self.sound_end_step)
    }
}

/// Denominator for the success-when-silent rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwsDenominator {
    #[default]
    AllEpisodes,
    Successes,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub episodes: usize,
    pub sr: f64,
    pub spl: f64,
    pub sna: f64,
    pub dtg: f64,
    pub sws: f64,
    pub queries: f64,
}

pub fn compute_metrics(records: &[MetricsRecord]) -> Result<Aggregate> {
    compute_metrics_with(records, SwsDenominator::AllEpisodes)
}

pub fn compute_metrics_with(records: &[MetricsRecord], sws: SwsDenominator) -> Result<Aggregate> {
    if records.is_empty() {
        return Err(Error::Input("no episode records to aggregate".into()));
    }
    let n = records.len() as f64;
    let mean = |f: &dyn Fn(&MetricsRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let successes = records.iter().filter(|r| r.success).count();
    let silent = records.iter().filter(|r| r.success_when_silent()).count() as f64;
    let sws = match sws {
        SwsDenominator::AllEpisodes => silent / n,
        SwsDenominator::Successes if successes == 0 => 0.0,
        SwsDenominator::Successes => silent / successes as f64,
    };
    Ok(Aggregate {
        episodes: records.len(),
        sr: successes as f64 / n,
        spl: mean(&|r| r.spl()),
        sna: mean(&|r| r.sna()),
        dtg: mean(&|r| r.dtg),
        sws,
        queries: mean(&|r| r.queries.len() as f64),
    })
}

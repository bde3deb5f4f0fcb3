use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SUCCESS_BONUS: f64 = 10.0;
pub const TIME_PENALTY: f64 = 0.01;
pub const DEFAULT_R_NEG: f64 = -1.2;
pub const DEFAULT_R_F: f64 = -0.5;
pub const DEFAULT_TAU_F: u32 = 10;
pub const DEFAULT_SOFT_QUERIES: u32 = 3;

/// Shaping for geodesic progress.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceReward {
    /// Reward equals the decrease in geodesic distance.
    Proportional,
    /// +1 for any decrease, nothing otherwise.
    Binary,
}

/// `(d_prev - d_now) + 10 * success - 0.01`.
pub fn nav_reward(d_prev: f64, d_now: f64, success: bool) -> f64 {
    (d_prev - d_now) + if success { SUCCESS_BONUS } else { 0.0 } - TIME_PENALTY
}

/// Penalty for the `k`-th query of an episode (1-based) under a soft budget
/// of `soft_k` queries and options of `nu` steps.
pub fn zeta_q(k: u32, soft_k: u32, nu: u32, r_neg: f64) -> f64 {
    if k < soft_k {
        k as f64 * (r_neg + (-(nu as f64)).exp()) / nu as f64
    } else {
        r_neg + (-(k as f64)).exp()
    }
}

/// Penalty for querying `j` steps after the previous query; `j = 0` marks the
/// first query of an episode.
pub fn zeta_f(j: u32, tau_f: u32, r_f: f64) -> f64 {
    if j > 0 && j < tau_f {
        r_f / j as f64
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub distance: DistanceReward,
    pub r_neg: f64,
    pub r_f: f64,
    pub tau_f: u32,
    pub soft_queries: u32,
    pub option_steps: u32,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            distance: DistanceReward::Proportional,
            r_neg: DEFAULT_R_NEG,
            r_f: DEFAULT_R_F,
            tau_f: DEFAULT_TAU_F,
            soft_queries: DEFAULT_SOFT_QUERIES,
            option_steps: crate::oracle::DEFAULT_OPTION_STEPS as u32,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r_neg > 0.0 || self.r_f > 0.0 {
            return Err(Error::Config("query penalties must be non-positive".into()));
        }
        if self.option_steps == 0 || self.soft_queries == 0 {
            return Err(Error::Config("option_steps and soft_queries must be positive".into()));
        }
        Ok(())
    }

    pub fn step(&self, d_prev: f64, d_now: f64, success: bool) -> f64 {
        match self.distance {
            DistanceReward::Proportional => nav_reward(d_prev, d_now, success),
            DistanceReward::Binary => {
                let progress = if d_now < d_prev { 1.0 } else { 0.0 };
                nav_reward(progress, 0.0, success)
            }
        }
    }

    pub fn query_penalty(&self, k: u32, j: u32) -> (f64, f64) {
        (
            zeta_q(k, self.soft_queries, self.option_steps, self.r_neg),
            zeta_f(j, self.tau_f, self.r_f),
        )
    }
}

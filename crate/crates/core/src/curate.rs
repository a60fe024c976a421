//! Progressive rejection sampling, the quality-filter pipeline and RL-set
//! selection with initial efficiency references.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{rollout, Policy};
use crate::env::{EnvConfig, Environment};
use crate::eval::{trajectory_correct, Judge};
use crate::reward::EfficiencyReference;
use crate::seed;
use crate::synth::QAItem;
use crate::trajectory::{
    check_format, check_grounded, check_image_only, check_info_gain, check_sequential_shortcut, FailCode, Trajectory,
};
use crate::world::WorldFixture;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterSet {
    pub format: bool,
    pub info_gain: bool,
    pub grounded: bool,
    pub sequential_shortcut: bool,
    pub image_only: bool,
}

impl Default for FilterSet {
    fn default() -> Self {
        FilterSet { format: true, info_gain: true, grounded: true, sequential_shortcut: true, image_only: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurationConfig {
    /// Turn budgets, strictly ascending.
    pub budgets: Vec<usize>,
    /// Rollouts per budget.
    pub k: usize,
    pub filters: FilterSet,
    /// Attempts per item for RL-set selection.
    pub attempts: usize,
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig { budgets: vec![2, 4, 8], k: 5, filters: FilterSet::default(), attempts: 5 }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.budgets.is_empty() || self.budgets[0] < 1 || self.budgets.windows(2).any(|w| w[0] >= w[1]) {
            return Err("budgets must be non-empty, at least 1 and strictly ascending".into());
        }
        if self.k < 1 || self.attempts < 1 {
            return Err("k and attempts must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "verdict", content = "reasons")]
pub enum Verdict {
    Keep,
    Drop(Vec<FailCode>),
}

/// Runs the enabled filters in order and collects every failure.
pub fn quality_pipeline(traj: &Trajectory, world: &WorldFixture, filters: &FilterSet) -> Verdict {
    let mut fails = Vec::new();
    let checks: [(bool, &dyn Fn() -> Result<(), FailCode>); 5] = [
        (filters.format, &|| check_format(traj)),
        (filters.info_gain, &|| check_info_gain(traj)),
        (filters.grounded, &|| check_grounded(traj, world)),
        (filters.sequential_shortcut, &|| check_sequential_shortcut(traj)),
        (filters.image_only, &|| check_image_only(traj, world)),
    ];
    for (enabled, check) in checks {
        if enabled {
            if let Err(code) = check() {
                fails.push(code);
            }
        }
    }
    if fails.is_empty() {
        Verdict::Keep
    } else {
        Verdict::Drop(fails)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetSamples {
    pub budget: usize,
    pub trajectories: Vec<Trajectory>,
    pub accepted: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrsOutcome {
    pub qa_id: String,
    /// Budget and trajectory returned, or None when every budget failed.
    pub selected: Option<(usize, Trajectory)>,
    pub samples: Vec<BudgetSamples>,
}

pub fn prs_seed(seed: u64, qa_id: &str, budget: usize, sample: usize) -> u64 {
    seed::derive(seed, &[seed::label("prs"), seed::label(qa_id), budget as u64, sample as u64])
}

/// Samples `k` rollouts per ascending budget and returns the accepted one
/// with the fewest rounds at the first budget that has any. A rollout is
/// accepted when the judge marks it correct and the quality filters keep it.
pub fn prs(
    qa: &QAItem,
    policy: &dyn Policy,
    judge: &dyn Judge,
    env: &Environment,
    base: &EnvConfig,
    config: &CurationConfig,
    rng_seed: u64,
) -> PrsOutcome {
    let mut samples = Vec::new();
    for &budget in &config.budgets {
        let env_config = EnvConfig { max_turns: budget, ..base.clone() };
        let trajectories: Vec<Trajectory> = (0..config.k)
            .into_par_iter()
            .map(|i| rollout(policy, env, qa, &env_config, prs_seed(rng_seed, &qa.id, budget, i)))
            .collect();
        let accepted: Vec<bool> = trajectories
            .iter()
            .map(|t| {
                trajectory_correct(judge, qa, t)
                    && quality_pipeline(t, env.world(), &config.filters) == Verdict::Keep
            })
            .collect();
        let best = trajectories
            .iter()
            .zip(&accepted)
            .enumerate()
            .filter(|(_, (_, ok))| **ok)
            .min_by_key(|(i, (t, _))| (t.t_c, *i))
            .map(|(_, (t, _))| t.clone());
        samples.push(BudgetSamples { budget, trajectories, accepted });
        if let Some(t) = best {
            return PrsOutcome { qa_id: qa.id.clone(), selected: Some((budget, t)), samples };
        }
    }
    PrsOutcome { qa_id: qa.id.clone(), selected: None, samples }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlSample {
    pub qa_id: String,
    pub reference: EfficiencyReference,
    pub seed_trajectory: Trajectory,
}

pub fn attempt_seed(seed: u64, qa_id: &str, attempt: usize) -> u64 {
    seed::derive(seed, &[seed::label("attempt"), seed::label(qa_id), attempt as u64])
}

/// Keeps items that fail the first attempt but pass a later one. The
/// reference comes from the first passing attempt that used tools.
pub fn select_rl_set(
    qa_list: &[QAItem],
    policy: &dyn Policy,
    judge: &dyn Judge,
    env: &Environment,
    env_config: &EnvConfig,
    attempts: usize,
    rng_seed: u64,
) -> Vec<RlSample> {
    qa_list
        .par_iter()
        .filter_map(|qa| {
            let runs: Vec<(Trajectory, bool)> = (0..attempts.max(1))
                .map(|a| {
                    let t = rollout(policy, env, qa, env_config, attempt_seed(rng_seed, &qa.id, a));
                    let ok = trajectory_correct(judge, qa, &t);
                    (t, ok)
                })
                .collect();
            if runs[0].1 {
                return None;
            }
            let (t, _) = runs[1..].iter().find(|(t, ok)| *ok && t.t_c >= 1)?;
            Some(RlSample {
                qa_id: qa.id.clone(),
                reference: EfficiencyReference::new(t.t_c, t.t_s).ok()?,
                seed_trajectory: t.clone(),
            })
        })
        .collect()
}

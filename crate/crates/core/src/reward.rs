//! Efficiency-aware rewards: the reference-adaptive tool reward with
//! rank interpolation, group advantages, reference tightening, the
//! dual-clip surrogate, the reverse-KL distillation term and a simulated
//! multi-epoch trainer.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{rollout_group, Policy};
use crate::curate::RlSample;
use crate::env::{EnvConfig, Environment};
use crate::eval::{trajectory_correct, Judge};
use crate::seed;
use crate::synth::QAItem;
use crate::trajectory::{check_format, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EfficiencyReference {
    pub t_c_hat: usize,
    pub t_s_hat: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RewardError {
    #[error("rank {rho} outside 1..={g}")]
    BadRank { rho: usize, g: usize },
    #[error("invalid reference ({0}, {1}): need t_s_hat >= t_c_hat >= 1")]
    BadReference(usize, usize),
    #[error("invalid config: {0}")]
    Config(String),
}

impl EfficiencyReference {
    pub fn new(t_c_hat: usize, t_s_hat: usize) -> Result<Self, RewardError> {
        if t_c_hat >= 1 && t_s_hat >= t_c_hat {
            Ok(EfficiencyReference { t_c_hat, t_s_hat })
        } else {
            Err(RewardError::BadReference(t_c_hat, t_s_hat))
        }
    }

    /// Whether a correct rollout with these counts lands in the positive
    /// branch.
    pub fn rewards_positively(&self, t_c: usize, t_s: usize) -> bool {
        t_c > 0 && t_c <= self.t_c_hat && t_s <= self.t_s_hat
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceConfig {
    pub gamma: f64,
    /// Magnitude; applied as a negative reward.
    pub lambda_red: f64,
    /// Magnitude; applied as a negative reward.
    pub lambda_fmt: f64,
    pub r_plus: (f64, f64),
    pub r_minus: (f64, f64),
    pub group_size: usize,
    pub lambda_kd: f64,
    pub clip_low: f64,
    pub clip_high: f64,
    pub dual_clip_c: f64,
    /// Rank only among correct rollouts instead of the whole group.
    pub rank_correct_only: bool,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            gamma: 1.5,
            lambda_red: 0.1,
            lambda_fmt: 0.5,
            r_plus: (0.05, 0.20),
            r_minus: (-0.10, -0.02),
            group_size: 8,
            lambda_kd: 0.05,
            clip_low: 0.20,
            clip_high: 0.28,
            dual_clip_c: 3.0,
            rank_correct_only: false,
        }
    }
}

impl TraceConfig {
    /// Errors on invalid values; returns warnings for legal but degenerate
    /// ones.
    pub fn validate(&self) -> Result<Vec<String>, RewardError> {
        let bad = |m: &str| Err(RewardError::Config(m.into()));
        if !(self.gamma > 1.0) {
            return bad("gamma must exceed 1");
        }
        if self.lambda_red < 0.0 || self.lambda_fmt < 0.0 || self.lambda_kd < 0.0 {
            return bad("penalty and distillation weights are magnitudes and must be non-negative");
        }
        if !(self.r_plus.0 > 0.0 && self.r_plus.0 <= self.r_plus.1) {
            return bad("r_plus needs 0 < min <= max");
        }
        if !(self.r_minus.0 <= self.r_minus.1 && self.r_minus.1 < 0.0) {
            return bad("r_minus needs min <= max < 0");
        }
        if self.group_size < 1 {
            return bad("group_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.clip_low) || self.clip_high < 0.0 {
            return bad("clip fractions out of range");
        }
        if !(self.dual_clip_c > 1.0) {
            return bad("dual_clip_c must exceed 1");
        }
        let mut warnings = Vec::new();
        if self.group_size == 1 {
            warnings.push("group_size 1: rank interpolation always yields the upper bound".to_string());
        }
        Ok(warnings)
    }
}

/// `r_min + (g - rho) / (g - 1) * (r_max - r_min)`; `r_max` when `g == 1`.
pub fn rank_interp(rho: usize, g: usize, r_min: f64, r_max: f64) -> Result<f64, RewardError> {
    if rho < 1 || rho > g {
        return Err(RewardError::BadRank { rho, g });
    }
    if g == 1 {
        return Ok(r_max);
    }
    // Weighted form of r_min + w (r_max - r_min); exact at both endpoints.
    let w = (g - rho) as f64 / (g - 1) as f64;
    Ok(w * r_max + (1.0 - w) * r_min)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceBranch {
    /// Correct without any tool call.
    Guess,
    /// Wrong, with a round count inside the tolerance band.
    Tolerated,
    /// Wrong, with too few or too many rounds.
    Redundant,
    /// Correct and within both references.
    Efficient,
    /// Correct but over a reference.
    Inefficient,
}

pub fn classify(t_c: usize, t_s: usize, correct: bool, reference: &EfficiencyReference, gamma: f64) -> TraceBranch {
    match (correct, t_c) {
        (true, 0) => TraceBranch::Guess,
        (true, _) if reference.rewards_positively(t_c, t_s) => TraceBranch::Efficient,
        (true, _) => TraceBranch::Inefficient,
        (false, _) => {
            let lo = reference.t_c_hat as f64;
            let x = t_c as f64;
            if x >= lo && x <= gamma * lo {
                TraceBranch::Tolerated
            } else {
                TraceBranch::Redundant
            }
        }
    }
}

pub fn trace_tool_reward(
    t_c: usize,
    t_s: usize,
    correct: bool,
    reference: &EfficiencyReference,
    rho: usize,
    g: usize,
    config: &TraceConfig,
) -> Result<f64, RewardError> {
    Ok(match classify(t_c, t_s, correct, reference, config.gamma) {
        TraceBranch::Guess | TraceBranch::Tolerated => 0.0,
        TraceBranch::Redundant => -config.lambda_red,
        TraceBranch::Efficient => rank_interp(rho, g, config.r_plus.0, config.r_plus.1)?,
        TraceBranch::Inefficient => rank_interp(rho, g, config.r_minus.0, config.r_minus.1)?,
    })
}

/// Competition ranks: 1 plus the number of strictly smaller values.
pub fn competition_ranks(values: &[usize]) -> Vec<usize> {
    values.iter().map(|v| 1 + values.iter().filter(|w| *w < v).count()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_acc: f64,
    pub r_fmt: f64,
    pub r_tool: f64,
    pub total: f64,
    pub advantage: f64,
    pub rank: usize,
    pub branch: TraceBranch,
    pub t_c: usize,
    pub t_s: usize,
}

/// Population standardization; all zeros when the spread is below 1e-8.
pub fn advantages(totals: &[f64]) -> Vec<f64> {
    if totals.is_empty() {
        return Vec::new();
    }
    let n = totals.len() as f64;
    let mean = totals.iter().sum::<f64>() / n;
    let sd = (totals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd < 1e-8 {
        return vec![0.0; totals.len()];
    }
    totals.iter().map(|x| (x - mean) / sd).collect()
}

/// Scores every rollout of a group against one reference.
pub fn group_rewards(
    group: &[Trajectory],
    qa: &QAItem,
    reference: &EfficiencyReference,
    judge: &dyn Judge,
    config: &TraceConfig,
) -> Vec<RewardBreakdown> {
    let correct: Vec<bool> = group.iter().map(|t| trajectory_correct(judge, qa, t)).collect();
    let (ranks, g): (Vec<usize>, usize) = if config.rank_correct_only {
        let idx: Vec<usize> = (0..group.len()).filter(|&i| correct[i]).collect();
        let sub = competition_ranks(&idx.iter().map(|&i| group[i].t_c).collect::<Vec<_>>());
        let mut ranks = vec![1; group.len()];
        for (k, &i) in idx.iter().enumerate() {
            ranks[i] = sub[k];
        }
        (ranks, idx.len().max(1))
    } else {
        (competition_ranks(&group.iter().map(|t| t.t_c).collect::<Vec<_>>()), group.len())
    };
    let mut out: Vec<RewardBreakdown> = group
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let r_acc = f64::from(u8::from(correct[i]));
            let r_fmt = if check_format(t).is_err() { -config.lambda_fmt } else { 0.0 };
            let r_tool = trace_tool_reward(t.t_c, t.t_s, correct[i], reference, ranks[i], g, config)
                .expect("competition ranks lie in 1..=g");
            RewardBreakdown {
                r_acc,
                r_fmt,
                r_tool,
                total: r_acc + r_fmt + r_tool,
                advantage: 0.0,
                rank: ranks[i],
                branch: classify(t.t_c, t.t_s, correct[i], reference, config.gamma),
                t_c: t.t_c,
                t_s: t.t_s,
            }
        })
        .collect();
    let adv = advantages(&out.iter().map(|b| b.total).collect::<Vec<_>>());
    for (b, a) in out.iter_mut().zip(adv) {
        b.advantage = a;
    }
    out
}

/// Tightens the reference to the fewest rounds among successes that used
/// tools. When rounds drop, the invocation reference becomes the smallest
/// invocation count among those minimal-round successes, never exceeding
/// the previous one.
pub fn update_reference(reference: &EfficiencyReference, successes: &[(usize, usize)]) -> EfficiencyReference {
    let Some(min_tc) = successes.iter().map(|s| s.0).filter(|&t| t > 0).min() else {
        return *reference;
    };
    if min_tc >= reference.t_c_hat {
        return *reference;
    }
    let min_ts = successes
        .iter()
        .filter(|s| s.0 == min_tc)
        .map(|s| s.1.max(min_tc))
        .min()
        .expect("at least one success has the minimal round count");
    EfficiencyReference { t_c_hat: min_tc, t_s_hat: min_ts.min(reference.t_s_hat) }
}

/// Asymmetric clipped objective with a lower floor for negative
/// advantages.
pub fn grpo_surrogate(ratio: f64, advantage: f64, config: &TraceConfig) -> f64 {
    let clipped = ratio.clamp(1.0 - config.clip_low, 1.0 + config.clip_high);
    let s = (ratio * advantage).min(clipped * advantage);
    if advantage < 0.0 {
        s.max(config.dual_clip_c * advantage)
    } else {
        s
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KlError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("not a probability vector: {0}")]
    NotNormalized(String),
}

fn check_dist(p: &[f64], name: &str) -> Result<(), KlError> {
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(KlError::NotNormalized(format!("{name} has a negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(KlError::NotNormalized(format!("{name} sums to {s}")));
    }
    Ok(())
}

fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    let mut k = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return f64::INFINITY;
        }
        k += pi * (pi / qi).ln();
    }
    k.max(0.0)
}

/// `sum p_i ln(p_i / q_i)` with the student as `p`. Infinite when the
/// teacher assigns zero mass where the student does not.
pub fn opd_kl(student: &[f64], teacher: &[f64]) -> Result<f64, KlError> {
    if student.len() != teacher.len() {
        return Err(KlError::DimensionMismatch(student.len(), teacher.len()));
    }
    check_dist(student, "student")?;
    check_dist(teacher, "teacher")?;
    Ok(kl_unchecked(student, teacher))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Gradient of `KL(softmax(logits) || teacher)` with respect to the logits:
/// `p_i (ln(p_i / q_i) - KL)`.
pub fn opd_kl_grad(student_logits: &[f64], teacher: &[f64]) -> Result<Vec<f64>, KlError> {
    if student_logits.len() != teacher.len() {
        return Err(KlError::DimensionMismatch(student_logits.len(), teacher.len()));
    }
    check_dist(teacher, "teacher")?;
    let p = softmax(student_logits);
    let k = kl_unchecked(&p, teacher);
    Ok(p.iter()
        .zip(teacher)
        .map(|(&pi, &qi)| if pi == 0.0 { 0.0 } else { pi * ((pi / qi).ln() - k) })
        .collect())
}

/// KL values are capped here before averaging.
pub const KL_CAP: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenStep {
    pub ratio: f64,
    pub student: Vec<f64>,
    pub teacher: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryTokens {
    pub advantage: f64,
    pub correct: bool,
    pub tokens: Vec<TokenStep>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub grpo_term: f64,
    pub opd_term: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AlignmentError {
    #[error("trajectory {0} has no completion tokens")]
    EmptyCompletion(usize),
    #[error("trajectory {0} token {1}: non-positive ratio")]
    BadRatio(usize, usize),
    #[error("trajectory {0} token {1}: {2}")]
    Distribution(usize, usize, KlError),
}

/// Surrogate loss averaged over all tokens plus the distillation term,
/// `lambda_kd` times the group mean of `1[failed] * mean token KL`.
pub fn combined_loss(group: &[TrajectoryTokens], config: &TraceConfig) -> Result<LossTerms, AlignmentError> {
    let mut surrogate_sum = 0.0;
    let mut token_count = 0usize;
    let mut kd_sum = 0.0;
    for (i, t) in group.iter().enumerate() {
        if t.tokens.is_empty() {
            return Err(AlignmentError::EmptyCompletion(i));
        }
        for (j, s) in t.tokens.iter().enumerate() {
            if !(s.ratio > 0.0) {
                return Err(AlignmentError::BadRatio(i, j));
            }
            surrogate_sum -= grpo_surrogate(s.ratio, t.advantage, config);
            token_count += 1;
        }
        if !t.correct {
            let mut kl_sum = 0.0;
            for (j, s) in t.tokens.iter().enumerate() {
                let k = opd_kl(&s.student, &s.teacher).map_err(|e| AlignmentError::Distribution(i, j, e))?;
                kl_sum += k.min(KL_CAP);
            }
            kd_sum += kl_sum / t.tokens.len() as f64;
        }
    }
    let grpo_term = if token_count == 0 { 0.0 } else { surrogate_sum / token_count as f64 };
    let opd_term = if group.is_empty() || kd_sum == 0.0 {
        0.0
    } else {
        config.lambda_kd * kd_sum / group.len() as f64
    };
    Ok(LossTerms { grpo_term, opd_term, total: grpo_term + opd_term })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEpochReport {
    pub qa_id: String,
    pub epoch: usize,
    pub reference_before: EfficiencyReference,
    pub reference_after: EfficiencyReference,
    pub breakdowns: Vec<RewardBreakdown>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub queries: Vec<QueryEpochReport>,
    pub rollouts: usize,
    pub mean_total_reward: f64,
    pub accuracy: f64,
    /// Share of rollouts with positive tool reward under the reference in
    /// force this epoch.
    pub positive_fraction: f64,
    /// Share of the same rollouts that would be positive under the initial
    /// references.
    pub positive_fraction_initial: f64,
    pub mean_t_c_positive: Option<f64>,
}

/// Per-query references, frozen within an epoch and tightened at its end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerSim {
    pub config: TraceConfig,
    pub initial: BTreeMap<String, EfficiencyReference>,
    pub references: BTreeMap<String, EfficiencyReference>,
    pub epoch: usize,
}

impl TrainerSim {
    pub fn new(rl_set: &[RlSample], config: TraceConfig) -> Self {
        let initial: BTreeMap<String, EfficiencyReference> =
            rl_set.iter().map(|s| (s.qa_id.clone(), s.reference)).collect();
        TrainerSim { config, references: initial.clone(), initial, epoch: 0 }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn run_epoch(
        &mut self,
        corpus: &BTreeMap<String, QAItem>,
        policy: &dyn Policy,
        env: &Environment,
        env_config: &EnvConfig,
        judge: &dyn Judge,
        rng_seed: u64,
    ) -> EpochReport {
        let epoch = self.epoch;
        let queries: Vec<(String, EfficiencyReference)> =
            self.references.iter().filter(|(id, _)| corpus.contains_key(*id)).map(|(k, v)| (k.clone(), *v)).collect();
        let scored: Vec<(QueryEpochReport, Vec<(usize, usize)>)> = queries
            .par_iter()
            .map(|(qa_id, reference)| {
                let qa = &corpus[qa_id];
                let group_seed = seed::derive(rng_seed, &[seed::label(qa_id), epoch as u64]);
                let group = rollout_group(policy, env, qa, self.config.group_size, env_config, group_seed);
                let breakdowns = group_rewards(&group.trajectories, qa, reference, judge, &self.config);
                let successes = breakdowns.iter().filter(|b| b.r_acc == 1.0).map(|b| (b.t_c, b.t_s)).collect();
                let report = QueryEpochReport {
                    qa_id: qa_id.clone(),
                    epoch,
                    reference_before: *reference,
                    reference_after: *reference,
                    breakdowns,
                };
                (report, successes)
            })
            .collect();

        let mut reports = Vec::with_capacity(scored.len());
        let (mut n, mut total, mut correct, mut pos, mut pos_init, mut pos_tc) = (0usize, 0.0, 0.0, 0usize, 0usize, 0usize);
        for (mut report, successes) in scored {
            let after = update_reference(&report.reference_before, &successes);
            self.references.insert(report.qa_id.clone(), after);
            report.reference_after = after;
            let initial = self.initial[&report.qa_id];
            for b in &report.breakdowns {
                n += 1;
                total += b.total;
                correct += b.r_acc;
                if b.r_tool > 0.0 {
                    pos += 1;
                    pos_tc += b.t_c;
                }
                if b.r_acc == 1.0 && initial.rewards_positively(b.t_c, b.t_s) {
                    pos_init += 1;
                }
            }
            reports.push(report);
        }
        self.epoch += 1;
        let frac = |x: usize| if n == 0 { 0.0 } else { x as f64 / n as f64 };
        EpochReport {
            epoch,
            queries: reports,
            rollouts: n,
            mean_total_reward: if n == 0 { 0.0 } else { total / n as f64 },
            accuracy: if n == 0 { 0.0 } else { correct / n as f64 },
            positive_fraction: frac(pos),
            positive_fraction_initial: frac(pos_init),
            mean_t_c_positive: (pos > 0).then(|| pos_tc as f64 / pos as f64),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TraceConfig {
        TraceConfig::default()
    }

    #[test]
    fn interpolation_endpoints() {
        assert_eq!(rank_interp(1, 8, 0.05, 0.20).unwrap(), 0.20);
        assert_eq!(rank_interp(8, 8, 0.05, 0.20).unwrap(), 0.05);
        assert!((rank_interp(4, 8, 0.05, 0.20).unwrap() - 0.135714).abs() < 1e-6);
        assert_eq!(rank_interp(1, 1, 0.05, 0.20).unwrap(), 0.20);
        assert!(rank_interp(0, 8, 0.05, 0.20).is_err());
        assert!(rank_interp(9, 8, 0.05, 0.20).is_err());
    }

    #[test]
    fn tool_reward_cases() {
        let r = EfficiencyReference::new(2, 4).unwrap();
        assert_eq!(trace_tool_reward(4, 4, false, &r, 1, 8, &cfg()).unwrap(), -0.1);
        assert_eq!(trace_tool_reward(3, 4, false, &r, 1, 8, &cfg()).unwrap(), 0.0);
        assert_eq!(trace_tool_reward(0, 0, true, &r, 1, 8, &cfg()).unwrap(), 0.0);
        assert_eq!(trace_tool_reward(1, 10, true, &r, 1, 8, &cfg()).unwrap(), -0.02);
        assert_eq!(trace_tool_reward(1, 1, false, &r, 1, 8, &cfg()).unwrap(), -0.1);
    }

    #[test]
    fn advantages_by_hand() {
        assert_eq!(advantages(&[1.0, 1.0, 0.0, 0.0]), vec![1.0, 1.0, -1.0, -1.0]);
        assert_eq!(advantages(&[2.0, 0.0]), vec![1.0, -1.0]);
        assert_eq!(advantages(&[0.3; 5]), vec![0.0; 5]);
    }

    #[test]
    fn reference_updates() {
        let r = EfficiencyReference::new(3, 6).unwrap();
        assert_eq!(update_reference(&r, &[(2, 5), (2, 4), (4, 4)]), EfficiencyReference::new(2, 4).unwrap());
        let r = EfficiencyReference::new(2, 4).unwrap();
        assert_eq!(update_reference(&r, &[(3, 3)]), r);
        assert_eq!(update_reference(&r, &[]), r);
        assert_eq!(update_reference(&r, &[(0, 0)]), r);
    }

    #[test]
    fn surrogate_values() {
        let c = cfg();
        assert_eq!(grpo_surrogate(1.0, 0.7, &c), 0.7);
        assert!((grpo_surrogate(1.5, 1.0, &c) - 1.28).abs() < 1e-12);
        assert_eq!(grpo_surrogate(5.0, -1.0, &c), -3.0);
    }

    #[test]
    fn kl_values() {
        let k = opd_kl(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        assert!((k - 0.510826).abs() < 1e-6);
        assert!((opd_kl(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert_eq!(opd_kl(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(opd_kl(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), f64::INFINITY);
        assert!(matches!(opd_kl(&[1.0], &[0.5, 0.5]), Err(KlError::DimensionMismatch(1, 2))));
        assert!(matches!(opd_kl(&[0.6, 0.6], &[0.5, 0.5]), Err(KlError::NotNormalized(_))));
    }

    #[test]
    fn kl_gradient_two_class() {
        let logits = [0.0, 0.0];
        let g = opd_kl_grad(&logits, &[0.9, 0.1]).unwrap();
        let k = 0.5 * (5.0f64 / 9.0).ln() + 0.5 * 5f64.ln();
        assert!((g[0] - 0.5 * ((5.0f64 / 9.0).ln() - k)).abs() < 1e-12);
        assert!((g[1] - 0.5 * (5f64.ln() - k)).abs() < 1e-12);
        let same = opd_kl_grad(&[1.0f64.ln(), 3.0f64.ln()], &[0.25, 0.75]).unwrap();
        assert!(same.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn distillation_term() {
        let c = cfg();
        let step = |p: Vec<f64>, q: Vec<f64>| TokenStep { ratio: 1.0, student: p, teacher: q };
        let ok = TrajectoryTokens { advantage: 1.0, correct: true, tokens: vec![step(vec![0.5, 0.5], vec![0.9, 0.1])] };
        assert_eq!(combined_loss(&[ok.clone(), ok], &c).unwrap().opd_term, 0.0);
        let uniform = TrajectoryTokens { advantage: -1.0, correct: false, tokens: vec![step(vec![0.5, 0.5], vec![0.5, 0.5])] };
        assert_eq!(combined_loss(&[uniform], &c).unwrap().opd_term, 0.0);
        // Two tokens with KL 0.8 and 0.0 average to 0.4.
        let p = [0.5, 0.5];
        let target = 0.8;
        let q0 = {
            // Solve 0.5 ln(0.5/q) + 0.5 ln(0.5/(1-q)) = 0.8 for q.
            let (mut lo, mut hi) = (1e-9, 0.5);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if opd_kl(&p, &[mid, 1.0 - mid]).unwrap() > target { lo = mid } else { hi = mid }
            }
            0.5 * (lo + hi)
        };
        let failed = TrajectoryTokens {
            advantage: -1.0,
            correct: false,
            tokens: vec![step(p.to_vec(), vec![q0, 1.0 - q0]), step(p.to_vec(), p.to_vec())],
        };
        assert!((combined_loss(&[failed], &c).unwrap().opd_term - 0.02).abs() < 1e-9);
    }
}

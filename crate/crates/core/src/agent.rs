//! Rollout loop and scripted policies.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, Environment, InvocationStatus, RolloutLogEntry, RolloutState, StepOutcome};
use crate::schema::{parse_turn, render_turn, Region, ToolInvocation, TurnBlock};
use crate::seed::{self, Rng};
use crate::synth::{Aggregate, QAItem};
use crate::text::format_number;
use crate::trajectory::{account, TerminalReason, Trajectory, TurnRecord, WhitespaceTokenizer};
use crate::world::WorldFixture;

/// Remaining allowance visible to the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Budget {
    pub max_turns: usize,
    pub max_tool_calls: usize,
    pub turns_used: usize,
    pub calls_used: usize,
}

impl Budget {
    /// Whether a call of `n` requests can still run with a turn left over.
    pub fn allows(&self, n: usize) -> bool {
        self.turns_used + 1 < self.max_turns && self.calls_used + n <= self.max_tool_calls
    }
}

pub struct PolicyContext<'a> {
    pub qa: &'a QAItem,
    pub world: &'a WorldFixture,
    pub history: &'a [TurnRecord],
    pub budget: Budget,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("policy failed: {0}")]
pub struct PolicyError(pub String);

pub trait Policy: Send + Sync {
    fn name(&self) -> String;
    /// Raw text of the next turn.
    fn act(&self, ctx: &PolicyContext<'_>, rng: &mut Rng) -> Result<String, PolicyError>;
}

/// Runs one episode: parse, step, repeat until a terminal condition.
pub fn rollout(policy: &dyn Policy, env: &Environment, qa: &QAItem, config: &EnvConfig, rng_seed: u64) -> Trajectory {
    env.record_rollout(RolloutLogEntry { qa_id: qa.id.clone(), max_turns: config.max_turns, rng_seed });
    let mut policy_rng = seed::rng(seed::derive(rng_seed, &[seed::label("policy")]));
    let mut env_rng = seed::rng(seed::derive(rng_seed, &[seed::label("env")]));
    let mut state = RolloutState::default();
    let mut turns: Vec<TurnRecord> = Vec::new();
    let mut final_answer = None;
    let terminal = loop {
        if state.turns_used >= config.max_turns {
            break if state.format_invalid_turns == state.turns_used {
                TerminalReason::FormatAbort
            } else {
                TerminalReason::MaxTurns
            };
        }
        let ctx = PolicyContext {
            qa,
            world: env.world(),
            history: &turns,
            budget: Budget {
                max_turns: config.max_turns,
                max_tool_calls: config.max_tool_calls,
                turns_used: state.turns_used,
                calls_used: state.t_s,
            },
        };
        let raw = match policy.act(&ctx, &mut policy_rng) {
            Ok(raw) => raw,
            Err(e) => format!("<policy_error>{}</policy_error>", e.0),
        };
        match parse_turn(&raw) {
            Err(err) => {
                let obs = env.step_invalid(&mut state, err.clone());
                turns.push(TurnRecord { raw, action: None, format_error: Some(err), observation: Some(obs), executed: false });
            }
            Ok(block) => match env.step(&mut state, &block, qa.scene.as_ref(), config, &mut env_rng) {
                StepOutcome::Answer(text) => {
                    turns.push(TurnRecord { raw, action: Some(block), format_error: None, observation: None, executed: false });
                    final_answer = Some(text);
                    break TerminalReason::Answer;
                }
                StepOutcome::BudgetExhausted => {
                    turns.push(TurnRecord { raw, action: Some(block), format_error: None, observation: None, executed: false });
                    break TerminalReason::BudgetExhausted;
                }
                StepOutcome::Observation(obs) => {
                    turns.push(TurnRecord { raw, action: Some(block), format_error: None, observation: Some(obs), executed: true });
                }
            },
        }
    };
    let acc = account(&turns, &WhitespaceTokenizer).expect("rollout records are aligned");
    Trajectory {
        qa_id: qa.id.clone(),
        question: qa.question.clone(),
        rng_seed,
        turns,
        final_answer,
        terminal_reason: terminal,
        t_c: acc.t_c,
        t_s: acc.t_s,
        n_tok: acc.n_tok,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub qa_id: String,
    pub trajectories: Vec<Trajectory>,
}

pub fn rollout_seed(group_seed: u64, index: usize) -> u64 {
    seed::derive(group_seed, &[seed::label("rollout"), index as u64])
}

/// `g` rollouts with per-index derived seeds, run in parallel.
pub fn rollout_group(
    policy: &dyn Policy,
    env: &Environment,
    qa: &QAItem,
    g: usize,
    config: &EnvConfig,
    group_seed: u64,
) -> RolloutGroup {
    let trajectories = (0..g)
        .into_par_iter()
        .map(|i| rollout(policy, env, qa, config, rollout_seed(group_seed, i)))
        .collect();
    RolloutGroup { qa_id: qa.id.clone(), trajectories }
}

/// What earlier turns established about the item.
#[derive(Debug, Default)]
struct Progress {
    /// Cell index to identified entity (None when the lookup failed).
    grounded: Vec<(usize, Option<String>)>,
    /// Queries already sent.
    queried: BTreeSet<String>,
    /// Entities whose facts surfaced in text results.
    covered: BTreeSet<String>,
    text_rounds: usize,
}

fn progress(history: &[TurnRecord], scene_regions: &[Region]) -> Progress {
    let mut p = Progress::default();
    for t in history {
        let (Some(call), Some(obs)) = (t.executed_call(), t.observation.as_ref()) else { continue };
        match call {
            ToolInvocation::ImageSearch { regions: Some(regions), .. } => {
                for (i, region) in regions.iter().enumerate() {
                    let cell = scene_regions.iter().position(|r| r == region);
                    let found = obs
                        .per_call_results
                        .get(i)
                        .filter(|inv| inv.status == InvocationStatus::Ok)
                        .and_then(|inv| inv.results.first())
                        .and_then(|r| r.source_entity.clone());
                    if let Some(cell) = cell {
                        p.grounded.push((cell, found));
                    }
                }
            }
            ToolInvocation::ImageSearch { regions: None, .. } => {}
            ToolInvocation::TextSearch { queries } => {
                p.text_rounds += 1;
                p.queried.extend(queries.iter().cloned());
                for r in obs.results() {
                    if let Some(id) = &r.source_entity {
                        p.covered.insert(id.clone());
                    }
                }
            }
        }
    }
    p
}

fn scene_regions(qa: &QAItem) -> Vec<Region> {
    qa.scene.as_ref().map(|s| s.cells.iter().map(|c| c.region).collect()).unwrap_or_default()
}

fn attribute(qa: &QAItem) -> Option<(&str, Aggregate)> {
    let t = qa.template.as_ref()?;
    Some((t.attribute.as_deref()?, t.aggregate?))
}

/// Text query for one entity's fact.
fn fact_query(world: &WorldFixture, qa: &QAItem, entity_id: &str) -> String {
    let name = world.entity(entity_id).map_or(entity_id, |e| e.display_name());
    if let Some((attr, _)) = attribute(qa) {
        return format!("{name} {attr}");
    }
    if let Some(chain) = &qa.chain {
        if let Some((p, v)) = chain.constraints.last() {
            let label = world.predicate(p).map_or(p.as_str(), |p| p.label());
            let value = world.entity(v).map_or(v.as_str(), |e| e.display_name());
            return format!("{name} {label} {value}");
        }
    }
    name.to_string()
}

/// Answer assembled from identified cells or surfaced chain members.
fn evidence_answer(world: &WorldFixture, qa: &QAItem, p: &Progress) -> String {
    if let (Some(scene), Some((attr, agg))) = (&qa.scene, attribute(qa)) {
        let mut values = Vec::new();
        for cell in 0..scene.cells.len() {
            let id = p.grounded.iter().rev().find(|(c, _)| *c == cell).and_then(|(_, id)| id.as_ref());
            let entity = id.and_then(|id| world.entity(id)).filter(|e| p.covered.contains(&e.id));
            match entity.and_then(|e| e.measure(attr)) {
                Some(m) => values.push(m.value),
                None => return "unknown".into(),
            }
        }
        return match agg {
            Aggregate::Sum => format_number(values.iter().sum()),
            Aggregate::List => values.iter().map(|v| format_number(*v)).collect::<Vec<_>>().join(", "),
        };
    }
    if let Some(chain) = &qa.chain {
        let mut names: Vec<&str> = chain
            .answer_set
            .iter()
            .filter(|id| p.covered.contains(*id))
            .filter_map(|id| world.entity(id).map(|e| e.display_name()))
            .collect();
        names.sort_unstable();
        if names.is_empty() {
            return "unknown".into();
        }
        return names.join(", ");
    }
    qa.gold_answer.clone()
}

fn call(reason: &str, inv: ToolInvocation) -> String {
    render_turn(&TurnBlock::call(reason, inv))
}

fn answer(reason: &str, text: &str) -> String {
    render_turn(&TurnBlock::answer(reason, text))
}

fn image_call(qa: &QAItem, regions: Vec<Region>) -> ToolInvocation {
    let image_id = qa.scene.as_ref().map_or("img_0".to_string(), |s| s.image_id.clone());
    ToolInvocation::ImageSearch { image_id, regions: Some(regions) }
}

/// Entities to look up by text: identified cells for scenes, chain members
/// for constraint questions.
fn text_targets(qa: &QAItem, p: &Progress) -> Vec<String> {
    if qa.scene.is_some() {
        let mut out: Vec<String> = Vec::new();
        for (_, id) in &p.grounded {
            if let Some(id) = id {
                if !out.contains(id) {
                    out.push(id.clone());
                }
            }
        }
        out
    } else if let Some(chain) = &qa.chain {
        chain.answer_set.iter().cloned().collect()
    } else {
        Vec::new()
    }
}

/// Grounds every cell in one call, then sends every fact query in one call.
#[derive(Debug, Clone, Copy, Default)]
pub struct ParallelOracle;

impl Policy for ParallelOracle {
    fn name(&self) -> String {
        "parallel-oracle".into()
    }

    fn act(&self, ctx: &PolicyContext<'_>, _rng: &mut Rng) -> Result<String, PolicyError> {
        let regions = scene_regions(ctx.qa);
        let p = progress(ctx.history, &regions);
        if !regions.is_empty() && p.grounded.is_empty() {
            return Ok(call("Locate every subject in the grid at once.", image_call(ctx.qa, regions)));
        }
        if p.text_rounds == 0 {
            let queries: Vec<String> = text_targets(ctx.qa, &p)
                .iter()
                .map(|id| fact_query(ctx.world, ctx.qa, id))
                .collect();
            if !queries.is_empty() {
                return Ok(call("Look up all needed facts in one batch.", ToolInvocation::TextSearch { queries }));
            }
        }
        Ok(answer("Combine the retrieved facts.", &evidence_answer(ctx.world, ctx.qa, &p)))
    }
}

/// One region or one query per round.
#[derive(Debug, Clone, Copy, Default)]
pub struct SerialOracle;

impl Policy for SerialOracle {
    fn name(&self) -> String {
        "serial-oracle".into()
    }

    fn act(&self, ctx: &PolicyContext<'_>, _rng: &mut Rng) -> Result<String, PolicyError> {
        let regions = scene_regions(ctx.qa);
        let p = progress(ctx.history, &regions);
        if let Some(next) = (0..regions.len()).find(|c| !p.grounded.iter().any(|(g, _)| g == c)) {
            return Ok(call(
                "Locate the next subject.",
                image_call(ctx.qa, vec![regions[next]]),
            ));
        }
        let pending = text_targets(ctx.qa, &p)
            .iter()
            .map(|id| fact_query(ctx.world, ctx.qa, id))
            .find(|q| !p.queried.contains(q));
        if let Some(q) = pending {
            return Ok(call("Look up the next fact.", ToolInvocation::TextSearch { queries: vec![q] }));
        }
        Ok(answer("Combine the retrieved facts.", &evidence_answer(ctx.world, ctx.qa, &p)))
    }
}

/// Behaves like the parallel oracle but repeats every text query.
#[derive(Debug, Clone, Copy)]
pub struct Spammer {
    pub copies: usize,
}

impl Default for Spammer {
    fn default() -> Self {
        Spammer { copies: 3 }
    }
}

impl Policy for Spammer {
    fn name(&self) -> String {
        format!("spammer({})", self.copies)
    }

    fn act(&self, ctx: &PolicyContext<'_>, rng: &mut Rng) -> Result<String, PolicyError> {
        let raw = ParallelOracle.act(ctx, rng)?;
        match parse_turn(&raw) {
            Ok(TurnBlock { reason, action: crate::schema::Action::Call { invocation: ToolInvocation::TextSearch { queries } } }) => {
                let queries = queries
                    .iter()
                    .flat_map(|q| std::iter::repeat_n(q.clone(), self.copies.max(2)))
                    .collect();
                Ok(call(&reason, ToolInvocation::TextSearch { queries }))
            }
            _ => Ok(raw),
        }
    }
}

/// Answers immediately without searching.
#[derive(Debug, Clone, Default)]
pub struct Guesser {
    pub guess: Option<String>,
}

impl Policy for Guesser {
    fn name(&self) -> String {
        "guesser".into()
    }

    fn act(&self, _ctx: &PolicyContext<'_>, _rng: &mut Rng) -> Result<String, PolicyError> {
        Ok(answer("Answer from memory.", self.guess.as_deref().unwrap_or("unknown")))
    }
}

/// Emits unparseable text every turn.
#[derive(Debug, Clone, Copy, Default)]
pub struct Babbler;

impl Policy for Babbler {
    fn name(&self) -> String {
        "babbler".into()
    }

    fn act(&self, _ctx: &PolicyContext<'_>, _rng: &mut Rng) -> Result<String, PolicyError> {
        Ok("I will search now {\"name\": ".into())
    }
}

/// Searches with random batching and early stopping; answers correctly
/// with probability `p_skill * logistic(10 (coverage - 0.5)) / logistic(5)`.
#[derive(Debug, Clone, Copy)]
pub struct Stochastic {
    pub p_skill: f64,
}

impl Stochastic {
    pub fn new(p_skill: f64) -> Self {
        Stochastic { p_skill: p_skill.clamp(0.0, 1.0) }
    }

    pub fn success_probability(&self, coverage: f64) -> f64 {
        let logistic = |x: f64| 1.0 / (1.0 + (-x).exp());
        self.p_skill * logistic(10.0 * (coverage - 0.5)) / logistic(5.0)
    }

    fn stop_prob(&self) -> f64 {
        (1.0 - self.p_skill) * 0.5
    }

    /// Next chunk size out of `remaining`: everything with probability
    /// `p_skill`, otherwise a uniform smaller batch.
    fn chunk(&self, remaining: usize, rng: &mut Rng) -> usize {
        if remaining <= 1 || rng.gen_bool(self.p_skill) {
            remaining
        } else {
            rng.gen_range(1..remaining)
        }
    }

    fn finish(&self, ctx: &PolicyContext<'_>, p: &Progress, rng: &mut Rng) -> String {
        let required = &ctx.qa.required_entities;
        let coverage = if required.is_empty() {
            1.0
        } else {
            required.iter().filter(|id| p.covered.contains(*id)).count() as f64 / required.len() as f64
        };
        let text = if rng.gen_bool(self.success_probability(coverage).clamp(0.0, 1.0)) {
            ctx.qa.gold_answer.clone()
        } else {
            wrong_answer(&ctx.qa.gold_answer)
        };
        answer("Answer with the evidence gathered.", &text)
    }
}

fn wrong_answer(gold: &str) -> String {
    match crate::text::parse_number(gold) {
        Some(v) => format_number(v + 1.0),
        None => "unknown".into(),
    }
}

impl Policy for Stochastic {
    fn name(&self) -> String {
        format!("stochastic({})", self.p_skill)
    }

    fn act(&self, ctx: &PolicyContext<'_>, rng: &mut Rng) -> Result<String, PolicyError> {
        let regions = scene_regions(ctx.qa);
        let p = progress(ctx.history, &regions);
        let texted = p.text_rounds > 0;

        let ungrounded: Vec<usize> = (0..regions.len()).filter(|c| !p.grounded.iter().any(|(g, _)| g == c)).collect();
        let keep_grounding = !texted && !ungrounded.is_empty() && (p.grounded.is_empty() || !rng.gen_bool(self.stop_prob()));
        if keep_grounding {
            let n = self.chunk(ungrounded.len(), rng);
            if ctx.budget.allows(n) {
                let mut pick = ungrounded;
                pick.shuffle(rng);
                pick.truncate(n);
                pick.sort_unstable();
                let chosen = pick.iter().map(|&c| regions[c]).collect();
                return Ok(call("Locate some of the subjects.", image_call(ctx.qa, chosen)));
            }
            return Ok(self.finish(ctx, &p, rng));
        }

        let pending: Vec<String> = text_targets(ctx.qa, &p)
            .iter()
            .map(|id| fact_query(ctx.world, ctx.qa, id))
            .filter(|q| !p.queried.contains(q))
            .collect();
        let keep_searching = !pending.is_empty() && (!texted || !rng.gen_bool(self.stop_prob()));
        if keep_searching {
            let n = self.chunk(pending.len(), rng);
            let mut queries: Vec<String> = pending.into_iter().take(n).collect();
            if rng.gen_bool((1.0 - self.p_skill) * 0.3) {
                queries.push(queries[0].clone());
            }
            if ctx.budget.allows(queries.len()) {
                return Ok(call("Look up some facts.", ToolInvocation::TextSearch { queries }));
            }
        }
        Ok(self.finish(ctx, &p, rng))
    }
}

/// Policy selected by name: `parallel-oracle`, `serial-oracle`, `spammer`,
/// `guesser`, `babbler`, or `stochastic:<p>`.
pub fn policy_by_name(name: &str) -> Option<Box<dyn Policy>> {
    let (head, arg) = match name.split_once(':') {
        Some((h, a)) => (h, Some(a)),
        None => (name, None),
    };
    Some(match head {
        "parallel-oracle" | "parallel" => Box::new(ParallelOracle),
        "serial-oracle" | "serial" => Box::new(SerialOracle),
        "spammer" => Box::new(Spammer { copies: arg.map_or(Some(3), |a| a.parse().ok())? }),
        "guesser" => Box::new(Guesser { guess: arg.map(str::to_string) }),
        "babbler" => Box::new(Babbler),
        "stochastic" => Box::new(Stochastic::new(arg.map_or(Some(0.5), |a| a.parse().ok())?)),
        _ => return None,
    })
}

/// Wraps a failing closure as a policy, for containment tests.
pub struct FnPolicy<F>(pub F);

impl<F> Policy for FnPolicy<F>
where
    F: Fn(&PolicyContext<'_>, &mut Rng) -> Result<String, PolicyError> + Send + Sync,
{
    fn name(&self) -> String {
        "fn".into()
    }

    fn act(&self, ctx: &PolicyContext<'_>, rng: &mut Rng) -> Result<String, PolicyError> {
        (self.0)(ctx, rng)
    }
}

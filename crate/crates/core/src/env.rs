//! Simulated retrieval environment: fixture-backed image and text search,
//! a virtual-clock dispatcher with a bounded in-flight window, per-rollout
//! budget enforcement and distractor injection.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::schema::{FormatError, Region, ToolInvocation, TurnBlock};
use crate::seed::{self, Rng};
use crate::synth::MosaicSpec;
use crate::text;
use crate::world::WorldFixture;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub max_tool_calls: usize,
    pub max_turns: usize,
    pub concurrency_limit: usize,
    pub request_timeout_ms: u64,
    pub per_request_latency_ms: u64,
    /// Extra latency drawn uniformly from `0..=latency_jitter_ms`.
    pub latency_jitter_ms: u64,
    pub misidentify_prob: f64,
    pub iou_threshold: f64,
    pub top_k: usize,
    pub rng_seed: u64,
}

impl EnvConfig {
    /// 8 calls, 9 turns, 64 in flight.
    pub fn training() -> Self {
        EnvConfig {
            max_tool_calls: 8,
            max_turns: 9,
            concurrency_limit: 64,
            request_timeout_ms: 30_000,
            per_request_latency_ms: 1_000,
            latency_jitter_ms: 0,
            misidentify_prob: 0.0,
            iou_threshold: 0.5,
            top_k: 3,
            rng_seed: 0,
        }
    }

    /// 18 calls, 19 turns.
    pub fn evaluation() -> Self {
        EnvConfig { max_tool_calls: 18, max_turns: 19, ..Self::training() }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError(m.to_string()));
        if self.max_tool_calls < 1 {
            return bad("max_tool_calls must be at least 1");
        }
        if self.max_turns < 1 {
            return bad("max_turns must be at least 1");
        }
        if self.concurrency_limit < 1 {
            return bad("concurrency_limit must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.misidentify_prob) {
            return bad("misidentify_prob must be in [0, 1]");
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return bad("iou_threshold must be in (0, 1]");
        }
        if self.top_k < 1 {
            return bad("top_k must be at least 1");
        }
        Ok(())
    }
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self::training()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid environment config: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResult {
    pub title: String,
    pub snippet: String,
    pub link: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_entity: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvocationStatus {
    Ok,
    NoMatch,
    TimedOut,
}

/// Results of one region or one query, at its position in the request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvocationResult {
    pub index: usize,
    pub status: InvocationStatus,
    pub results: Vec<SearchResult>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Observation {
    pub per_call_results: Vec<InvocationResult>,
    pub tokens_consumed: usize,
    #[serde(default)]
    pub elapsed_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<FormatError>,
}

impl Observation {
    pub fn from_results(per_call_results: Vec<InvocationResult>, elapsed_ms: u64) -> Self {
        let mut obs = Observation { per_call_results, tokens_consumed: 0, elapsed_ms, error: None };
        obs.tokens_consumed = obs.render().split_whitespace().count();
        obs
    }

    pub fn format_error(error: FormatError) -> Self {
        let mut obs = Observation { error: Some(error), ..Default::default() };
        obs.tokens_consumed = obs.render().split_whitespace().count();
        obs
    }

    /// Text as the policy sees it.
    pub fn render(&self) -> String {
        let mut out = String::from("<tool_response>\n");
        if let Some(e) = &self.error {
            out.push_str(&format!("error: {} ({})\n", e.kind.code(), e.detail));
        }
        for inv in &self.per_call_results {
            match inv.status {
                InvocationStatus::Ok if inv.results.is_empty() => {
                    out.push_str(&format!("[{}] no results\n", inv.index))
                }
                InvocationStatus::Ok => {
                    for r in &inv.results {
                        out.push_str(&format!("[{}] {}: {} ({})\n", inv.index, r.title, r.snippet, r.link));
                    }
                }
                InvocationStatus::NoMatch => out.push_str(&format!("[{}] no match\n", inv.index)),
                InvocationStatus::TimedOut => out.push_str(&format!("[{}] timed out\n", inv.index)),
            }
        }
        out.push_str("</tool_response>");
        out
    }

    pub fn results(&self) -> impl Iterator<Item = &SearchResult> {
        self.per_call_results.iter().flat_map(|i| i.results.iter())
    }
}

/// Timing of one simulated batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchReport {
    pub start: Vec<u64>,
    pub finish: Vec<u64>,
    pub timed_out: Vec<bool>,
    pub makespan: u64,
    pub max_in_flight: usize,
}

/// Starts requests in order as soon as a slot frees up. A request whose
/// latency exceeds the timeout holds its slot until the timeout fires.
pub fn dispatch(latencies: &[u64], limit: usize, timeout: u64) -> DispatchReport {
    let limit = limit.max(1);
    let mut in_flight: BinaryHeap<Reverse<(u64, usize)>> = BinaryHeap::new();
    let mut now = 0u64;
    let mut start = Vec::with_capacity(latencies.len());
    let mut finish = Vec::with_capacity(latencies.len());
    let mut timed_out = Vec::with_capacity(latencies.len());
    let mut max_in_flight = 0;
    for (i, &lat) in latencies.iter().enumerate() {
        if in_flight.len() == limit {
            let Reverse((t, _)) = in_flight.pop().expect("window is full");
            now = now.max(t);
        }
        let late = lat > timeout;
        let end = now + if late { timeout } else { lat };
        start.push(now);
        finish.push(end);
        timed_out.push(late);
        in_flight.push(Reverse((end, i)));
        max_in_flight = max_in_flight.max(in_flight.len());
    }
    DispatchReport {
        makespan: finish.iter().copied().max().unwrap_or(0),
        start,
        finish,
        timed_out,
        max_in_flight,
    }
}

/// Search provider behind the environment.
pub trait SearchBackend: Send + Sync {
    /// One entry per region, or a single scene-level entry without regions.
    fn image_search(
        &self,
        scene: Option<&MosaicSpec>,
        image_id: &str,
        regions: Option<&[Region]>,
        rng: &mut Rng,
    ) -> Vec<(InvocationStatus, Vec<SearchResult>)>;

    fn text_search(&self, queries: &[String]) -> Vec<Vec<SearchResult>>;
}

/// Deterministic backend over a world fixture.
pub struct FixtureBackend {
    world: Arc<WorldFixture>,
    index: Vec<(usize, usize, std::collections::BTreeSet<String>)>,
    pub iou_threshold: f64,
    pub misidentify_prob: f64,
    pub top_k: usize,
}

impl FixtureBackend {
    pub fn new(world: Arc<WorldFixture>, config: &EnvConfig) -> Self {
        let mut index = Vec::new();
        for (ei, e) in world.entities().iter().enumerate() {
            for (si, s) in e.snippets.iter().enumerate() {
                index.push((ei, si, text::token_set(s)));
            }
        }
        FixtureBackend {
            world,
            index,
            iou_threshold: config.iou_threshold,
            misidentify_prob: config.misidentify_prob,
            top_k: config.top_k,
        }
    }

    fn identity(&self, entity_id: &str) -> SearchResult {
        let e = self.world.entity(entity_id).expect("scene entity exists");
        let snippet = if e.description.is_empty() {
            format!("{} ({})", e.display_name(), e.class_name)
        } else {
            e.description.clone()
        };
        SearchResult {
            title: e.display_name().to_string(),
            snippet,
            link: format!("fixture://entity/{}", e.id),
            source_entity: Some(e.id.clone()),
        }
    }

    fn look_alike(&self, entity_id: &str, rng: &mut Rng) -> String {
        let domain = self.world.entity(entity_id).map(|e| e.domain.as_str()).unwrap_or("");
        let same: Vec<&str> = self
            .world
            .entities()
            .iter()
            .filter(|e| e.id != entity_id && !domain.is_empty() && e.domain == domain)
            .map(|e| e.id.as_str())
            .collect();
        let pool: Vec<&str> = if same.is_empty() {
            self.world.entities().iter().filter(|e| e.id != entity_id).map(|e| e.id.as_str()).collect()
        } else {
            same
        };
        pool.choose(rng).map_or(entity_id.to_string(), |s| s.to_string())
    }
}

impl SearchBackend for FixtureBackend {
    fn image_search(
        &self,
        scene: Option<&MosaicSpec>,
        image_id: &str,
        regions: Option<&[Region]>,
        rng: &mut Rng,
    ) -> Vec<(InvocationStatus, Vec<SearchResult>)> {
        let scene = scene.filter(|s| s.image_id == image_id);
        let Some(regions) = regions else {
            return vec![match scene {
                None => (InvocationStatus::NoMatch, Vec::new()),
                Some(s) => {
                    let mut classes: Vec<&str> = Vec::new();
                    for c in &s.cells {
                        let class = self.world.entity(&c.entity_id).map_or("unknown", |e| e.class_name.as_str());
                        if !classes.contains(&class) {
                            classes.push(class);
                        }
                    }
                    let result = SearchResult {
                        title: "Scene overview".into(),
                        snippet: format!("The image shows: {}.", classes.join(", ")),
                        link: format!("fixture://scene/{}", s.image_id),
                        source_entity: None,
                    };
                    (InvocationStatus::Ok, vec![result])
                }
            }];
        };
        regions
            .iter()
            .map(|region| {
                let Some(scene) = scene else {
                    return (InvocationStatus::NoMatch, Vec::new());
                };
                let mut best: Option<(f64, &str)> = None;
                for cell in &scene.cells {
                    let iou = region.iou(&cell.region);
                    if best.is_none_or(|(b, _)| iou > b) {
                        best = Some((iou, &cell.entity_id));
                    }
                }
                match best {
                    Some((iou, id)) if iou >= self.iou_threshold => {
                        let swap = rng.gen::<f64>() < self.misidentify_prob;
                        let id = if swap { self.look_alike(id, rng) } else { id.to_string() };
                        (InvocationStatus::Ok, vec![self.identity(&id)])
                    }
                    _ => (InvocationStatus::NoMatch, Vec::new()),
                }
            })
            .collect()
    }

    fn text_search(&self, queries: &[String]) -> Vec<Vec<SearchResult>> {
        queries
            .iter()
            .map(|q| {
                let qt = text::token_set(q);
                let mut scored: Vec<(usize, &str, usize, usize)> = self
                    .index
                    .iter()
                    .filter_map(|(ei, si, toks)| {
                        let score = toks.intersection(&qt).count();
                        (score > 0).then(|| (score, self.world.entities()[*ei].id.as_str(), *si, *ei))
                    })
                    .collect();
                scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(b.1)).then(a.2.cmp(&b.2)));
                scored
                    .into_iter()
                    .take(self.top_k)
                    .map(|(_, id, si, ei)| {
                        let e = &self.world.entities()[ei];
                        SearchResult {
                            title: e.display_name().to_string(),
                            snippet: e.snippets[si].clone(),
                            link: format!("fixture://entity/{id}#{si}"),
                            source_entity: Some(id.to_string()),
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// Counters for one rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RolloutState {
    pub turns_used: usize,
    pub t_c: usize,
    pub t_s: usize,
    pub format_invalid_turns: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Observation(Observation),
    Answer(String),
    BudgetExhausted,
}

/// One entry per rollout started against the environment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RolloutLogEntry {
    pub qa_id: String,
    pub max_turns: usize,
    pub rng_seed: u64,
}

pub struct Environment {
    world: Arc<WorldFixture>,
    backend: Box<dyn SearchBackend>,
    log: Mutex<Vec<RolloutLogEntry>>,
}

impl Environment {
    pub fn new(world: Arc<WorldFixture>, config: &EnvConfig) -> Self {
        let backend = Box::new(FixtureBackend::new(world.clone(), config));
        Self::with_backend(world, backend)
    }

    pub fn with_backend(world: Arc<WorldFixture>, backend: Box<dyn SearchBackend>) -> Self {
        Environment { world, backend, log: Mutex::new(Vec::new()) }
    }

    pub fn world(&self) -> &WorldFixture {
        &self.world
    }

    pub fn record_rollout(&self, entry: RolloutLogEntry) {
        self.log.lock().expect("log lock").push(entry);
    }

    pub fn rollout_log(&self) -> Vec<RolloutLogEntry> {
        self.log.lock().expect("log lock").clone()
    }

    pub fn clear_log(&self) {
        self.log.lock().expect("log lock").clear();
    }

    fn latencies(&self, n: usize, config: &EnvConfig, rng: &mut Rng) -> Vec<u64> {
        (0..n)
            .map(|_| config.per_request_latency_ms + rng.gen_range(0..=config.latency_jitter_ms))
            .collect()
    }

    fn timed(&self, raw: Vec<(InvocationStatus, Vec<SearchResult>)>, config: &EnvConfig, rng: &mut Rng) -> Observation {
        let latencies = self.latencies(raw.len(), config, rng);
        let report = dispatch(&latencies, config.concurrency_limit, config.request_timeout_ms);
        let results = raw
            .into_iter()
            .enumerate()
            .map(|(index, (status, results))| {
                if report.timed_out[index] {
                    InvocationResult { index, status: InvocationStatus::TimedOut, results: Vec::new() }
                } else {
                    InvocationResult { index, status, results }
                }
            })
            .collect();
        Observation::from_results(results, report.makespan)
    }

    pub fn image_search(
        &self,
        scene: Option<&MosaicSpec>,
        image_id: &str,
        regions: Option<&[Region]>,
        config: &EnvConfig,
        rng: &mut Rng,
    ) -> Observation {
        let raw = self.backend.image_search(scene, image_id, regions, rng);
        self.timed(raw, config, rng)
    }

    pub fn text_search(&self, queries: &[String], config: &EnvConfig, rng: &mut Rng) -> Observation {
        let raw = self
            .backend
            .text_search(queries)
            .into_iter()
            .map(|r| (InvocationStatus::Ok, r))
            .collect();
        self.timed(raw, config, rng)
    }

    /// Executes one well-formed turn. A call runs only if another turn
    /// remains after it and its requests fit the remaining call budget.
    pub fn step(
        &self,
        state: &mut RolloutState,
        turn: &TurnBlock,
        scene: Option<&MosaicSpec>,
        config: &EnvConfig,
        rng: &mut Rng,
    ) -> StepOutcome {
        let Some(inv) = turn.invocation() else {
            let crate::schema::Action::Answer { text } = &turn.action else { unreachable!() };
            return StepOutcome::Answer(text.clone());
        };
        let n = inv.request_count();
        if state.turns_used + 1 >= config.max_turns || state.t_s + n > config.max_tool_calls {
            return StepOutcome::BudgetExhausted;
        }
        let obs = match inv {
            ToolInvocation::ImageSearch { image_id, regions } => {
                self.image_search(scene, image_id, regions.as_deref(), config, rng)
            }
            ToolInvocation::TextSearch { queries } => self.text_search(queries, config, rng),
        };
        state.turns_used += 1;
        state.t_c += 1;
        state.t_s += n;
        StepOutcome::Observation(obs)
    }

    /// Records a turn that failed to parse.
    pub fn step_invalid(&self, state: &mut RolloutState, error: FormatError) -> Observation {
        state.turns_used += 1;
        state.format_invalid_turns += 1;
        Observation::format_error(error)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("requested {requested} distractors but only {available} are available")]
pub struct InsufficientDistractors {
    pub requested: usize,
    pub available: usize,
}

/// Appends the first `k` distractors to the final invocation's list
/// without reordering. Returns the observation and the list length.
pub fn append_distractors(
    obs: &Observation,
    distractors: &[SearchResult],
    k: usize,
) -> Result<(Observation, usize), InsufficientDistractors> {
    if k > distractors.len() {
        return Err(InsufficientDistractors { requested: k, available: distractors.len() });
    }
    let mut out = obs.clone();
    if out.per_call_results.is_empty() {
        out.per_call_results.push(InvocationResult { index: 0, status: InvocationStatus::Ok, results: Vec::new() });
    }
    let last = out.per_call_results.last_mut().expect("non-empty");
    last.results.extend(distractors[..k].iter().cloned());
    if k > 0 {
        last.status = InvocationStatus::Ok;
    }
    let len = last.results.len();
    Ok((out, len))
}

/// Reorders the final invocation's list so position `i` holds the element
/// previously at `order[i]`.
pub fn permute_final(obs: &mut Observation, order: &[usize]) {
    if let Some(last) = obs.per_call_results.last_mut() {
        let old = std::mem::take(&mut last.results);
        last.results = order.iter().map(|&i| old[i].clone()).collect();
    }
    obs.tokens_consumed = obs.render().split_whitespace().count();
}

/// Appends `k` distractors to the final list and shuffles it by seed.
pub fn inject_distractors(
    obs: &Observation,
    distractors: &[SearchResult],
    k: usize,
    rng_seed: u64,
) -> Result<Observation, InsufficientDistractors> {
    let (mut out, len) = append_distractors(obs, distractors, k)?;
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut seed::rng(rng_seed));
    permute_final(&mut out, &order);
    Ok(out)
}

/// Fixture distractor pool for a topic as untagged search results.
pub fn distractor_results(world: &WorldFixture, topic: &str) -> Vec<SearchResult> {
    world
        .distractor_pool
        .get(topic)
        .map(|v| {
            v.iter()
                .enumerate()
                .map(|(i, s)| SearchResult {
                    title: "Unverified listing".into(),
                    snippet: s.clone(),
                    link: format!("fixture://distractor/{}/{i}", topic.replace(' ', "_")),
                    source_entity: None,
                })
                .collect()
        })
        .unwrap_or_default()
}

/// Number of results per topic, for reports.
pub fn distractor_counts(world: &WorldFixture) -> BTreeMap<String, usize> {
    world.distractor_pool.iter().map(|(k, v)| (k.clone(), v.len())).collect()
}

//! Answer judging, the cost-aware score, benchmark runs, the distractor
//! robustness protocol and tabular reports.

use std::collections::BTreeMap;

use itertools::Itertools;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{rollout, Policy};
use crate::env::{
    append_distractors, distractor_results, permute_final, EnvConfig, Environment, Observation, SearchResult,
};
use crate::seed;
use crate::synth::QAItem;
use crate::text::{format_number, numbers, normalize_answer, numbers_equal, parse_number, token_set};
use crate::trajectory::{TerminalReason, Trajectory};

/// Cost-aware score: `acc^2 * 100 / (tok_k + 2 * rounds + 1)`.
pub fn cas(acc: f64, n_tok_thousands: f64, n_tool: f64) -> f64 {
    acc * acc * 100.0 / (n_tok_thousands + 2.0 * n_tool + 1.0)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JudgeVerdict {
    pub extracted_final_answer: Option<String>,
    pub reasoning: String,
    pub correct: bool,
    pub confidence: u8,
}

/// External judge wire format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeWire {
    pub extracted_final_answer: String,
    pub reasoning: String,
    pub correct: String,
    pub confidence: u8,
}

impl JudgeVerdict {
    pub fn to_wire(&self) -> JudgeWire {
        JudgeWire {
            extracted_final_answer: self.extracted_final_answer.clone().unwrap_or_else(|| "None".into()),
            reasoning: self.reasoning.clone(),
            correct: if self.correct { "yes" } else { "no" }.into(),
            confidence: self.confidence,
        }
    }

    pub fn from_wire(w: &JudgeWire) -> Result<Self, String> {
        let correct = match w.correct.as_str() {
            "yes" => true,
            "no" => false,
            other => return Err(format!("correct must be yes or no, got {other:?}")),
        };
        if w.confidence > 100 {
            return Err("confidence must be within 0..=100".into());
        }
        let extracted = (w.extracted_final_answer != "None").then(|| w.extracted_final_answer.clone());
        if correct && extracted.is_none() {
            return Err("a correct verdict needs an extracted answer".into());
        }
        Ok(JudgeVerdict { extracted_final_answer: extracted, reasoning: w.reasoning.clone(), correct, confidence: w.confidence })
    }
}

pub trait Judge: Send + Sync {
    fn judge(&self, question: &str, predicted: Option<&str>, gold: &str) -> JudgeVerdict;
}

/// Normalized string equality, or numeric equality when both parse.
#[derive(Debug, Clone, Copy, Default)]
pub struct DefaultJudge;

impl Judge for DefaultJudge {
    fn judge(&self, _question: &str, predicted: Option<&str>, gold: &str) -> JudgeVerdict {
        let Some(pred) = predicted.filter(|p| !p.trim().is_empty()) else {
            return JudgeVerdict {
                extracted_final_answer: None,
                reasoning: "no final answer".into(),
                correct: false,
                confidence: 100,
            };
        };
        let (correct, reasoning) = match (parse_number(pred), parse_number(gold)) {
            (Some(a), Some(b)) => (numbers_equal(a, b), "numeric comparison"),
            _ => (normalize_answer(pred) == normalize_answer(gold), "normalized string comparison"),
        };
        JudgeVerdict {
            extracted_final_answer: Some(pred.trim().to_string()),
            reasoning: reasoning.into(),
            correct,
            confidence: 100,
        }
    }
}

pub fn judge_answer(predicted: &str, gold: &str) -> JudgeVerdict {
    DefaultJudge.judge("", Some(predicted), gold)
}

pub fn trajectory_correct(judge: &dyn Judge, qa: &QAItem, traj: &Trajectory) -> bool {
    judge.judge(&qa.question, traj.final_answer.as_deref(), &qa.gold_answer).correct
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub qa_id: String,
    pub correct: bool,
    pub t_c: usize,
    pub t_s: usize,
    pub n_tok: usize,
    pub terminal_reason: TerminalReason,
    pub cas: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub acc: f64,
    pub mean_turns: f64,
    pub mean_t_s: f64,
    pub mean_n_tok: f64,
    pub cas: f64,
}

impl Aggregate {
    pub fn of(records: &[BenchRecord]) -> Self {
        let n = records.len();
        if n == 0 {
            return Aggregate { n, acc: 0.0, mean_turns: 0.0, mean_t_s: 0.0, mean_n_tok: 0.0, cas: 0.0 };
        }
        let mean = |f: &dyn Fn(&BenchRecord) -> f64| records.iter().map(f).sum::<f64>() / n as f64;
        let acc = mean(&|r| f64::from(u8::from(r.correct)));
        let mean_turns = mean(&|r| r.t_c as f64);
        let mean_n_tok = mean(&|r| r.n_tok as f64);
        Aggregate {
            n,
            acc,
            mean_turns,
            mean_t_s: mean(&|r| r.t_s as f64),
            mean_n_tok,
            cas: cas(acc, mean_n_tok / 1000.0, mean_turns),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub policy: String,
    pub records: Vec<BenchRecord>,
    pub aggregate: Aggregate,
}

pub fn bench_record(judge: &dyn Judge, qa: &QAItem, traj: &Trajectory) -> BenchRecord {
    let correct = trajectory_correct(judge, qa, traj);
    BenchRecord {
        qa_id: qa.id.clone(),
        correct,
        t_c: traj.t_c,
        t_s: traj.t_s,
        n_tok: traj.n_tok,
        terminal_reason: traj.terminal_reason,
        cas: cas(f64::from(u8::from(correct)), traj.n_tok as f64 / 1000.0, traj.t_c as f64),
    }
}

/// One rollout per item with seeds derived from the item id.
pub fn benchmark_run(
    policy: &dyn Policy,
    corpus: &[QAItem],
    env: &Environment,
    config: &EnvConfig,
    judge: &dyn Judge,
    rng_seed: u64,
) -> (BenchReport, Vec<Trajectory>) {
    let runs: Vec<(BenchRecord, Trajectory)> = corpus
        .par_iter()
        .map(|qa| {
            let t = rollout(policy, env, qa, config, seed::derive(rng_seed, &[seed::label(&qa.id)]));
            (bench_record(judge, qa, &t), t)
        })
        .collect();
    let (records, trajectories): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    let aggregate = Aggregate::of(&records);
    (BenchReport { policy: policy.name(), records, aggregate }, trajectories)
}

/// Answers from retrieved context only.
pub trait EvidenceAnswerer: Send + Sync {
    fn answer(&self, question: &str, context: &[Observation]) -> Option<String>;
}

fn final_list(context: &[Observation]) -> &[SearchResult] {
    context
        .last()
        .and_then(|o| o.per_call_results.last())
        .map_or(&[], |inv| inv.results.as_slice())
}

/// First number in the snippet that the question does not already
/// mention, or the whole snippet when there is none.
fn extract(r: &SearchResult, question: &str) -> String {
    let asked = numbers(question);
    numbers(&r.snippet)
        .into_iter()
        .find(|v| !asked.contains(v))
        .map_or_else(|| r.snippet.clone(), format_number)
}

/// Reads the first result of the final list.
#[derive(Debug, Clone, Copy, Default)]
pub struct FirstResultAnswerer;

impl EvidenceAnswerer for FirstResultAnswerer {
    fn answer(&self, question: &str, context: &[Observation]) -> Option<String> {
        final_list(context).first().map(|r| extract(r, question))
    }
}

/// Trusts only results carrying a source tag and picks the one that best
/// overlaps the question.
#[derive(Debug, Clone, Copy, Default)]
pub struct SourceTagAnswerer;

impl EvidenceAnswerer for SourceTagAnswerer {
    fn answer(&self, question: &str, context: &[Observation]) -> Option<String> {
        let q = token_set(question);
        final_list(context)
            .iter()
            .filter(|r| r.source_entity.is_some())
            .map(|r| (token_set(&r.snippet).intersection(&q).count(), r))
            .max_by(|a, b| a.0.cmp(&b.0).then_with(|| b.1.link.cmp(&a.1.link)))
            .map(|(_, r)| extract(r, question))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCase {
    pub qa_id: String,
    pub question: String,
    pub gold: String,
    /// Observations in round order; distractors go into the last one.
    pub context: Vec<Observation>,
    pub distractors: Vec<SearchResult>,
}

/// Single-fact cases from multi-entity items: one per distinct scene entity,
/// keeping only the retrieved results from that entity that mention the
/// measure, with the fixture distractor pool for the measure.
pub fn fact_cases(env: &Environment, items: &[QAItem], config: &EnvConfig, rng_seed: u64) -> Vec<RobustnessCase> {
    let mut out = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for qa in items {
        let Some(attribute) = qa.template.as_ref().and_then(|t| t.attribute.clone()) else {
            continue;
        };
        let distractors = distractor_results(env.world(), &attribute);
        for id in &qa.required_entities {
            let Some(e) = env.world().entity(id) else { continue };
            let Some(m) = e.measure(&attribute) else { continue };
            if !seen.insert((id.clone(), attribute.clone())) {
                continue;
            }
            let name = e.display_name();
            let query = format!("{name} {attribute}");
            let mut rng = seed::rng(seed::derive(rng_seed, &[seed::label(id), seed::label(&attribute)]));
            let mut obs = env.text_search(&[query], config, &mut rng);
            let wanted = token_set(&attribute);
            for inv in &mut obs.per_call_results {
                inv.results.retain(|r| {
                    r.source_entity.as_deref() == Some(id.as_str()) && wanted.is_subset(&token_set(&r.snippet))
                });
            }
            let obs = Observation::from_results(obs.per_call_results, obs.elapsed_ms);
            if obs.results().next().is_none() {
                continue;
            }
            out.push(RobustnessCase {
                qa_id: format!("{}/{id}", qa.id),
                question: format!("What is the {attribute} of the {name}?"),
                gold: format_number(m.value),
                context: vec![obs],
                distractors: distractors.clone(),
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShuffleMode {
    /// This many seeded shuffles per case.
    Random(usize),
    /// Every ordering of the final list, each weighted equally.
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RobustnessError {
    #[error("precondition violated (k0_not_perfect): case {0} is wrong without distractors")]
    K0NotPerfect(String),
    #[error(transparent)]
    Distractors(#[from] crate::env::InsufficientDistractors),
    #[error("exhaustive enumeration of {0} results is too large")]
    TooManyOrderings(usize),
}

pub const DEFAULT_K_VALUES: [usize; 5] = [1, 3, 5, 7, 10];
pub const DEFAULT_SHUFFLES: usize = 10;
const MAX_EXHAUSTIVE: usize = 9;

/// Mean accuracy per K over cases and orderings.
pub fn robustness_protocol(
    answerer: &dyn EvidenceAnswerer,
    cases: &[RobustnessCase],
    k_values: &[usize],
    shuffles: ShuffleMode,
    judge: &dyn Judge,
    rng_seed: u64,
) -> Result<Vec<(usize, f64)>, RobustnessError> {
    for c in cases {
        let a = answerer.answer(&c.question, &c.context);
        if !judge.judge(&c.question, a.as_deref(), &c.gold).correct {
            return Err(RobustnessError::K0NotPerfect(c.qa_id.clone()));
        }
    }
    let mut out = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let mut hits = 0.0;
        let mut total = 0.0;
        for c in cases {
            let last = c.context.last().cloned().unwrap_or_default();
            let (injected, len) = append_distractors(&last, &c.distractors, k)?;
            let orders: Vec<Vec<usize>> = match shuffles {
                ShuffleMode::Random(n) => (0..n)
                    .map(|i| {
                        let mut o: Vec<usize> = (0..len).collect();
                        let s = seed::derive(rng_seed, &[seed::label(&c.qa_id), k as u64, i as u64]);
                        rand::seq::SliceRandom::shuffle(o.as_mut_slice(), &mut seed::rng(s));
                        o
                    })
                    .collect(),
                ShuffleMode::Exhaustive => {
                    if len > MAX_EXHAUSTIVE {
                        return Err(RobustnessError::TooManyOrderings(len));
                    }
                    (0..len).permutations(len).collect()
                }
            };
            for order in &orders {
                let mut perturbed = injected.clone();
                permute_final(&mut perturbed, order);
                let mut ctx = c.context.clone();
                match ctx.last_mut() {
                    Some(l) => *l = perturbed,
                    None => ctx.push(perturbed),
                }
                let a = answerer.answer(&c.question, &ctx);
                if judge.judge(&c.question, a.as_deref(), &c.gold).correct {
                    hits += 1.0;
                }
                total += 1.0;
            }
        }
        out.push((k, if total == 0.0 { 0.0 } else { hits / total }));
    }
    Ok(out)
}

/// A table emitted both as CSV and as aligned plain text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(headers: &[&str]) -> Self {
        Table { headers: headers.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let esc = |c: &String| {
            if c.contains([',', '"', '\n']) {
                format!("\"{}\"", c.replace('"', "\"\""))
            } else {
                c.clone()
            }
        };
        let mut out = String::new();
        for row in std::iter::once(&self.headers).chain(&self.rows) {
            out.push_str(&row.iter().map(esc).join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut widths: Vec<usize> = self.headers.iter().map(|h| h.chars().count()).collect();
        for row in &self.rows {
            for (i, c) in row.iter().enumerate() {
                if i < widths.len() {
                    widths[i] = widths[i].max(c.chars().count());
                }
            }
        }
        let line = |row: &Vec<String>| {
            row.iter()
                .enumerate()
                .map(|(i, c)| format!("{:<w$}", c, w = widths.get(i).copied().unwrap_or(0)))
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = line(&self.headers);
        out.push('\n');
        out.push_str(&widths.iter().map(|w| "-".repeat(*w)).join("  "));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }
}

/// Acc / Turns summary per policy, plus per-item rows.
pub fn bench_table(reports: &[BenchReport]) -> Table {
    let mut t = Table::new(&["policy", "n", "acc", "turns", "t_s", "tok_k", "cas"]);
    for r in reports {
        let a = &r.aggregate;
        t.push(vec![
            r.policy.clone(),
            a.n.to_string(),
            format!("{:.1}", a.acc * 100.0),
            format!("{:.2}", a.mean_turns),
            format!("{:.2}", a.mean_t_s),
            format!("{:.2}", a.mean_n_tok / 1000.0),
            format!("{:.3}", a.cas),
        ]);
    }
    t
}

pub fn records_table(records: &[BenchRecord]) -> Table {
    let mut t = Table::new(&["qa_id", "correct", "t_c", "t_s", "n_tok", "terminal", "cas"]);
    for r in records {
        t.push(vec![
            r.qa_id.clone(),
            r.correct.to_string(),
            r.t_c.to_string(),
            r.t_s.to_string(),
            r.n_tok.to_string(),
            serde_json::to_value(r.terminal_reason).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default(),
            format!("{:.3}", r.cas),
        ]);
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CasRow {
    pub method: String,
    pub tok_k: f64,
    pub tool: f64,
    /// Fraction in [0, 1].
    pub acc: f64,
}

pub fn cas_table(rows: &[CasRow]) -> Table {
    let mut t = Table::new(&["method", "tok_k", "tool", "acc", "cas"]);
    for r in rows {
        t.push(vec![
            r.method.clone(),
            format!("{:.1}", r.tok_k),
            format!("{:.2}", r.tool),
            format!("{:.1}", r.acc * 100.0),
            format!("{:.3}", cas(r.acc, r.tok_k, r.tool)),
        ]);
    }
    t
}

pub fn robustness_table(rows: &BTreeMap<String, Vec<(usize, f64)>>) -> Table {
    let mut t = Table::new(&["answerer", "k", "accuracy"]);
    for (name, per_k) in rows {
        for (k, acc) in per_k {
            t.push(vec![name.clone(), k.to_string(), format!("{acc:.4}")]);
        }
    }
    t
}

pub fn epoch_table(reports: &[crate::reward::EpochReport]) -> Table {
    let mut t = Table::new(&["epoch", "queries", "rollouts", "mean_reward", "acc", "positive", "positive_initial", "t_c_positive"]);
    for r in reports {
        t.push(vec![
            r.epoch.to_string(),
            r.queries.len().to_string(),
            r.rollouts.to_string(),
            format!("{:.4}", r.mean_total_reward),
            format!("{:.4}", r.accuracy),
            format!("{:.4}", r.positive_fraction),
            format!("{:.4}", r.positive_fraction_initial),
            r.mean_t_c_positive.map_or_else(|| "-".to_string(), |v| format!("{v:.2}")),
        ]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cas_rows() {
        assert!((cas(0.191, 2.6, 1.71) - 0.520).abs() < 1e-3);
        assert!((cas(0.579, 8.8, 2.61) - 2.232).abs() < 1e-3);
        assert_eq!(cas(0.0, 5.0, 3.0), 0.0);
    }

    #[test]
    fn default_judge_cases() {
        assert!(judge_answer("September 20, 2024", "september 20 2024").correct);
        assert!(judge_answer("120", "120.0").correct);
        assert!(!judge_answer("Paris", "London").correct);
        let none = DefaultJudge.judge("q", None, "x");
        assert!(!none.correct && none.extracted_final_answer.is_none());
    }

    #[test]
    fn wire_format_round_trip() {
        let v = judge_answer("Paris", "paris");
        let w = v.to_wire();
        assert_eq!(w.correct, "yes");
        let json = serde_json::to_string(&w).unwrap();
        assert!(json.contains("\"extracted_final_answer\":\"Paris\""));
        assert_eq!(JudgeVerdict::from_wire(&w).unwrap(), v);
        let bad = JudgeWire { extracted_final_answer: "None".into(), reasoning: String::new(), correct: "yes".into(), confidence: 50 };
        assert!(JudgeVerdict::from_wire(&bad).is_err());
    }

    #[test]
    fn tables() {
        let t = Table::new(&["a", "b"]);
        assert_eq!(t.to_csv(), "a,b\n");
        let rows = vec![CasRow { method: "m".into(), tok_k: 2.6, tool: 1.71, acc: 0.191 }];
        assert_eq!(cas_table(&rows).rows[0][4], "0.520");
    }

    #[test]
    fn fact_cases_start_perfect_and_tags_stay_perfect() {
        use crate::synth::synth_mosaic_corpus;
        use crate::world::demo_world;
        let world = std::sync::Arc::new(demo_world());
        let cfg = EnvConfig::training();
        let env = Environment::new(world.clone(), &cfg);
        let cases = fact_cases(&env, &synth_mosaic_corpus(&world, 10, 3), &cfg, 0);
        assert!(cases.len() >= 10);
        let first = robustness_protocol(&FirstResultAnswerer, &cases, &[0], ShuffleMode::Random(1), &DefaultJudge, 0);
        assert_eq!(first.unwrap(), vec![(0, 1.0)]);
        let tagged = robustness_protocol(&SourceTagAnswerer, &cases, &DEFAULT_K_VALUES, ShuffleMode::Random(5), &DefaultJudge, 0);
        assert!(tagged.unwrap().iter().all(|&(_, a)| a == 1.0));
    }
}

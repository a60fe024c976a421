//! Trajectory records, their accounting, and structural quality filters.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::env::{InvocationStatus, Observation};
use crate::schema::{parse_turn, FormatErrorKind, ToolInvocation, TurnBlock};
use crate::text::{self, normalize_answer, numbers_equal, parse_number};
use crate::world::WorldFixture;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalReason {
    Answer,
    BudgetExhausted,
    MaxTurns,
    FormatAbort,
}

/// One policy emission and what came back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub raw: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<TurnBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format_error: Option<crate::schema::FormatError>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<Observation>,
    /// True when the turn was a call that the environment executed.
    pub executed: bool,
}

impl TurnRecord {
    pub fn executed_call(&self) -> Option<&ToolInvocation> {
        if self.executed {
            self.action.as_ref().and_then(TurnBlock::invocation)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub qa_id: String,
    pub question: String,
    pub rng_seed: u64,
    pub turns: Vec<TurnRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_answer: Option<String>,
    pub terminal_reason: TerminalReason,
    pub t_c: usize,
    pub t_s: usize,
    pub n_tok: usize,
}

impl Trajectory {
    pub fn executed_calls(&self) -> impl Iterator<Item = (&ToolInvocation, Option<&Observation>)> {
        self.turns
            .iter()
            .filter_map(|t| t.executed_call().map(|c| (c, t.observation.as_ref())))
    }

    /// Observation of the last executed call.
    pub fn final_observation(&self) -> Option<&Observation> {
        self.turns.iter().rev().find(|t| t.executed).and_then(|t| t.observation.as_ref())
    }

    pub fn has_format_error(&self) -> bool {
        self.turns.iter().any(|t| t.format_error.is_some())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trajectory serializes")
    }
}

pub trait Tokenizer: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accounting {
    pub t_c: usize,
    pub t_s: usize,
    pub n_tok: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("misaligned records at turn {turn}: {detail}")]
pub struct MisalignedRecords {
    pub turn: usize,
    pub detail: String,
}

/// Rounds, invocations and tokens (policy text plus observation text).
pub fn account(turns: &[TurnRecord], tokenizer: &dyn Tokenizer) -> Result<Accounting, MisalignedRecords> {
    let mut acc = Accounting { t_c: 0, t_s: 0, n_tok: 0 };
    for (i, t) in turns.iter().enumerate() {
        let is_call = t.action.as_ref().is_some_and(|a| a.invocation().is_some());
        if t.executed && !is_call {
            return Err(MisalignedRecords { turn: i, detail: "executed turn is not a call".into() });
        }
        if t.executed && t.observation.is_none() {
            return Err(MisalignedRecords { turn: i, detail: "executed call has no observation".into() });
        }
        if t.action.is_some() && t.format_error.is_some() {
            return Err(MisalignedRecords { turn: i, detail: "turn is both parsed and invalid".into() });
        }
        if let Some(call) = t.executed_call() {
            acc.t_c += 1;
            acc.t_s += call.request_count();
        }
        acc.n_tok += tokenizer.count(&t.raw);
        if let Some(o) = &t.observation {
            acc.n_tok += tokenizer.count(&o.render());
        }
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailCode {
    MissingReason,
    MissingAction,
    MalformedJson,
    MultipleActions,
    BadRegion,
    EmptyQuery,
    DuplicateEvidence,
    UngroundedAnswer,
    AvoidableSerialization,
    ImageOnly,
}

impl FailCode {
    pub fn code(&self) -> &'static str {
        match self {
            FailCode::MissingReason => "missing_reason",
            FailCode::MissingAction => "missing_action",
            FailCode::MalformedJson => "malformed_json",
            FailCode::MultipleActions => "multiple_actions",
            FailCode::BadRegion => "bad_region",
            FailCode::EmptyQuery => "empty_query",
            FailCode::DuplicateEvidence => "duplicate_evidence",
            FailCode::UngroundedAnswer => "ungrounded_answer",
            FailCode::AvoidableSerialization => "avoidable_serialization",
            FailCode::ImageOnly => "image_only",
        }
    }
}

impl From<FormatErrorKind> for FailCode {
    fn from(k: FormatErrorKind) -> Self {
        match k {
            FormatErrorKind::MissingReason => FailCode::MissingReason,
            FormatErrorKind::MissingAction => FailCode::MissingAction,
            FormatErrorKind::MalformedJson => FailCode::MalformedJson,
            FormatErrorKind::MultipleActions => FailCode::MultipleActions,
            FormatErrorKind::BadRegion => FailCode::BadRegion,
            FormatErrorKind::EmptyQuery => FailCode::EmptyQuery,
        }
    }
}

pub type Check = Result<(), FailCode>;

/// Re-parses every raw turn.
pub fn check_format(traj: &Trajectory) -> Check {
    for t in &traj.turns {
        parse_turn(&t.raw).map_err(|e| FailCode::from(e.kind))?;
    }
    Ok(())
}

/// Fails when two different calls retrieved the same snippet.
pub fn check_info_gain(traj: &Trajectory) -> Check {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (round, (_, obs)) in traj.executed_calls().enumerate() {
        let Some(obs) = obs else { continue };
        for r in obs.results() {
            let key = text::collapse(&r.snippet);
            match seen.get(&key) {
                Some(&prev) if prev != round => return Err(FailCode::DuplicateEvidence),
                Some(_) => {}
                None => {
                    seen.insert(key, round);
                }
            }
        }
    }
    Ok(())
}

fn observed_text(traj: &Trajectory) -> String {
    traj.turns
        .iter()
        .filter_map(|t| t.observation.as_ref())
        .flat_map(|o| o.results().map(|r| format!("{} {}", r.title, r.snippet)))
        .collect::<Vec<_>>()
        .join(" \n ")
}

/// Entities surfaced by region lookups (with multiplicity) and by any
/// result (distinct).
fn observed_entities(traj: &Trajectory) -> (Vec<String>, BTreeSet<String>) {
    let mut by_region = Vec::new();
    let mut distinct = BTreeSet::new();
    for (call, obs) in traj.executed_calls() {
        let Some(obs) = obs else { continue };
        let regioned = matches!(call, ToolInvocation::ImageSearch { regions: Some(_), .. });
        for inv in &obs.per_call_results {
            for r in &inv.results {
                if let Some(id) = &r.source_entity {
                    distinct.insert(id.clone());
                    if regioned && inv.status == InvocationStatus::Ok {
                        by_region.push(id.clone());
                    }
                }
            }
        }
    }
    (by_region, distinct)
}

fn aggregate_matches(world: &WorldFixture, ids: &[&String], target: f64) -> bool {
    let mut names: BTreeSet<&str> = BTreeSet::new();
    for id in ids {
        if let Some(e) = world.entity(id) {
            names.extend(e.measures.iter().map(|m| m.name.as_str()));
        }
    }
    names.into_iter().any(|name| {
        let mut sum = 0.0;
        for id in ids {
            match world.entity(id).and_then(|e| e.measure(name)) {
                Some(m) => sum += m.value,
                None => return false,
            }
        }
        numbers_equal(sum, target)
    })
}

/// The answer must appear in observation text, be a list of such parts,
/// or equal a sum of one fixture measure over the observed entities.
pub fn check_grounded(traj: &Trajectory, world: &WorldFixture) -> Check {
    let Some(answer) = traj.final_answer.as_deref().filter(|_| traj.terminal_reason == TerminalReason::Answer) else {
        return Err(FailCode::UngroundedAnswer);
    };
    let norm = normalize_answer(answer);
    if norm.is_empty() {
        return Err(FailCode::UngroundedAnswer);
    }
    let haystack = format!(" {} ", normalize_answer(&observed_text(traj)));
    let contains = |needle: &str| haystack.contains(&format!(" {needle} "));
    if contains(&norm) {
        return Ok(());
    }
    let parts: Vec<String> = answer.split(',').map(normalize_answer).filter(|p| !p.is_empty()).collect();
    if parts.len() > 1 && parts.iter().all(|p| contains(p)) {
        return Ok(());
    }
    if let Some(target) = parse_number(answer) {
        let (by_region, distinct) = observed_entities(traj);
        let by_region: Vec<&String> = by_region.iter().collect();
        let distinct: Vec<&String> = distinct.iter().collect();
        if (!by_region.is_empty() && aggregate_matches(world, &by_region, target))
            || (!distinct.is_empty() && aggregate_matches(world, &distinct, target))
        {
            return Ok(());
        }
    }
    Err(FailCode::UngroundedAnswer)
}

/// From round 2 on, every text query needs a token that earlier
/// observations revealed and the question did not contain.
pub fn check_sequential_shortcut(traj: &Trajectory) -> Check {
    let question = text::token_set(&traj.question);
    let mut revealed: BTreeSet<String> = BTreeSet::new();
    for (round, (call, obs)) in traj.executed_calls().enumerate() {
        if round >= 1 {
            if let ToolInvocation::TextSearch { queries } = call {
                for q in queries {
                    let fresh = text::tokens(q).into_iter().any(|t| revealed.contains(&t) && !question.contains(&t));
                    if !fresh {
                        return Err(FailCode::AvoidableSerialization);
                    }
                }
            }
        }
        if let Some(obs) = obs {
            for r in obs.results() {
                revealed.extend(text::tokens(&r.title));
                revealed.extend(text::tokens(&r.snippet));
            }
        }
    }
    Ok(())
}

/// Fails a grounded trajectory that never used text search.
pub fn check_image_only(traj: &Trajectory, world: &WorldFixture) -> Check {
    let mut calls = traj.executed_calls().peekable();
    if calls.peek().is_none() {
        return Ok(());
    }
    let image_only = calls.all(|(c, _)| matches!(c, ToolInvocation::ImageSearch { .. }));
    if image_only && check_grounded(traj, world).is_ok() {
        Err(FailCode::ImageOnly)
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{InvocationResult, SearchResult};
    use crate::schema::{render_turn, Region};

    fn result(snippet: &str, entity: Option<&str>) -> SearchResult {
        SearchResult {
            title: entity.unwrap_or("t").into(),
            snippet: snippet.into(),
            link: "l".into(),
            source_entity: entity.map(str::to_string),
        }
    }

    fn call_turn(inv: ToolInvocation, results: Vec<Vec<SearchResult>>) -> TurnRecord {
        let block = TurnBlock::call("look", inv);
        let per = results
            .into_iter()
            .enumerate()
            .map(|(index, results)| InvocationResult { index, status: InvocationStatus::Ok, results })
            .collect();
        TurnRecord {
            raw: render_turn(&block),
            action: Some(block),
            format_error: None,
            observation: Some(Observation::from_results(per, 0)),
            executed: true,
        }
    }

    fn answer_turn(text: &str) -> TurnRecord {
        let block = TurnBlock::answer("done", text);
        TurnRecord { raw: render_turn(&block), action: Some(block), format_error: None, observation: None, executed: false }
    }

    fn traj(question: &str, turns: Vec<TurnRecord>) -> Trajectory {
        let acc = account(&turns, &WhitespaceTokenizer).unwrap();
        let final_answer = turns.last().and_then(|t| match &t.action {
            Some(TurnBlock { action: crate::schema::Action::Answer { text }, .. }) => Some(text.clone()),
            _ => None,
        });
        Trajectory {
            qa_id: "q".into(),
            question: question.into(),
            rng_seed: 0,
            terminal_reason: if final_answer.is_some() { TerminalReason::Answer } else { TerminalReason::MaxTurns },
            final_answer,
            turns,
            t_c: acc.t_c,
            t_s: acc.t_s,
            n_tok: acc.n_tok,
        }
    }

    fn text_call(qs: &[&str], results: Vec<Vec<SearchResult>>) -> TurnRecord {
        call_turn(ToolInvocation::TextSearch { queries: qs.iter().map(|s| s.to_string()).collect() }, results)
    }

    #[test]
    fn accounting_by_hand() {
        let t = traj("q", vec![text_call(&["a", "b", "c"], vec![vec![], vec![], vec![]]), answer_turn("x")]);
        assert_eq!((t.t_c, t.t_s), (1, 3));
        let t = traj("q", vec![answer_turn("x")]);
        assert_eq!((t.t_c, t.t_s), (0, 0));
        let r = Region::new(0.0, 0.0, 0.5, 1.0).unwrap();
        let img = || {
            call_turn(
                ToolInvocation::ImageSearch { image_id: "img_0".into(), regions: Some(vec![r, r]) },
                vec![vec![], vec![]],
            )
        };
        let t = traj("q", vec![img(), img(), answer_turn("x")]);
        assert_eq!((t.t_c, t.t_s), (2, 4));
    }

    #[test]
    fn misaligned_records_are_reported() {
        let mut turn = text_call(&["a"], vec![vec![]]);
        turn.observation = None;
        assert!(account(&[turn], &WhitespaceTokenizer).is_err());
    }

    #[test]
    fn format_checks() {
        let good = traj("q", vec![answer_turn("x")]);
        assert_eq!(check_format(&good), Ok(()));
        let mut bad = good.clone();
        bad.turns[0].raw = "<reason> </reason><answer>x</answer>".into();
        assert_eq!(check_format(&bad), Err(FailCode::MissingReason));
        bad.turns[0].raw = "<reason>r</reason><tool_call>{oops</tool_call>".into();
        assert_eq!(check_format(&bad), Err(FailCode::MalformedJson));
    }

    #[test]
    fn info_gain_compares_across_rounds_only() {
        let s = result("The Blue Jay has a wingspan of 40 cm.", Some("b"));
        let twice = traj(
            "q",
            vec![
                text_call(&["a"], vec![vec![s.clone()]]),
                text_call(&["b"], vec![vec![result("the blue jay  has a WINGSPAN of 40 cm.", None)]]),
            ],
        );
        assert_eq!(check_info_gain(&twice), Err(FailCode::DuplicateEvidence));
        let within = traj("q", vec![text_call(&["a", "a"], vec![vec![s.clone()], vec![s.clone()]])]);
        assert_eq!(check_info_gain(&within), Ok(()));
        let disjoint = traj("q", vec![text_call(&["a"], vec![vec![s]]), text_call(&["b"], vec![vec![result("other", None)]])]);
        assert_eq!(check_info_gain(&disjoint), Ok(()));
    }

    #[test]
    fn grounding_paths() {
        let w = crate::world::demo_world();
        let obs = vec![vec![result("Blue Jay, a bird", Some("bird_blue_jay"))], vec![result("Northern Cardinal, a bird", Some("bird_northern_cardinal"))]];
        let r = Region::new(0.0, 0.0, 0.5, 1.0).unwrap();
        let img = call_turn(ToolInvocation::ImageSearch { image_id: "img_0".into(), regions: Some(vec![r, r]) }, obs);
        // 40 + 30 wingspans
        assert_eq!(check_grounded(&traj("q", vec![img.clone(), answer_turn("70")]), &w), Ok(()));
        assert_eq!(check_grounded(&traj("q", vec![img.clone(), answer_turn("71")]), &w), Err(FailCode::UngroundedAnswer));
        assert_eq!(check_grounded(&traj("q", vec![img, answer_turn("BLUE JAY")]), &w), Ok(()));
        assert_eq!(check_grounded(&traj("q", vec![answer_turn("Paris")]), &w), Err(FailCode::UngroundedAnswer));
    }

    #[test]
    fn sequential_shortcut_uses_token_provenance() {
        let independent = traj(
            "What is the wingspan of each bird?",
            vec![
                text_call(&["Blue Jay wingspan"], vec![vec![result("The Blue Jay has a wingspan of 40 cm.", None)]]),
                text_call(&["Northern Cardinal wingspan"], vec![vec![]]),
            ],
        );
        assert_eq!(check_sequential_shortcut(&independent), Err(FailCode::AvoidableSerialization));
        let r = Region::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let dependent = traj(
            "What is the wingspan of the bird?",
            vec![
                call_turn(
                    ToolInvocation::ImageSearch { image_id: "img_0".into(), regions: Some(vec![r]) },
                    vec![vec![result("Blue Jay, a bird", Some("bird_blue_jay"))]],
                ),
                text_call(&["Blue Jay wingspan"], vec![vec![]]),
            ],
        );
        assert_eq!(check_sequential_shortcut(&dependent), Ok(()));
        assert_eq!(check_sequential_shortcut(&traj("q", vec![text_call(&["a"], vec![vec![]])])), Ok(()));
    }
}

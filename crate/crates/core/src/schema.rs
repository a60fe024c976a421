//! Turn grammar for grounded search.
//!
//! A policy turn is a `<reason>` block followed by exactly one action: a
//! `<tool_call>` carrying a JSON object, or an `<answer>` block.
//!
//! ```text
//! <reason>two birds, ground both</reason>
//! <tool_call>{"name": "image_search", "arguments": {"image_id": "img_0", "area": [[0.0, 0.0, 0.5, 1.0]]}}</tool_call>
//! ```
//!
//! Parsing is total: anything that does not conform yields a classified
//! [`FormatError`], which downstream becomes the format penalty.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::fmt;

pub const REASON_OPEN: &str = "<reason>";
pub const REASON_CLOSE: &str = "</reason>";
pub const TOOL_OPEN: &str = "<tool_call>";
pub const TOOL_CLOSE: &str = "</tool_call>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

pub const IMAGE_SEARCH: &str = "image_search";
pub const TEXT_SEARCH: &str = "text_search";

const TAGS: [&str; 6] = [
    REASON_OPEN,
    REASON_CLOSE,
    TOOL_OPEN,
    TOOL_CLOSE,
    ANSWER_OPEN,
    ANSWER_CLOSE,
];

/// Normalized bounding box, fractions of image width (x) and height (y).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Region {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, FormatError> {
        let r = Region { x1, y1, x2, y2 };
        if r.is_valid() {
            Ok(r)
        } else {
            Err(FormatError::new(
                FormatErrorKind::BadRegion,
                format!("invalid region [{x1}, {y1}, {x2}, {y2}]"),
            ))
        }
    }

    /// Both bounds are inclusive: `[0, 0, 1, 1]` is the whole image.
    pub fn is_valid(&self) -> bool {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        in_unit(self.x1)
            && in_unit(self.y1)
            && in_unit(self.x2)
            && in_unit(self.y2)
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn intersection(&self, other: &Region) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &Region) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tool", rename_all = "snake_case")]
pub enum ToolInvocation {
    ImageSearch {
        image_id: String,
        regions: Option<Vec<Region>>,
    },
    TextSearch {
        queries: Vec<String>,
    },
}

impl ToolInvocation {
    /// Backend requests this call issues: one per region or query, and one
    /// for a whole-image search.
    pub fn request_count(&self) -> usize {
        match self {
            ToolInvocation::ImageSearch { regions: None, .. } => 1,
            ToolInvocation::ImageSearch {
                regions: Some(r), ..
            } => r.len(),
            ToolInvocation::TextSearch { queries } => queries.len(),
        }
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        match self {
            ToolInvocation::ImageSearch { image_id, regions } => {
                if image_id.trim().is_empty() {
                    return Err(FormatError::new(
                        FormatErrorKind::MalformedJson,
                        "image_id is empty",
                    ));
                }
                if let Some(regions) = regions {
                    if regions.is_empty() {
                        return Err(FormatError::new(
                            FormatErrorKind::BadRegion,
                            "area is present but lists no region",
                        ));
                    }
                    if let Some(bad) = regions.iter().find(|r| !r.is_valid()) {
                        return Err(FormatError::new(
                            FormatErrorKind::BadRegion,
                            format!("invalid region {:?}", bad.as_array()),
                        ));
                    }
                }
                Ok(())
            }
            ToolInvocation::TextSearch { queries } => {
                if queries.is_empty() {
                    return Err(FormatError::new(
                        FormatErrorKind::EmptyQuery,
                        "input lists no query",
                    ));
                }
                if queries.iter().any(|q| q.trim().is_empty()) {
                    return Err(FormatError::new(
                        FormatErrorKind::EmptyQuery,
                        "input contains a blank query",
                    ));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Action {
    Call { invocation: ToolInvocation },
    Answer { text: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnBlock {
    pub reason: String,
    pub action: Action,
}

impl TurnBlock {
    pub fn call(reason: impl Into<String>, invocation: ToolInvocation) -> Self {
        TurnBlock {
            reason: reason.into(),
            action: Action::Call { invocation },
        }
    }

    pub fn answer(reason: impl Into<String>, text: impl Into<String>) -> Self {
        TurnBlock {
            reason: reason.into(),
            action: Action::Answer { text: text.into() },
        }
    }

    pub fn invocation(&self) -> Option<&ToolInvocation> {
        match &self.action {
            Action::Call { invocation } => Some(invocation),
            Action::Answer { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        if self.reason.trim().is_empty() {
            return Err(FormatError::new(
                FormatErrorKind::MissingReason,
                "reason block is empty",
            ));
        }
        if contains_tag(&self.reason) {
            return Err(FormatError::new(
                FormatErrorKind::MalformedJson,
                "reason contains a block delimiter",
            ));
        }
        match &self.action {
            Action::Call { invocation } => invocation.validate(),
            Action::Answer { text } if contains_tag(text) => Err(FormatError::new(
                FormatErrorKind::MalformedJson,
                "answer contains a block delimiter",
            )),
            Action::Answer { .. } => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatErrorKind {
    MissingReason,
    MissingAction,
    MalformedJson,
    MultipleActions,
    BadRegion,
    EmptyQuery,
}

impl FormatErrorKind {
    pub fn code(&self) -> &'static str {
        match self {
            FormatErrorKind::MissingReason => "missing_reason",
            FormatErrorKind::MissingAction => "missing_action",
            FormatErrorKind::MalformedJson => "malformed_json",
            FormatErrorKind::MultipleActions => "multiple_actions",
            FormatErrorKind::BadRegion => "bad_region",
            FormatErrorKind::EmptyQuery => "empty_query",
        }
    }
}

impl fmt::Display for FormatErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{kind}: {detail}")]
pub struct FormatError {
    pub kind: FormatErrorKind,
    pub detail: String,
}

impl FormatError {
    pub fn new(kind: FormatErrorKind, detail: impl Into<String>) -> Self {
        FormatError {
            kind,
            detail: detail.into(),
        }
    }
}

fn contains_tag(s: &str) -> bool {
    TAGS.iter().any(|t| s.contains(t))
}

/// A delimited block located in raw text.
struct Block<'a> {
    start: usize,
    body: &'a str,
}

/// Finds every `open ... close` block. An opener without its closer is
/// reported as `Err(start)`.
fn find_blocks<'a>(raw: &'a str, open: &str, close: &str) -> Result<Vec<Block<'a>>, usize> {
    let mut out = Vec::new();
    let mut cursor = 0;
    while let Some(rel) = raw[cursor..].find(open) {
        let start = cursor + rel;
        let body_start = start + open.len();
        match raw[body_start..].find(close) {
            Some(end_rel) => {
                out.push(Block {
                    start,
                    body: &raw[body_start..body_start + end_rel],
                });
                cursor = body_start + end_rel + close.len();
            }
            None => return Err(start),
        }
    }
    Ok(out)
}

pub fn parse_turn(raw: &str) -> Result<TurnBlock, FormatError> {
    let reasons = find_blocks(raw, REASON_OPEN, REASON_CLOSE).map_err(|_| {
        FormatError::new(FormatErrorKind::MissingReason, "unterminated reason block")
    })?;
    let calls = find_blocks(raw, TOOL_OPEN, TOOL_CLOSE).map_err(|_| {
        FormatError::new(FormatErrorKind::MalformedJson, "unterminated tool_call block")
    })?;
    let answers = find_blocks(raw, ANSWER_OPEN, ANSWER_CLOSE).map_err(|_| {
        FormatError::new(FormatErrorKind::MalformedJson, "unterminated answer block")
    })?;

    if calls.len() + answers.len() > 1 {
        return Err(FormatError::new(
            FormatErrorKind::MultipleActions,
            format!(
                "{} tool_call and {} answer blocks in one turn",
                calls.len(),
                answers.len()
            ),
        ));
    }
    let action_start = calls.first().or(answers.first()).map(|b| b.start);

    let reason = match reasons.first() {
        Some(r) if action_start.is_none_or(|a| r.start < a) => r.body,
        Some(_) => {
            return Err(FormatError::new(
                FormatErrorKind::MissingReason,
                "action precedes its reason block",
            ))
        }
        None => {
            return Err(FormatError::new(
                FormatErrorKind::MissingReason,
                "no reason block",
            ))
        }
    };
    if reasons.len() > 1 {
        return Err(FormatError::new(
            FormatErrorKind::MissingReason,
            "more than one reason block",
        ));
    }

    let action = if let Some(call) = calls.first() {
        Action::Call {
            invocation: parse_tool_json(call.body)?,
        }
    } else if let Some(answer) = answers.first() {
        Action::Answer {
            text: answer.body.to_string(),
        }
    } else {
        return Err(FormatError::new(
            FormatErrorKind::MissingAction,
            "no tool_call or answer block",
        ));
    };

    let turn = TurnBlock {
        reason: reason.to_string(),
        action,
    };
    turn.validate()?;
    Ok(turn)
}

fn malformed(detail: impl Into<String>) -> FormatError {
    FormatError::new(FormatErrorKind::MalformedJson, detail)
}

fn parse_tool_json(body: &str) -> Result<ToolInvocation, FormatError> {
    let value: Value =
        serde_json::from_str(body.trim()).map_err(|e| malformed(format!("tool_call JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| malformed("tool_call is not a JSON object"))?;
    let name = obj
        .get("name")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("tool_call lacks a string `name`"))?;
    let args = obj
        .get("arguments")
        .and_then(Value::as_object)
        .ok_or_else(|| malformed("tool_call lacks an `arguments` object"))?;

    let invocation = match name {
        IMAGE_SEARCH => {
            let image_id = args
                .get("image_id")
                .and_then(Value::as_str)
                .ok_or_else(|| malformed("image_search requires a string `image_id`"))?
                .to_string();
            let regions = match args.get("area") {
                None | Some(Value::Null) => None,
                Some(Value::Array(items)) => Some(
                    items
                        .iter()
                        .map(parse_region)
                        .collect::<Result<Vec<_>, _>>()?,
                ),
                Some(_) => return Err(malformed("`area` must be a list of boxes")),
            };
            ToolInvocation::ImageSearch { image_id, regions }
        }
        TEXT_SEARCH => {
            let input = args
                .get("input")
                .and_then(Value::as_array)
                .ok_or_else(|| malformed("text_search requires a list `input`"))?;
            let queries = input
                .iter()
                .map(|q| {
                    q.as_str()
                        .map(str::to_string)
                        .ok_or_else(|| malformed("`input` entries must be strings"))
                })
                .collect::<Result<Vec<_>, _>>()?;
            ToolInvocation::TextSearch { queries }
        }
        other => return Err(malformed(format!("unknown tool `{other}`"))),
    };
    invocation.validate()?;
    Ok(invocation)
}

fn parse_region(v: &Value) -> Result<Region, FormatError> {
    let items = v
        .as_array()
        .ok_or_else(|| malformed("each area entry must be a list [x1, y1, x2, y2]"))?;
    if items.len() != 4 {
        return Err(FormatError::new(
            FormatErrorKind::BadRegion,
            format!("box has {} coordinates, expected 4", items.len()),
        ));
    }
    let mut c = [0.0; 4];
    for (slot, item) in c.iter_mut().zip(items) {
        *slot = item
            .as_f64()
            .ok_or_else(|| malformed("box coordinates must be numbers"))?;
    }
    Region::new(c[0], c[1], c[2], c[3])
}

#[derive(Serialize)]
struct WireCall<'a, A: Serialize> {
    name: &'a str,
    arguments: A,
}

#[derive(Serialize)]
struct WireImageArgs<'a> {
    image_id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    area: Option<Vec<[f64; 4]>>,
}

#[derive(Serialize)]
struct WireTextArgs<'a> {
    input: &'a [String],
}

/// JSON body of a `<tool_call>` block, keys in prompt order.
pub fn render_invocation(invocation: &ToolInvocation) -> String {
    let json = match invocation {
        ToolInvocation::ImageSearch { image_id, regions } => serde_json::to_string(&WireCall {
            name: IMAGE_SEARCH,
            arguments: WireImageArgs {
                image_id,
                area: regions
                    .as_ref()
                    .map(|rs| rs.iter().map(Region::as_array).collect()),
            },
        }),
        ToolInvocation::TextSearch { queries } => serde_json::to_string(&WireCall {
            name: TEXT_SEARCH,
            arguments: WireTextArgs { input: queries },
        }),
    };
    json.expect("tool call serialization is infallible")
}

pub fn render_turn(turn: &TurnBlock) -> String {
    let action = match &turn.action {
        Action::Call { invocation } => {
            format!("{TOOL_OPEN}{}{TOOL_CLOSE}", render_invocation(invocation))
        }
        Action::Answer { text } => format!("{ANSWER_OPEN}{text}{ANSWER_CLOSE}"),
    };
    format!("{REASON_OPEN}{}{REASON_CLOSE}\n{action}", turn.reason)
}

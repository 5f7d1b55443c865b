//! The thinking markup: a closed, XML-like tag vocabulary for thought,
//! action calls, runtime results and the final answer.
//!
//! ```text
//! <think>prose
//! PLAN: calc_eval {"expr":"2+3"} -> 5</think>
//! <act id="1" name="calc_eval" scope="global">{"expr":"2+3"}</act>
//! <result id="1" status="ok">5</result>
//! <think>done</think>
//! <answer>5</answer>
//! ```
//!
//! Turns are not delimited explicitly. A maximal run of `<result>` elements
//! is a runtime turn, a maximal run of the other three is an assistant turn.
//! All text positions use `&lt; &gt; &amp;` entity escaping.

mod escape;
mod generate;
mod mutate;
mod parse;
mod serialize;
mod validate;

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

pub use escape::{escape_text, is_neutralized, unescape_lossy};
pub use generate::random_trajectory;
pub use mutate::{mutate, Draft};
pub use parse::{parse, parse_bytes, Parsed, MAX_DOCUMENT_BYTES};
pub use serialize::{render_items, render_result, serialize, serialize_with_spans};
pub use validate::{check_structure, validate};

/// Maximum length of an action name.
pub const MAX_NAME_LEN: usize = 64;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("document is {len} bytes, limit is {MAX_DOCUMENT_BYTES}")]
    Oversize { len: usize },
    #[error("document is not valid UTF-8")]
    Encoding,
    #[error("trajectory breaks an invariant: {0}")]
    InvalidTrajectory(String),
    #[error("cannot synthesize {0:?} for this trajectory")]
    UnsupportedKind(ViolationKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TagName {
    Think,
    Act,
    Result,
    Answer,
}

impl TagName {
    pub const ALL: [TagName; 4] = [TagName::Think, TagName::Act, TagName::Result, TagName::Answer];

    pub fn as_str(self) -> &'static str {
        match self {
            TagName::Think => "think",
            TagName::Act => "act",
            TagName::Result => "result",
            TagName::Answer => "answer",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == name)
    }
}

/// Byte offsets `[start, end)` into a document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub const fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// Source spans of every parsed item, indexed `[turn][item]`.
pub type SpanMap = Vec<Vec<Span>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Scope {
    Global,
    Local,
}

impl Scope {
    pub fn attr(self) -> &'static str {
        match self {
            Scope::Global => "global",
            Scope::Local => "local",
        }
    }

    pub fn from_attr(value: &str) -> Option<Self> {
        match value {
            "global" => Some(Scope::Global),
            "local" => Some(Scope::Local),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ResultStatus {
    Ok,
    Error,
    Timeout,
    Denied,
}

impl ResultStatus {
    pub fn attr(self) -> &'static str {
        match self {
            ResultStatus::Ok => "ok",
            ResultStatus::Error => "error",
            ResultStatus::Timeout => "timeout",
            ResultStatus::Denied => "denied",
        }
    }

    pub fn from_attr(value: &str) -> Option<Self> {
        match value {
            "ok" => Some(ResultStatus::Ok),
            "error" => Some(ResultStatus::Error),
            "timeout" => Some(ResultStatus::Timeout),
            "denied" => Some(ResultStatus::Denied),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    User,
    Assistant,
    Runtime,
}

/// A scalar action argument.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArgValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

impl ArgValue {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            ArgValue::Str(s) => Some(s),
            _ => None,
        }
    }

    fn from_json(value: &serde_json::Value) -> Option<Self> {
        use serde_json::Value;
        match value {
            Value::Bool(b) => Some(ArgValue::Bool(*b)),
            Value::Number(n) => n
                .as_i64()
                .map(ArgValue::Int)
                .or_else(|| n.as_f64().map(ArgValue::Float)),
            Value::String(s) => Some(ArgValue::Str(s.clone())),
            _ => None,
        }
    }

    pub fn is_finite(&self) -> bool {
        !matches!(self, ArgValue::Float(f) if !f.is_finite())
    }
}

impl From<&str> for ArgValue {
    fn from(s: &str) -> Self {
        ArgValue::Str(s.to_string())
    }
}

impl From<String> for ArgValue {
    fn from(s: String) -> Self {
        ArgValue::Str(s)
    }
}

impl From<i64> for ArgValue {
    fn from(v: i64) -> Self {
        ArgValue::Int(v)
    }
}

impl From<f64> for ArgValue {
    fn from(v: f64) -> Self {
        ArgValue::Float(v)
    }
}

impl From<bool> for ArgValue {
    fn from(v: bool) -> Self {
        ArgValue::Bool(v)
    }
}

/// Action arguments; `BTreeMap` keeps keys sorted, which makes the JSON form canonical.
pub type Args = BTreeMap<String, ArgValue>;

/// Canonical text of an argument map: compact JSON, keys sorted.
///
/// Non-finite floats have no JSON form and render as `null`; [`validate`]
/// reports them.
pub fn canonical_args(args: &Args) -> String {
    serde_json::to_string(args).unwrap_or_else(|_| "{}".to_string())
}

/// Parses a JSON object of scalars into canonical arguments.
pub fn parse_args(text: &str) -> Option<Args> {
    let value: serde_json::Value = serde_json::from_str(text).ok()?;
    args_from_json(&value)
}

fn args_from_json(value: &serde_json::Value) -> Option<Args> {
    let obj = value.as_object()?;
    obj.iter()
        .map(|(k, v)| ArgValue::from_json(v).map(|v| (k.clone(), v)))
        .collect()
}

/// `[a-z][a-z0-9_]*`, at most 64 bytes.
pub fn is_identifier(name: &str) -> bool {
    let bytes = name.as_bytes();
    !bytes.is_empty()
        && bytes.len() <= MAX_NAME_LEN
        && bytes[0].is_ascii_lowercase()
        && bytes
            .iter()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || *b == b'_')
}

/// A machine-checkable intent line inside a think block:
/// `PLAN: name {args} -> expected`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanDecl {
    pub action_name: String,
    pub args_digest: String,
    pub expected: String,
}

impl PlanDecl {
    pub fn new(action_name: &str, args: &Args, expected: &str) -> Self {
        Self {
            action_name: action_name.to_string(),
            args_digest: canonical_args(args),
            expected: expected.split_whitespace().collect::<Vec<_>>().join(" "),
        }
    }

    pub fn line(&self) -> String {
        let mut line = alloc::format!("PLAN: {} {}", self.action_name, self.args_digest);
        if !self.expected.is_empty() {
            line.push_str(" -> ");
            line.push_str(&self.expected);
        }
        line
    }

    /// Reads one line; anything not matching the plan syntax is prose.
    pub fn parse_line(line: &str) -> Option<Self> {
        let rest = line.trim().strip_prefix("PLAN:")?.trim_start();
        let name_len = rest.find(|c: char| c.is_whitespace() || c == '{').unwrap_or(rest.len());
        let (name, rest) = rest.split_at(name_len);
        if !is_identifier(name) {
            return None;
        }
        let rest = rest.trim_start();
        let mut stream = serde_json::Deserializer::from_str(rest).into_iter::<serde_json::Value>();
        let value = stream.next()?.ok()?;
        let args = args_from_json(&value)?;
        let tail = rest[stream.byte_offset()..].trim();
        let expected = if tail.is_empty() {
            ""
        } else {
            tail.strip_prefix("->")?.trim()
        };
        Some(Self::new(name, &args, expected))
    }
}

/// Free-form thought. Plan declarations are derived from the text, so the
/// two can never disagree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "ThinkRepr")]
pub struct ThinkBlock {
    text: String,
    declarations: Vec<PlanDecl>,
}

#[derive(Deserialize)]
struct ThinkRepr {
    text: String,
}

impl From<ThinkRepr> for ThinkBlock {
    fn from(repr: ThinkRepr) -> Self {
        ThinkBlock::new(repr.text)
    }
}

impl ThinkBlock {
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        let declarations = text.lines().filter_map(PlanDecl::parse_line).collect();
        Self { text, declarations }
    }

    /// Prose followed by one `PLAN:` line per declaration.
    pub fn with_plans(prose: &str, plans: &[PlanDecl]) -> Self {
        let mut text = String::from(prose);
        for plan in plans {
            if !text.is_empty() {
                text.push('\n');
            }
            text.push_str(&plan.line());
        }
        Self::new(text)
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn declarations(&self) -> &[PlanDecl] {
        &self.declarations
    }

    pub fn declares(&self, call: &ActionCall) -> bool {
        let digest = canonical_args(&call.args);
        self.declarations
            .iter()
            .any(|d| d.action_name == call.name && d.args_digest == digest)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionCall {
    pub id: u64,
    pub name: String,
    pub scope: Scope,
    pub args: Args,
}

impl ActionCall {
    pub fn new(id: u64, name: &str, scope: Scope, args: Args) -> Self {
        Self {
            id,
            name: name.to_string(),
            scope,
            args,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionResult {
    pub call_id: u64,
    pub status: ResultStatus,
    /// Decoded text; every serializer escapes it.
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerBlock {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Item {
    Think(ThinkBlock),
    Act(ActionCall),
    Result(ActionResult),
    Answer(AnswerBlock),
}

impl Item {
    pub fn tag(&self) -> TagName {
        match self {
            Item::Think(_) => TagName::Think,
            Item::Act(_) => TagName::Act,
            Item::Result(_) => TagName::Result,
            Item::Answer(_) => TagName::Answer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub items: Vec<Item>,
}

impl Turn {
    pub fn assistant(items: Vec<Item>) -> Self {
        Self {
            role: Role::Assistant,
            items,
        }
    }

    pub fn runtime(results: Vec<ActionResult>) -> Self {
        Self {
            role: Role::Runtime,
            items: results.into_iter().map(Item::Result).collect(),
        }
    }
}

/// One task episode.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub turns: Vec<Turn>,
}

impl Trajectory {
    pub fn new(task_id: impl Into<String>) -> Self {
        Self {
            task_id: task_id.into(),
            turns: Vec::new(),
        }
    }

    pub fn with_task_id(mut self, task_id: impl Into<String>) -> Self {
        self.task_id = task_id.into();
        self
    }

    /// True iff the last assistant turn ends in an answer.
    pub fn is_terminal(&self) -> bool {
        self.turns
            .iter()
            .rev()
            .find(|t| t.role == Role::Assistant)
            .and_then(|t| t.items.last())
            .is_some_and(|i| matches!(i, Item::Answer(_)))
    }

    pub fn items(&self) -> impl DoubleEndedIterator<Item = &Item> {
        self.turns.iter().flat_map(|t| t.items.iter())
    }

    pub fn calls(&self) -> impl Iterator<Item = &ActionCall> {
        self.items().filter_map(|i| match i {
            Item::Act(c) => Some(c),
            _ => None,
        })
    }

    pub fn results(&self) -> impl Iterator<Item = &ActionResult> {
        self.items().filter_map(|i| match i {
            Item::Result(r) => Some(r),
            _ => None,
        })
    }

    /// The final answer, if the trajectory is terminal.
    pub fn answer(&self) -> Option<&AnswerBlock> {
        if !self.is_terminal() {
            return None;
        }
        self.items().rev().find_map(|i| match i {
            Item::Answer(a) => Some(a),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationKind {
    UnclosedTag,
    UnknownTag,
    ActOutsideThinkTurn,
    MissingAnswer,
    DuplicateId,
    BadEscape,
    OrphanResult,
    EmptyAnswer,
}

impl ViolationKind {
    pub const ALL: [ViolationKind; 8] = [
        ViolationKind::UnclosedTag,
        ViolationKind::UnknownTag,
        ViolationKind::ActOutsideThinkTurn,
        ViolationKind::MissingAnswer,
        ViolationKind::DuplicateId,
        ViolationKind::BadEscape,
        ViolationKind::OrphanResult,
        ViolationKind::EmptyAnswer,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ViolationKind::UnclosedTag => "UNCLOSED_TAG",
            ViolationKind::UnknownTag => "UNKNOWN_TAG",
            ViolationKind::ActOutsideThinkTurn => "ACT_OUTSIDE_THINK_TURN",
            ViolationKind::MissingAnswer => "MISSING_ANSWER",
            ViolationKind::DuplicateId => "DUPLICATE_ID",
            ViolationKind::BadEscape => "BAD_ESCAPE",
            ViolationKind::OrphanResult => "ORPHAN_RESULT",
            ViolationKind::EmptyAnswer => "EMPTY_ANSWER",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == name)
    }
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub span: Span,
    pub note: String,
}

impl Violation {
    pub fn new(kind: ViolationKind, span: Span, note: impl Into<String>) -> Self {
        Self {
            kind,
            span,
            note: note.into(),
        }
    }
}

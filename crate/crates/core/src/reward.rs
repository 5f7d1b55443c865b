//! Reward components and their per-task composition.
//!
//! Every task kind is scored as `0.5 * format + 0.5 * other`, where the
//! second component depends on the kind: consistency for action tasks, a
//! rule check for reasoning tasks, and a learned preference for everything
//! else.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::protocol::{parse, Item, ResultStatus, Trajectory, Violation, ViolationKind};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("trajectory has no final answer")]
    NotTerminal,
    #[error("every label pair has identical features")]
    Degenerate,
    #[error("need at least 2 labels, got {0}")]
    TooFewLabels(usize),
    #[error("l2 must be positive and finite, got {0}")]
    InvalidL2(f64),
    #[error("{0} is required for this task kind")]
    MissingComponent(Component),
    #[error("{0} does not belong to this task kind")]
    ExtraComponent(Component),
    #[error("{0} value {1} is out of range")]
    OutOfRange(Component, f64),
    #[error("label compares a trajectory with itself")]
    SelfPair,
    #[error("model has {0} weights for {1} features")]
    ShapeMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskKind {
    Action,
    Reasoning,
    Other,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Action, TaskKind::Reasoning, TaskKind::Other];

    /// The reward components this kind is scored with.
    pub fn components(self) -> [Component; 2] {
        match self {
            TaskKind::Action => [Component::Format, Component::Consistency],
            TaskKind::Reasoning => [Component::Format, Component::Rule],
            TaskKind::Other => [Component::Format, Component::Preference],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Action => "ACTION",
            TaskKind::Reasoning => "REASONING",
            TaskKind::Other => "OTHER",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Format,
    Consistency,
    Rule,
    Preference,
}

impl Component {
    pub const ALL: [Component; 4] = [
        Component::Format,
        Component::Consistency,
        Component::Rule,
        Component::Preference,
    ];
}

impl core::fmt::Display for Component {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Component::Format => "format",
            Component::Consistency => "consistency",
            Component::Rule => "rule",
            Component::Preference => "preference",
        })
    }
}

pub fn penalty(kind: ViolationKind) -> f64 {
    match kind {
        ViolationKind::UnclosedTag => 0.4,
        ViolationKind::UnknownTag => 0.2,
        ViolationKind::ActOutsideThinkTurn => 0.2,
        ViolationKind::MissingAnswer => 0.3,
        ViolationKind::DuplicateId => 0.2,
        ViolationKind::BadEscape => 0.1,
        ViolationKind::OrphanResult => 0.2,
        ViolationKind::EmptyAnswer => 0.2,
    }
}

/// `max(0, 1 - total penalty)`.
pub fn format_reward(violations: &[Violation]) -> f64 {
    let total: f64 = violations.iter().map(|v| penalty(v.kind)).sum();
    (1.0 - total).max(0.0)
}

/// Calls that actually ran (have a non-denied result), each with whether
/// the nearest preceding think block declared it.
fn executed_calls(trajectory: &Trajectory) -> Vec<bool> {
    let ran: BTreeSet<u64> = trajectory
        .results()
        .filter(|r| r.status != ResultStatus::Denied)
        .map(|r| r.call_id)
        .collect();
    let mut last_think = None;
    let mut out = Vec::new();
    for item in trajectory.items() {
        match item {
            Item::Think(t) => last_think = Some(t),
            Item::Act(call) if ran.contains(&call.id) => {
                out.push(last_think.is_some_and(|t| t.declares(call)));
            }
            _ => {}
        }
    }
    out
}

/// The answer the results imply: the last successful payload, or `gold`
/// when no action succeeded.
fn expected_answer<'a>(trajectory: &'a Trajectory, gold: &'a str) -> &'a str {
    trajectory
        .results()
        .filter(|r| r.status == ResultStatus::Ok)
        .last()
        .map_or(gold, |r| r.payload.as_str())
}

fn answer_bit(trajectory: &Trajectory, gold: &str) -> Option<f64> {
    let answer = trajectory.answer()?;
    Some(if answer.text.trim() == expected_answer(trajectory, gold).trim() {
        1.0
    } else {
        0.0
    })
}

fn declared_fraction(executed: &[bool]) -> f64 {
    if executed.is_empty() {
        1.0
    } else {
        executed.iter().filter(|d| **d).count() as f64 / executed.len() as f64
    }
}

/// `0.5 * declared_fraction + 0.5 * answer_bit`.
pub fn consistency_oracle(trajectory: &Trajectory, gold: &str) -> Result<f64, RewardError> {
    let bit = answer_bit(trajectory, gold).ok_or(RewardError::NotTerminal)?;
    Ok(0.5 * declared_fraction(&executed_calls(trajectory)) + 0.5 * bit)
}

/// 1 on a trimmed exact match or when both sides are numbers within `numeric_tol`.
pub fn rule_reward(trajectory: &Trajectory, gold: &str, numeric_tol: f64) -> Result<f64, RewardError> {
    let answer = trajectory.answer().ok_or(RewardError::NotTerminal)?.text.trim();
    let gold = gold.trim();
    if answer == gold {
        return Ok(1.0);
    }
    let close = match (answer.parse::<f64>(), gold.parse::<f64>()) {
        (Ok(a), Ok(g)) => a.is_finite() && g.is_finite() && libm::fabs(a - g) <= numeric_tol,
        _ => false,
    };
    Ok(if close { 1.0 } else { 0.0 })
}

pub const FEATURE_NAMES: [&str; 6] = [
    "declared_fraction",
    "undeclared_count",
    "answer_consistent",
    "violation_count",
    "action_count",
    "length_kb",
];

pub type Features = [f64; 6];

/// A document under comparison together with the gold answer of its task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Candidate {
    pub id: String,
    pub document: String,
    pub gold: String,
}

impl Candidate {
    pub fn features(&self) -> Features {
        document_features(&self.document, &self.gold)
    }
}

pub fn features(trajectory: &Trajectory, violation_count: usize, doc_bytes: usize, gold: &str) -> Features {
    let executed = executed_calls(trajectory);
    let undeclared = executed.iter().filter(|d| !**d).count();
    [
        declared_fraction(&executed),
        undeclared as f64,
        answer_bit(trajectory, gold).unwrap_or(0.0),
        violation_count as f64,
        trajectory.calls().count() as f64,
        doc_bytes as f64 / 1024.0,
    ]
}

/// Features of a raw document. Unparseable input scores as a maximally
/// malformed empty trajectory.
pub fn document_features(document: &str, gold: &str) -> Features {
    match parse(document) {
        Ok(p) => features(&p.trajectory, p.violations.len(), document.len(), gold),
        Err(_) => features(&Trajectory::default(), ViolationKind::ALL.len(), document.len(), gold),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preferred {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LabelSource {
    Oracle,
    Human,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsistencyLabel {
    pub a: Candidate,
    pub b: Candidate,
    pub preferred: Preferred,
    pub source: LabelSource,
}

impl ConsistencyLabel {
    pub fn new(a: Candidate, b: Candidate, preferred: Preferred, source: LabelSource) -> Result<Self, RewardError> {
        if a == b {
            return Err(RewardError::SelfPair);
        }
        Ok(Self {
            a,
            b,
            preferred,
            source,
        })
    }

    pub fn winner_loser(&self) -> (&Candidate, &Candidate) {
        match self.preferred {
            Preferred::A => (&self.a, &self.b),
            Preferred::B => (&self.b, &self.a),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitMeta {
    pub iterations: usize,
    pub final_loss: f64,
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairwiseModel {
    pub feature_names: Vec<String>,
    pub weights: Vec<f64>,
    pub fit_meta: FitMeta,
}

impl Default for PairwiseModel {
    /// The all-zero model, which scores everything 0.5.
    fn default() -> Self {
        Self {
            feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            weights: alloc::vec![0.0; FEATURE_NAMES.len()],
            fit_meta: FitMeta {
                iterations: 0,
                final_loss: 0.0,
                loss_history: Vec::new(),
            },
        }
    }
}

impl PairwiseModel {
    pub fn check(&self) -> Result<(), RewardError> {
        if self.weights.len() != self.feature_names.len() || self.weights.len() != FEATURE_NAMES.len() {
            return Err(RewardError::ShapeMismatch(self.weights.len(), self.feature_names.len()));
        }
        Ok(())
    }

    pub fn score_features(&self, f: &Features) -> f64 {
        logistic(dot(&self.weights, f))
    }
}

pub fn score_pairwise(model: &PairwiseModel, candidate: &Candidate) -> f64 {
    model.score_features(&candidate.features())
}

fn dot(w: &[f64], f: &[f64]) -> f64 {
    w.iter().zip(f).map(|(a, b)| a * b).sum()
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-libm::fabs(x)))
}

fn pair_loss(w: &[f64], deltas: &[Features], l2: f64) -> f64 {
    let data: f64 = deltas.iter().map(|d| softplus(-dot(w, d))).sum();
    data + l2 * dot(w, w)
}

/// Fits weights by gradient descent with a backtracking line search, so the
/// recorded loss never increases.
pub fn fit_pairwise(labels: &[ConsistencyLabel], l2: f64, max_iter: usize) -> Result<PairwiseModel, RewardError> {
    if labels.len() < 2 {
        return Err(RewardError::TooFewLabels(labels.len()));
    }
    if !(l2 > 0.0 && l2.is_finite()) {
        return Err(RewardError::InvalidL2(l2));
    }
    let deltas: Vec<Features> = labels
        .iter()
        .map(|l| {
            let (win, lose) = l.winner_loser();
            let (fw, fl) = (win.features(), lose.features());
            core::array::from_fn(|i| fw[i] - fl[i])
        })
        .collect();
    fit_deltas(&deltas, l2, max_iter)
}

/// The optimizer behind [`fit_pairwise`], over precomputed feature
/// differences (preferred minus other).
pub fn fit_deltas(deltas: &[Features], l2: f64, max_iter: usize) -> Result<PairwiseModel, RewardError> {
    if deltas.iter().all(|d| d.iter().all(|x| *x == 0.0)) {
        return Err(RewardError::Degenerate);
    }
    let n = FEATURE_NAMES.len();
    let mut w = alloc::vec![0.0; n];
    let mut loss = pair_loss(&w, deltas, l2);
    let mut history = alloc::vec![loss];
    let mut step = 1.0;
    let mut iterations = 0;
    while iterations < max_iter {
        let mut grad: Vec<f64> = w.iter().map(|wi| 2.0 * l2 * wi).collect();
        for d in deltas {
            let s = logistic(-dot(&w, d));
            for (g, x) in grad.iter_mut().zip(d) {
                *g -= s * x;
            }
        }
        let gnorm2 = dot(&grad, &grad);
        if gnorm2 < 1e-20 {
            break;
        }
        iterations += 1;
        let mut accepted = false;
        while step > 1e-18 {
            let trial: Vec<f64> = w.iter().zip(&grad).map(|(wi, g)| wi - step * g).collect();
            let trial_loss = pair_loss(&trial, deltas, l2);
            if trial_loss <= loss - 0.5 * step * gnorm2 {
                w = trial;
                loss = trial_loss;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        history.push(loss);
        if !accepted {
            break;
        }
        step *= 2.0;
    }
    Ok(PairwiseModel {
        feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        weights: w,
        fit_meta: FitMeta {
            iterations,
            final_loss: loss,
            loss_history: history,
        },
    })
}

/// Component values offered for composition; `None` means absent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Parts {
    pub format: Option<f64>,
    pub consistency: Option<f64>,
    pub rule: Option<f64>,
    pub preference: Option<f64>,
}

impl Parts {
    pub fn get(&self, c: Component) -> Option<f64> {
        match c {
            Component::Format => self.format,
            Component::Consistency => self.consistency,
            Component::Rule => self.rule,
            Component::Preference => self.preference,
        }
    }

    pub fn set(&mut self, c: Component, value: Option<f64>) {
        let slot = match c {
            Component::Format => &mut self.format,
            Component::Consistency => &mut self.consistency,
            Component::Rule => &mut self.rule,
            Component::Preference => &mut self.preference,
        };
        *slot = value;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub kind: TaskKind,
    pub format: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub consistency: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rule: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub preference: Option<f64>,
    pub total: f64,
}

impl RewardBreakdown {
    /// The non-format component's value.
    pub fn secondary(&self) -> f64 {
        self.consistency.or(self.rule).or(self.preference).unwrap_or(0.0)
    }
}

pub const FORMAT_WEIGHT: f64 = 0.5;

pub fn compose(kind: TaskKind, parts: Parts) -> Result<RewardBreakdown, RewardError> {
    let required = kind.components();
    if let Some(extra) = Component::ALL
        .into_iter()
        .find(|c| !required.contains(c) && parts.get(*c).is_some())
    {
        return Err(RewardError::ExtraComponent(extra));
    }
    if let Some(missing) = required.into_iter().find(|c| parts.get(*c).is_none()) {
        return Err(RewardError::MissingComponent(missing));
    }
    for c in required {
        let v = parts.get(c).expect("checked present");
        let ok = match c {
            Component::Rule => v == 0.0 || v == 1.0,
            _ => (0.0..=1.0).contains(&v),
        };
        if !ok {
            return Err(RewardError::OutOfRange(c, v));
        }
    }
    let format = parts.format.expect("checked present");
    let other = parts.get(required[1]).expect("checked present");
    Ok(RewardBreakdown {
        kind,
        format,
        consistency: parts.consistency,
        rule: parts.rule,
        preference: parts.preference,
        total: FORMAT_WEIGHT * format + (1.0 - FORMAT_WEIGHT) * other,
    })
}

/// Where the non-format components come from.
#[derive(Debug, Clone, Copy)]
pub struct Scorers<'a> {
    /// `None` scores consistency with the oracle.
    pub consistency_model: Option<&'a PairwiseModel>,
    pub preference_model: Option<&'a PairwiseModel>,
    pub numeric_tol: f64,
}

impl Default for Scorers<'_> {
    fn default() -> Self {
        Self {
            consistency_model: None,
            preference_model: None,
            numeric_tol: 1e-6,
        }
    }
}

/// Scores a document end to end. A document without an answer earns zero
/// in the answer-dependent component; unparseable input scores zero.
pub fn score_document(kind: TaskKind, document: &str, gold: &str, scorers: &Scorers<'_>) -> RewardBreakdown {
    let Ok(parsed) = parse(document) else {
        let mut parts = Parts {
            format: Some(0.0),
            ..Parts::default()
        };
        parts.set(kind.components()[1], Some(0.0));
        return compose(kind, parts).expect("zero parts are valid");
    };
    let traj = &parsed.trajectory;
    let f = || features(traj, parsed.violations.len(), document.len(), gold);
    let mut parts = Parts {
        format: Some(format_reward(&parsed.violations)),
        ..Parts::default()
    };
    let other = match kind {
        TaskKind::Action => match scorers.consistency_model {
            Some(_) if !traj.is_terminal() => 0.0,
            Some(m) => m.score_features(&f()),
            None => consistency_oracle(traj, gold).unwrap_or(0.0),
        },
        TaskKind::Reasoning => rule_reward(traj, gold, scorers.numeric_tol).unwrap_or(0.0),
        TaskKind::Other if !traj.is_terminal() => 0.0,
        TaskKind::Other => scorers.preference_model.map_or(0.5, |m| m.score_features(&f())),
    };
    parts.set(kind.components()[1], Some(other));
    compose(kind, parts).expect("scores are in range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{ActionCall, ActionResult, AnswerBlock, Args, PlanDecl, Scope, Span, ThinkBlock, Turn};
    use alloc::vec;

    fn v(kinds: &[ViolationKind]) -> Vec<Violation> {
        kinds.iter().map(|k| Violation::new(*k, Span::new(0, 0), "")).collect()
    }

    fn calc(id: u64, expr: &str) -> ActionCall {
        let mut args = Args::new();
        args.insert("expr".into(), expr.into());
        ActionCall::new(id, "calc_eval", Scope::Global, args)
    }

    fn two_calls(declared: usize, answer: &str) -> Trajectory {
        let calls = [calc(1, "2+3"), calc(2, "5*2")];
        let plans: Vec<_> = calls[..declared]
            .iter()
            .map(|c| PlanDecl::new(&c.name, &c.args, ""))
            .collect();
        let mut t = Trajectory::new("t");
        t.turns.push(Turn::assistant(vec![
            Item::Think(ThinkBlock::with_plans("compute", &plans)),
            Item::Act(calls[0].clone()),
            Item::Act(calls[1].clone()),
        ]));
        t.turns.push(Turn::runtime(vec![
            ActionResult {
                call_id: 1,
                status: ResultStatus::Ok,
                payload: "5".into(),
            },
            ActionResult {
                call_id: 2,
                status: ResultStatus::Ok,
                payload: "10".into(),
            },
        ]));
        t.turns
            .push(Turn::assistant(vec![Item::Answer(AnswerBlock { text: answer.into() })]));
        t
    }

    fn answer_only(answer: &str) -> Trajectory {
        let mut t = Trajectory::new("t");
        t.turns.push(Turn::assistant(vec![
            Item::Think(ThinkBlock::new("hmm")),
            Item::Answer(AnswerBlock { text: answer.into() }),
        ]));
        t
    }

    #[test]
    fn test_format_reward_table() {
        use ViolationKind as K;
        assert_eq!(format_reward(&[]), 1.0);
        assert!((format_reward(&v(&[K::UnknownTag])) - 0.8).abs() < 1e-12);
        assert_eq!(
            format_reward(&v(&[K::UnclosedTag, K::MissingAnswer, K::UnclosedTag])),
            0.0
        );
    }

    #[test]
    fn test_consistency_oracle() {
        assert_eq!(consistency_oracle(&two_calls(2, "10"), "10"), Ok(1.0));
        assert_eq!(consistency_oracle(&two_calls(1, "10"), "10"), Ok(0.75));
        assert_eq!(consistency_oracle(&two_calls(0, " 10 "), "10"), Ok(0.5));
        assert_eq!(consistency_oracle(&two_calls(2, "5"), "10"), Ok(0.5));
        assert_eq!(consistency_oracle(&answer_only("3"), "4"), Ok(0.5));
        assert_eq!(consistency_oracle(&answer_only("4"), "4"), Ok(1.0));
        let mut t = answer_only("4");
        t.turns[0].items.pop();
        assert_eq!(consistency_oracle(&t, "4"), Err(RewardError::NotTerminal));
    }

    #[test]
    fn test_denied_calls_do_not_count() {
        let mut t = two_calls(1, "5");
        if let Item::Result(r) = &mut t.turns[1].items[1] {
            r.status = ResultStatus::Denied;
        }
        assert_eq!(consistency_oracle(&t, "10"), Ok(1.0));
    }

    #[test]
    fn test_rule_reward() {
        assert_eq!(rule_reward(&answer_only("42"), "42", 0.0), Ok(1.0));
        assert_eq!(rule_reward(&answer_only("3.1416"), "3.14159", 1e-3), Ok(1.0));
        assert_eq!(rule_reward(&answer_only("3.1416"), "3.14159", 1e-6), Ok(0.0));
        assert_eq!(rule_reward(&answer_only("blue"), "red", 1.0), Ok(0.0));
        assert_eq!(
            rule_reward(&Trajectory::new("x"), "red", 1.0),
            Err(RewardError::NotTerminal)
        );
    }

    #[test]
    fn test_compose_examples() {
        let b = compose(
            TaskKind::Action,
            Parts {
                format: Some(1.0),
                consistency: Some(0.75),
                ..Parts::default()
            },
        )
        .unwrap();
        assert!((b.total - 0.875).abs() < 1e-12);
        let b = compose(
            TaskKind::Reasoning,
            Parts {
                format: Some(0.8),
                rule: Some(1.0),
                ..Parts::default()
            },
        )
        .unwrap();
        assert!((b.total - 0.9).abs() < 1e-12);
        assert_eq!(
            compose(
                TaskKind::Other,
                Parts {
                    format: Some(1.0),
                    rule: Some(1.0),
                    ..Parts::default()
                }
            ),
            Err(RewardError::ExtraComponent(Component::Rule))
        );
        assert_eq!(
            compose(
                TaskKind::Other,
                Parts {
                    format: Some(1.0),
                    ..Parts::default()
                }
            ),
            Err(RewardError::MissingComponent(Component::Preference))
        );
        assert!(matches!(
            compose(
                TaskKind::Reasoning,
                Parts {
                    format: Some(1.0),
                    rule: Some(0.5),
                    ..Parts::default()
                }
            ),
            Err(RewardError::OutOfRange(Component::Rule, _))
        ));
    }

    #[test]
    fn test_compose_gating_exhaustive() {
        for kind in TaskKind::ALL {
            for mask in 0u8..16 {
                let mut parts = Parts::default();
                let mut set = BTreeSet::new();
                for (i, c) in Component::ALL.into_iter().enumerate() {
                    if mask & (1 << i) != 0 {
                        parts.set(c, Some(1.0));
                        set.insert(c);
                    }
                }
                let exact: BTreeSet<_> = kind.components().into_iter().collect();
                assert_eq!(compose(kind, parts).is_ok(), set == exact, "{kind:?} {mask:04b}");
            }
        }
    }

    fn cand(id: &str, traj: &Trajectory, gold: &str) -> Candidate {
        Candidate {
            id: id.into(),
            document: crate::protocol::serialize(traj).unwrap(),
            gold: gold.into(),
        }
    }

    #[test]
    fn test_fit_degenerate() {
        let a = cand("a", &answer_only("4"), "4");
        let b = Candidate {
            id: "b".into(),
            ..a.clone()
        };
        let label = ConsistencyLabel::new(a.clone(), b, Preferred::A, LabelSource::Oracle).unwrap();
        assert_eq!(
            fit_pairwise(&[label.clone(), label.clone()], 0.1, 50),
            Err(RewardError::Degenerate)
        );
        assert_eq!(
            fit_pairwise(core::slice::from_ref(&label), 0.1, 50),
            Err(RewardError::TooFewLabels(1))
        );
        assert_eq!(
            fit_pairwise(&[label.clone(), label], 0.0, 50),
            Err(RewardError::InvalidL2(0.0))
        );
        assert_eq!(
            ConsistencyLabel::new(a.clone(), a, Preferred::A, LabelSource::Oracle),
            Err(RewardError::SelfPair)
        );
    }

    #[test]
    fn test_fit_separable_and_ridge() {
        let good = cand("g", &two_calls(2, "10"), "10");
        let half = cand("h", &two_calls(1, "10"), "10");
        let bad = cand("b", &two_calls(0, "3"), "10");
        let labels = vec![
            ConsistencyLabel::new(good.clone(), half.clone(), Preferred::A, LabelSource::Oracle).unwrap(),
            ConsistencyLabel::new(bad.clone(), half.clone(), Preferred::B, LabelSource::Oracle).unwrap(),
            ConsistencyLabel::new(good.clone(), bad.clone(), Preferred::A, LabelSource::Oracle).unwrap(),
        ];
        let m = fit_pairwise(&labels, 1e-3, 500).unwrap();
        for l in &labels {
            let (w, o) = l.winner_loser();
            assert!(score_pairwise(&m, w) > score_pairwise(&m, o));
        }
        for pair in m.fit_meta.loss_history.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9);
        }
        let m = fit_pairwise(&[labels[0].clone(), labels[0].clone()], 1e6, 500).unwrap();
        assert!(dot(&m.weights, &m.weights).sqrt() < 1e-3);
    }

    #[test]
    fn test_score_pairwise() {
        let zero = PairwiseModel::default();
        let c = cand("a", &answer_only("4"), "4");
        assert_eq!(score_pairwise(&zero, &c), 0.5);
        let mut m = PairwiseModel::default();
        m.weights[3] = 1.0;
        let clean = m.score_features(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let dirty = m.score_features(&[0.0, 0.0, 0.0, 3.0, 0.0, 0.0]);
        assert!(dirty > clean);
        m.weights[3] = -1.0;
        assert!(m.score_features(&[0.0; 6]) > m.score_features(&[0.0, 0.0, 0.0, 3.0, 0.0, 0.0]));
        assert_eq!(score_pairwise(&m, &c), score_pairwise(&m, &c.clone()));
    }

    #[test]
    fn test_score_document() {
        let doc = crate::protocol::serialize(&two_calls(2, "10")).unwrap();
        let b = score_document(TaskKind::Action, &doc, "10", &Scorers::default());
        assert_eq!((b.format, b.consistency, b.total), (1.0, Some(1.0), 1.0));
        let b = score_document(TaskKind::Reasoning, "<answer>7</answer>", "7", &Scorers::default());
        assert_eq!(b.total, 1.0);
        let b = score_document(TaskKind::Other, "<answer>hi</answer>", "", &Scorers::default());
        assert_eq!(b.total, 0.75);
        let b = score_document(TaskKind::Action, "<think>x", "", &Scorers::default());
        assert_eq!(b.consistency, Some(0.0));
    }

    #[test]
    fn test_logistic_stable() {
        assert_eq!(logistic(0.0), 0.5);
        assert!(logistic(-1000.0) >= 0.0 && logistic(1000.0) <= 1.0);
        assert!((softplus(1000.0) - 1000.0).abs() < 1e-9);
    }
}

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use super::{is_identifier, Item, Role, Span, SpanMap, Trajectory, Violation, ViolationKind as K};

/// All violations of a trajectory, including a missing final answer.
/// Violations found without a source document carry empty spans.
pub fn validate(trajectory: &Trajectory) -> Vec<Violation> {
    let mut out = structural(trajectory, None);
    out.extend(completeness(trajectory, 0));
    out
}

/// Type-invariant violations only; a non-terminal trajectory passes.
pub fn check_structure(trajectory: &Trajectory) -> Vec<Violation> {
    structural(trajectory, None)
}

pub(crate) fn completeness(trajectory: &Trajectory, doc_len: usize) -> Vec<Violation> {
    if trajectory.is_terminal() {
        Vec::new()
    } else {
        alloc::vec![Violation::new(
            K::MissingAnswer,
            Span::new(doc_len, doc_len),
            "no final answer",
        )]
    }
}

pub(crate) fn structural(trajectory: &Trajectory, spans: Option<&SpanMap>) -> Vec<Violation> {
    let span_of = |turn: usize, item: usize| -> Span {
        spans
            .and_then(|s| s.get(turn))
            .and_then(|t| t.get(item))
            .copied()
            .unwrap_or_default()
    };
    let turn_span = |turn: usize| -> Span {
        let first = span_of(turn, 0);
        let n = trajectory.turns[turn].items.len();
        let last = if n == 0 { first } else { span_of(turn, n - 1) };
        Span::new(first.start, last.end.max(first.start))
    };

    let last_assistant = trajectory.turns.iter().rposition(|t| t.role == Role::Assistant);
    let mut out = Vec::new();
    let mut call_ids = BTreeSet::new();
    let mut max_id = 0u64;
    let mut answered = BTreeSet::new();

    for (ti, turn) in trajectory.turns.iter().enumerate() {
        if ti > 0 && trajectory.turns[ti - 1].role == turn.role {
            out.push(Violation::new(
                K::ActOutsideThinkTurn,
                turn_span(ti),
                "adjacent turns share a role",
            ));
        }
        match turn.role {
            Role::User => out.push(Violation::new(
                K::ActOutsideThinkTurn,
                turn_span(ti),
                "user turns have no place in a transcript",
            )),
            Role::Runtime => {
                for (ii, item) in turn.items.iter().enumerate() {
                    if !matches!(item, Item::Result(_)) {
                        out.push(Violation::new(
                            K::ActOutsideThinkTurn,
                            span_of(ti, ii),
                            "runtime turns hold only results",
                        ));
                    }
                }
            }
            Role::Assistant => {
                let (mut thought, mut acted, mut answers) = (false, false, 0usize);
                for (ii, item) in turn.items.iter().enumerate() {
                    match item {
                        Item::Think(_) => {
                            if acted || answers > 0 {
                                out.push(Violation::new(
                                    K::ActOutsideThinkTurn,
                                    span_of(ti, ii),
                                    "think block after an action call or answer",
                                ));
                            }
                            thought = true;
                        }
                        Item::Act(_) => {
                            if !thought {
                                out.push(Violation::new(
                                    K::ActOutsideThinkTurn,
                                    span_of(ti, ii),
                                    "action call without a preceding think block",
                                ));
                            }
                            acted = true;
                        }
                        Item::Answer(a) => {
                            answers += 1;
                            if a.text.trim().is_empty() {
                                out.push(Violation::new(K::EmptyAnswer, span_of(ti, ii), "answer is blank"));
                            }
                        }
                        Item::Result(_) => out.push(Violation::new(
                            K::ActOutsideThinkTurn,
                            span_of(ti, ii),
                            "result inside an assistant turn",
                        )),
                    }
                }
                if acted && answers > 0 {
                    out.push(Violation::new(
                        K::MissingAnswer,
                        turn_span(ti),
                        "turn has both action calls and an answer",
                    ));
                } else if answers > 1 {
                    out.push(Violation::new(
                        K::MissingAnswer,
                        turn_span(ti),
                        "turn has more than one answer",
                    ));
                } else if !acted && answers == 0 && Some(ti) != last_assistant {
                    out.push(Violation::new(
                        K::MissingAnswer,
                        turn_span(ti),
                        "turn ends without an action call or answer",
                    ));
                }
            }
        }

        for (ii, item) in turn.items.iter().enumerate() {
            match item {
                Item::Act(call) => {
                    if call.id == 0 || call_ids.contains(&call.id) {
                        out.push(Violation::new(
                            K::DuplicateId,
                            span_of(ti, ii),
                            "call id reused or zero",
                        ));
                    } else if call.id <= max_id {
                        out.push(Violation::new(
                            K::DuplicateId,
                            span_of(ti, ii),
                            "call ids must increase in document order",
                        ));
                    }
                    call_ids.insert(call.id);
                    max_id = max_id.max(call.id);
                    if !is_identifier(&call.name) {
                        out.push(Violation::new(
                            K::UnknownTag,
                            span_of(ti, ii),
                            "action name is not an identifier",
                        ));
                    }
                    if !call.args.values().all(|v| v.is_finite()) {
                        out.push(Violation::new(K::UnknownTag, span_of(ti, ii), "non-finite argument"));
                    }
                }
                Item::Result(result) => {
                    if !call_ids.contains(&result.call_id) {
                        out.push(Violation::new(
                            K::OrphanResult,
                            span_of(ti, ii),
                            "result has no preceding call",
                        ));
                    } else if !answered.insert(result.call_id) {
                        out.push(Violation::new(
                            K::DuplicateId,
                            span_of(ti, ii),
                            "second result for one call",
                        ));
                    }
                }
                _ => {}
            }
        }
    }
    out
}

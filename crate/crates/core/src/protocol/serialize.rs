use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::validate::structural;
use super::{canonical_args, escape_text, ActionCall, ActionResult, Item, ProtocolError, Span, SpanMap, Trajectory};

/// Canonical text: one element per line, no trailing newline.
pub fn serialize(trajectory: &Trajectory) -> Result<String, ProtocolError> {
    serialize_with_spans(trajectory).map(|(text, _)| text)
}

/// Canonical text plus the byte span of every item.
pub fn serialize_with_spans(trajectory: &Trajectory) -> Result<(String, SpanMap), ProtocolError> {
    if let Some(v) = structural(trajectory, None).first() {
        return Err(ProtocolError::InvalidTrajectory(format!("{}: {}", v.kind, v.note)));
    }
    let mut out = String::new();
    let mut spans = SpanMap::new();
    for turn in &trajectory.turns {
        let mut turn_spans = Vec::with_capacity(turn.items.len());
        for item in &turn.items {
            if !out.is_empty() {
                out.push('\n');
            }
            let start = out.len();
            render_item_into(&mut out, item);
            turn_spans.push(Span::new(start, out.len()));
        }
        spans.push(turn_spans);
    }
    Ok((out, spans))
}

/// Items one per line, without any structural check. Used for single turns.
pub fn render_items<'a>(items: impl IntoIterator<Item = &'a Item>) -> String {
    let mut out = String::new();
    for (i, item) in items.into_iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        render_item_into(&mut out, item);
    }
    out
}

pub(crate) fn render_item_into(out: &mut String, item: &Item) {
    match item {
        Item::Think(t) => {
            out.push_str("<think>");
            out.push_str(&escape_text(t.text()));
            out.push_str("</think>");
        }
        Item::Act(call) => render_call_into(out, call),
        Item::Result(r) => out.push_str(&render_result(r)),
        Item::Answer(a) => {
            out.push_str("<answer>");
            out.push_str(&escape_text(&a.text));
            out.push_str("</answer>");
        }
    }
}

pub(crate) fn render_call_into(out: &mut String, call: &ActionCall) {
    out.push_str(&format!(
        "<act id=\"{}\" name=\"{}\" scope=\"{}\">",
        call.id,
        call.name,
        call.scope.attr()
    ));
    out.push_str(&escape_text(&canonical_args(&call.args)));
    out.push_str("</act>");
}

/// A result element with its payload neutralized.
pub fn render_result(result: &ActionResult) -> String {
    format!(
        "<result id=\"{}\" status=\"{}\">{}</result>",
        result.call_id,
        result.status.attr(),
        escape_text(&result.payload)
    )
}

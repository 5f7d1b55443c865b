//! Seeded generator of valid, terminal trajectories with adversarial text.

use alloc::string::String;
use alloc::vec::Vec;

use super::{
    ActionCall, ActionResult, AnswerBlock, ArgValue, Args, Item, ResultStatus, Scope, ThinkBlock, Trajectory, Turn,
};
use crate::rng::{below, rng, unit, Rng};

const PIECES: [&str; 24] = [
    "a",
    "Z",
    "7",
    " ",
    "\n",
    "\t",
    "<",
    ">",
    "&",
    "\"",
    "'",
    "&amp;",
    "&lt;",
    "</think>",
    "<act id=\"1\" name=\"x\">",
    "</result><act",
    "<answer>",
    "é",
    "🙂",
    "\u{0}",
    "PLAN: calc_eval {\"expr\":\"1+1\"} -> 2",
    "PLAN:",
    "{}",
    "\r\n",
];
const NAMES: [&str; 6] = ["clock_now", "calc_eval", "mem_get", "mem_put", "search", "a_1"];

fn text(r: &mut Rng, max_pieces: usize) -> String {
    (0..below(r, max_pieces + 1))
        .map(|_| PIECES[below(r, PIECES.len())])
        .collect()
}

fn value(r: &mut Rng) -> ArgValue {
    match below(r, 6) {
        0 => ArgValue::Bool(below(r, 2) == 0),
        1 => ArgValue::Int([0, -1, i64::MAX, i64::MIN, 42][below(r, 5)]),
        2 => ArgValue::Float((unit(r) - 0.5) * 1e6),
        3 => ArgValue::Float([0.1, 1e-300, 1.5e300, -2.5, 3.0][below(r, 5)]),
        _ => ArgValue::Str(text(r, 4)),
    }
}

fn args(r: &mut Rng) -> Args {
    (0..below(r, 4)).map(|_| (text(r, 2), value(r))).collect()
}

/// A trajectory that passes `validate`, deterministic in `seed`.
pub fn random_trajectory(seed: u64) -> Trajectory {
    let r = &mut rng(seed);
    let mut t = Trajectory::new("");
    let mut next_id = 1 + below(r, 3) as u64;
    for _ in 0..below(r, 4) {
        let mut items: Vec<Item> = (0..1 + below(r, 2))
            .map(|_| Item::Think(ThinkBlock::new(text(r, 6))))
            .collect();
        let mut results = Vec::new();
        for _ in 0..1 + below(r, 3) {
            let scope = if below(r, 2) == 0 { Scope::Global } else { Scope::Local };
            let name = NAMES[below(r, NAMES.len())];
            items.push(Item::Act(ActionCall::new(next_id, name, scope, args(r))));
            let status = [
                ResultStatus::Ok,
                ResultStatus::Error,
                ResultStatus::Timeout,
                ResultStatus::Denied,
            ][below(r, 4)];
            results.push(ActionResult {
                call_id: next_id,
                status,
                payload: text(r, 6),
            });
            next_id += 1 + below(r, 2) as u64;
        }
        t.turns.push(Turn::assistant(items));
        t.turns.push(Turn::runtime(results));
    }
    let mut items: Vec<Item> = (0..below(r, 3))
        .map(|_| Item::Think(ThinkBlock::new(text(r, 6))))
        .collect();
    let mut answer = text(r, 5);
    if answer.trim().is_empty() {
        answer.push('x');
    }
    items.push(Item::Answer(AnswerBlock { text: answer }));
    t.turns.push(Turn::assistant(items));
    t
}

//! Synthetic task generation, reference trajectories and SFT pairs.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::action::{run_in_stub, Registry, CALC_EVAL, CLOCK_NOW, MEM_GET, MEM_PUT};
use crate::context::{ContextEntry, ContextStore, DEFAULT_BUDGET_BYTES};
use crate::protocol::{
    serialize_with_spans, ActionCall, ActionResult, AnswerBlock, ArgValue, Args, Item, PlanDecl, ResultStatus, Role,
    Scope, ThinkBlock, Trajectory, Turn,
};
use crate::reward::TaskKind;
use crate::rng::{below, derive, rng, Rng};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DataError {
    #[error("bad mix: {0}")]
    BadMix(String),
    #[error("task {task_id} is unsatisfiable: {reason}")]
    Unsatisfiable { task_id: String, reason: String },
    #[error("reference belongs to {reference:?}, not {task:?}")]
    Mismatch { task: String, reference: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequiredAction {
    pub name: String,
    pub args: Args,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionTask {
    pub task_id: String,
    pub instruction: String,
    pub required_actions: Vec<RequiredAction>,
    pub gold_answer: String,
    pub kind: TaskKind,
    pub seed: u64,
}

impl ActionTask {
    pub fn calls(&self) -> Vec<ActionCall> {
        self.required_actions
            .iter()
            .zip(1..)
            .map(|(a, id)| ActionCall::new(id, &a.name, Scope::Global, a.args.clone()))
            .collect()
    }
}

/// Fraction of generated tasks per kind.
pub type Mix = BTreeMap<TaskKind, f64>;

pub fn action_only() -> Mix {
    [(TaskKind::Action, 1.0)].into_iter().collect()
}

/// Splits `n` by largest remainder; ties go to the earlier kind.
pub fn apportion(n: usize, mix: &Mix) -> Result<BTreeMap<TaskKind, usize>, DataError> {
    if mix.values().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(DataError::BadMix("fractions must be finite and non-negative".into()));
    }
    let total: f64 = mix.values().sum();
    if libm::fabs(total - 1.0) > 1e-9 {
        return Err(DataError::BadMix(format!("fractions sum to {total}, not 1")));
    }
    let mut counts: BTreeMap<TaskKind, usize> = BTreeMap::new();
    let mut remainders = Vec::new();
    for (kind, f) in mix {
        let quota = n as f64 * f;
        let floor = libm::floor(quota);
        counts.insert(*kind, floor as usize);
        remainders.push((quota - floor, *kind));
    }
    let assigned: usize = counts.values().sum();
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, kind) in remainders.into_iter().take(n.saturating_sub(assigned)) {
        *counts.get_mut(&kind).expect("present") += 1;
    }
    Ok(counts)
}

pub fn task_id(seed: u64, index: usize) -> String {
    format!("t{seed}_{index:06}")
}

/// Deterministic in `(n, seed, mix)`. Every action task is checked against
/// the stub environment before it is returned.
pub fn generate_tasks(n: usize, seed: u64, mix: &Mix) -> Result<Vec<ActionTask>, DataError> {
    let counts = apportion(n, mix)?;
    let mut kinds: Vec<TaskKind> = counts.iter().flat_map(|(k, c)| core::iter::repeat_n(*k, *c)).collect();
    let mut r = rng(seed);
    for i in (1..kinds.len()).rev() {
        kinds.swap(i, below(&mut r, i + 1));
    }
    let registry = Registry::new();
    kinds
        .into_iter()
        .enumerate()
        .map(|(i, kind)| {
            let task = make_task(task_id(seed, i), kind, derive(seed, i as u64), &registry);
            check_task(&task, &registry).map(|_| task)
        })
        .collect()
}

const WORDS: [&str; 12] = [
    "amber", "birch", "cobalt", "dune", "ember", "fjord", "garnet", "harbor", "indigo", "juniper", "kelp", "lotus",
];
const KEYS: [&str; 6] = ["color", "city", "project", "pet", "codename", "fruit"];
const NAMES: [&str; 6] = ["Ana", "Bo", "Chen", "Dara", "Eli", "Fay"];
const ITEMS: [&str; 5] = ["apples", "books", "coins", "stamps", "shells"];

fn pick<'a>(r: &mut Rng, from: &[&'a str]) -> &'a str {
    from[below(r, from.len())]
}

fn str_args(pairs: &[(&str, &str)]) -> Args {
    pairs.iter().map(|(k, v)| (k.to_string(), ArgValue::from(*v))).collect()
}

fn make_task(task_id: String, kind: TaskKind, seed: u64, registry: &Registry) -> ActionTask {
    let r = &mut rng(seed);
    let (instruction, required_actions, gold_answer) = match kind {
        TaskKind::Action => action_template(r, registry),
        TaskKind::Reasoning => reasoning_template(r),
        TaskKind::Other => {
            let name = pick(r, &NAMES);
            let text = match below(r, 3) {
                0 => format!("Write a one-line greeting for {name}."),
                1 => format!("Suggest a name for {name}'s new {} collection.", pick(r, &ITEMS)),
                _ => format!("Describe the colour {} in a short phrase.", pick(r, &WORDS)),
            };
            (text, Vec::new(), String::new())
        }
    };
    ActionTask {
        task_id,
        instruction,
        required_actions,
        gold_answer,
        kind,
        seed,
    }
}

fn action_template(r: &mut Rng, registry: &Registry) -> (String, Vec<RequiredAction>, String) {
    let (instruction, actions) = match below(r, 3) {
        0 => {
            let steps = 1 + below(r, 3);
            let mut acc = 1 + below(r, 20) as i64;
            let mut text = format!("Start from {acc}");
            let mut actions = Vec::new();
            for _ in 0..steps {
                let b = 1 + below(r, 9) as i64;
                let (op, word, next) = match below(r, 3) {
                    0 => ('+', "add", acc + b),
                    1 => ('-', "subtract", acc - b),
                    _ => ('*', "multiply by", acc * b),
                };
                text.push_str(&format!(", {word} {b}"));
                actions.push(RequiredAction {
                    name: CALC_EVAL.into(),
                    args: str_args(&[("expr", &format!("{acc} {op} {b}"))]),
                });
                acc = next;
            }
            text.push_str(". Use calc_eval for every step and report the final value.");
            (text, actions)
        }
        1 => (
            "What is the current UTC time? Look it up with clock_now and report it.".to_string(),
            vec![RequiredAction {
                name: CLOCK_NOW.into(),
                args: Args::new(),
            }],
        ),
        _ => {
            let key = pick(r, &KEYS);
            let value = pick(r, &WORDS);
            (
                format!("Store \"{value}\" under the key {key} with mem_put, read it back with mem_get and report what you read."),
                vec![
                    RequiredAction {
                        name: MEM_PUT.into(),
                        args: str_args(&[("key", key), ("value", value)]),
                    },
                    RequiredAction {
                        name: MEM_GET.into(),
                        args: str_args(&[("key", key)]),
                    },
                ],
            )
        }
    };
    let calls: Vec<_> = actions
        .iter()
        .zip(1..)
        .map(|(a, id)| ActionCall::new(id, &a.name, Scope::Global, a.args.clone()))
        .collect();
    let gold = run_in_stub(registry, &calls)
        .pop()
        .map(|r| r.payload)
        .unwrap_or_default();
    (instruction, actions, gold)
}

fn reasoning_template(r: &mut Rng) -> (String, Vec<RequiredAction>, String) {
    let name = pick(r, &NAMES);
    let item = pick(r, &ITEMS);
    let a = 2 + below(r, 30) as i64;
    let b = 1 + below(r, 12) as i64;
    let (text, answer) = match below(r, 3) {
        0 => (
            format!("{name} has {a} {item} and gets {b} more. How many {item} does {name} have now?"),
            a + b,
        ),
        1 => (
            format!("{name} has {} {item} and gives away {b}. How many are left?", a + b),
            a,
        ),
        _ => (
            format!("{name} buys {b} boxes of {a} {item} each. How many {item} is that in total?"),
            a * b,
        ),
    };
    (text, Vec::new(), answer.to_string())
}

/// Executes the task's required actions in the stub environment and
/// checks the outcome against the gold answer.
pub fn check_task(task: &ActionTask, registry: &Registry) -> Result<Vec<ActionResult>, DataError> {
    let fail = |reason: String| DataError::Unsatisfiable {
        task_id: task.task_id.clone(),
        reason,
    };
    if let Some(a) = task.required_actions.iter().find(|a| !registry.contains(&a.name)) {
        return Err(fail(format!("{} is not registered", a.name)));
    }
    if task.required_actions.is_empty() {
        return Ok(Vec::new());
    }
    let results = run_in_stub(registry, &task.calls());
    if let Some(r) = results.iter().find(|r| r.status != ResultStatus::Ok) {
        return Err(fail(format!("call {} failed: {}", r.call_id, r.payload)));
    }
    let last = &results.last().expect("non-empty").payload;
    if *last != task.gold_answer {
        return Err(fail(format!(
            "actions produce {last:?}, gold is {:?}",
            task.gold_answer
        )));
    }
    Ok(results)
}

/// The answer a reference gives for a task without a gold answer.
pub const FREE_FORM_REPLY: &str = "Here is my reply.";

fn reasoning_note(task: &ActionTask) -> String {
    match task.kind {
        TaskKind::Reasoning => format!("Working it through, the result is {}.", task.gold_answer),
        _ => "Answering directly.".to_string(),
    }
}

/// A violation-free demonstration: every action declared, executed in
/// order, and the gold answer given.
pub fn render_reference(task: &ActionTask, registry: &Registry) -> Result<Trajectory, DataError> {
    let results = check_task(task, registry)?;
    let mut t = Trajectory::new(task.task_id.clone());
    let answer = if task.gold_answer.trim().is_empty() {
        FREE_FORM_REPLY.to_string()
    } else {
        task.gold_answer.clone()
    };
    if results.is_empty() {
        t.turns.push(Turn::assistant(vec![
            Item::Think(ThinkBlock::new(reasoning_note(task))),
            Item::Answer(AnswerBlock { text: answer }),
        ]));
        return Ok(t);
    }
    let calls = task.calls();
    let plans: Vec<PlanDecl> = calls
        .iter()
        .zip(&results)
        .map(|(c, r)| PlanDecl::new(&c.name, &c.args, &r.payload))
        .collect();
    let mut first = vec![Item::Think(ThinkBlock::with_plans(
        "I will run these actions in order.",
        &plans,
    ))];
    first.extend(calls.into_iter().map(Item::Act));
    t.turns.push(Turn::assistant(first));
    t.turns.push(Turn::runtime(results));
    t.turns.push(Turn::assistant(vec![
        Item::Think(ThinkBlock::new("All results are in.")),
        Item::Answer(AnswerBlock { text: answer }),
    ]));
    Ok(t)
}

/// Context every episode for `task` starts with.
pub fn initial_context(task: &ActionTask) -> ContextStore {
    let mut store = ContextStore::new(DEFAULT_BUDGET_BYTES);
    for (key, value) in [("task", task.task_id.as_str()), ("kind", task.kind.as_str())] {
        let entry = ContextEntry::global(key, value, 0).expect("fixed keys are identifiers");
        store.record(entry).expect("fresh store");
    }
    store
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftPair {
    pub prompt: String,
    pub completion: String,
    /// Byte ranges of environment-authored text, never a training target.
    pub mask_spans: Vec<(usize, usize)>,
}

pub fn to_sft_pair(task: &ActionTask, reference: &Trajectory) -> Result<SftPair, DataError> {
    if reference.task_id != task.task_id {
        return Err(DataError::Mismatch {
            task: task.task_id.clone(),
            reference: reference.task_id.clone(),
        });
    }
    let (completion, spans) = serialize_with_spans(reference).map_err(|e| DataError::Unsatisfiable {
        task_id: task.task_id.clone(),
        reason: e.to_string(),
    })?;
    let mask_spans = reference
        .turns
        .iter()
        .zip(&spans)
        .filter(|(turn, _)| turn.role == Role::Runtime)
        .flat_map(|(_, s)| s.iter().map(|s| (s.start, s.end)))
        .collect();
    let header = initial_context(task).assemble_prompt(None).rendered;
    Ok(SftPair {
        prompt: format!("{}\n{}", task.instruction, header),
        completion,
        mask_spans,
    })
}

/// The completion with every masked range removed.
pub fn unmasked_text(pair: &SftPair) -> String {
    let mut out = String::new();
    let mut at = 0;
    for &(start, end) in &pair.mask_spans {
        out.push_str(&pair.completion[at..start]);
        at = end;
    }
    out.push_str(&pair.completion[at..]);
    out
}

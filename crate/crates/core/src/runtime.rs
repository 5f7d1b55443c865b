//! Episode runner: alternates policy turns with action dispatch and keeps
//! the transcript, context store and audit trail in step.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::action::{
    dispatch, CallCounters, Clock, DispatchEnv, DispatchRecord, ExternalTransport, Registry, SecurityPolicy,
};
use crate::context::{ContextEntry, ContextStore, PromptView};
use crate::protocol::{parse, render_items, render_result, Item, ResultStatus, Role, Scope, Trajectory, Violation};

pub const DEFAULT_MAX_TURNS: u32 = 8;

/// What the policy sees before writing its next turn.
#[derive(Debug, Clone, Copy)]
pub struct TurnView<'a> {
    pub instruction: &'a str,
    pub transcript: &'a str,
    pub context: &'a PromptView,
    pub turn_index: u32,
}

/// Produces the text of one assistant turn.
pub trait TurnPolicy {
    fn next_turn(&mut self, view: &TurnView<'_>) -> String;
}

/// Replays pre-rendered assistant turns, then answers with nothing.
#[derive(Debug, Clone, Default)]
pub struct ScriptedPolicy {
    turns: Vec<String>,
    next: usize,
}

impl ScriptedPolicy {
    pub fn new(turns: Vec<String>) -> Self {
        Self { turns, next: 0 }
    }

    /// Replays the assistant side of `reference`.
    pub fn from_reference(reference: &Trajectory) -> Self {
        Self::new(
            reference
                .turns
                .iter()
                .filter(|t| t.role == Role::Assistant)
                .map(|t| render_items(&t.items))
                .collect(),
        )
    }
}

impl TurnPolicy for ScriptedPolicy {
    fn next_turn(&mut self, _view: &TurnView<'_>) -> String {
        let turn = self.turns.get(self.next).cloned().unwrap_or_default();
        self.next += 1;
        turn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StopReason {
    /// The policy produced an answer.
    Answered,
    /// A turn contained neither calls nor an answer.
    Stalled,
    TurnLimit,
    /// A turn could not be read at all (oversize or not UTF-8).
    Unreadable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub document: String,
    pub trajectory: Trajectory,
    pub violations: Vec<Violation>,
    pub records: Vec<DispatchRecord>,
    /// Every prompt assembled: one per turn, plus one per executed call.
    pub prompts: Vec<(Option<u64>, PromptView)>,
    pub context: ContextStore,
    pub stop: StopReason,
}

/// Fixed inputs to [`run_episode`].
pub struct Runner<'a> {
    pub registry: &'a Registry,
    pub policy: &'a SecurityPolicy,
    pub clock: &'a dyn Clock,
    pub external: &'a mut dyn ExternalTransport,
    pub max_turns: u32,
}

fn push_block(transcript: &mut String, block: &str) {
    if block.is_empty() {
        return;
    }
    if !transcript.is_empty() {
        transcript.push('\n');
    }
    transcript.push_str(block);
}

/// Runs one episode to completion.
///
/// Results of `global` calls are recorded as global context under
/// `<name>_<id>`; results of `local` calls live in that call's scope, which
/// closes at the end of the turn.
pub fn run_episode(
    runner: &mut Runner<'_>,
    task_id: &str,
    instruction: &str,
    mut context: ContextStore,
    turn_policy: &mut dyn TurnPolicy,
) -> Episode {
    let mut transcript = String::new();
    let mut records = Vec::new();
    let mut prompts = Vec::new();
    let mut counters = CallCounters::default();
    let mut stop = StopReason::TurnLimit;

    for turn_index in 0..runner.max_turns {
        let view_ctx = context.assemble_prompt(None);
        let text = turn_policy.next_turn(&TurnView {
            instruction,
            transcript: &transcript,
            context: &view_ctx,
            turn_index,
        });
        prompts.push((None, view_ctx));
        let Ok(turn) = parse(&text) else {
            stop = StopReason::Unreadable;
            break;
        };
        push_block(&mut transcript, &text);
        let items: Vec<Item> = turn.trajectory.items().cloned().collect();
        if items.iter().any(|i| matches!(i, Item::Answer(_))) {
            stop = StopReason::Answered;
            break;
        }
        let calls: Vec<_> = items
            .into_iter()
            .filter_map(|i| match i {
                Item::Act(c) => Some(c),
                _ => None,
            })
            .collect();
        if calls.is_empty() {
            stop = StopReason::Stalled;
            break;
        }
        counters.begin_turn();
        let mut rendered = Vec::with_capacity(calls.len());
        for call in &calls {
            let record = {
                let mut env = DispatchEnv {
                    clock: runner.clock,
                    memory: &mut context,
                    external: &mut *runner.external,
                    turn_index,
                };
                dispatch(runner.registry, runner.policy, call, &mut counters, &mut env)
            };
            if record.result.status == ResultStatus::Ok {
                let entry = match call.scope {
                    Scope::Global => ContextEntry::global_from(
                        call.id,
                        &format!("{}_{}", call.name, call.id),
                        &record.result.payload,
                        turn_index,
                    ),
                    Scope::Local => ContextEntry::local(call.id, "result", &record.result.payload, turn_index),
                };
                if let Ok(entry) = entry {
                    // collisions only arise from reused call ids, already a violation
                    let _ = context.record(entry);
                }
            }
            if call.scope == Scope::Local {
                prompts.push((Some(call.id), context.assemble_prompt(Some(call.id))));
            }
            rendered.push(render_result(&record.result));
            records.push(record);
        }
        let open: Vec<u64> = context.local_scopes().collect();
        for id in open {
            let _ = context.close_scope(id, &[]);
        }
        push_block(&mut transcript, &rendered.join("\n"));
    }

    let (trajectory, violations) = match parse(&transcript) {
        Ok(p) => (p.trajectory.with_task_id(task_id), p.violations),
        Err(_) => (Trajectory::new(task_id), Vec::new()),
    };
    Episode {
        document: transcript,
        trajectory,
        violations,
        records,
        prompts,
        context,
        stop,
    }
}

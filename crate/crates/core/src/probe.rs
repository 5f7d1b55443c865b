//! Self-checking episode scenarios: context isolation and result
//! injection. Each returns `Err` with a description on the first breach.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::action::{
    injection_corpus, ActionSpec, ArgType, ExternalTransport, FixedClock, Registry, SecurityPolicy, TransportOutcome,
    WireRequest, WireResponse, WireStatus,
};
use crate::context::ContextStore;
use crate::protocol::{render_items, ActionCall, AnswerBlock, ArgValue, Args, Item, ResultStatus, Scope, ThinkBlock};
use crate::rng::{below, rng};
use crate::runtime::{run_episode, Episode, Runner, ScriptedPolicy, StopReason};

pub const PROBE_ACTION: &str = "probe";

/// Marker text the isolation transport returns for call `id`.
pub fn marker(id: u64) -> String {
    format!("MARK_{id}_END")
}

/// Replies to every request with its marker.
#[derive(Debug, Default)]
pub struct MarkerTransport;

impl ExternalTransport for MarkerTransport {
    fn call(&mut self, request: &WireRequest, _timeout_ms: u64) -> TransportOutcome {
        TransportOutcome::Reply(WireResponse {
            id: request.id,
            status: WireStatus::Ok,
            payload: marker(request.id),
        })
    }
}

/// Replies to every request with the same hostile payload.
#[derive(Debug, Clone)]
pub struct HostileTransport {
    pub payload: String,
}

impl ExternalTransport for HostileTransport {
    fn call(&mut self, request: &WireRequest, _timeout_ms: u64) -> TransportOutcome {
        TransportOutcome::Reply(WireResponse {
            id: request.id,
            status: WireStatus::Ok,
            payload: self.payload.clone(),
        })
    }
}

fn probe_registry() -> Registry {
    let mut registry = Registry::new();
    registry
        .register(ActionSpec::external(PROBE_ACTION, &[("q", ArgType::String)]))
        .expect("probe spec is valid");
    registry
}

fn open_policy(registry: &Registry) -> SecurityPolicy {
    SecurityPolicy {
        max_calls_per_turn: u32::MAX,
        max_calls_per_episode: u32::MAX,
        ..SecurityPolicy::permissive(registry)
    }
}

fn probe_call(id: u64, scope: Scope) -> ActionCall {
    let mut args = Args::new();
    args.insert("q".into(), ArgValue::Str(format!("q{id}")));
    ActionCall::new(id, PROBE_ACTION, scope, args)
}

fn answer_turn() -> String {
    render_items(&[Item::Answer(AnswerBlock { text: "done".into() })])
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IsolationReport {
    pub local_calls: usize,
    pub global_calls: usize,
    pub prompts_checked: usize,
}

/// Runs a random multi-turn episode mixing local and global probe calls
/// under a small budget and checks that every local marker is visible only
/// in its own call's prompt and never after its scope closes.
pub fn isolation_episode(seed: u64) -> Result<IsolationReport, String> {
    let r = &mut rng(seed);
    let registry = probe_registry();
    let policy = open_policy(&registry);
    let budget = 48 + below(r, 400);

    let mut turns = Vec::new();
    let mut local_turn: BTreeMap<u64, usize> = BTreeMap::new();
    let mut report = IsolationReport::default();
    let mut next_id = 1;
    for turn in 0..1 + below(r, 5) {
        let mut items = vec![Item::Think(ThinkBlock::new("probing"))];
        for _ in 0..1 + below(r, 4) {
            let scope = if below(r, 2) == 0 { Scope::Local } else { Scope::Global };
            if scope == Scope::Local {
                local_turn.insert(next_id, turn);
                report.local_calls += 1;
            } else {
                report.global_calls += 1;
            }
            items.push(Item::Act(probe_call(next_id, scope)));
            next_id += 1 + below(r, 2) as u64;
        }
        turns.push(render_items(&items));
    }
    turns.push(answer_turn());

    let mut transport = MarkerTransport;
    let mut runner = Runner {
        registry: &registry,
        policy: &policy,
        clock: &FixedClock::EPOCH_2024,
        external: &mut transport,
        max_turns: turns.len() as u32,
    };
    let episode = run_episode(
        &mut runner,
        &format!("iso{seed}"),
        "probe the context",
        ContextStore::new(budget),
        &mut ScriptedPolicy::new(turns),
    );
    if episode.stop != StopReason::Answered {
        return Err(format!("seed {seed}: episode stopped with {:?}", episode.stop));
    }

    let mut turn: Option<usize> = None;
    for (current, view) in &episode.prompts {
        report.prompts_checked += 1;
        if current.is_none() {
            turn = Some(turn.map_or(0, |t| t + 1));
        }
        let turn = turn.unwrap_or(0);
        for (&id, &made_in) in &local_turn {
            let seen = view.rendered.contains(&marker(id));
            let allowed = *current == Some(id);
            if seen && !allowed {
                let when = if turn > made_in {
                    "after its scope closed"
                } else {
                    "in a foreign prompt"
                };
                return Err(format!(
                    "seed {seed}: local marker {id} leaked {when} (prompt for {current:?})"
                ));
            }
            if allowed && !seen {
                return Err(format!("seed {seed}: call {id} cannot see its own result"));
            }
        }
    }

    let local_markers: BTreeSet<String> = local_turn.keys().map(|&id| marker(id)).collect();
    if episode.context.local_scopes().next().is_some() {
        return Err(format!("seed {seed}: local scopes survived the episode"));
    }
    for entry in episode.context.global_entries() {
        if local_markers.contains(&entry.raw_value()) {
            return Err(format!("seed {seed}: local result {} promoted to global", entry.key()));
        }
    }
    if episode.context.global_bytes() > budget {
        return Err(format!(
            "seed {seed}: global bytes {} over budget {budget}",
            episode.context.global_bytes()
        ));
    }
    Ok(report)
}

/// Runs one episode whose single external call returns `payload`, and
/// checks that nothing in the payload turns into a call, a result or an
/// answer, and that the payload survives intact as data.
pub fn injection_episode(payload: &str) -> Result<Episode, String> {
    let registry = probe_registry();
    let policy = open_policy(&registry);
    let first = render_items(&[
        Item::Think(ThinkBlock::new("fetch the page")),
        Item::Act(probe_call(1, Scope::Global)),
    ]);
    let mut transport = HostileTransport {
        payload: payload.to_string(),
    };
    let mut runner = Runner {
        registry: &registry,
        policy: &policy,
        clock: &FixedClock::EPOCH_2024,
        external: &mut transport,
        max_turns: 4,
    };
    let episode = run_episode(
        &mut runner,
        "inj",
        "fetch and answer",
        ContextStore::new(crate::context::DEFAULT_BUDGET_BYTES),
        &mut ScriptedPolicy::new(vec![first, answer_turn()]),
    );
    let fail = |m: String| Err(format!("{m} (payload {payload:?})"));
    if episode.records.len() != 1 {
        return fail(format!("{} dispatches instead of 1", episode.records.len()));
    }
    let calls: Vec<u64> = episode.trajectory.calls().map(|c| c.id).collect();
    if calls != [1] {
        return fail(format!("transcript holds calls {calls:?}"));
    }
    let results: Vec<_> = episode.trajectory.results().collect();
    if results.len() != 1 || results[0].status != ResultStatus::Ok || results[0].payload != payload {
        return fail("result payload was altered".to_string());
    }
    if !episode.violations.is_empty() {
        return fail(format!("transcript has violations {:?}", episode.violations));
    }
    if episode.trajectory.answer().map(|a| a.text.as_str()) != Some("done") {
        return fail("answer was replaced".to_string());
    }
    if episode.context.global_entries().iter().any(|e| e.value().contains('<')) {
        return fail("raw markup reached the context".to_string());
    }
    Ok(episode)
}

/// Runs [`injection_episode`] over `n` corpus payloads; returns the number
/// that passed and the first failure.
pub fn injection_sweep(n: usize, seed: u64) -> (usize, Option<String>) {
    let mut passed = 0;
    let mut first = None;
    for payload in injection_corpus(n, seed) {
        match injection_episode(&payload) {
            Ok(_) => passed += 1,
            Err(e) => {
                first.get_or_insert(e);
            }
        }
    }
    (passed, first)
}

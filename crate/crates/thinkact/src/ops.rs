//! Operations shared by the command-line tool and the HTTP service.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thinkact_core::action::{DispatchRecord, Registry, SecurityPolicy, StubEnv};
use thinkact_core::data::{initial_context, render_reference, ActionTask};
use thinkact_core::runtime::{run_episode, Runner, ScriptedPolicy, DEFAULT_MAX_TURNS};
use thinkact_core::train::{sample_episode, PolicyParams};

use crate::files::{read_json, FileError};
use crate::store::{valid_id, DataDir};

pub const SCRIPTED: &str = "SCRIPTED";

#[derive(Debug, thiserror::Error)]
pub enum OpError {
    #[error("{0}")]
    Invalid(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error(transparent)]
    File(#[from] FileError),
}

/// Overrides applied on top of [`episode_policy`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Limits {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowlist: Option<BTreeSet<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_calls_per_turn: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_calls_per_episode: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deny_on_schema_mismatch: Option<bool>,
}

/// Every registered action allowed, 16 calls per turn, 64 per episode.
pub fn episode_policy(registry: &Registry) -> SecurityPolicy {
    SecurityPolicy {
        max_calls_per_turn: 16,
        ..SecurityPolicy::permissive(registry)
    }
}

impl Limits {
    pub fn apply(&self, registry: &Registry) -> Result<SecurityPolicy, OpError> {
        let mut p = episode_policy(registry);
        if let Some(a) = &self.allowlist {
            p.allowlist = a.clone();
        }
        if let Some(n) = self.max_calls_per_turn {
            p.max_calls_per_turn = n;
        }
        if let Some(n) = self.max_calls_per_episode {
            p.max_calls_per_episode = n;
        }
        if let Some(d) = self.deny_on_schema_mismatch {
            p.deny_on_schema_mismatch = d;
        }
        p.check(registry).map_err(|e| OpError::Invalid(e.to_string()))?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutput {
    pub document: String,
    pub records: Vec<DispatchRecord>,
}

pub fn load_checkpoint(dir: &DataDir, id: &str) -> Result<PolicyParams, OpError> {
    if !valid_id(id) {
        return Err(OpError::Invalid(format!("bad checkpoint id {id:?}")));
    }
    let path = dir.checkpoint(id);
    if !path.exists() {
        return Err(OpError::NotFound(format!("checkpoint {id}")));
    }
    let params: PolicyParams = read_json(&path)?;
    params.check().map_err(|e| OpError::Invalid(e.to_string()))?;
    Ok(params)
}

/// Runs `task` under `policy_ref`: [`SCRIPTED`] replays the task's
/// reference through the runtime, anything else names a checkpoint that
/// is sampled with `seed`.
pub fn run_task(
    dir: &DataDir,
    registry: &Registry,
    task: &ActionTask,
    policy_ref: &str,
    sec: &SecurityPolicy,
    seed: u64,
) -> Result<EpisodeOutput, OpError> {
    if policy_ref == SCRIPTED {
        let reference = render_reference(task, registry).map_err(|e| OpError::Invalid(e.to_string()))?;
        let mut stub = StubEnv::default();
        let mut runner = Runner {
            registry,
            policy: sec,
            clock: &stub.clock,
            external: &mut stub.external,
            max_turns: DEFAULT_MAX_TURNS,
        };
        let episode = run_episode(
            &mut runner,
            &task.task_id,
            &task.instruction,
            initial_context(task),
            &mut ScriptedPolicy::from_reference(&reference),
        );
        return Ok(EpisodeOutput {
            document: episode.document,
            records: episode.records,
        });
    }
    let params = load_checkpoint(dir, policy_ref)?;
    let (document, _) = sample_episode(&params, task, sec, seed).map_err(|e| OpError::Invalid(e.to_string()))?;
    Ok(EpisodeOutput {
        document,
        records: Vec::new(),
    })
}

//! Global and local thinking context for one episode.
//!
//! Global entries are visible to every prompt assembly and live under a
//! byte budget with oldest-first eviction. Local entries belong to one
//! action call, are shown only while that call is current, and die with the
//! call's scope unless promoted to global.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::protocol::{escape_text, is_identifier, is_neutralized, unescape_lossy, Scope};

pub const DEFAULT_BUDGET_BYTES: usize = 4096;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum ContextError {
    #[error("key {key:?} already present in {scope:?} scope")]
    KeyCollision { scope: Scope, key: String },
    #[error("no local scope for call {0}")]
    UnknownScope(u64),
    #[error("key {0:?} not in scope")]
    UnknownKey(String),
    #[error("invalid context entry: {0}")]
    InvalidEntry(String),
    #[error("invalid snapshot: {0}")]
    InvalidSnapshot(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "EntryRepr")]
pub struct ContextEntry {
    key: String,
    value: String,
    scope: Scope,
    origin_call_id: Option<u64>,
    turn_index: u32,
    bytes: usize,
}

#[derive(Deserialize)]
struct EntryRepr {
    key: String,
    value: String,
    scope: Scope,
    origin_call_id: Option<u64>,
    turn_index: u32,
    bytes: usize,
}

impl TryFrom<EntryRepr> for ContextEntry {
    type Error = ContextError;

    fn try_from(r: EntryRepr) -> Result<Self, Self::Error> {
        if !is_neutralized(&r.value) {
            return Err(ContextError::InvalidEntry(format!(
                "{}: value is not neutralized",
                r.key
            )));
        }
        if r.bytes != r.value.len() {
            return Err(ContextError::InvalidEntry(format!("{}: byte count mismatch", r.key)));
        }
        let entry = Self::build(r.key, r.value, r.scope, r.origin_call_id, r.turn_index)?;
        Ok(entry)
    }
}

impl ContextEntry {
    fn build(
        key: String,
        value: String,
        scope: Scope,
        origin_call_id: Option<u64>,
        turn_index: u32,
    ) -> Result<Self, ContextError> {
        if !is_identifier(&key) {
            return Err(ContextError::InvalidEntry(format!("{key:?} is not an identifier")));
        }
        if scope == Scope::Local && origin_call_id.is_none() {
            return Err(ContextError::InvalidEntry(format!("local entry {key} lacks a call id")));
        }
        let bytes = value.len();
        Ok(Self {
            key,
            value,
            scope,
            origin_call_id,
            turn_index,
            bytes,
        })
    }

    /// A global entry; `raw_value` is neutralized on the way in.
    pub fn global(key: &str, raw_value: &str, turn_index: u32) -> Result<Self, ContextError> {
        Self::build(key.into(), escape_text(raw_value), Scope::Global, None, turn_index)
    }

    /// A global entry that remembers which call produced it.
    pub fn global_from(call_id: u64, key: &str, raw_value: &str, turn_index: u32) -> Result<Self, ContextError> {
        Self::build(
            key.into(),
            escape_text(raw_value),
            Scope::Global,
            Some(call_id),
            turn_index,
        )
    }

    pub fn local(call_id: u64, key: &str, raw_value: &str, turn_index: u32) -> Result<Self, ContextError> {
        Self::build(
            key.into(),
            escape_text(raw_value),
            Scope::Local,
            Some(call_id),
            turn_index,
        )
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    /// The neutralized value.
    pub fn value(&self) -> &str {
        &self.value
    }

    /// The value with entities decoded.
    pub fn raw_value(&self) -> String {
        unescape_lossy(&self.value)
    }

    pub fn scope(&self) -> Scope {
        self.scope
    }

    pub fn origin_call_id(&self) -> Option<u64> {
        self.origin_call_id
    }

    pub fn turn_index(&self) -> u32 {
        self.turn_index
    }

    pub fn bytes(&self) -> usize {
        self.bytes
    }

    fn render(&self) -> String {
        match (self.scope, self.origin_call_id) {
            (Scope::Local, Some(id)) => {
                format!("[ctx scope=L call={id} key={}]{}[/ctx]", self.key, self.value)
            }
            _ => format!("[ctx scope=G key={}]{}[/ctx]", self.key, self.value),
        }
    }
}

/// What the policy is shown next.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PromptView {
    pub rendered: String,
    pub included_keys: Vec<(Scope, String)>,
    /// Local entries withheld because they belong to another call.
    pub dropped_keys: Vec<(Scope, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "StoreRepr")]
pub struct ContextStore {
    budget_bytes: usize,
    global: Vec<ContextEntry>,
    local: BTreeMap<u64, Vec<ContextEntry>>,
    #[serde(skip)]
    global_bytes: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StoreRepr {
    budget_bytes: usize,
    global: Vec<ContextEntry>,
    local: BTreeMap<u64, Vec<ContextEntry>>,
}

impl TryFrom<StoreRepr> for ContextStore {
    type Error = ContextError;

    fn try_from(r: StoreRepr) -> Result<Self, Self::Error> {
        let bad = |m: String| ContextError::InvalidSnapshot(m);
        if r.budget_bytes == 0 {
            return Err(bad("budget must be positive".into()));
        }
        let mut store = ContextStore::new(r.budget_bytes);
        for entry in r.global {
            if entry.scope != Scope::Global {
                return Err(bad(format!("{} listed as global", entry.key)));
            }
            if store.global.iter().any(|e| e.key == entry.key) {
                return Err(bad(format!("duplicate global key {}", entry.key)));
            }
            store.global_bytes += entry.bytes;
            store.global.push(entry);
        }
        if store.global_bytes > store.budget_bytes {
            return Err(bad("global entries exceed the budget".into()));
        }
        for (id, entries) in r.local {
            let mut list: Vec<ContextEntry> = Vec::new();
            for entry in entries {
                if entry.scope != Scope::Local || entry.origin_call_id != Some(id) {
                    return Err(bad(format!("{} misfiled under call {id}", entry.key)));
                }
                if list.iter().any(|e| e.key == entry.key) {
                    return Err(bad(format!("duplicate local key {} under call {id}", entry.key)));
                }
                list.push(entry);
            }
            store.local.insert(id, list);
        }
        Ok(store)
    }
}

impl ContextStore {
    /// `budget_bytes` bounds the global scope; it must be positive.
    pub fn new(budget_bytes: usize) -> Self {
        assert!(budget_bytes > 0, "context budget must be positive");
        Self {
            budget_bytes,
            global: Vec::new(),
            local: BTreeMap::new(),
            global_bytes: 0,
        }
    }

    pub fn budget_bytes(&self) -> usize {
        self.budget_bytes
    }

    pub fn global_bytes(&self) -> usize {
        self.global_bytes
    }

    pub fn global_entries(&self) -> &[ContextEntry] {
        &self.global
    }

    pub fn local_entries(&self, call_id: u64) -> Option<&[ContextEntry]> {
        self.local.get(&call_id).map(Vec::as_slice)
    }

    pub fn local_scopes(&self) -> impl Iterator<Item = u64> + '_ {
        self.local.keys().copied()
    }

    pub fn get_global(&self, key: &str) -> Option<&ContextEntry> {
        self.global.iter().find(|e| e.key == key)
    }

    /// Appends an entry. Returns the keys evicted, oldest first, to bring the
    /// global scope back under budget. An entry larger than the whole budget
    /// evicts everything including itself.
    pub fn record(&mut self, entry: ContextEntry) -> Result<Vec<String>, ContextError> {
        match entry.scope {
            Scope::Global => {
                if self.get_global(&entry.key).is_some() {
                    return Err(ContextError::KeyCollision {
                        scope: Scope::Global,
                        key: entry.key,
                    });
                }
                self.global_bytes += entry.bytes;
                self.global.push(entry);
                Ok(self.evict())
            }
            Scope::Local => {
                let id = entry
                    .origin_call_id
                    .ok_or_else(|| ContextError::InvalidEntry("local entry lacks a call id".into()))?;
                let list = self.local.entry(id).or_default();
                if list.iter().any(|e| e.key == entry.key) {
                    return Err(ContextError::KeyCollision {
                        scope: Scope::Local,
                        key: entry.key,
                    });
                }
                list.push(entry);
                Ok(Vec::new())
            }
        }
    }

    fn evict(&mut self) -> Vec<String> {
        let mut evicted = Vec::new();
        let mut drop = 0;
        while self.global_bytes > self.budget_bytes {
            let entry = &self.global[drop];
            self.global_bytes -= entry.bytes;
            evicted.push(entry.key.clone());
            drop += 1;
        }
        self.global.drain(..drop);
        evicted
    }

    /// Ends the local scope of `call_id`, re-recording `promote` keys as
    /// global. Either every key is promoted or nothing changes.
    pub fn close_scope(&mut self, call_id: u64, promote: &[&str]) -> Result<Vec<String>, ContextError> {
        let list = self.local.get(&call_id).ok_or(ContextError::UnknownScope(call_id))?;
        let mut promoted = Vec::with_capacity(promote.len());
        for key in promote {
            let entry = list
                .iter()
                .find(|e| e.key == *key)
                .ok_or_else(|| ContextError::UnknownKey(key.to_string()))?;
            if self.get_global(key).is_some() || promoted.iter().any(|e: &ContextEntry| e.key == *key) {
                return Err(ContextError::KeyCollision {
                    scope: Scope::Global,
                    key: key.to_string(),
                });
            }
            let mut entry = entry.clone();
            entry.scope = Scope::Global;
            promoted.push(entry);
        }
        self.local.remove(&call_id);
        let mut evicted = Vec::new();
        for entry in promoted {
            evicted.extend(self.record(entry)?);
        }
        Ok(evicted)
    }

    /// Renders all global entries in insertion order, then the local entries
    /// of `current_call` if one is given. Read-only.
    pub fn assemble_prompt(&self, current_call: Option<u64>) -> PromptView {
        let mut view = PromptView::default();
        let mut lines = Vec::new();
        for entry in &self.global {
            lines.push(entry.render());
            view.included_keys.push((Scope::Global, entry.key.clone()));
        }
        for (id, entries) in &self.local {
            for entry in entries {
                if Some(*id) == current_call {
                    lines.push(entry.render());
                    view.included_keys.push((Scope::Local, entry.key.clone()));
                } else {
                    view.dropped_keys.push((Scope::Local, entry.key.clone()));
                }
            }
        }
        view.rendered = lines.join("\n");
        view
    }
}

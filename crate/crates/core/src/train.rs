//! Simulated policy, sample collection and clipped policy-gradient
//! optimization against the composed reward.
//!
//! The policy is a vector of Bernoulli logits: one "declare before calling"
//! logit per built-in action, one "answer correctly" logit, and one
//! propensity per violation kind. A sampled trajectory is fully described
//! by its Bernoulli draws, so log-probabilities and score functions are
//! exact.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::action::{Registry, SecurityPolicy, StubEnv, BUILTINS};
use crate::data::{initial_context, ActionTask, FREE_FORM_REPLY};
use crate::protocol::{parse, render_items, AnswerBlock, Draft, Item, PlanDecl, ThinkBlock, Trajectory, ViolationKind};
use crate::reward::{
    consistency_oracle, logistic, score_document, Candidate, ConsistencyLabel, LabelSource, PairwiseModel, Preferred,
    RewardBreakdown, Scorers, TaskKind,
};
use crate::rng::{derive, rng, unit, Rng};
use crate::runtime::{run_episode, Runner, ScriptedPolicy, DEFAULT_MAX_TURNS};

pub const ANSWER_INDEX: usize = BUILTINS.len();
pub const VIOLATION_OFFSET: usize = ANSWER_INDEX + 1;
pub const THETA_LEN: usize = VIOLATION_OFFSET + ViolationKind::ALL.len();
pub const LOGIT_CLAMP: f64 = 50.0;
pub const WRONG_ANSWER: &str = "I could not work it out.";

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("no tasks to sample from")]
    EmptyTasks,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid policy parameters: {0}")]
    InvalidParams(String),
    #[error("mean reward became NaN at iteration {0}")]
    Diverged(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyParams {
    pub theta: Vec<f64>,
    pub version: u64,
}

impl PolicyParams {
    /// All logits zero: every choice is a fair coin.
    pub fn neutral() -> Self {
        Self::from_parts(0.0, 0.0, 0.0)
    }

    pub fn from_parts(declare: f64, answer: f64, violation: f64) -> Self {
        let mut theta = vec![violation; THETA_LEN];
        theta[..BUILTINS.len()].fill(declare);
        theta[ANSWER_INDEX] = answer;
        Self { theta, version: 0 }
    }

    /// Always declares, always answers correctly, never breaks format.
    pub fn saturated_good() -> Self {
        Self::from_parts(LOGIT_CLAMP, LOGIT_CLAMP, -LOGIT_CLAMP)
    }

    pub fn check(&self) -> Result<(), TrainError> {
        if self.theta.len() != THETA_LEN {
            return Err(TrainError::InvalidParams(format!(
                "expected {THETA_LEN} logits, got {}",
                self.theta.len()
            )));
        }
        if let Some(x) = self.theta.iter().find(|x| !x.is_finite() || x.abs() > LOGIT_CLAMP) {
            return Err(TrainError::InvalidParams(format!(
                "logit {x} is not finite or exceeds {LOGIT_CLAMP}"
            )));
        }
        Ok(())
    }

    pub fn declare_index(action: &str) -> Option<usize> {
        BUILTINS.iter().position(|b| *b == action)
    }

    pub fn violation_index(kind: ViolationKind) -> usize {
        VIOLATION_OFFSET + kind.index()
    }
}

/// `ln sigmoid(x)` for a success draw, `ln(1 - sigmoid(x))` otherwise.
fn bernoulli_logprob(logit: f64, success: bool) -> f64 {
    let z = if success { -logit } else { logit };
    -(z.max(0.0) + libm::log1p(libm::exp(-libm::fabs(z))))
}

/// The Bernoulli draws behind one sampled trajectory.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Draws {
    /// (logit index, outcome) per draw, in sampling order.
    pub outcomes: Vec<(usize, bool)>,
}

impl Draws {
    pub fn logprob(&self, theta: &[f64]) -> f64 {
        self.outcomes.iter().map(|&(i, x)| bernoulli_logprob(theta[i], x)).sum()
    }

    /// Gradient of the log-probability, averaged over the draws that share
    /// a logit, so every entry lies in [-1, 1].
    pub fn score(&self, theta: &[f64]) -> [f64; THETA_LEN] {
        let mut sum = [0.0; THETA_LEN];
        let mut count = [0u32; THETA_LEN];
        for &(i, x) in &self.outcomes {
            sum[i] += if x { 1.0 } else { 0.0 } - logistic(theta[i]);
            count[i] += 1;
        }
        core::array::from_fn(|i| {
            if count[i] == 0 {
                0.0
            } else {
                sum[i] / f64::from(count[i])
            }
        })
    }

    fn draw(&mut self, r: &mut Rng, theta: &[f64], index: usize) -> bool {
        let x = unit(r) < logistic(theta[index]);
        self.outcomes.push((index, x));
        x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub trajectories: Vec<Trajectory>,
    pub documents: Vec<String>,
    pub logprobs: Vec<f64>,
    pub task_refs: Vec<String>,
    pub kinds: Vec<TaskKind>,
    pub golds: Vec<String>,
    pub draws: Vec<Draws>,
    pub policy_version: u64,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn candidate(&self, i: usize) -> Candidate {
        Candidate {
            id: format!("{}#{i}", self.task_refs[i]),
            document: self.documents[i].clone(),
            gold: self.golds[i].clone(),
        }
    }

    /// Consistency oracle per sample; `None` where there is no answer.
    pub fn oracle_scores(&self) -> Vec<Option<f64>> {
        self.trajectories
            .iter()
            .zip(&self.golds)
            .map(|(t, g)| consistency_oracle(t, g).ok())
            .collect()
    }
}

struct Sampled {
    document: String,
    trajectory: Trajectory,
    draws: Draws,
}

/// Generates one trajectory: draws the policy's choices, plays them through
/// the episode runner in a stub environment, then injects the drawn faults.
fn sample_one(theta: &[f64], task: &ActionTask, registry: &Registry, sec: &SecurityPolicy, seed: u64) -> Sampled {
    let r = &mut rng(seed);
    let mut draws = Draws::default();
    let calls = task.calls();
    let plans: Vec<PlanDecl> = calls
        .iter()
        .filter(|c| match PolicyParams::declare_index(&c.name) {
            Some(i) => draws.draw(r, theta, i),
            None => true,
        })
        .map(|c| PlanDecl::new(&c.name, &c.args, ""))
        .collect();
    let correct = draws.draw(r, theta, ANSWER_INDEX);
    let faults: Vec<ViolationKind> = ViolationKind::ALL
        .into_iter()
        .filter(|k| draws.draw(r, theta, PolicyParams::violation_index(*k)))
        .collect();

    let answer = match (correct, task.gold_answer.is_empty()) {
        (false, _) => WRONG_ANSWER.to_string(),
        (true, true) => FREE_FORM_REPLY.to_string(),
        (true, false) => task.gold_answer.clone(),
    };
    let mut turns = Vec::new();
    if !calls.is_empty() {
        let mut items = vec![Item::Think(ThinkBlock::with_plans("I will run these actions.", &plans))];
        items.extend(calls.into_iter().map(Item::Act));
        turns.push(render_items(&items));
    }
    turns.push(render_items(&[
        Item::Think(ThinkBlock::new("Ready to answer.")),
        Item::Answer(AnswerBlock { text: answer }),
    ]));

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
        &mut ScriptedPolicy::new(turns),
    );
    let document = if faults.is_empty() {
        episode.document
    } else {
        let mut draft = Draft::new(&episode.trajectory);
        for kind in faults {
            // a fault with no site in this trajectory leaves it unchanged
            let _ = draft.apply(kind, r);
        }
        draft.render()
    };
    let trajectory = parse(&document)
        .map(|p| p.trajectory.with_task_id(task.task_id.clone()))
        .unwrap_or_else(|_| Trajectory::new(task.task_id.clone()));
    Sampled {
        document,
        trajectory,
        draws,
    }
}

fn sampling_policy(registry: &Registry) -> SecurityPolicy {
    SecurityPolicy {
        max_calls_per_turn: 16,
        max_calls_per_episode: 64,
        ..SecurityPolicy::permissive(registry)
    }
}

/// One trajectory for `task` under the security policy `sec`, as a
/// document and its parse. Deterministic in `seed`.
pub fn sample_episode(
    policy: &PolicyParams,
    task: &ActionTask,
    sec: &SecurityPolicy,
    seed: u64,
) -> Result<(String, Trajectory), TrainError> {
    policy.check()?;
    let s = sample_one(&policy.theta, task, &Registry::new(), sec, seed);
    Ok((s.document, s.trajectory))
}

/// `k` trajectories per task; deterministic in `seed`.
pub fn sample(policy: &PolicyParams, tasks: &[ActionTask], k: usize, seed: u64) -> Result<SampleBatch, TrainError> {
    if tasks.is_empty() {
        return Err(TrainError::EmptyTasks);
    }
    if k == 0 {
        return Err(TrainError::InvalidConfig("k_per_task must be at least 1".into()));
    }
    policy.check()?;
    let registry = Registry::new();
    let sec = sampling_policy(&registry);
    let n = tasks.len() * k;
    let mut batch = SampleBatch {
        trajectories: Vec::with_capacity(n),
        documents: Vec::with_capacity(n),
        logprobs: Vec::with_capacity(n),
        task_refs: Vec::with_capacity(n),
        kinds: Vec::with_capacity(n),
        golds: Vec::with_capacity(n),
        draws: Vec::with_capacity(n),
        policy_version: policy.version,
    };
    for (ti, task) in tasks.iter().enumerate() {
        let task_seed = derive(seed, ti as u64);
        for j in 0..k {
            let s = sample_one(&policy.theta, task, &registry, &sec, derive(task_seed, j as u64));
            batch.logprobs.push(s.draws.logprob(&policy.theta));
            batch.trajectories.push(s.trajectory);
            batch.documents.push(s.document);
            batch.task_refs.push(task.task_id.clone());
            batch.kinds.push(task.kind);
            batch.golds.push(task.gold_answer.clone());
            batch.draws.push(s.draws);
        }
    }
    Ok(batch)
}

/// All within-task pairs whose oracle scores differ. Samples without an
/// answer have no oracle score and are left out.
pub fn make_pairs(batch: &SampleBatch) -> Vec<ConsistencyLabel> {
    let scores = batch.oracle_scores();
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut order = Vec::new();
    for (i, t) in batch.task_refs.iter().enumerate() {
        let g = groups.entry(t.as_str()).or_default();
        if g.is_empty() {
            order.push(t.as_str());
        }
        g.push(i);
    }
    let mut labels = Vec::new();
    for task in order {
        let members = &groups[task];
        for (x, &i) in members.iter().enumerate() {
            for &j in &members[x + 1..] {
                let (Some(si), Some(sj)) = (scores[i], scores[j]) else {
                    continue;
                };
                if si == sj {
                    continue;
                }
                let preferred = if si > sj { Preferred::A } else { Preferred::B };
                labels.push(ConsistencyLabel {
                    a: batch.candidate(i),
                    b: batch.candidate(j),
                    preferred,
                    source: LabelSource::Oracle,
                });
            }
        }
    }
    labels
}

/// Which consistency scorer the optimizer is rewarded by.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSource {
    Oracle,
    Model(PairwiseModel),
}

impl RewardSource {
    fn scorers(&self) -> Scorers<'_> {
        Scorers {
            consistency_model: match self {
                RewardSource::Oracle => None,
                RewardSource::Model(m) => Some(m),
            },
            ..Scorers::default()
        }
    }
}

pub fn score_batch(batch: &SampleBatch, scorers: &Scorers<'_>) -> Vec<RewardBreakdown> {
    (0..batch.len())
        .map(|i| score_document(batch.kinds[i], &batch.documents[i], &batch.golds[i], scorers))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub iterations: usize,
    pub lr: f64,
    pub k_per_task: usize,
    pub epochs: usize,
    pub minibatches: usize,
    pub clip: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            lr: 0.1,
            k_per_task: 4,
            epochs: 4,
            minibatches: 4,
            clip: 0.2,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn check(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if self.k_per_task == 0 || self.epochs == 0 || self.minibatches == 0 {
            return bad("k_per_task, epochs and minibatches must be at least 1");
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip must lie in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimStep {
    pub iteration: usize,
    pub mean_total_reward: f64,
    pub mean_format: f64,
    /// Mean of the non-format component the optimizer was rewarded with.
    pub mean_consistency: f64,
    /// Oracle consistency over the batch, whatever the reward source.
    pub mean_oracle_consistency: f64,
    pub kl_estimate: f64,
    pub max_logit_change: f64,
    pub theta_after: PolicyParams,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Clipped policy-gradient updates on an already scored batch. Returns the
/// new logits.
///
/// Each epoch walks the batch in `minibatches` interleaved slices and takes
/// one gradient step per slice. A sample's score function is weighted by
/// its advantage and by its importance ratio clipped to
/// `[1 - clip, 1 + clip]`; because score entries lie in [-1, 1], no single
/// step moves a logit by more than `lr * (1 + clip) * max|advantage|`.
pub fn update(theta: &[f64], batch: &SampleBatch, advantages: &[f64], cfg: &OptimConfig) -> Vec<f64> {
    let mut theta = theta.to_vec();
    let slices = cfg.minibatches.min(batch.len()).max(1);
    for _ in 0..cfg.epochs {
        for slice in 0..slices {
            let members: Vec<usize> = (slice..batch.len()).step_by(slices).collect();
            let n = members.len() as f64;
            let mut grad = [0.0; THETA_LEN];
            for &i in &members {
                if advantages[i] == 0.0 {
                    continue;
                }
                let draws = &batch.draws[i];
                let ratio = libm::exp(draws.logprob(&theta) - batch.logprobs[i]);
                let weight = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
                for (g, s) in grad.iter_mut().zip(draws.score(&theta)) {
                    *g += weight * advantages[i] * s / n;
                }
            }
            for (t, g) in theta.iter_mut().zip(grad) {
                *t = (*t + cfg.lr * g).clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
            }
        }
    }
    theta
}

/// `mean((r - 1) - ln r)` with `r = p_new / p_old` on the batch's samples.
pub fn kl_k3(theta_new: &[f64], batch: &SampleBatch) -> f64 {
    mean(batch.draws.iter().zip(&batch.logprobs).map(|(d, old)| {
        let log_r = d.logprob(theta_new) - old;
        libm::expm1(log_r) - log_r
    }))
}

pub fn optimize(
    policy: &PolicyParams,
    tasks: &[ActionTask],
    reward: &RewardSource,
    cfg: &OptimConfig,
) -> Result<Vec<OptimStep>, TrainError> {
    cfg.check()?;
    policy.check()?;
    if let RewardSource::Model(m) = reward {
        m.check().map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    }
    let scorers = reward.scorers();
    let mut current = policy.clone();
    let mut steps = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let batch = sample(&current, tasks, cfg.k_per_task, derive(cfg.seed, iteration as u64))?;
        let rewards = score_batch(&batch, &scorers);
        let mean_total = mean(rewards.iter().map(|r| r.total));
        if mean_total.is_nan() {
            return Err(TrainError::Diverged(iteration));
        }
        let advantages: Vec<f64> = rewards.iter().map(|r| r.total - mean_total).collect();
        let theta = update(&current.theta, &batch, &advantages, cfg);
        let max_logit_change = theta
            .iter()
            .zip(&current.theta)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max);
        let oracle: Vec<f64> = batch
            .oracle_scores()
            .into_iter()
            .zip(&batch.kinds)
            .filter(|(_, k)| **k == TaskKind::Action)
            .map(|(s, _)| s.unwrap_or(0.0))
            .collect();
        steps.push(OptimStep {
            iteration,
            mean_total_reward: mean_total,
            mean_format: mean(rewards.iter().map(|r| r.format)),
            mean_consistency: mean(rewards.iter().map(RewardBreakdown::secondary)),
            mean_oracle_consistency: mean(oracle),
            kl_estimate: kl_k3(&theta, &batch),
            max_logit_change,
            theta_after: PolicyParams {
                theta: theta.clone(),
                version: current.version + 1,
            },
        });
        current = PolicyParams {
            theta,
            version: current.version + 1,
        };
    }
    Ok(steps)
}

/// Mean of the last `window` steps minus the mean of the first `window`.
pub fn improvement(steps: &[OptimStep], window: usize) -> f64 {
    let w = window.min(steps.len());
    let head = mean(steps[..w].iter().map(|s| s.mean_total_reward));
    let tail = mean(steps[steps.len() - w..].iter().map(|s| s.mean_total_reward));
    tail - head
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KindSummary {
    pub count: usize,
    pub mean_format: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_consistency: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_rule: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_preference: Option<f64>,
    pub mean_total: f64,
}

/// Samples `n` trajectories per task and averages their rewards per kind.
pub fn evaluate(
    policy: &PolicyParams,
    tasks: &[ActionTask],
    n: usize,
    seed: u64,
    scorers: &Scorers<'_>,
) -> Result<BTreeMap<TaskKind, KindSummary>, TrainError> {
    if n == 0 {
        return Err(TrainError::InvalidConfig("n must be at least 1".into()));
    }
    let batch = sample(policy, tasks, n, seed)?;
    let rewards = score_batch(&batch, scorers);
    let mut out = BTreeMap::new();
    for kind in TaskKind::ALL {
        let rs: Vec<&RewardBreakdown> = rewards.iter().filter(|r| r.kind == kind).collect();
        if rs.is_empty() {
            continue;
        }
        let opt_mean = |f: fn(&RewardBreakdown) -> Option<f64>| {
            let xs: Vec<f64> = rs.iter().filter_map(|r| f(r)).collect();
            (!xs.is_empty()).then(|| mean(xs))
        };
        out.insert(
            kind,
            KindSummary {
                count: rs.len(),
                mean_format: mean(rs.iter().map(|r| r.format)),
                mean_consistency: opt_mean(|r| r.consistency),
                mean_rule: opt_mean(|r| r.rule),
                mean_preference: opt_mean(|r| r.preference),
                mean_total: mean(rs.iter().map(|r| r.total)),
            },
        );
    }
    Ok(out)
}

/// Samples batches from `policy` until at least `want` oracle labels are
/// collected, then truncates to exactly `want` if that many were found.
pub fn collect_labels(
    policy: &PolicyParams,
    tasks: &[ActionTask],
    k: usize,
    seed: u64,
    want: usize,
    max_rounds: usize,
) -> Result<Vec<ConsistencyLabel>, TrainError> {
    let mut labels = Vec::new();
    for round in 0..max_rounds {
        if labels.len() >= want {
            break;
        }
        let batch = sample(policy, tasks, k, derive(seed, round as u64))?;
        labels.extend(make_pairs(&batch));
    }
    labels.truncate(want);
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{action_only, generate_tasks, Mix};
    use crate::reward::format_reward;

    fn tasks(n: usize) -> Vec<ActionTask> {
        generate_tasks(n, 5, &action_only()).unwrap()
    }

    #[test]
    fn test_logprob_matches_probabilities() {
        let d = Draws {
            outcomes: vec![(0, true), (0, false), (4, true)],
        };
        let mut theta = vec![0.0; THETA_LEN];
        theta[4] = 1.0;
        let expected = libm::log(0.5) * 2.0 + libm::log(logistic(1.0));
        assert!((d.logprob(&theta) - expected).abs() < 1e-12);
        let s = d.score(&theta);
        assert_eq!(s[0], 0.0);
        assert!((s[4] - (1.0 - logistic(1.0))).abs() < 1e-12);
        assert!(bernoulli_logprob(50.0, false).is_finite());
    }

    #[test]
    fn test_saturated_policies() {
        let ts = tasks(20);
        let good = sample(&PolicyParams::saturated_good(), &ts, 2, 1).unwrap();
        for (i, t) in good.trajectories.iter().enumerate() {
            let parsed = parse(&good.documents[i]).unwrap();
            assert_eq!(format_reward(&parsed.violations), 1.0);
            assert_eq!(consistency_oracle(t, &good.golds[i]), Ok(1.0));
        }
        let bad = sample(&PolicyParams::from_parts(-50.0, -50.0, -50.0), &ts, 2, 1).unwrap();
        for (i, t) in bad.trajectories.iter().enumerate() {
            assert_eq!(consistency_oracle(t, &bad.golds[i]), Ok(0.0));
        }
        assert!(good
            .logprobs
            .iter()
            .chain(&bad.logprobs)
            .all(|l| l.is_finite() && *l <= 0.0));
    }

    #[test]
    fn test_sample_deterministic_and_errors() {
        let ts = tasks(4);
        let p = PolicyParams::neutral();
        assert_eq!(sample(&p, &ts, 3, 9), sample(&p, &ts, 3, 9));
        assert_ne!(
            sample(&p, &ts, 3, 9).unwrap().documents,
            sample(&p, &ts, 3, 10).unwrap().documents
        );
        assert_eq!(sample(&p, &[], 3, 9), Err(TrainError::EmptyTasks));
        assert!(matches!(sample(&p, &ts, 0, 9), Err(TrainError::InvalidConfig(_))));
        let mut wild = p.clone();
        wild.theta[0] = 51.0;
        assert!(matches!(sample(&wild, &ts, 1, 9), Err(TrainError::InvalidParams(_))));
    }

    #[test]
    fn test_make_pairs_rules() {
        let ts = tasks(1);
        let mut batch = sample(&PolicyParams::from_parts(0.0, 0.0, -50.0), &ts, 3, 2).unwrap();
        let good = sample(&PolicyParams::saturated_good(), &ts, 1, 0).unwrap();
        let bad = sample(&PolicyParams::from_parts(-50.0, -50.0, -50.0), &ts, 1, 0).unwrap();
        for (slot, src) in [(0, &good), (1, &good), (2, &bad)] {
            batch.trajectories[slot] = src.trajectories[0].clone();
            batch.documents[slot] = src.documents[0].clone();
        }
        let labels = make_pairs(&batch);
        assert_eq!(labels.len(), 2);
        assert!(labels.iter().all(|l| l.winner_loser().0.document == good.documents[0]));
        let single = sample(&PolicyParams::neutral(), &tasks(5), 1, 0).unwrap();
        assert!(make_pairs(&single).is_empty());
    }

    #[test]
    fn test_update_properties() {
        let ts = tasks(8);
        let cfg = OptimConfig {
            iterations: 3,
            ..OptimConfig::default()
        };
        let good = PolicyParams::saturated_good();
        for step in optimize(&good, &ts, &RewardSource::Oracle, &cfg).unwrap() {
            assert!(step.max_logit_change < 1e-6);
        }
        let frozen = OptimConfig { lr: 0.0, ..cfg.clone() };
        for step in optimize(&PolicyParams::neutral(), &ts, &RewardSource::Oracle, &frozen).unwrap() {
            assert_eq!(step.theta_after.theta, PolicyParams::neutral().theta);
        }
        let steps = optimize(&PolicyParams::neutral(), &ts, &RewardSource::Oracle, &cfg).unwrap();
        for s in &steps {
            assert!(s.kl_estimate >= -1e-9);
            assert!(s.max_logit_change <= (cfg.epochs * cfg.minibatches) as f64 * cfg.lr * (1.0 + cfg.clip) + 1e-12);
            assert!((0.0..=1.0).contains(&s.mean_total_reward));
        }
        assert_eq!(
            steps,
            optimize(&PolicyParams::neutral(), &ts, &RewardSource::Oracle, &cfg).unwrap()
        );
    }

    #[test]
    fn test_evaluate() {
        let mix: Mix = [(TaskKind::Action, 0.5), (TaskKind::Reasoning, 0.5)]
            .into_iter()
            .collect();
        let ts = generate_tasks(10, 3, &mix).unwrap();
        let s = evaluate(&PolicyParams::saturated_good(), &ts, 2, 0, &Scorers::default()).unwrap();
        for summary in s.values() {
            assert_eq!((summary.mean_format, summary.mean_total), (1.0, 1.0));
        }
        let bad = PolicyParams::from_parts(-50.0, -50.0, -50.0);
        let s = evaluate(&bad, &ts, 2, 0, &Scorers::default()).unwrap();
        assert_eq!(s[&TaskKind::Action].mean_consistency, Some(0.0));
        let one = evaluate(&PolicyParams::neutral(), &ts[..1], 1, 4, &Scorers::default()).unwrap();
        let batch = sample(&PolicyParams::neutral(), &ts[..1], 1, 4).unwrap();
        let r = score_batch(&batch, &Scorers::default())[0];
        assert_eq!(one[&r.kind].mean_total, r.total);
    }
}

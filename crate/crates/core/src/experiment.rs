//! The two end-to-end studies: fitting the consistency reward model on
//! oracle labels, and optimizing the policy against oracle vs. model.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{action_only, generate_tasks};
use crate::reward::{fit_pairwise, ConsistencyLabel, PairwiseModel};
use crate::train::{collect_labels, improvement, optimize, OptimConfig, OptimStep, PolicyParams, RewardSource};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
#[error("{0}")]
pub struct ExperimentError(pub String);

fn err(e: impl ToString) -> ExperimentError {
    ExperimentError(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FidelityConfig {
    pub n_tasks: usize,
    pub task_seed: u64,
    pub k: usize,
    pub label_seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub l2: f64,
    pub max_iter: usize,
    pub max_rounds: usize,
}

impl Default for FidelityConfig {
    fn default() -> Self {
        Self {
            n_tasks: 400,
            task_seed: 1,
            k: 4,
            label_seed: 1,
            n_train: 2000,
            n_test: 500,
            l2: 10.0,
            max_iter: 1000,
            max_rounds: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub train_agreement: f64,
    pub test_agreement: f64,
    pub model: PairwiseModel,
}

/// Fraction of labels whose preferred candidate the model scores strictly
/// higher. Ties count as disagreement.
pub fn agreement(model: &PairwiseModel, labels: &[ConsistencyLabel]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .filter(|l| {
            let (w, lo) = l.winner_loser();
            model.score_features(&w.features()) > model.score_features(&lo.features())
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Oracle-labels pairs sampled from the neutral policy, fits on the first
/// `n_train` and measures agreement on the next `n_test`.
pub fn rm_fidelity(cfg: &FidelityConfig) -> Result<FidelityReport, ExperimentError> {
    let tasks = generate_tasks(cfg.n_tasks, cfg.task_seed, &action_only()).map_err(err)?;
    let want = cfg.n_train + cfg.n_test;
    let labels = collect_labels(
        &PolicyParams::neutral(),
        &tasks,
        cfg.k,
        cfg.label_seed,
        want,
        cfg.max_rounds,
    )
    .map_err(err)?;
    if labels.len() < want {
        return Err(ExperimentError(alloc::format!(
            "collected {} of {want} labels",
            labels.len()
        )));
    }
    let (train, test) = labels.split_at(cfg.n_train);
    let model = fit_pairwise(train, cfg.l2, cfg.max_iter).map_err(err)?;
    Ok(FidelityReport {
        train_pairs: train.len(),
        test_pairs: test.len(),
        train_agreement: agreement(&model, train),
        test_agreement: agreement(&model, test),
        model,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub n_tasks: usize,
    pub task_seed: u64,
    pub window: usize,
    pub optim: OptimConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            n_tasks: 32,
            task_seed: 0,
            window: 10,
            optim: OptimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub improvement: f64,
    /// Oracle consistency averaged over the last `window` steps.
    pub final_oracle_consistency: f64,
    pub steps: Vec<OptimStep>,
}

fn summarize(steps: Vec<OptimStep>, window: usize) -> RunSummary {
    let w = window.min(steps.len()).max(1);
    let tail = &steps[steps.len().saturating_sub(w)..];
    RunSummary {
        improvement: improvement(&steps, window),
        final_oracle_consistency: tail.iter().map(|s| s.mean_oracle_consistency).sum::<f64>() / tail.len() as f64,
        steps,
    }
}

pub fn run_optimization(cfg: &StudyConfig, reward: &RewardSource) -> Result<RunSummary, ExperimentError> {
    let tasks = generate_tasks(cfg.n_tasks, cfg.task_seed, &action_only()).map_err(err)?;
    let steps = optimize(&PolicyParams::neutral(), &tasks, reward, &cfg.optim).map_err(err)?;
    Ok(summarize(steps, cfg.window))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub oracle: RunSummary,
    pub model: RunSummary,
    /// |oracle − model| in final oracle consistency.
    pub gap: f64,
}

/// Optimizes from the neutral policy twice, once rewarded by the oracle and
/// once by `model`, and compares where the two land.
pub fn oracle_model_gap(cfg: &StudyConfig, model: &PairwiseModel) -> Result<GapReport, ExperimentError> {
    let oracle = run_optimization(cfg, &RewardSource::Oracle)?;
    let model = run_optimization(cfg, &RewardSource::Model(model.clone()))?;
    let gap = libm::fabs(oracle.final_oracle_consistency - model.final_oracle_consistency);
    Ok(GapReport { oracle, model, gap })
}

use proptest::prelude::*;
use thinkact_core::action::{Registry, SecurityPolicy, StubEnv};
use thinkact_core::data::{
    action_only, generate_tasks, initial_context, render_reference, to_sft_pair, unmasked_text, ActionTask, Mix,
};
use thinkact_core::protocol::{parse, serialize};
use thinkact_core::reward::{score_document, Scorers, TaskKind};
use thinkact_core::runtime::{run_episode, Runner, ScriptedPolicy, StopReason, DEFAULT_MAX_TURNS};
use thinkact_core::train::{optimize, sample, OptimConfig, PolicyParams, RewardSource};

fn mixed() -> Mix {
    [
        (TaskKind::Action, 0.5),
        (TaskKind::Reasoning, 0.3),
        (TaskKind::Other, 0.2),
    ]
    .into_iter()
    .collect()
}

#[test]
fn test_action_references_score_perfectly() {
    let registry = Registry::new();
    let scorers = Scorers::default();
    for seed in 0..5 {
        for task in generate_tasks(200, seed, &action_only()).unwrap() {
            let doc = serialize(&render_reference(&task, &registry).unwrap()).unwrap();
            let b = score_document(task.kind, &doc, &task.gold_answer, &scorers);
            assert_eq!((b.format, b.consistency), (1.0, Some(1.0)), "{}: {doc}", task.task_id);
            assert_eq!(b.total, 1.0);
        }
    }
}

#[test]
fn test_reasoning_references_satisfy_rule() {
    let registry = Registry::new();
    for task in generate_tasks(200, 9, &mixed()).unwrap() {
        let doc = serialize(&render_reference(&task, &registry).unwrap()).unwrap();
        let b = score_document(task.kind, &doc, &task.gold_answer, &Scorers::default());
        assert_eq!(b.format, 1.0);
        if task.kind == TaskKind::Reasoning {
            assert_eq!(b.rule, Some(1.0));
        }
    }
}

#[test]
fn test_runner_replays_references_exactly() {
    let registry = Registry::new();
    let policy = SecurityPolicy {
        max_calls_per_turn: 16,
        ..SecurityPolicy::permissive(&registry)
    };
    for task in generate_tasks(150, 4, &mixed()).unwrap() {
        let reference = render_reference(&task, &registry).unwrap();
        let mut stub = StubEnv::default();
        let mut runner = Runner {
            registry: &registry,
            policy: &policy,
            clock: &stub.clock,
            external: &mut stub.external,
            max_turns: DEFAULT_MAX_TURNS,
        };
        let episode = run_episode(
            &mut runner,
            &task.task_id,
            &task.instruction,
            initial_context(&task),
            &mut ScriptedPolicy::from_reference(&reference),
        );
        assert_eq!(episode.stop, StopReason::Answered);
        assert_eq!(episode.document, serialize(&reference).unwrap(), "{}", task.task_id);
        assert_eq!(episode.trajectory, reference);
    }
}

#[test]
fn test_tasks_round_trip_as_json_lines() {
    let tasks = generate_tasks(50, 2, &mixed()).unwrap();
    for task in &tasks {
        let line = serde_json::to_string(task).unwrap();
        assert!(!line.contains('\n'));
        assert_eq!(&serde_json::from_str::<ActionTask>(&line).unwrap(), task);
    }
    let mut v = serde_json::to_value(&tasks[0]).unwrap();
    v["surprise"] = 1.into();
    assert!(serde_json::from_value::<ActionTask>(v).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn test_sft_masks_cover_exactly_the_results(seed in 0u64..10_000) {
        let registry = Registry::new();
        for task in generate_tasks(6, seed, &mixed()).unwrap() {
            let reference = render_reference(&task, &registry).unwrap();
            let pair = to_sft_pair(&task, &reference).unwrap();
            prop_assert!(pair.mask_spans.windows(2).all(|w| w[0].1 < w[1].0));
            for &(s, e) in &pair.mask_spans {
                let masked = &pair.completion[s..e];
                prop_assert!(masked.starts_with("<result ") && masked.ends_with("</result>"));
            }
            let kept = unmasked_text(&pair);
            prop_assert!(!kept.contains("<result"));
            let results = reference.results().count();
            prop_assert_eq!(pair.mask_spans.len(), results);
            prop_assert_eq!(pair.completion.matches("<result ").count(), results);
            prop_assert!(pair.prompt.starts_with(&task.instruction));
            prop_assert_eq!(parse(&pair.completion).unwrap().trajectory.with_task_id(task.task_id.clone()), reference);
        }
    }
}

#[test]
fn test_sampling_and_training_are_deterministic() {
    let tasks = generate_tasks(8, 3, &action_only()).unwrap();
    let policy = PolicyParams::neutral();
    assert_eq!(
        sample(&policy, &tasks, 4, 17).unwrap(),
        sample(&policy, &tasks, 4, 17).unwrap()
    );
    assert_ne!(
        sample(&policy, &tasks, 4, 17).unwrap().documents,
        sample(&policy, &tasks, 4, 18).unwrap().documents
    );
    let cfg = OptimConfig {
        iterations: 10,
        ..OptimConfig::default()
    };
    let a = optimize(&policy, &tasks, &RewardSource::Oracle, &cfg).unwrap();
    let b = optimize(&policy, &tasks, &RewardSource::Oracle, &cfg).unwrap();
    assert_eq!(a, b);
    let steps_per_iteration = (cfg.epochs * cfg.minibatches) as f64;
    for step in &a {
        // advantages of [0, 1] rewards lie in [-1, 1]
        assert!(step.max_logit_change <= steps_per_iteration * cfg.lr * (1.0 + cfg.clip) + 1e-12);
        assert!(step.kl_estimate >= -1e-12);
    }
}

#[test]
fn test_saturated_policy_scores_perfectly() {
    let tasks = generate_tasks(16, 6, &action_only()).unwrap();
    let batch = sample(&PolicyParams::saturated_good(), &tasks, 2, 0).unwrap();
    assert!(batch.oracle_scores().iter().all(|s| *s == Some(1.0)));
}

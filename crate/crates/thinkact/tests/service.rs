use std::io::{BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::Arc;

use reqwest::{Client, StatusCode};
use serde_json::{json, Value};
use thinkact::files::{write_json, write_jsonl, write_tasks};
use thinkact::service::{serve, ManualClock, Service, ServiceClock, SystemClock};
use thinkact::store::{DataDir, QueueItem, QueueStatus, LEASE_MS};
use thinkact_core::data::{action_only, generate_tasks};
use thinkact_core::reward::Preferred;
use thinkact_core::train::{optimize, OptimConfig, PolicyParams, RewardSource};

async fn start(dir: &Path, clock: Arc<dyn ServiceClock>) -> (String, tokio::task::JoinHandle<()>) {
    let svc = Arc::new(Service::open(DataDir::new(dir), clock).unwrap());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = tokio::spawn(async move {
        serve(listener, svc).await.unwrap();
    });
    (format!("http://{addr}"), handle)
}

async fn enqueue(client: &Client, base: &str, a: &str, b: &str) -> QueueItem {
    let resp = client
        .post(format!("{base}/queue"))
        .json(&json!({"trajectory_a": a, "trajectory_b": b, "task_id": "t1"}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::CREATED);
    resp.json().await.unwrap()
}

async fn label(client: &Client, base: &str, pair: &str, choice: &str, labeler: &str) -> reqwest::Response {
    client
        .post(format!("{base}/queue/{pair}/label"))
        .json(&json!({"choice": choice, "labeler": labeler}))
        .send()
        .await
        .unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn test_racing_duplicate_labels_are_exactly_once() {
    let dir = tempfile::tempdir().unwrap();
    let (base, _server) = start(dir.path(), Arc::new(SystemClock)).await;
    for round in 0..20 {
        let item = enqueue(&Client::new(), &base, &format!("a{round}"), &format!("b{round}")).await;
        let racers: Vec<_> = (0..8)
            .map(|i| {
                let (base, pair) = (base.clone(), item.pair_id.clone());
                tokio::spawn(async move {
                    let choice = if i % 2 == 0 { "A" } else { "B" };
                    let resp = label(&Client::new(), &base, &pair, choice, &format!("l{i}")).await;
                    (resp.status(), choice)
                })
            })
            .collect();
        let mut winners = Vec::new();
        for r in racers {
            let (status, choice) = r.await.unwrap();
            match status {
                StatusCode::OK => winners.push(choice),
                StatusCode::CONFLICT => {}
                other => panic!("unexpected {other}"),
            }
        }
        assert_eq!(winners.len(), 1, "round {round}");
        let stored: QueueItem = Client::new()
            .get(format!("{base}/queue/{}", item.pair_id))
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap();
        assert_eq!(stored.status, QueueStatus::Labeled);
        let want = if winners[0] == "A" { Preferred::A } else { Preferred::B };
        assert_eq!(stored.label, Some(want));
    }
    let journal = std::fs::read_to_string(DataDir::new(dir.path()).queue_journal()).unwrap();
    assert_eq!(journal.lines().filter(|l| l.contains("\"labeled\"")).count(), 20);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn test_lease_expiry_returns_item() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::new(1_000_000));
    let (base, _server) = start(dir.path(), clock.clone()).await;
    let client = Client::new();
    let first = enqueue(&client, &base, "a", "b").await;
    let next = || async { client.get(format!("{base}/queue/next")).send().await.unwrap() };

    let leased = next().await;
    assert_eq!(leased.status(), StatusCode::OK);
    let leased: QueueItem = leased.json().await.unwrap();
    assert_eq!(leased.pair_id, first.pair_id);
    assert_eq!(leased.status, QueueStatus::Pending);
    assert_eq!(leased.leased_until_ms, Some(1_000_000 + LEASE_MS));

    assert_eq!(next().await.status(), StatusCode::NO_CONTENT);
    clock.advance(LEASE_MS - 1);
    assert_eq!(next().await.status(), StatusCode::NO_CONTENT);
    clock.advance(1);
    let again: QueueItem = next().await.json().await.unwrap();
    assert_eq!(again.pair_id, first.pair_id);

    assert_eq!(
        label(&client, &base, &first.pair_id, "B", "ann").await.status(),
        StatusCode::OK
    );
    clock.advance(2 * LEASE_MS);
    assert_eq!(next().await.status(), StatusCode::NO_CONTENT);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn test_oldest_pending_first() {
    let dir = tempfile::tempdir().unwrap();
    let (base, _server) = start(dir.path(), Arc::new(ManualClock::new(0))).await;
    let client = Client::new();
    for i in 0..3 {
        enqueue(&client, &base, &format!("a{i}"), &format!("b{i}")).await;
    }
    assert_eq!(
        label(&client, &base, "p000001", "A", "ann").await.status(),
        StatusCode::OK
    );
    let resp = client.post(format!("{base}/queue/p000002/skip")).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let next: QueueItem = client
        .get(format!("{base}/queue/next"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(next.pair_id, "p000003");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn test_error_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let (base, _server) = start(dir.path(), Arc::new(SystemClock)).await;
    let client = Client::new();
    assert_eq!(
        client.get(format!("{base}/queue/next")).send().await.unwrap().status(),
        StatusCode::NO_CONTENT
    );
    let item = enqueue(&client, &base, "a", "b").await;
    let url = format!("{base}/queue/{}/label", item.pair_id);

    let bad_bodies = [
        "not json",
        "{}",
        r#"{"choice":"C","labeler":"ann"}"#,
        r#"{"choice":"A"}"#,
        r#"{"choice":"A","labeler":"ann","extra":1}"#,
        r#"{"choice":"A","labeler":"bad id!"}"#,
    ];
    for b in bad_bodies {
        let resp = client.post(&url).body(b).send().await.unwrap();
        assert_eq!(resp.status(), StatusCode::UNPROCESSABLE_ENTITY, "{b}");
        let body: Value = resp.json().await.unwrap();
        assert!(body["error"].is_string());
    }
    assert_eq!(
        label(&client, &base, &item.pair_id, "A", "ann").await.status(),
        StatusCode::OK
    );
    assert_eq!(
        label(&client, &base, &item.pair_id, "A", "ann").await.status(),
        StatusCode::CONFLICT
    );
    assert_eq!(
        label(&client, &base, "p999999", "A", "ann").await.status(),
        StatusCode::NOT_FOUND
    );
    for path in ["/queue/p999999", "/trajectories/tr000001", "/runs/r1/steps", "/nope"] {
        assert_eq!(
            client.get(format!("{base}{path}")).send().await.unwrap().status(),
            StatusCode::NOT_FOUND,
            "{path}"
        );
    }
    let resp = client
        .post(format!("{base}/trajectories/tr000001/score"))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::NOT_FOUND);
    let dup = client
        .post(format!("{base}/queue"))
        .json(&json!({"pair_id": item.pair_id, "trajectory_a": "x", "trajectory_b": "y"}))
        .send()
        .await
        .unwrap();
    assert_eq!(dup.status(), StatusCode::CONFLICT);
    let same = client
        .post(format!("{base}/queue"))
        .json(&json!({"trajectory_a": "x", "trajectory_b": "x"}))
        .send()
        .await
        .unwrap();
    assert_eq!(same.status(), StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn test_episodes_and_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let data = DataDir::new(dir.path());
    let tasks = generate_tasks(10, 3, &action_only()).unwrap();
    write_tasks(&data.tasks(), &tasks).unwrap();
    write_json(&data.checkpoint("good"), &PolicyParams::saturated_good()).unwrap();
    let (base, _server) = start(dir.path(), Arc::new(SystemClock)).await;
    let client = Client::new();
    let task_id = &tasks[0].task_id;

    let resp = client
        .post(format!("{base}/episodes"))
        .json(&json!({"task_id": task_id, "policy_ref": "SCRIPTED"}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::CREATED);
    let ep: Value = resp.json().await.unwrap();
    assert_eq!(ep["score"]["total"], 1.0);
    assert!(!ep["records"].as_array().unwrap().is_empty());
    let id = ep["trajectory_id"].as_str().unwrap().to_string();

    let view: Value = client
        .get(format!("{base}/trajectories/{id}"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(view["document"], ep["document"]);
    assert_eq!(view["violations"], json!([]));
    assert!(view["trajectory"]["turns"].as_array().unwrap().len() >= 3);
    assert!(!view["spans"].as_array().unwrap().is_empty());

    let score: Value = client
        .post(format!("{base}/trajectories/{id}/score"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(score, ep["score"]);

    let sampled = client
        .post(format!("{base}/episodes"))
        .json(&json!({"task_id": task_id, "policy_ref": "good", "seed": 5}))
        .send()
        .await
        .unwrap();
    assert_eq!(sampled.status(), StatusCode::CREATED);

    let cases = [
        (
            json!({"task_id": "missing", "policy_ref": "SCRIPTED"}),
            StatusCode::NOT_FOUND,
        ),
        (json!({"task_id": task_id, "policy_ref": "nope"}), StatusCode::NOT_FOUND),
        (json!({"task_id": task_id}), StatusCode::UNPROCESSABLE_ENTITY),
        (
            json!({"task_id": task_id, "policy_ref": "SCRIPTED", "limits": {"max_calls_per_turn": 0}}),
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
        (
            json!({"task_id": task_id, "policy_ref": "SCRIPTED", "limits": {"allowlist": ["rm_rf"]}}),
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
    ];
    for (body, want) in cases {
        let resp = client
            .post(format!("{base}/episodes"))
            .json(&body)
            .send()
            .await
            .unwrap();
        assert_eq!(resp.status(), want, "{body}");
    }

    let denied: Value = client
        .post(format!("{base}/episodes"))
        .json(&json!({"task_id": task_id, "policy_ref": "SCRIPTED", "limits": {"allowlist": []}}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert!(denied["records"]
        .as_array()
        .unwrap()
        .iter()
        .all(|r| r["policy_verdict"] == "DENIED_ALLOWLIST"));
    assert!(denied["document"].as_str().unwrap().contains("status=\"denied\""));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn test_run_steps_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let data = DataDir::new(dir.path());
    let tasks = generate_tasks(4, 1, &action_only()).unwrap();
    write_tasks(&data.tasks(), &tasks).unwrap();
    let cfg = OptimConfig {
        iterations: 3,
        ..OptimConfig::default()
    };
    let steps = optimize(&PolicyParams::neutral(), &tasks, &RewardSource::Oracle, &cfg).unwrap();
    write_jsonl(&data.run_dir("r1").join("steps.jsonl"), &steps).unwrap();
    let (base, _server) = start(dir.path(), Arc::new(SystemClock)).await;
    let client = Client::new();
    let got: Value = client
        .get(format!("{base}/runs/r1/steps"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(got, serde_json::to_value(&steps).unwrap());

    let resp = client
        .post(format!("{base}/queue"))
        .json(&json!({"task_id": tasks[0].task_id, "trajectory_a": "<answer>1</answer>", "trajectory_b": "<answer>2</answer>"}))
        .send()
        .await
        .unwrap();
    let item: QueueItem = resp.json().await.unwrap();
    label(&client, &base, &item.pair_id, "B", "ann").await;
    let labels: Value = client
        .get(format!("{base}/labels"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let labels = labels.as_array().unwrap();
    assert_eq!(labels.len(), 1);
    assert_eq!(labels[0]["source"], "HUMAN");
    assert_eq!(labels[0]["preferred"], "B");
    assert_eq!(labels[0]["a"]["gold"], tasks[0].gold_answer.as_str());
}

struct Served {
    child: Child,
    base: String,
}

fn serve_process(dir: &Path) -> Served {
    let mut child = Command::new(env!("CARGO_BIN_EXE_thinkact"))
        .args(["serve", "--addr", "127.0.0.1:0"])
        .env("THINKACT_DATA_DIR", dir)
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.as_mut().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr: SocketAddr = line.trim().strip_prefix("listening on ").expect(&line).parse().unwrap();
    Served {
        child,
        base: format!("http://{addr}"),
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn test_crash_restart_preserves_labels() {
    let dir = tempfile::tempdir().unwrap();
    let client = Client::new();
    let mut served = serve_process(dir.path());
    for i in 0..6 {
        enqueue(&client, &served.base, &format!("a{i}"), &format!("b{i}")).await;
    }
    for pair in ["p000001", "p000003", "p000005"] {
        assert_eq!(
            label(&client, &served.base, pair, "A", "ann").await.status(),
            StatusCode::OK
        );
    }
    let leased = client.get(format!("{}/queue/next", served.base)).send().await.unwrap();
    assert_eq!(leased.status(), StatusCode::OK);
    served.child.kill().unwrap();
    served.child.wait().unwrap();

    let journal = DataDir::new(dir.path()).queue_journal();
    let mut f = std::fs::OpenOptions::new().append(true).open(&journal).unwrap();
    f.write_all(br#"{"labeled":{"pair_id":"p000002","label":"B","#).unwrap();
    drop(f);

    let mut served = serve_process(dir.path());
    for i in 1..=6 {
        let item: QueueItem = client
            .get(format!("{}/queue/p{i:06}", served.base))
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap();
        let want = if i % 2 == 1 {
            QueueStatus::Labeled
        } else {
            QueueStatus::Pending
        };
        assert_eq!(item.status, want, "p{i:06}");
        assert_eq!(item.label.is_some(), want == QueueStatus::Labeled);
    }
    assert_eq!(
        label(&client, &served.base, "p000001", "B", "bob").await.status(),
        StatusCode::CONFLICT
    );
    let next: QueueItem = client
        .get(format!("{}/queue/next", served.base))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(next.pair_id, "p000004");
    assert_eq!(
        label(&client, &served.base, "p000002", "B", "bob").await.status(),
        StatusCode::OK
    );
    served.child.kill().unwrap();
    served.child.wait().unwrap();
}

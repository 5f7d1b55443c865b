use std::time::{Duration, Instant};

use thinkact::wire::{ConcurrentDispatcher, StubReply, StubServer, TcpTransport};
use thinkact_core::action::{
    ActionSpec, ArgType, CallCounters, ExternalTransport, FixedClock, Registry, SecurityPolicy, TransportOutcome,
    Verdict, WireRequest, WireResponse, WireStatus,
};
use thinkact_core::context::{ContextStore, DEFAULT_BUDGET_BYTES};
use thinkact_core::protocol::{ActionCall, ArgValue, Args, ResultStatus, Scope};

fn registry(timeout_ms: u64) -> Registry {
    let mut r = Registry::new();
    let mut spec = ActionSpec::external("search", &[("q", ArgType::String)]);
    spec.timeout_ms = timeout_ms;
    r.register(spec).unwrap();
    r
}

fn search(id: u64) -> ActionCall {
    let mut args = Args::new();
    args.insert("q".into(), ArgValue::Str(format!("q{id}")));
    ActionCall::new(id, "search", Scope::Global, args)
}

fn request(id: u64) -> WireRequest {
    let call = search(id);
    WireRequest {
        id,
        name: call.name,
        args: call.args,
    }
}

fn open(registry: &Registry) -> SecurityPolicy {
    SecurityPolicy {
        max_calls_per_turn: 64,
        ..SecurityPolicy::permissive(registry)
    }
}

#[test]
fn test_reply_round_trip() {
    let server = StubServer::echo(Duration::ZERO).unwrap();
    let mut t = TcpTransport::new(server.addr());
    match t.call(&request(7), 2_000) {
        TransportOutcome::Reply(r) => {
            assert_eq!((r.id, r.status, r.payload.as_str()), (7, WireStatus::Ok, "search:7"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn test_hanging_server_times_out() {
    let server = StubServer::spawn(Duration::ZERO, |_| StubReply::Hang).unwrap();
    let mut t = TcpTransport::new(server.addr());
    let started = Instant::now();
    assert_eq!(t.call(&request(1), 200), TransportOutcome::Timeout);
    let took = started.elapsed();
    assert!(
        took >= Duration::from_millis(150) && took < Duration::from_secs(3),
        "{took:?}"
    );
}

#[test]
fn test_slow_reply_past_deadline_is_timeout() {
    let server = StubServer::echo(Duration::from_millis(400)).unwrap();
    let mut t = TcpTransport::new(server.addr());
    assert_eq!(t.call(&request(1), 100), TransportOutcome::Timeout);
}

#[test]
fn test_malformed_replies_fail() {
    for raw in [
        "garbage\n",
        "{\"id\":1}\n",
        "{\"id\":1,\"status\":\"ok\",\"payload\":\"x\"}",
        "",
    ] {
        let raw = raw.to_string();
        let server = StubServer::spawn(Duration::ZERO, move |_| StubReply::Raw(raw.clone())).unwrap();
        let mut t = TcpTransport::new(server.addr());
        assert!(matches!(t.call(&request(1), 1_000), TransportOutcome::Failed(_)));
    }
}

#[test]
fn test_unreachable_server_fails() {
    let addr = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap()
    };
    let mut t = TcpTransport::new(addr);
    assert!(matches!(
        t.call(&request(1), 500),
        TransportOutcome::Failed(_) | TransportOutcome::Timeout
    ));
}

#[test]
fn test_concurrency_is_bounded_and_order_kept() {
    let server = StubServer::echo(Duration::from_millis(150)).unwrap();
    let reg = registry(5_000);
    let calls: Vec<ActionCall> = (1..=9).map(search).collect();
    let dispatcher = ConcurrentDispatcher {
        addr: server.addr(),
        max_in_flight: 3,
    };
    let mut memory = ContextStore::new(DEFAULT_BUDGET_BYTES);
    let started = Instant::now();
    let records = dispatcher.dispatch_turn(
        &reg,
        &open(&reg),
        &calls,
        &mut CallCounters::default(),
        &FixedClock::EPOCH_2024,
        &mut memory,
        0,
    );
    let took = started.elapsed();
    assert_eq!(server.peak_concurrency(), 3);
    assert!(took >= Duration::from_millis(450), "{took:?}");
    assert!(took < Duration::from_millis(9 * 150), "no parallelism: {took:?}");
    for (r, id) in records.iter().zip(1..) {
        assert_eq!(r.call.id, id);
        assert_eq!(r.result.status, ResultStatus::Ok);
        assert_eq!(r.result.payload, format!("search:{id}"));
    }
}

#[test]
fn test_concurrent_admission_matches_sequential() {
    let server = StubServer::echo(Duration::ZERO).unwrap();
    let reg = registry(2_000);
    let policy = SecurityPolicy {
        max_calls_per_turn: 4,
        ..SecurityPolicy::permissive(&reg)
    };
    let mut calls: Vec<ActionCall> = (1..=6).map(search).collect();
    calls.insert(2, ActionCall::new(99, "shell", Scope::Global, Args::new()));
    let dispatcher = ConcurrentDispatcher {
        addr: server.addr(),
        max_in_flight: 4,
    };
    let mut memory = ContextStore::new(DEFAULT_BUDGET_BYTES);
    let mut counters = CallCounters::default();
    let records = dispatcher.dispatch_turn(
        &reg,
        &policy,
        &calls,
        &mut counters,
        &FixedClock::EPOCH_2024,
        &mut memory,
        0,
    );
    let verdicts: Vec<Verdict> = records.iter().map(|r| r.policy_verdict).collect();
    use Verdict::*;
    assert_eq!(
        verdicts,
        [
            Allowed,
            Allowed,
            DeniedAllowlist,
            Allowed,
            Allowed,
            DeniedRate,
            DeniedRate
        ]
    );
    assert_eq!(counters.turn, 4);
    assert!(records
        .iter()
        .filter(|r| r.policy_verdict != Allowed)
        .all(|r| r.result.status == ResultStatus::Denied));
}

#[test]
fn test_error_and_mismatched_replies() {
    let server = StubServer::spawn(Duration::ZERO, |r| {
        StubReply::Reply(WireResponse {
            id: if r.id == 2 { 42 } else { r.id },
            status: WireStatus::Error,
            payload: "boom".into(),
        })
    })
    .unwrap();
    let reg = registry(2_000);
    let dispatcher = ConcurrentDispatcher {
        addr: server.addr(),
        max_in_flight: 2,
    };
    let mut memory = ContextStore::new(DEFAULT_BUDGET_BYTES);
    let records = dispatcher.dispatch_turn(
        &reg,
        &open(&reg),
        &[search(1), search(2)],
        &mut CallCounters::default(),
        &FixedClock::EPOCH_2024,
        &mut memory,
        0,
    );
    assert_eq!(
        (records[0].result.status, records[0].result.payload.as_str()),
        (ResultStatus::Error, "boom")
    );
    assert_eq!(records[1].result.status, ResultStatus::Error);
    assert!(records[1].result.payload.contains("does not match"));
}

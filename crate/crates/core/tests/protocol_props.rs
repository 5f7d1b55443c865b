use proptest::prelude::*;
use thinkact_core::protocol::{
    parse, parse_bytes, random_trajectory, serialize, serialize_with_spans, validate, ActionCall, ActionResult,
    AnswerBlock, Draft, Item, ResultStatus, Scope, ThinkBlock, Trajectory, Turn, ViolationKind, MAX_DOCUMENT_BYTES,
};
use thinkact_core::rng::rng;

fn text_strategy() -> impl Strategy<Value = String> {
    prop_oneof![
        ".*",
        "[<>&\"a-z ]{0,20}",
        "(&lt;|&amp;|</think>|<act>|PLAN: clock_now \\{\\}| )*",
    ]
}

fn trajectory_strategy() -> impl Strategy<Value = Trajectory> {
    (
        text_strategy(),
        text_strategy(),
        "[a-z][a-z0-9_]{0,10}",
        text_strategy(),
        text_strategy().prop_filter("answer must not be blank", |s| !s.trim().is_empty()),
        1u64..1000,
        any::<bool>(),
    )
        .prop_map(|(think, arg, name, payload, answer, id, local)| {
            let mut args = thinkact_core::protocol::Args::new();
            args.insert("q".into(), arg.into());
            let scope = if local { Scope::Local } else { Scope::Global };
            let mut t = Trajectory::new("");
            t.turns.push(Turn::assistant(vec![
                Item::Think(ThinkBlock::new(think)),
                Item::Act(ActionCall::new(id, &name, scope, args)),
            ]));
            t.turns.push(Turn::runtime(vec![ActionResult {
                call_id: id,
                status: ResultStatus::Error,
                payload,
            }]));
            t.turns
                .push(Turn::assistant(vec![Item::Answer(AnswerBlock { text: answer })]));
            t
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn test_round_trip_structured(t in trajectory_strategy()) {
        prop_assert!(validate(&t).is_empty());
        let doc = serialize(&t).unwrap();
        let parsed = parse(&doc).unwrap();
        prop_assert!(parsed.violations.is_empty(), "{:?}", parsed.violations);
        prop_assert_eq!(&parsed.trajectory, &t);
        prop_assert_eq!(serialize(&parsed.trajectory).unwrap(), doc);
    }

    #[test]
    fn test_round_trip_generated(seed in any::<u64>()) {
        let t = random_trajectory(seed);
        let (doc, spans) = serialize_with_spans(&t).unwrap();
        let parsed = parse(&doc).unwrap();
        prop_assert_eq!(&parsed.trajectory, &t);
        prop_assert_eq!(parsed.spans, spans);
    }

    #[test]
    fn test_parser_total_on_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
        let _ = parse_bytes(&bytes);
    }

    #[test]
    fn test_parser_total_on_tag_soup(doc in "(<|>|&|/|think|act|result|answer| id=\"[0-9]\"| name=\"x\"|\"|=|\\{\\}|[a-z ])*") {
        let parsed = parse(&doc).unwrap();
        let starts: Vec<_> = parsed.violations.iter().map(|v| v.span.start).collect();
        prop_assert!(starts.windows(2).all(|w| w[0] <= w[1]));
        for v in &parsed.violations {
            prop_assert!(v.span.end <= doc.len());
        }
    }

    #[test]
    fn test_composed_faults_are_all_detected(seed in any::<u64>(), mask in 1u8..=255) {
        let t = random_trajectory(seed);
        let mut draft = Draft::new(&t);
        let mut r = rng(seed);
        let mut applied = Vec::new();
        for kind in ViolationKind::ALL {
            if mask & (1 << kind.index()) != 0 && draft.apply(kind, &mut r).is_ok() {
                applied.push(kind);
            }
        }
        let parsed = parse(&draft.render()).unwrap();
        prop_assert!(applied.is_empty() || !parsed.violations.is_empty());
    }
}

#[test]
fn test_oversize_and_encoding() {
    let big = vec![b'a'; MAX_DOCUMENT_BYTES + 1];
    assert!(parse_bytes(&big).is_err());
    assert!(parse_bytes(&[0xff, 0xfe]).is_err());
    assert!(parse_bytes(&vec![b'a'; MAX_DOCUMENT_BYTES]).is_ok());
}

use ehrgen::corpus::{simulate_corpus, Corpus, Record, SimulatorSpec};
use ehrgen::vocab::{build_vocab, Vocabulary};
use ehrgen_audit::{
    audit_cohort, call_auditor, heuristic_score, record_to_csv, render_prompt, AuditError, AuditorConfig, StubReply,
    StubServer,
};

fn config(stub: &StubServer) -> AuditorConfig {
    AuditorConfig {
        base_url: stub.base_url().to_string(),
        api_key: "test-key".into(),
        timeout_seconds: 10.0,
        backoff_seconds: 0.001,
        max_concurrency: 1,
        ..AuditorConfig::default()
    }
}

fn cohort(n: usize, seed: u64) -> (Vec<Record>, Vocabulary) {
    let c: Corpus = simulate_corpus(&SimulatorSpec::desk(n), seed).unwrap();
    let v = build_vocab(&c).unwrap();
    (c.records, v)
}

fn age_of(prompt: &str) -> u32 {
    let at = prompt.find(",Age ").expect("age row") + 5;
    prompt[at..].split(' ').next().unwrap().parse().unwrap()
}

#[test]
fn plain_and_fenced_replies() {
    let stub = StubServer::start(|i, _| {
        let reasoning = "ok".to_string();
        if i == 0 {
            StubReply::Score { score: 8, reasoning }
        } else {
            StubReply::Fenced { score: 8, reasoning }
        }
    })
    .unwrap();
    let cfg = config(&stub);
    for _ in 0..2 {
        let r = call_auditor(&cfg, "p1", &render_prompt("time,code,numerical_value,code_label\n")).unwrap();
        assert_eq!((r.realism_score, r.reasoning.as_str(), r.attempts), (8, "ok", 1));
        assert_eq!(r.record_id, "p1");
    }
    assert_eq!(stub.request_count(), 2);
}

#[test]
fn invalid_score_is_retried() {
    let stub = StubServer::start(|i, _| StubReply::Score {
        score: if i == 0 { 11 } else { 7 },
        reasoning: "r".into(),
    })
    .unwrap();
    let r = call_auditor(&config(&stub), "p", "prompt").unwrap();
    assert_eq!((r.realism_score, r.attempts), (7, 2));
    assert_eq!(stub.request_count(), 2);
}

#[test]
fn retry_ceiling_holds_under_faults() {
    for max_retries in [0, 1, 3] {
        let stub = StubServer::start(|i, _| match i % 3 {
            0 => StubReply::Status(500),
            1 => StubReply::Content("not json".into()),
            _ => StubReply::Status(429),
        })
        .unwrap();
        let cfg = AuditorConfig {
            max_retries,
            ..config(&stub)
        };
        match call_auditor(&cfg, "p", "prompt") {
            Err(AuditError::Exhausted { attempts, .. }) => assert_eq!(attempts, max_retries + 1),
            other => panic!("{other:?}"),
        }
        assert_eq!(stub.request_count() as u32, max_retries + 1);
    }
}

#[test]
fn recovery_within_the_ceiling() {
    let stub = StubServer::start(|i, _| {
        if i < 3 {
            StubReply::Status(503)
        } else {
            StubReply::Score {
                score: 9,
                reasoning: "fine".into(),
            }
        }
    })
    .unwrap();
    let r = call_auditor(&config(&stub), "p", "prompt").unwrap();
    assert_eq!(r.attempts, 4);
}

#[test]
fn threshold_keeps_scores_at_or_above_seven() {
    let (mut recs, v) = cohort(3, 1);
    for (r, age) in recs.iter_mut().zip([30, 40, 50]) {
        r.age_years = age;
    }
    let stub = StubServer::start(|_, p| StubReply::Score {
        score: match age_of(p) {
            30 => 6,
            40 => 7,
            _ => 9,
        },
        reasoning: String::new(),
    })
    .unwrap();
    let (kept, report) = audit_cohort(&recs, &v, &config(&stub), 7).unwrap();
    assert_eq!(kept.len(), 2);
    assert_eq!(kept, recs[1..].to_vec());
    assert_eq!(report.n_kept, 2);
    let scores: Vec<Option<u8>> = recs
        .iter()
        .map(|r| report.entries.iter().find(|e| e.record_id == r.patient_id).unwrap().score)
        .collect();
    assert_eq!(scores, vec![Some(6), Some(7), Some(9)]);
}

#[test]
fn heuristic_stub_cohort_with_concurrency() {
    let (recs, v) = cohort(40, 2);
    let stub = StubServer::heuristic().unwrap();
    let cfg = AuditorConfig {
        max_concurrency: 4,
        ..config(&stub)
    };
    let expected: Vec<Record> = recs
        .iter()
        .filter(|r| heuristic_score(&render_prompt(&record_to_csv(r, &v))).0 >= 7)
        .cloned()
        .collect();
    let (kept, report) = audit_cohort(&recs, &v, &cfg, 7).unwrap();
    assert_eq!(kept, expected);
    assert_eq!(stub.request_count(), recs.len());
    assert!(report.entries.windows(2).all(|w| w[0].record_id < w[1].record_id));
    let mut prev = kept.len();
    for t in 8..=10 {
        let (k, _) = audit_cohort(&recs, &v, &cfg, t).unwrap();
        assert!(k.len() <= prev);
        assert!(k.iter().all(|r| kept.contains(r)));
        prev = k.len();
    }
}

#[test]
fn empty_and_unreachable() {
    let (recs, v) = cohort(4, 3);
    let stub = StubServer::heuristic().unwrap();
    let (kept, report) = audit_cohort(&[], &v, &config(&stub), 7).unwrap();
    assert!(kept.is_empty() && report.entries.is_empty());
    let dead = AuditorConfig {
        base_url: "http://127.0.0.1:9/v1".into(),
        max_retries: 1,
        backoff_seconds: 0.0,
        ..AuditorConfig::default()
    };
    let (kept, report) = audit_cohort(&recs, &v, &dead, 7).unwrap();
    assert!(kept.is_empty());
    assert_eq!(report.n_failed, recs.len());
    assert!(report.entries.iter().all(|e| e.failure.is_some() && e.retries == 1 && !e.kept));
}

mod common;

use std::collections::BTreeMap;

use coalfake::annotator::Provenance;
use coalfake::pipeline::{
    should_stop, HumanMode, Pipeline, PipelineError, RunConfig, RunState, Status, StopConfig, StopReason,
};
use coalfake::sampler::{AcquisitionKind, Strategy};
use coalfake::Label;
use common::{finished, interactive, tiny};

/// Advances until the run waits for humans, asserting it gets there.
fn to_review(p: &Pipeline, s: &mut RunState) {
    while s.status != Status::AwaitingHuman {
        assert_ne!(s.status, Status::Done, "run ended without a review queue");
        p.advance(s).unwrap();
    }
}

fn gold(p: &Pipeline, id: &str) -> Label {
    p.record(id).unwrap().gold_label.unwrap()
}

#[test]
fn first_round_is_cold_start_and_later_rounds_use_entropy() {
    let (_, s) = finished(tiny(1));
    assert_eq!(s.rounds[0].strategy, AcquisitionKind::DomainAwareCold);
    assert!(s.rounds[1..].iter().all(|r| r.strategy == AcquisitionKind::DomainAwareEntropy));
}

#[test]
fn oracle_five_rounds_of_120_label_600_records() {
    let (p, s) = finished(RunConfig::synth_benchmark(2));
    assert_eq!(s.round, 5);
    assert_eq!(s.stop_reason, Some(StopReason::MaxRounds));
    assert_eq!(s.labelled.len(), 600);
    let totals: Vec<usize> = s.rounds.iter().map(|r| r.labelled_total).collect();
    assert_eq!(totals, vec![120, 240, 360, 480, 600]);
    assert_eq!(s.pool_remaining.len() + 600, p.split().pool.len());
    assert!(s.labelled.keys().all(|id| !s.pool_remaining.contains(id)));
    assert_eq!(s.metrics().len(), 5);
}

#[test]
fn baselines_fall_back_to_random_before_a_classifier_exists() {
    let mut c = tiny(3);
    c.sampling.strategy = Strategy::MaxEntropy;
    let (_, s) = finished(c);
    assert_eq!(s.rounds[0].strategy, AcquisitionKind::Random);
    assert_eq!(s.rounds[1].strategy, AcquisitionKind::MaxEntropy);
}

#[test]
fn zero_rho_never_waits_for_humans() {
    let mut c = interactive(4);
    c.annotator.rho = 0.0;
    let p = Pipeline::new(c).unwrap();
    let mut s = p.init_state();
    while s.status != Status::Done {
        p.advance(&mut s).unwrap();
        assert_ne!(s.status, Status::AwaitingHuman);
    }
    assert!(s.metrics().iter().all(|m| m.human_labeled == 0));
    assert_eq!(s.ledger.human_items, 0);
}

#[test]
fn stop_reasons() {
    let mut c = tiny(5);
    c.stop.max_rounds = 1;
    let (_, s) = finished(c);
    assert_eq!((s.round, s.stop_reason), (1, Some(StopReason::MaxRounds)));

    let mut c = tiny(5);
    c.sampling.per_round = 10_000;
    let (p, s) = finished(c);
    assert_eq!(s.stop_reason, Some(StopReason::PoolExhausted));
    assert_eq!(s.labelled.len(), p.split().pool.len());

    let (_, mut s) = finished(tiny(5));
    for (r, f) in s.rounds.iter_mut().zip([0.80, 0.801, 0.8015]) {
        r.val_macro_f1 = f;
    }
    let stop = StopConfig {
        max_rounds: 10,
        patience: 2,
        min_delta: 1e-3,
    };
    assert_eq!(should_stop(&s, &stop), Some(StopReason::Plateau));
    s.rounds[2].val_macro_f1 = 0.803;
    assert_eq!(should_stop(&s, &stop), None);
}

#[test]
fn human_queue_contract() {
    let p = Pipeline::new(interactive(6)).unwrap();
    let mut s = p.init_state();
    to_review(&p, &mut s);
    let queue: Vec<String> = s.open_queue().iter().map(|s| s.to_string()).collect();
    assert!(queue.len() >= 3, "queue too short: {}", queue.len());
    let tasks = p.tasks(&s);
    assert_eq!(tasks.iter().map(|t| &t.record_id).collect::<Vec<_>>(), queue.iter().collect::<Vec<_>>());
    // Ranked by ascending probe probability of the LLM label.
    let probs: Vec<f64> = tasks.iter().map(|t| t.probe_self_probability.unwrap()).collect();
    assert!(probs.windows(2).all(|w| w[0] <= w[1]), "{probs:?}");
    assert_eq!(tasks.iter().map(|t| t.flagged_rank).collect::<Vec<_>>(), (1..=tasks.len()).collect::<Vec<_>>());
    assert!(tasks.iter().all(|t| t.neighbors.len() == 3));

    // Errors leave the state untouched.
    let before = s.clone();
    assert!(matches!(p.apply_human_label(&mut s, "nope", Label::Fake, "a"), Err(PipelineError::UnknownRecord(_))));
    let outsider = p.split().pool.iter().find(|r| !queue.contains(&r.id)).unwrap().id.clone();
    assert!(matches!(p.apply_human_label(&mut s, &outsider, Label::Fake, "a"), Err(PipelineError::NotInQueue(_))));
    assert_eq!(s, before);

    let first = &queue[0];
    let units = (p.record(first).unwrap().text.chars().count() as u64).div_ceil(4).div_ceil(50);
    let usd = s.ledger.cost().human_usd;
    let out = p.apply_human_label(&mut s, first, gold(&p, first), "alice").unwrap();
    assert!(out.applied);
    assert_eq!(out.remaining, queue.len() - 1);
    assert!((s.ledger.cost().human_usd - usd - 0.11 * units as f64).abs() < 1e-9);

    let applied = s.clone();
    let again = p.apply_human_label(&mut s, first, gold(&p, first), "bob").unwrap();
    assert!(!again.applied);
    assert_eq!(s, applied);
    let conflict = p.apply_human_label(&mut s, first, gold(&p, first).flipped(), "bob");
    assert!(matches!(conflict, Err(PipelineError::Conflict { .. })));
    assert_eq!(s, applied);

    p.apply_human_label(&mut s, &queue[1], gold(&p, &queue[1]), "alice").unwrap();
    assert_eq!(p.tasks(&s).len(), queue.len() - 2);

    for id in &queue[2..] {
        assert_eq!(s.status, Status::AwaitingHuman);
        p.apply_human_label(&mut s, id, gold(&p, id), "alice").unwrap();
    }
    assert_eq!(s.status, Status::Training);
    assert!(p.tasks(&s).is_empty());
    p.advance(&mut s).unwrap();
    for id in &queue {
        let ex = &s.labelled[id];
        assert_eq!(ex.provenance, Provenance::Human);
        assert_eq!(ex.label, gold(&p, id));
    }
    assert_eq!(s.metrics()[0].human_labeled, queue.len());
    // Still idempotent after the round has moved on.
    assert!(!p.apply_human_label(&mut s, first, gold(&p, first), "c").unwrap().applied);
}

#[test]
fn abandoned_queue_keeps_llm_labels_and_records_the_shortfall() {
    let p = Pipeline::new(interactive(7)).unwrap();
    let mut s = p.init_state();
    to_review(&p, &mut s);
    let queue: Vec<String> = s.open_queue().iter().map(|s| s.to_string()).collect();
    p.apply_human_label(&mut s, &queue[0], gold(&p, &queue[0]), "a").unwrap();
    p.abandon_human_queue(&mut s);
    p.advance(&mut s).unwrap();
    assert_eq!(s.rounds[0].human_shortfall, queue.len() - 1);
    assert_eq!(s.labelled[&queue[1]].provenance, Provenance::Llm);
    assert_eq!(s.labelled.len(), 40);
}

#[test]
fn human_labels_are_never_overwritten() {
    let p = Pipeline::new(tiny(8)).unwrap();
    let mut s = p.init_state();
    let mut seen: BTreeMap<String, Label> = BTreeMap::new();
    while s.status != Status::Done {
        p.advance(&mut s).unwrap();
        for (id, l) in &seen {
            assert_eq!(s.labelled[id].provenance, Provenance::Human);
            assert_eq!(s.labelled[id].label, *l);
        }
        for ex in s.labelled.values().filter(|e| e.provenance == Provenance::Human) {
            seen.insert(ex.id.clone(), ex.label);
        }
    }
    assert!(!seen.is_empty());
}

#[test]
fn state_file_round_trips_mid_round_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.json");
    let p = Pipeline::new(interactive(9)).unwrap();
    let mut s = p.init_state();
    to_review(&p, &mut s);
    s.save(&path).unwrap();
    let loaded = RunState::load(&path).unwrap();
    assert_eq!(loaded, s);
    assert_eq!(loaded.open_queue(), s.open_queue());
    p.check_state(&loaded).unwrap();

    let mut bytes = std::fs::read(&path).unwrap();
    let at = bytes.len() - 10;
    bytes[at] = if bytes[at] == b'1' { b'2' } else { b'1' };
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(RunState::load(&path), Err(PipelineError::CorruptState(_))));
    assert!(matches!(RunState::load(&dir.path().join("missing")), Err(PipelineError::MissingFile(_))));

    let text = String::from_utf8(s.to_file_bytes()).unwrap().replacen("\"version\":1", "\"version\":9", 1);
    assert!(matches!(RunState::from_file_bytes(text.as_bytes()), Err(PipelineError::StateVersion(9))));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (_, straight) = finished(tiny(10));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.json");
    {
        let p = Pipeline::new(tiny(10)).unwrap();
        let mut s = p.init_state();
        // Stop inside round two, after annotation and before training.
        while !(s.round == 1 && s.status == Status::Training) {
            p.advance(&mut s).unwrap();
        }
        s.save(&path).unwrap();
    }
    let p = Pipeline::new(tiny(10)).unwrap();
    let mut resumed = RunState::load(&path).unwrap();
    p.check_state(&resumed).unwrap();
    p.run(&mut resumed, None).unwrap();
    assert_eq!(resumed.metrics_json(), straight.metrics_json());
    assert_eq!(resumed, straight);
}

#[test]
fn fixed_seed_gives_byte_identical_metrics() {
    let (_, a) = finished(tiny(11));
    let (_, b) = finished(tiny(11));
    assert_eq!(a.metrics_json(), b.metrics_json());
    let (_, c) = finished(tiny(12));
    assert_ne!(a.metrics_json(), c.metrics_json());
}

#[test]
fn metrics_json_has_the_documented_shape() {
    let (_, s) = finished(tiny(13));
    let v: serde_json::Value = serde_json::from_str(&s.metrics_json()).unwrap();
    let first = &v[0];
    let mut keys: Vec<&str> = first.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(keys, ["cost", "flagged", "human_labeled", "macro_f1", "per_source", "round"]);
    let src = first["per_source"].as_object().unwrap();
    assert_eq!(src.len(), 3);
    for m in src.values() {
        let mut k: Vec<&str> = m.as_object().unwrap().keys().map(String::as_str).collect();
        k.sort();
        assert_eq!(k, ["acc", "f1", "prec", "rec"]);
    }
    assert!(first["cost"]["total_usd"].as_f64().unwrap() > 0.0);
}

#[test]
fn checkpoints_are_written_per_round() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(14)).unwrap().with_artifacts(dir.path());
    let mut s = p.init_state();
    p.run(&mut s, Some(&dir.path().join("state.json"))).unwrap();
    assert_eq!(s.checkpoint.as_deref(), Some("checkpoint-r3.bin"));
    let bytes = std::fs::read(dir.path().join("checkpoint-r3.bin")).unwrap();
    let clf = coalfake::model::decode_checkpoint(&bytes).unwrap();
    assert_eq!(clf.round, 3);
    assert_eq!(RunState::load(&dir.path().join("state.json")).unwrap(), s);
}

#[test]
fn file_corpus_with_120_token_articles_bills_033_per_review() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny(15);
    let records = coalfake::pipeline::load_corpus(&base.corpus).unwrap();
    let mut by_source: BTreeMap<String, String> = BTreeMap::new();
    for r in &records {
        let mut text = r.text.clone();
        while text.chars().count() < 480 {
            text.push_str(" pad");
        }
        text.truncate(480);
        let line = serde_json::json!({"id": r.id, "text": text, "label": r.gold_label.unwrap().to_string()});
        let buf = by_source.entry(r.source.clone()).or_default();
        buf.push_str(&line.to_string());
        buf.push('\n');
    }
    let mut c = base.clone();
    c.corpus.synth = None;
    for (source, content) in &by_source {
        let path = dir.path().join(format!("{source}.jsonl"));
        std::fs::write(&path, content).unwrap();
        c.corpus.files.push(coalfake::pipeline::CorpusFile { path, source: source.clone() });
    }
    c.human.mode = HumanMode::Interactive;
    let p = Pipeline::new(c).unwrap();
    let mut s = p.init_state();
    to_review(&p, &mut s);
    let id = s.open_queue()[0].to_string();
    let before = s.ledger.cost().human_usd;
    p.apply_human_label(&mut s, &id, Label::Fake, "a").unwrap();
    assert!((s.ledger.cost().human_usd - before - 0.33).abs() < 1e-12);
}

#[test]
fn missing_corpus_file_is_named() {
    let mut c = tiny(16);
    c.corpus.files.push(coalfake::pipeline::CorpusFile {
        path: "/no/such/corpus.jsonl".into(),
        source: "x".into(),
    });
    match Pipeline::new(c) {
        Err(PipelineError::MissingFile(p)) => assert_eq!(p.to_str(), Some("/no/such/corpus.jsonl")),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("expected an error"),
    }
}

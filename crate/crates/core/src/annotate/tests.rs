use super::*;
use crate::tree::fixtures::{intervention, monologue, pair, tree};
use crate::tree::{DiscourseNode, NodeMetadata, Role};

fn coverage_task(question: &str, answer: &str) -> LabelTask {
    LabelTask {
        kind: TaskKind::Coverage,
        conference_id: "c".into(),
        order_index: 0,
        text: answer.into(),
        question: Some(question.into()),
        context: None,
    }
}

#[test]
fn rule_coverage_from_overlap() {
    let task = coverage_task(
        "What is your margin outlook for next year?",
        "We expect margin expansion and a stable outlook next quarter.",
    );
    let p = RuleBackend.predict(&task, 0).unwrap();
    assert_eq!(p.label, Label::Category("yes".into()));
    assert_eq!(p.confidence, 0.75);
    let partial = coverage_task("What is your margin outlook for next year?", "Margins are fine.");
    assert_eq!(
        RuleBackend::overlap("What is your margin outlook for next year?", "Margins are fine."),
        0.0
    );
    assert_eq!(
        RuleBackend.predict(&partial, 0).unwrap().label,
        Label::Category("no".into())
    );
    let some = coverage_task("What is your margin outlook for next year?", "The outlook is cautious.");
    assert_eq!(
        RuleBackend.predict(&some, 0).unwrap().label,
        Label::Category("partially".into())
    );
}

#[test]
fn rule_topic_from_keywords() {
    let (t, c) = RuleBackend::topic("Litigation continues: the patent lawsuit settlement is pending.");
    assert_eq!(t, Topic::LegalProceedings);
    assert_eq!(c, 5.0 / 11.0);
    let (t, c) = RuleBackend::topic("Hello there.");
    assert_eq!(t, Topic::Other);
    assert_eq!(c, 1.0 / 7.0);
}

#[test]
fn rule_coherence_is_term_cosine() {
    assert!((RuleBackend::coherence("margin growth", "growth margin") - 1.0).abs() < 1e-12);
    assert_eq!(RuleBackend::coherence("margin growth", "litigation"), 0.0);
    assert_eq!(RuleBackend::coherence("the", "margin"), 0.0);
}

#[test]
fn fingerprint_ignores_position() {
    let a = coverage_task("q?", "a.");
    let mut b = a.clone();
    b.order_index = 9;
    b.conference_id = "other".into();
    assert_eq!(a.fingerprint(), b.fingerprint());
    assert!(a.fingerprint().starts_with("coverage:"));
    b.text = "b.".into();
    assert_ne!(a.fingerprint(), b.fingerprint());
}

#[test]
fn fixture_replays_verbatim() {
    let task = coverage_task("q?", "a.");
    let json = format!(
        r#"{{"backend_id": "gemma", "predictions": {{"{}": {{"label": "partially", "confidence": 0.35}}}}}}"#,
        task.fingerprint()
    );
    let b = FixtureBackend::from_json(&json).unwrap();
    let p = b.predict(&task, 17).unwrap();
    assert_eq!((p.backend_id.as_str(), p.run_seed, p.confidence), ("gemma", 17, 0.35));
    assert_eq!(p.label, Label::Category("partially".into()));
    assert!(b.predict(&coverage_task("q?", "other"), 0).is_err());
    let bad = r#"{"backend_id": "x", "predictions": {"KEY": {"label": "maybe", "confidence": 0.3}}}"#;
    let b = FixtureBackend::from_json(&bad.replace("KEY", &task.fingerprint())).unwrap();
    assert!(b.predict(&task, 0).unwrap_err().detail.contains("not a coverage label"));
}

#[test]
fn noisy_backend_is_seeded() {
    let task = coverage_task("What is your margin outlook?", "Margin outlook is strong.");
    let quiet = NoisyBackend::new("q", Box::new(RuleBackend), 0.0).unwrap();
    assert_eq!(
        quiet.predict(&task, 3).unwrap().label,
        RuleBackend.predict(&task, 3).unwrap().label
    );
    let loud = NoisyBackend::new("l", Box::new(RuleBackend), 1.0).unwrap();
    for seed in 0..10 {
        let p = loud.predict(&task, seed).unwrap();
        assert_ne!(p.label, Label::Category("yes".into()));
        assert_eq!(p, loud.predict(&task, seed).unwrap());
    }
    assert!(NoisyBackend::new("x", Box::new(RuleBackend), 1.5).is_err());
}

fn rule_ensemble(ids: &[&str]) -> Ensemble {
    Ensemble {
        backends: ids
            .iter()
            .map(|id| Box::new(NoisyBackend::new(*id, Box::new(RuleBackend), 0.0).unwrap()) as Box<dyn LabelBackend>)
            .collect(),
        runs: 3,
        seed: 11,
    }
}

fn answered_pair(order_index: usize) -> DiscourseNode {
    DiscourseNode {
        order_index,
        content: NodeContent::QaPair {
            question: intervention("Analyst", Role::Analyst, &["What is the revenue growth outlook?"]),
            answer: Some(intervention(
                "CFO",
                Role::Executive,
                &["Revenue growth outlook remains strong."],
            )),
        },
        metadata: NodeMetadata::unannotated(Coverage::NotApplicable),
    }
}

#[test]
fn annotates_monologue_and_pair() {
    let t = tree(vec![monologue(0), answered_pair(1)]);
    let out = annotate_tree(
        &t,
        &Ensemble {
            backends: vec![Box::new(RuleBackend)],
            runs: 2,
            seed: 0,
        },
    )
    .unwrap();
    assert!(out.tree.validate().is_empty());
    let m = &out.tree.nodes[0].metadata;
    assert_eq!(m.topic, Topic::MdAndA);
    assert_eq!(m.coverage, Coverage::NotApplicable);
    let p = &out.tree.nodes[1].metadata;
    assert_eq!(p.coverage, Coverage::Yes);
    assert!(p.coherence > 0.0 && p.coherence <= 1.0);
    assert_eq!(p.confidence, 1.0);
    let kinds: Vec<TaskKind> = out.report.nodes[1].tasks.iter().map(|t| t.kind).collect();
    assert_eq!(kinds, [TaskKind::Topic, TaskKind::Coverage, TaskKind::Coherence]);
    assert_eq!(out.report.nodes[1].tasks[1].predictions.len(), 2);
}

#[test]
fn pair_before_any_monologue_keeps_default_coherence() {
    let t = tree(vec![answered_pair(0), monologue(1), pair(2, false)]);
    let out = annotate_tree(&t, &rule_ensemble(&["a", "b"])).unwrap();
    let first = &out.tree.nodes[0].metadata;
    assert_eq!(first.coherence, 0.5);
    assert_eq!(first.confidence, 0.0);
    assert_eq!(
        out.report.nodes[0].tasks.last().unwrap().skipped.as_deref(),
        Some("no preceding monologue")
    );
    let unanswered = &out.tree.nodes[2].metadata;
    assert_eq!(unanswered.coverage, Coverage::No);
    assert_eq!(out.report.nodes[2].tasks.len(), 1);
}

#[test]
fn identical_backends_are_fully_confident() {
    let t = tree(vec![monologue(0), answered_pair(1)]);
    let out = annotate_tree(&t, &rule_ensemble(&["a", "b", "c"])).unwrap();
    for node in &out.report.nodes {
        for task in &node.tasks {
            let u = task.uncertainty.as_ref().unwrap();
            assert_eq!(u.extrinsic, 1.0);
            assert!(u.intrinsic.values().all(|v| *v == 1.0));
            assert_eq!(u.aggregated_confidence, 1.0);
        }
        assert_eq!(node.confidence, 1.0);
    }
}

#[test]
fn backend_order_does_not_matter() {
    let t = tree(vec![monologue(0), answered_pair(1)]);
    let noisy =
        |id: &str, rate| Box::new(NoisyBackend::new(id, Box::new(RuleBackend), rate).unwrap()) as Box<dyn LabelBackend>;
    let a = Ensemble {
        backends: vec![noisy("x", 0.5), noisy("y", 0.2), Box::new(RuleBackend)],
        runs: 4,
        seed: 2,
    };
    let b = Ensemble {
        backends: vec![Box::new(RuleBackend), noisy("y", 0.2), noisy("x", 0.5)],
        runs: 4,
        seed: 2,
    };
    let (ra, rb) = (annotate_tree(&t, &a).unwrap(), annotate_tree(&t, &b).unwrap());
    assert_eq!(ra.tree, rb.tree);
}

struct Down;

impl LabelBackend for Down {
    fn id(&self) -> &str {
        "remote:down"
    }

    fn predict(&self, _: &LabelTask, _: u64) -> Result<BackendPrediction, BackendError> {
        Err(BackendError {
            backend: "remote:down".into(),
            attempts: 4,
            detail: "connection refused".into(),
        })
    }
}

#[test]
fn failing_backend_reports_unannotated_nodes() {
    let t = tree(vec![monologue(0), answered_pair(1)]);
    let e = Ensemble {
        backends: vec![Box::new(RuleBackend), Box::new(Down)],
        runs: 1,
        seed: 0,
    };
    let err = annotate_tree(&t, &e).unwrap_err();
    let msg = err.to_string();
    assert!(
        msg.contains("node(s) 0, 1") && msg.contains("connection refused"),
        "{msg}"
    );
    match err {
        AnnotateError::Partial { annotated, failures } => {
            assert_eq!(failures.len(), 2);
            assert!(annotated.report.nodes.iter().all(|n| n.status == NodeStatus::Failed));
            assert_eq!(annotated.tree, t);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn ensemble_config_errors() {
    let t = tree(vec![monologue(0)]);
    assert!(annotate_tree(
        &t,
        &Ensemble {
            backends: vec![],
            runs: 1,
            seed: 0
        }
    )
    .is_err());
    assert!(annotate_tree(
        &t,
        &Ensemble {
            backends: vec![Box::new(RuleBackend)],
            runs: 0,
            seed: 0
        }
    )
    .is_err());
    assert!(annotate_tree(&t, &rule_ensemble(&["a", "a"])).is_err());
}

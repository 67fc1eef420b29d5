use std::fmt;

use serde::Serialize;

use super::{ConferenceTree, Coverage, Intervention, NodeContent, NodeKind};

/// Tree invariants checked by [`validate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    NonEmptyTree,
    EmotionNonNegative,
    EmotionSimplex,
    NonEmptyText,
    UtteranceIndex,
    NonEmptyIntervention,
    NonNegativeDuration,
    CoherenceRange,
    ConfidenceRange,
    MonologueCoverage,
    UnansweredCoverage,
    OrderIndexPermutation,
    OrderIndexIncreasing,
}

impl Rule {
    pub fn as_str(self) -> &'static str {
        match self {
            Rule::NonEmptyTree => "tree must contain at least one node",
            Rule::EmotionNonNegative => "emotion components must be finite and non-negative",
            Rule::EmotionSimplex => "emotion components must sum to 1",
            Rule::NonEmptyText => "utterance text must be non-empty",
            Rule::UtteranceIndex => "utterance indices must be consecutive from 0",
            Rule::NonEmptyIntervention => "intervention must have at least one utterance",
            Rule::NonNegativeDuration => "duration must be non-negative",
            Rule::CoherenceRange => "coherence must lie in [0, 1]",
            Rule::ConfidenceRange => "confidence must lie in [0, 1]",
            Rule::MonologueCoverage => "monologue coverage must be not_applicable",
            Rule::UnansweredCoverage => "unanswered question must have coverage no",
            Rule::OrderIndexPermutation => "order_index values must be a permutation of 0..n",
            Rule::OrderIndexIncreasing => "order_index must increase in storage order",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub order_index: Option<usize>,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.order_index {
            Some(i) => write!(f, "node {i}: {} ({})", self.rule.as_str(), self.detail),
            None => write!(f, "tree: {} ({})", self.rule.as_str(), self.detail),
        }
    }
}

/// Lists every invariant violation in `tree`; an empty list means valid.
pub fn validate(tree: &ConferenceTree) -> Vec<Violation> {
    let mut out = Vec::new();
    if tree.nodes.is_empty() {
        out.push(Violation {
            order_index: None,
            rule: Rule::NonEmptyTree,
            detail: "nodes is empty".into(),
        });
        return out;
    }

    for node in &tree.nodes {
        let idx = node.order_index;
        let mut push = |rule: Rule, detail: String| {
            out.push(Violation {
                order_index: Some(idx),
                rule,
                detail,
            });
        };
        match &node.content {
            NodeContent::Monologue { intervention } => {
                check_intervention("intervention", intervention, &mut push);
            }
            NodeContent::QaPair { question, answer } => {
                check_intervention("question", question, &mut push);
                if let Some(a) = answer {
                    check_intervention("answer", a, &mut push);
                }
            }
        }
        let meta = &node.metadata;
        if !(0.0..=1.0).contains(&meta.coherence) {
            push(Rule::CoherenceRange, format!("coherence = {}", meta.coherence));
        }
        if !(0.0..=1.0).contains(&meta.confidence) {
            push(Rule::ConfidenceRange, format!("confidence = {}", meta.confidence));
        }
        match (node.kind(), &node.content) {
            (NodeKind::Monologue, _) if meta.coverage != Coverage::NotApplicable => {
                push(
                    Rule::MonologueCoverage,
                    format!("coverage = {}", meta.coverage.as_str()),
                );
            }
            (NodeKind::QaPair, NodeContent::QaPair { answer: None, .. }) if meta.coverage != Coverage::No => {
                push(
                    Rule::UnansweredCoverage,
                    format!("coverage = {}", meta.coverage.as_str()),
                );
            }
            _ => {}
        }
    }

    let n = tree.nodes.len();
    let mut seen = vec![false; n];
    let mut permutation_ok = true;
    for node in &tree.nodes {
        match seen.get_mut(node.order_index) {
            Some(slot) if !*slot => *slot = true,
            _ => permutation_ok = false,
        }
    }
    if !permutation_ok {
        let got: Vec<usize> = tree.nodes.iter().map(|n| n.order_index).collect();
        out.push(Violation {
            order_index: None,
            rule: Rule::OrderIndexPermutation,
            detail: format!("got {got:?} for {n} nodes"),
        });
    }
    for pair in tree.nodes.windows(2) {
        if pair[1].order_index <= pair[0].order_index {
            out.push(Violation {
                order_index: Some(pair[1].order_index),
                rule: Rule::OrderIndexIncreasing,
                detail: format!("follows order_index {}", pair[0].order_index),
            });
        }
    }
    out
}

fn check_intervention(role: &str, iv: &Intervention, push: &mut impl FnMut(Rule, String)) {
    if iv.utterances.is_empty() {
        push(Rule::NonEmptyIntervention, format!("{role} of '{}'", iv.speaker));
    }
    if !(iv.duration_s >= 0.0) {
        push(
            Rule::NonNegativeDuration,
            format!("{role} duration_s = {}", iv.duration_s),
        );
    }
    for (pos, u) in iv.utterances.iter().enumerate() {
        if u.index != pos {
            push(
                Rule::UtteranceIndex,
                format!("{role} utterance {pos} has index {}", u.index),
            );
        }
        if u.text.trim().is_empty() {
            push(Rule::NonEmptyText, format!("{role} utterance {pos}"));
        }
        for (modality, v) in u.emotions.present() {
            let values = v.values();
            if values.iter().any(|x| !x.is_finite() || *x < 0.0) {
                push(
                    Rule::EmotionNonNegative,
                    format!("{role} utterance {pos} {modality:?}: {values:?}"),
                );
                continue;
            }
            let total: f64 = values.iter().sum();
            if (total - 1.0).abs() > super::SIMPLEX_TOLERANCE {
                push(
                    Rule::EmotionSimplex,
                    format!("{role} utterance {pos} {modality:?} sums to {total}"),
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::*;
    use super::super::*;
    use super::*;

    #[test]
    fn minimal_tree_is_valid() {
        assert!(validate(&tree(vec![monologue(0)])).is_empty());
    }

    #[test]
    fn unanswered_pair_with_yes_coverage() {
        let mut p = pair(0, false);
        p.metadata.coverage = Coverage::Yes;
        let v = validate(&tree(vec![p]));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, Rule::UnansweredCoverage);
        assert_eq!(v[0].order_index, Some(0));
    }

    #[test]
    fn emotion_vector_off_simplex() {
        let mut m = monologue(0);
        let raw = [0.2, 0.1, 0.1, 0.2, 0.1, 0.05, 0.05];
        assert!((raw.iter().sum::<f64>() - 0.8).abs() < 1e-12);
        if let NodeContent::Monologue { intervention } = &mut m.content {
            intervention.utterances[0].emotions.text = EmotionVector::from_raw(raw);
        }
        let v = validate(&tree(vec![m]));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, Rule::EmotionSimplex);
        assert!(v[0].to_string().contains("sum to 1"));
    }

    #[test]
    fn empty_tree_reports_once() {
        let v = validate(&tree(vec![]));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, Rule::NonEmptyTree);
    }

    #[test]
    fn structural_violations_are_named() {
        let mut m = monologue(0);
        m.metadata.coverage = Coverage::Yes;
        m.metadata.coherence = 1.5;
        let mut p = pair(0, true);
        if let NodeContent::QaPair { question, .. } = &mut p.content {
            question.duration_s = -1.0;
            question.utterances[0].text = "   ".into();
        }
        let rules: Vec<Rule> = validate(&tree(vec![m, p])).iter().map(|v| v.rule).collect();
        for r in [
            Rule::MonologueCoverage,
            Rule::CoherenceRange,
            Rule::NonNegativeDuration,
            Rule::NonEmptyText,
            Rule::OrderIndexPermutation,
            Rule::OrderIndexIncreasing,
        ] {
            assert!(rules.contains(&r), "missing {r:?} in {rules:?}");
        }
    }

    #[test]
    fn flatten_does_not_change_validation() {
        let t = tree(vec![monologue(0), pair(1, true), pair(2, false)]);
        let before = validate(&t);
        let rebuilt = tree(t.flatten().unwrap().into_iter().cloned().collect());
        assert_eq!(validate(&rebuilt), before);
        assert_eq!(validate(&t), before);
    }
}

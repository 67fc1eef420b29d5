use std::collections::BTreeMap;

use crate::tree::{ConferenceTree, Coverage, DiscourseNode, Intervention, NodeContent, NodeMetadata, Role, TreeError};

use super::classify::InterventionKind;
use super::transcript::RawIntervention;
use super::IngestError;

/// An intervention on its way into a tree, remembering where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Draft {
    pub start_s: f64,
    /// Position in the classified sequence; breaks start-time ties.
    pub seq: usize,
    /// Source document indices of every constituent intervention.
    pub sources: Vec<usize>,
    pub intervention: Intervention,
}

impl Draft {
    fn from_raw(raw: &RawIntervention, seq: usize) -> Self {
        Draft {
            start_s: raw.start_s,
            seq,
            sources: vec![raw.source_index],
            intervention: Intervention {
                speaker: raw.speaker.clone(),
                role: raw.role.unwrap_or(Role::Unknown),
                duration_s: raw.duration_s(),
                utterances: raw.sentences.clone(),
            },
        }
    }

    /// Appends another answer: utterances concatenated, durations summed,
    /// each new speaker recorded once.
    fn merge(&mut self, other: Draft) {
        let iv = &mut self.intervention;
        if !iv.speaker.split("; ").any(|s| s == other.intervention.speaker) {
            iv.speaker = format!("{}; {}", iv.speaker, other.intervention.speaker);
        }
        iv.duration_s += other.intervention.duration_s;
        let offset = iv.utterances.len();
        iv.utterances
            .extend(other.intervention.utterances.into_iter().enumerate().map(|(i, mut u)| {
                u.index = offset + i;
                u
            }));
        self.sources.extend(other.sources);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairDraft {
    pub question: Draft,
    pub answer: Option<Draft>,
}

/// Single temporal scan binding answers to the most recent open question.
///
/// Consecutive answers merge into one; a question left without an answer
/// stays a pair with no answer; an answer with nothing to bind to becomes a
/// monologue. Procedural items are skipped.
pub fn pair_questions_answers(classified: &[(RawIntervention, InterventionKind)]) -> (Vec<PairDraft>, Vec<Draft>) {
    let mut pairs = Vec::new();
    let mut monologues = Vec::new();
    let mut open: Option<PairDraft> = None;
    let mut last_was_answer = false;
    for (seq, (raw, kind)) in classified.iter().enumerate() {
        let draft = Draft::from_raw(raw, seq);
        match kind {
            InterventionKind::Procedural => continue,
            InterventionKind::Question => {
                pairs.extend(open.replace(PairDraft {
                    question: draft,
                    answer: None,
                }));
                last_was_answer = false;
            }
            InterventionKind::Answer => match open.as_mut() {
                Some(p) if p.answer.is_none() => {
                    p.answer = Some(draft);
                    last_was_answer = true;
                }
                Some(PairDraft { answer: Some(a), .. }) if last_was_answer => a.merge(draft),
                _ => {
                    pairs.extend(open.take());
                    monologues.push(draft);
                    last_was_answer = false;
                }
            },
            InterventionKind::Monologue => {
                pairs.extend(open.take());
                monologues.push(draft);
                last_was_answer = false;
            }
        }
    }
    pairs.extend(open);
    (pairs, monologues)
}

/// Orders drafts by the start of their first intervention and builds an
/// unannotated tree.
pub fn assemble_tree(
    id: &str,
    monologues: Vec<Draft>,
    pairs: Vec<PairDraft>,
    source: Option<BTreeMap<String, String>>,
) -> Result<ConferenceTree, IngestError> {
    let mut items: Vec<(f64, usize, NodeContent)> = monologues
        .into_iter()
        .map(|d| {
            (
                d.start_s,
                d.seq,
                NodeContent::Monologue {
                    intervention: d.intervention,
                },
            )
        })
        .chain(pairs.into_iter().map(|p| {
            (
                p.question.start_s,
                p.question.seq,
                NodeContent::QaPair {
                    question: p.question.intervention,
                    answer: p.answer.map(|a| a.intervention),
                },
            )
        }))
        .collect();
    if items.is_empty() {
        return Err(IngestError::Empty);
    }
    items.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let nodes = items
        .into_iter()
        .enumerate()
        .map(|(order_index, (_, _, content))| {
            let coverage = match &content {
                NodeContent::QaPair { answer: None, .. } => Coverage::No,
                _ => Coverage::NotApplicable,
            };
            DiscourseNode {
                order_index,
                content,
                metadata: NodeMetadata::unannotated(coverage),
            }
        })
        .collect();
    let tree = ConferenceTree {
        id: id.to_string(),
        source,
        nodes,
    };
    let violations = tree.validate();
    if !violations.is_empty() {
        return Err(IngestError::Tree(TreeError::Invalid(violations)));
    }
    Ok(tree)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::transcript::Section;
    use crate::tree::fixtures::utterance;
    use InterventionKind::*;

    fn raw(i: usize, speaker: &str, kind: InterventionKind) -> (RawIntervention, InterventionKind) {
        let iv = RawIntervention {
            source_index: i,
            speaker: speaker.into(),
            role: None,
            section: Section::Qa,
            start_s: 10.0 * i as f64,
            end_s: 10.0 * i as f64 + 4.0,
            sentences: vec![utterance(0, speaker)],
        };
        (iv, kind)
    }

    fn speakers(p: &PairDraft) -> (String, Option<String>) {
        (
            p.question.intervention.speaker.clone(),
            p.answer.as_ref().map(|a| a.intervention.speaker.clone()),
        )
    }

    #[test]
    fn alternating() {
        let seq = [
            raw(0, "Q1", Question),
            raw(1, "A1", Answer),
            raw(2, "Q2", Question),
            raw(3, "A2", Answer),
        ];
        let (pairs, monos) = pair_questions_answers(&seq);
        assert!(monos.is_empty());
        let got: Vec<_> = pairs.iter().map(speakers).collect();
        assert_eq!(
            got,
            [("Q1".into(), Some("A1".into())), ("Q2".into(), Some("A2".into()))]
        );
    }

    #[test]
    fn consecutive_answers_merge_and_trailing_question_is_unanswered() {
        let seq = [
            raw(0, "Q1", Question),
            raw(1, "CEO", Answer),
            raw(2, "CFO", Answer),
            raw(3, "Q2", Question),
        ];
        let (pairs, monos) = pair_questions_answers(&seq);
        assert!(monos.is_empty());
        assert_eq!(pairs.len(), 2);
        let merged = &pairs[0].answer.as_ref().unwrap();
        assert_eq!(merged.intervention.speaker, "CEO; CFO");
        assert_eq!(merged.intervention.duration_s, 8.0);
        let idx: Vec<usize> = merged.intervention.utterances.iter().map(|u| u.index).collect();
        assert_eq!(idx, [0, 1]);
        assert_eq!(merged.sources, [1, 2]);
        assert!(pairs[1].answer.is_none());
    }

    #[test]
    fn orphan_answer_is_demoted() {
        let seq = [raw(0, "A0", Answer), raw(1, "Q1", Question), raw(2, "A1", Answer)];
        let (pairs, monos) = pair_questions_answers(&seq);
        assert_eq!(monos.len(), 1);
        assert_eq!(monos[0].intervention.speaker, "A0");
        assert_eq!(
            pairs.iter().map(speakers).collect::<Vec<_>>(),
            [("Q1".into(), Some("A1".into()))]
        );
    }

    #[test]
    fn answer_after_monologue_does_not_reopen_the_pair() {
        let seq = [
            raw(0, "Q1", Question),
            raw(1, "A1", Answer),
            raw(2, "M", Monologue),
            raw(3, "A2", Answer),
        ];
        let (pairs, monos) = pair_questions_answers(&seq);
        assert_eq!(pairs.len(), 1);
        assert_eq!(
            monos
                .iter()
                .map(|m| m.intervention.speaker.as_str())
                .collect::<Vec<_>>(),
            ["M", "A2"]
        );
    }

    #[test]
    fn assemble_orders_and_labels() {
        let seq = [
            raw(0, "M", Monologue),
            raw(1, "Q1", Question),
            raw(2, "A1", Answer),
            raw(3, "Q2", Question),
        ];
        let (pairs, monos) = pair_questions_answers(&seq);
        let tree = assemble_tree("c", monos, pairs, None).unwrap();
        let idx: Vec<usize> = tree.nodes.iter().map(|n| n.order_index).collect();
        assert_eq!(idx, [0, 1, 2]);
        let cov: Vec<Coverage> = tree.nodes.iter().map(|n| n.metadata.coverage).collect();
        assert_eq!(cov, [Coverage::NotApplicable, Coverage::NotApplicable, Coverage::No]);
        assert!(tree
            .nodes
            .iter()
            .all(|n| n.metadata.topic == crate::tree::Topic::Unknown));
        assert!(tree.validate().is_empty());
    }

    #[test]
    fn assemble_empty_fails() {
        assert!(matches!(
            assemble_tree("c", vec![], vec![], None),
            Err(IngestError::Empty)
        ));
    }
}

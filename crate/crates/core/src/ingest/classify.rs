use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::annotate::lexicon::tokens;
use crate::tree::Role;

use super::transcript::{RawIntervention, Section};
use super::IngestError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    Question,
    Answer,
    Monologue,
    Procedural,
}

impl InterventionKind {
    pub fn parse(label: &str) -> Option<Self> {
        match label.trim().to_ascii_lowercase().as_str() {
            "question" => Some(Self::Question),
            "answer" => Some(Self::Answer),
            "monologue" => Some(Self::Monologue),
            "procedural" => Some(Self::Procedural),
            _ => None,
        }
    }
}

impl fmt::Display for InterventionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Question => "question",
            Self::Answer => "answer",
            Self::Monologue => "monologue",
            Self::Procedural => "procedural",
        };
        f.write_str(s)
    }
}

/// Labels one intervention given the kind of the previous non-procedural one.
pub trait ClassifierBackend {
    fn id(&self) -> &str;

    fn classify(&self, iv: &RawIntervention, previous: Option<InterventionKind>) -> Result<InterventionKind, String>;
}

pub const DEFAULT_PROCEDURAL_WORDS: &[&str] = &[
    "thank",
    "thanks",
    "you",
    "very",
    "much",
    "good",
    "morning",
    "afternoon",
    "evening",
    "everyone",
    "everybody",
    "all",
    "hello",
    "hi",
    "welcome",
    "ladies",
    "gentlemen",
    "operator",
    "next",
    "question",
    "please",
    "go",
    "ahead",
    "great",
    "sure",
    "okay",
    "ok",
    "yes",
    "bye",
    "goodbye",
    "and",
    "the",
    "for",
    "taking",
    "my",
    "questions",
    "line",
    "is",
    "open",
    "again",
    "appreciate",
    "it",
    "congrats",
    "congratulations",
    "that's",
    "helpful",
    "us",
    "today",
];

/// Rule-based classifier.
///
/// Rules, first match wins:
/// 1. prepared section: monologue;
/// 2. short text made only of greeting/acknowledgment words: procedural;
/// 3. analyst role or a sentence ending in `?`: question;
/// 4. executive role right after a question or answer: answer;
/// 5. anything else: monologue.
#[derive(Debug, Clone)]
pub struct HeuristicClassifier {
    pub procedural_words: BTreeSet<String>,
    pub max_procedural_chars: usize,
}

impl Default for HeuristicClassifier {
    fn default() -> Self {
        Self::with_words(DEFAULT_PROCEDURAL_WORDS.iter().map(|w| w.to_string()))
    }
}

impl HeuristicClassifier {
    pub fn with_words(words: impl IntoIterator<Item = String>) -> Self {
        HeuristicClassifier {
            procedural_words: words.into_iter().map(|w| w.to_lowercase()).collect(),
            max_procedural_chars: 40,
        }
    }

    /// Reads a word list: whitespace separated, `#` starts a comment.
    pub fn from_word_list(text: &str) -> Self {
        let words = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(|l| l.split_whitespace())
            .map(str::to_string);
        Self::with_words(words)
    }

    pub fn is_procedural(&self, text: &str) -> bool {
        let toks = tokens(text);
        text.chars().count() < self.max_procedural_chars
            && !toks.is_empty()
            && toks.iter().all(|t| self.procedural_words.contains(t))
    }
}

impl ClassifierBackend for HeuristicClassifier {
    fn id(&self) -> &str {
        "heuristic"
    }

    fn classify(&self, iv: &RawIntervention, previous: Option<InterventionKind>) -> Result<InterventionKind, String> {
        use InterventionKind::*;
        if iv.section == Section::Prepared {
            return Ok(Monologue);
        }
        if self.is_procedural(&iv.text()) {
            return Ok(Procedural);
        }
        if iv.role == Some(Role::Analyst) || iv.sentences.iter().any(|s| s.text.trim_end().ends_with('?')) {
            return Ok(Question);
        }
        if iv.role == Some(Role::Executive) && matches!(previous, Some(Question | Answer)) {
            return Ok(Answer);
        }
        Ok(Monologue)
    }
}

/// Replays recorded kinds, indexed by position in the source document.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedClassifier {
    pub kinds: Vec<InterventionKind>,
}

impl RecordedClassifier {
    /// Parses a JSON array of kind labels.
    pub fn from_json(json: &str) -> Result<Self, String> {
        let labels: Vec<String> = serde_json::from_str(json).map_err(|e| e.to_string())?;
        let kinds = labels
            .iter()
            .enumerate()
            .map(|(i, l)| InterventionKind::parse(l).ok_or_else(|| format!("entry {i}: unknown kind '{l}'")))
            .collect::<Result<_, _>>()?;
        Ok(RecordedClassifier { kinds })
    }
}

impl ClassifierBackend for RecordedClassifier {
    fn id(&self) -> &str {
        "recorded"
    }

    fn classify(&self, iv: &RawIntervention, _: Option<InterventionKind>) -> Result<InterventionKind, String> {
        self.kinds
            .get(iv.source_index)
            .copied()
            .ok_or_else(|| format!("no recorded kind (have {})", self.kinds.len()))
    }
}

/// Classifies interventions in order, tracking the previous non-procedural kind.
pub fn classify_all(
    interventions: &[RawIntervention],
    backend: &dyn ClassifierBackend,
) -> Result<Vec<InterventionKind>, IngestError> {
    let mut previous = None;
    let mut kinds = Vec::with_capacity(interventions.len());
    for iv in interventions {
        let kind = backend
            .classify(iv, previous)
            .map_err(|detail| IngestError::Classification {
                index: iv.source_index,
                backend: backend.id().to_string(),
                detail,
            })?;
        if kind != InterventionKind::Procedural {
            previous = Some(kind);
        }
        kinds.push(kind);
    }
    Ok(kinds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::fixtures::utterance;

    fn iv(role: Option<Role>, section: Section, texts: &[&str]) -> RawIntervention {
        RawIntervention {
            source_index: 0,
            speaker: "S".into(),
            role,
            section,
            start_s: 0.0,
            end_s: 1.0,
            sentences: texts.iter().enumerate().map(|(i, t)| utterance(i, t)).collect(),
        }
    }

    #[test]
    fn prepared_remarks_are_monologues() {
        let c = HeuristicClassifier::default();
        let x = iv(Some(Role::Executive), Section::Prepared, &["Thank you."]);
        assert_eq!(c.classify(&x, None).unwrap(), InterventionKind::Monologue);
    }

    #[test]
    fn greeting_is_procedural() {
        let c = HeuristicClassifier::default();
        let x = iv(
            Some(Role::Executive),
            Section::Qa,
            &["Thank you.", "Good morning everyone."],
        );
        assert_eq!(c.classify(&x, None).unwrap(), InterventionKind::Procedural);
        let long = iv(
            None,
            Section::Qa,
            &["Thank you very much and good morning to all of you."],
        );
        assert_ne!(c.classify(&long, None).unwrap(), InterventionKind::Procedural);
    }

    #[test]
    fn analyst_question() {
        let c = HeuristicClassifier::default();
        let x = iv(
            Some(Role::Analyst),
            Section::Qa,
            &["Thanks for taking my question.", "What is your margin outlook?"],
        );
        assert_eq!(c.classify(&x, None).unwrap(), InterventionKind::Question);
        let y = iv(None, Section::Qa, &["And capex?"]);
        assert_eq!(c.classify(&y, None).unwrap(), InterventionKind::Question);
    }

    #[test]
    fn executive_after_question_or_answer_answers() {
        let c = HeuristicClassifier::default();
        let x = iv(Some(Role::Executive), Section::Qa, &["Margins will expand next year."]);
        assert_eq!(
            c.classify(&x, Some(InterventionKind::Question)).unwrap(),
            InterventionKind::Answer
        );
        assert_eq!(
            c.classify(&x, Some(InterventionKind::Answer)).unwrap(),
            InterventionKind::Answer
        );
        assert_eq!(
            c.classify(&x, Some(InterventionKind::Monologue)).unwrap(),
            InterventionKind::Monologue
        );
        assert_eq!(c.classify(&x, None).unwrap(), InterventionKind::Monologue);
    }

    #[test]
    fn previous_kind_skips_procedural_turns() {
        let c = HeuristicClassifier::default();
        let seq = [
            iv(Some(Role::Analyst), Section::Qa, &["How is demand?"]),
            iv(Some(Role::Operator), Section::Qa, &["Thank you."]),
            iv(Some(Role::Executive), Section::Qa, &["Demand remains strong."]),
        ];
        let kinds = classify_all(&seq, &c).unwrap();
        use InterventionKind::*;
        assert_eq!(kinds, [Question, Procedural, Answer]);
    }

    #[test]
    fn word_list_parsing() {
        let c = HeuristicClassifier::from_word_list("# greetings\nhello hi\nBye # farewell\n");
        assert_eq!(c.procedural_words.len(), 3);
        assert!(c.is_procedural("Hello, bye!"));
        assert!(!c.is_procedural("Hello there"));
    }

    #[test]
    fn recorded_kinds_replay() {
        let c = RecordedClassifier::from_json(r#"["answer", "Question"]"#).unwrap();
        let mut x = iv(None, Section::Prepared, &["x"]);
        assert_eq!(c.classify(&x, None).unwrap(), InterventionKind::Answer);
        x.source_index = 2;
        assert!(c.classify(&x, None).is_err());
        assert!(RecordedClassifier::from_json(r#"["maybe"]"#).is_err());
    }

    #[test]
    fn backend_errors_carry_diagnostics() {
        struct Broken;
        impl ClassifierBackend for Broken {
            fn id(&self) -> &str {
                "broken"
            }
            fn classify(&self, _: &RawIntervention, _: Option<InterventionKind>) -> Result<InterventionKind, String> {
                Err("connection refused".into())
            }
        }
        let err = classify_all(&[iv(None, Section::Qa, &["x"])], &Broken)
            .unwrap_err()
            .to_string();
        assert!(err.contains("broken") && err.contains("connection refused"), "{err}");
    }
}

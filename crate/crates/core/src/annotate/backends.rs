use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::seed::derive_seed;
use crate::tree::Topic;

use super::lexicon::{content_words, count_phrase, tokens, topic_keywords};
use super::{make_prediction, BackendError, BackendPrediction, Label, LabelBackend, LabelTask, TaskKind};

/// Minimum share of question content words an answer must repeat to count as covering it.
pub const COVERAGE_YES: f64 = 0.6;
pub const COVERAGE_PARTIAL: f64 = 0.25;

fn failed(backend: &str, detail: impl Into<String>) -> BackendError {
    BackendError {
        backend: backend.to_string(),
        attempts: 1,
        detail: detail.into(),
    }
}

/// Deterministic lexical backend; ignores the seed.
#[derive(Debug, Clone, Default)]
pub struct RuleBackend;

impl RuleBackend {
    /// Keyword hits per topic; the best topic with add-one smoothed share as confidence.
    pub fn topic(text: &str) -> (Topic, f64) {
        let words = tokens(text);
        let mut best = (Topic::Other, 0usize);
        let mut total = 0;
        for topic in Topic::NAMED {
            let hits: usize = topic_keywords(topic).iter().map(|k| count_phrase(&words, k)).sum();
            total += hits;
            if hits > best.1 {
                best = (topic, hits);
            }
        }
        let confidence = (best.1 + 1) as f64 / (total + Topic::NAMED.len()) as f64;
        (best.0, confidence)
    }

    /// Share of distinct question content words that reappear in the answer.
    pub fn overlap(question: &str, answer: &str) -> f64 {
        let q: BTreeSet<String> = content_words(question).into_iter().collect();
        let a: BTreeSet<String> = content_words(answer).into_iter().collect();
        if q.is_empty() {
            return 0.0;
        }
        q.intersection(&a).count() as f64 / q.len() as f64
    }

    pub fn coverage(question: &str, answer: &str) -> (&'static str, f64) {
        let o = Self::overlap(question, answer);
        if o >= COVERAGE_YES {
            ("yes", o)
        } else if o >= COVERAGE_PARTIAL {
            ("partially", 0.5)
        } else {
            ("no", 1.0 - o)
        }
    }

    /// Cosine similarity of content-word frequency vectors.
    pub fn coherence(a: &str, b: &str) -> f64 {
        let tf = |text: &str| {
            let mut m: BTreeMap<String, f64> = BTreeMap::new();
            for w in content_words(text) {
                *m.entry(w).or_default() += 1.0;
            }
            m
        };
        let (x, y) = (tf(a), tf(b));
        let dot: f64 = x.iter().filter_map(|(w, c)| y.get(w).map(|d| c * d)).sum();
        let norm = |m: &BTreeMap<String, f64>| m.values().map(|v| v * v).sum::<f64>().sqrt();
        let denom = norm(&x) * norm(&y);
        if denom == 0.0 {
            0.0
        } else {
            (dot / denom).clamp(0.0, 1.0)
        }
    }
}

impl LabelBackend for RuleBackend {
    fn id(&self) -> &str {
        "rule"
    }

    fn predict(&self, task: &LabelTask, seed: u64) -> Result<BackendPrediction, BackendError> {
        let missing = |what: &str| failed("rule", format!("{} task without {what}", task.kind));
        let (label, confidence) = match task.kind {
            TaskKind::Topic => {
                let (t, c) = Self::topic(&task.text);
                (Label::Category(t.as_str().into()), c)
            }
            TaskKind::Coverage => {
                let q = task.question.as_deref().ok_or_else(|| missing("a question"))?;
                let (l, c) = Self::coverage(q, &task.text);
                (Label::Category(l.into()), c)
            }
            TaskKind::Coherence => {
                let ctx = task.context.as_deref().ok_or_else(|| missing("context"))?;
                (Label::Score(Self::coherence(&task.text, ctx)), 1.0)
            }
        };
        make_prediction("rule", task, seed, label, confidence).map_err(|e| failed("rule", e))
    }
}

#[derive(Debug, Clone, Deserialize)]
struct FixtureEntry {
    label: Label,
    confidence: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureFile {
    backend_id: String,
    predictions: BTreeMap<String, FixtureEntry>,
}

/// Replays recorded predictions keyed by [`LabelTask::fingerprint`].
#[derive(Debug, Clone)]
pub struct FixtureBackend {
    id: String,
    entries: BTreeMap<String, FixtureEntry>,
}

impl FixtureBackend {
    /// `{"backend_id": "...", "predictions": {"<fingerprint>": {"label": ..., "confidence": ...}}}`
    pub fn from_json(json: &str) -> Result<Self, String> {
        let file: FixtureFile = serde_json::from_str(json).map_err(|e| format!("fixture file: {e}"))?;
        Ok(FixtureBackend {
            id: file.backend_id,
            entries: file.predictions,
        })
    }
}

impl LabelBackend for FixtureBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn predict(&self, task: &LabelTask, seed: u64) -> Result<BackendPrediction, BackendError> {
        let key = task.fingerprint();
        let entry = self
            .entries
            .get(&key)
            .ok_or_else(|| failed(&self.id, format!("no recording for {key}")))?;
        make_prediction(&self.id, task, seed, entry.label.clone(), entry.confidence).map_err(|e| failed(&self.id, e))
    }
}

/// Wraps a backend and corrupts its answers at a fixed rate, seeded per
/// task and run, to simulate a sampling model that disagrees with itself.
pub struct NoisyBackend {
    id: String,
    inner: Box<dyn LabelBackend>,
    rate: f64,
}

impl NoisyBackend {
    pub fn new(id: impl Into<String>, inner: Box<dyn LabelBackend>, rate: f64) -> Result<Self, String> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(format!("noise rate {rate} outside [0, 1]"));
        }
        Ok(NoisyBackend {
            id: id.into(),
            inner,
            rate,
        })
    }
}

impl LabelBackend for NoisyBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn predict(&self, task: &LabelTask, seed: u64) -> Result<BackendPrediction, BackendError> {
        let p = self.inner.predict(task, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[&self.id, &task.fingerprint()]));
        let label = match p.label {
            Label::Category(c) => {
                let others: Vec<&str> = task.kind.vocabulary().into_iter().filter(|l| *l != c).collect();
                if rng.gen::<f64>() < self.rate && !others.is_empty() {
                    Label::Category(others[rng.gen_range(0..others.len())].to_string())
                } else {
                    Label::Category(c)
                }
            }
            Label::Score(s) => Label::Score((s + self.rate * rng.gen_range(-1.0..=1.0)).clamp(0.0, 1.0)),
        };
        make_prediction(&self.id, task, seed, label, p.confidence).map_err(|e| failed(&self.id, e))
    }
}

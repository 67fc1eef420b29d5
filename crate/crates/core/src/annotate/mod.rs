//! Metadata annotation by an ensemble of label backends, with per-backend
//! self-agreement, cross-backend agreement and a consensus label per task.

mod backends;
mod consensus;
pub mod lexicon;
mod remote;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::seed::derive_seed;
use crate::tree::{ConferenceTree, Coverage, NodeContent, NodeKind, Topic, TreeError};

pub use backends::{FixtureBackend, NoisyBackend, RuleBackend, COVERAGE_PARTIAL, COVERAGE_YES};
pub use consensus::{consensus, extrinsic_uncertainty, intrinsic_uncertainty, UncertaintyReport, COHERENCE_SPREAD};
pub use remote::{RemoteBackend, RemoteConfig, DEFAULT_MAX_RETRIES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Topic,
    Coverage,
    Coherence,
}

impl TaskKind {
    pub fn is_categorical(self) -> bool {
        self != TaskKind::Coherence
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Topic => "topic",
            TaskKind::Coverage => "coverage",
            TaskKind::Coherence => "coherence",
        }
    }

    /// Labels a categorical task may take.
    pub fn vocabulary(self) -> Vec<&'static str> {
        match self {
            TaskKind::Topic => Topic::NAMED.iter().map(|t| t.as_str()).collect(),
            TaskKind::Coverage => [Coverage::Yes, Coverage::No, Coverage::Partially]
                .iter()
                .map(|c| c.as_str())
                .collect(),
            TaskKind::Coherence => Vec::new(),
        }
    }

    /// Canonical form of a label, or an error naming what was wrong.
    pub fn check_label(self, label: &Label) -> Result<Label, String> {
        match (self, label) {
            (TaskKind::Topic, Label::Category(c)) => Topic::parse(c)
                .filter(|t| *t != Topic::Unknown)
                .map(|t| Label::Category(t.as_str().into()))
                .ok_or_else(|| format!("'{c}' is not a topic")),
            (TaskKind::Coverage, Label::Category(c)) => Coverage::parse(c)
                .filter(|c| *c != Coverage::NotApplicable)
                .map(|c| Label::Category(c.as_str().into()))
                .ok_or_else(|| format!("'{c}' is not a coverage label")),
            (TaskKind::Coherence, Label::Score(s)) if (0.0..=1.0).contains(s) => Ok(Label::Score(*s)),
            (TaskKind::Coherence, Label::Score(s)) => Err(format!("coherence {s} outside [0, 1]")),
            (kind, other) => Err(format!("{other} is the wrong label type for a {kind} task")),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Score(f64),
    Category(String),
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Score(s) => write!(f, "{s}"),
            Label::Category(c) => write!(f, "'{c}'"),
        }
    }
}

/// One labelling question about one node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelTask {
    pub kind: TaskKind,
    pub conference_id: String,
    pub order_index: usize,
    /// Topic: the node text. Coverage and coherence: the answer.
    pub text: String,
    /// Coverage: the question being answered.
    pub question: Option<String>,
    /// Coherence: the most recent preceding monologue.
    pub context: Option<String>,
}

impl LabelTask {
    /// Content hash, independent of where the node sits: `<kind>:<16 hex digits>`.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for part in [
            Some(self.kind.as_str()),
            Some(self.text.as_str()),
            self.question.as_deref(),
            self.context.as_deref(),
        ] {
            match part {
                Some(p) => {
                    h.update([1u8]);
                    h.update((p.len() as u64).to_le_bytes());
                    h.update(p.as_bytes());
                }
                None => h.update([0u8]),
            }
        }
        format!("{}:{}", self.kind, &hex::encode(h.finalize())[..16])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendPrediction {
    pub backend_id: String,
    pub run_seed: u64,
    pub label: Label,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("backend '{backend}' failed after {attempts} attempt(s): {detail}")]
pub struct BackendError {
    pub backend: String,
    pub attempts: u32,
    pub detail: String,
}

pub trait LabelBackend: Send + Sync {
    fn id(&self) -> &str;

    fn predict(&self, task: &LabelTask, seed: u64) -> Result<BackendPrediction, BackendError>;
}

/// Checks a raw backend answer against the task and builds the prediction.
pub fn make_prediction(
    backend: &str,
    task: &LabelTask,
    seed: u64,
    label: Label,
    confidence: f64,
) -> Result<BackendPrediction, String> {
    let label = task.kind.check_label(&label)?;
    if !(0.0..=1.0).contains(&confidence) {
        return Err(format!("confidence {confidence} outside [0, 1]"));
    }
    Ok(BackendPrediction {
        backend_id: backend.to_string(),
        run_seed: seed,
        label,
        confidence,
    })
}

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("consensus: {0}")]
    Consensus(String),
    #[error("ensemble: {0}")]
    Config(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("{}", partial_message(.failures))]
    Partial {
        annotated: Box<Annotated>,
        failures: Vec<NodeFailure>,
    },
}

fn partial_message(failures: &[NodeFailure]) -> String {
    let nodes: Vec<String> = failures.iter().map(|f| f.order_index.to_string()).collect();
    let first = failures.first().map(|f| f.error.as_str()).unwrap_or("");
    format!("annotation failed for node(s) {}: {first}", nodes.join(", "))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeFailure {
    pub order_index: usize,
    pub error: String,
}

pub struct Ensemble {
    pub backends: Vec<Box<dyn LabelBackend>>,
    /// Runs per backend and task.
    pub runs: usize,
    pub seed: u64,
}

impl Ensemble {
    pub fn validate(&self) -> Result<(), AnnotateError> {
        if self.backends.is_empty() {
            return Err(AnnotateError::Config("at least one backend is required".into()));
        }
        if self.runs == 0 {
            return Err(AnnotateError::Config("runs must be at least 1".into()));
        }
        let mut seen = BTreeSet::new();
        for b in &self.backends {
            if !seen.insert(b.id()) {
                return Err(AnnotateError::Config(format!("duplicate backend id '{}'", b.id())));
            }
        }
        Ok(())
    }

    /// Seed of run `k`, shared by every backend.
    pub fn run_seed(&self, k: usize) -> u64 {
        derive_seed(self.seed, &["annotate-run", &k.to_string()])
    }

    /// Every run of every backend on one task.
    pub fn predict_all(&self, task: &LabelTask) -> Result<Vec<BackendPrediction>, BackendError> {
        let mut out = Vec::with_capacity(self.backends.len() * self.runs);
        for b in &self.backends {
            for k in 0..self.runs {
                out.push(b.predict(task, self.run_seed(k))?);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Annotated,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskReport {
    pub kind: TaskKind,
    pub fingerprint: String,
    pub predictions: Vec<BackendPrediction>,
    pub uncertainty: Option<UncertaintyReport>,
    /// Why the task was not run, when it was not.
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeReport {
    pub order_index: usize,
    pub kind: NodeKind,
    pub status: NodeStatus,
    pub confidence: f64,
    pub tasks: Vec<TaskReport>,
    pub error: Option<String>,
}

/// Full audit trail of one conference.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnnotationReport {
    pub conference_id: String,
    pub backends: Vec<String>,
    pub runs: usize,
    pub seed: u64,
    pub nodes: Vec<NodeReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotated {
    pub tree: ConferenceTree,
    pub report: AnnotationReport,
}

/// Tasks for the node at `position` of the temporally ordered `nodes`.
pub fn tasks_for(
    tree_id: &str,
    nodes: &[&crate::tree::DiscourseNode],
    position: usize,
) -> (Vec<LabelTask>, Option<String>) {
    let node = nodes[position];
    let task = |kind, text: String, question, context| LabelTask {
        kind,
        conference_id: tree_id.to_string(),
        order_index: node.order_index,
        text,
        question,
        context,
    };
    let mut tasks = vec![task(TaskKind::Topic, node.text(), None, None)];
    let mut skipped = None;
    if let NodeContent::QaPair {
        question,
        answer: Some(answer),
    } = &node.content
    {
        tasks.push(task(TaskKind::Coverage, answer.text(), Some(question.text()), None));
        let context = nodes[..position].iter().rev().find_map(|n| match &n.content {
            NodeContent::Monologue { intervention } => Some(intervention.text()),
            NodeContent::QaPair { .. } => None,
        });
        match context {
            Some(c) => tasks.push(task(TaskKind::Coherence, answer.text(), None, Some(c))),
            None => skipped = Some("no preceding monologue".to_string()),
        }
    }
    (tasks, skipped)
}

/// Fills topic, coverage and coherence of every node.
///
/// A node's confidence is the lowest aggregated confidence among its tasks,
/// and 0 when its coherence task could not run. If any backend call fails,
/// the nodes that did succeed are still updated and returned inside
/// [`AnnotateError::Partial`].
pub fn annotate_tree(tree: &ConferenceTree, ensemble: &Ensemble) -> Result<Annotated, AnnotateError> {
    ensemble.validate()?;
    let nodes = tree.flatten()?;
    let mut out = tree.clone();
    let mut reports = Vec::with_capacity(nodes.len());
    let mut failures = Vec::new();

    for position in 0..nodes.len() {
        let node = nodes[position];
        let (tasks, skipped) = tasks_for(&tree.id, &nodes, position);
        let mut meta = node.metadata.clone();
        let mut confidence: f64 = 1.0;
        let mut task_reports = Vec::new();
        let mut error = None;
        for task in &tasks {
            let result = ensemble.predict_all(task).map_err(|e| e.to_string()).and_then(|preds| {
                consensus(task.kind, &preds)
                    .map(|u| (preds, u))
                    .map_err(|e| e.to_string())
            });
            let (predictions, u) = match result {
                Ok(x) => x,
                Err(e) => {
                    error = Some(format!("{} task: {e}", task.kind));
                    break;
                }
            };
            confidence = confidence.min(u.aggregated_confidence);
            match (&task.kind, &u.consensus_label) {
                (TaskKind::Topic, Label::Category(c)) => meta.topic = Topic::parse(c).expect("checked label"),
                (TaskKind::Coverage, Label::Category(c)) => meta.coverage = Coverage::parse(c).expect("checked label"),
                (TaskKind::Coherence, Label::Score(s)) => meta.coherence = *s,
                _ => unreachable!("consensus label type follows the task kind"),
            }
            task_reports.push(TaskReport {
                kind: task.kind,
                fingerprint: task.fingerprint(),
                predictions,
                uncertainty: Some(u),
                skipped: None,
            });
        }
        if let Some(reason) = &skipped {
            confidence = 0.0;
            task_reports.push(TaskReport {
                kind: TaskKind::Coherence,
                fingerprint: String::new(),
                predictions: Vec::new(),
                uncertainty: None,
                skipped: Some(reason.clone()),
            });
        }
        let status = if error.is_some() {
            NodeStatus::Failed
        } else {
            NodeStatus::Annotated
        };
        if let Some(e) = &error {
            failures.push(NodeFailure {
                order_index: node.order_index,
                error: e.clone(),
            });
        } else {
            meta.confidence = confidence;
            let stored = out
                .nodes
                .iter_mut()
                .find(|n| n.order_index == node.order_index)
                .expect("same tree");
            stored.metadata = meta;
        }
        reports.push(NodeReport {
            order_index: node.order_index,
            kind: node.kind(),
            status,
            confidence: if error.is_some() {
                node.metadata.confidence
            } else {
                confidence
            },
            tasks: task_reports,
            error,
        });
    }

    let report = AnnotationReport {
        conference_id: tree.id.clone(),
        backends: ensemble.backends.iter().map(|b| b.id().to_string()).collect(),
        runs: ensemble.runs,
        seed: ensemble.seed,
        nodes: reports,
    };
    let annotated = Annotated { tree: out, report };
    if failures.is_empty() {
        Ok(annotated)
    } else {
        Err(AnnotateError::Partial {
            annotated: Box::new(annotated),
            failures,
        })
    }
}

#[cfg(test)]
mod tests;

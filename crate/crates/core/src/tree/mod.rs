//! Conference discourse trees: monologue and question/answer nodes carrying
//! sentence-level multimodal emotion vectors and discourse metadata.

mod emotion;
mod validate;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use emotion::{aggregate_frame_emotions, Emotion, EmotionVector, PoolingStrategy, EMOTION_DIM, SIMPLEX_TOLERANCE};
pub use validate::{validate, Rule, Violation};

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("invalid emotion vector: {0}")]
    Emotion(String),
    #[error("no frames to aggregate")]
    NoFrames,
    #[error("invalid conference tree: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("conference JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("conference JSON at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Deserializes `json`, reporting the JSON path of the first schema error.
pub fn parse_json<T: serde::de::DeserializeOwned>(json: &str) -> Result<T, (String, serde_json::Error)> {
    let de = &mut serde_json::Deserializer::from_str(json);
    let value = serde_path_to_error::deserialize(de).map_err(|e| (e.path().to_string(), e.into_inner()))?;
    Ok(value)
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Audio,
    Video,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Audio, Modality::Video];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Executive,
    Analyst,
    Operator,
    #[default]
    Unknown,
}

/// Topic taxonomy derived from the sections of the SEC 10-K annual report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topic {
    Business,
    RiskFactors,
    LegalProceedings,
    #[serde(rename = "md_and_a")]
    MdAndA,
    FinancialStatements,
    ControlsAndProcedures,
    Other,
    #[default]
    Unknown,
}

impl Topic {
    pub const ALL: [Topic; 8] = [
        Topic::Business,
        Topic::RiskFactors,
        Topic::LegalProceedings,
        Topic::MdAndA,
        Topic::FinancialStatements,
        Topic::ControlsAndProcedures,
        Topic::Other,
        Topic::Unknown,
    ];

    /// The named categories a classifier may emit (everything except `Unknown`).
    pub const NAMED: [Topic; 7] = [
        Topic::Business,
        Topic::RiskFactors,
        Topic::LegalProceedings,
        Topic::MdAndA,
        Topic::FinancialStatements,
        Topic::ControlsAndProcedures,
        Topic::Other,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Topic::Business => "business",
            Topic::RiskFactors => "risk_factors",
            Topic::LegalProceedings => "legal_proceedings",
            Topic::MdAndA => "md_and_a",
            Topic::FinancialStatements => "financial_statements",
            Topic::ControlsAndProcedures => "controls_and_procedures",
            Topic::Other => "other",
            Topic::Unknown => "unknown",
        }
    }

    pub fn parse(label: &str) -> Option<Topic> {
        let norm = normalize_label(label);
        if norm == "mda" {
            return Some(Topic::MdAndA);
        }
        Topic::ALL.into_iter().find(|t| normalize_label(t.as_str()) == norm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coverage {
    Yes,
    No,
    Partially,
    NotApplicable,
}

impl Coverage {
    pub const ALL: [Coverage; 4] = [
        Coverage::Yes,
        Coverage::No,
        Coverage::Partially,
        Coverage::NotApplicable,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Coverage::Yes => "yes",
            Coverage::No => "no",
            Coverage::Partially => "partially",
            Coverage::NotApplicable => "not_applicable",
        }
    }

    pub fn parse(label: &str) -> Option<Coverage> {
        let norm = normalize_label(label);
        Coverage::ALL.into_iter().find(|c| normalize_label(c.as_str()) == norm)
    }
}

fn normalize_label(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

/// Per-modality emotion vectors of one sentence. Text is always present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityEmotions {
    pub text: EmotionVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<EmotionVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video: Option<EmotionVector>,
}

impl ModalityEmotions {
    pub fn text_only(text: EmotionVector) -> Self {
        ModalityEmotions {
            text,
            audio: None,
            video: None,
        }
    }

    pub fn get(&self, modality: Modality) -> Option<&EmotionVector> {
        match modality {
            Modality::Text => Some(&self.text),
            Modality::Audio => self.audio.as_ref(),
            Modality::Video => self.video.as_ref(),
        }
    }

    /// Present modalities in canonical order.
    pub fn present(&self) -> impl Iterator<Item = (Modality, &EmotionVector)> {
        Modality::ALL
            .into_iter()
            .filter_map(move |m| self.get(m).map(|v| (m, v)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    /// Position within the owning intervention; implied by list order in JSON.
    #[serde(skip)]
    pub index: usize,
    pub text: String,
    pub emotions: ModalityEmotions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "InterventionRepr")]
pub struct Intervention {
    pub speaker: String,
    pub role: Role,
    pub duration_s: f64,
    pub utterances: Vec<Utterance>,
}

#[derive(Deserialize)]
struct InterventionRepr {
    speaker: String,
    #[serde(default)]
    role: Role,
    duration_s: f64,
    utterances: Vec<Utterance>,
}

impl From<InterventionRepr> for Intervention {
    fn from(r: InterventionRepr) -> Self {
        let mut utterances = r.utterances;
        for (i, u) in utterances.iter_mut().enumerate() {
            u.index = i;
        }
        Intervention {
            speaker: r.speaker,
            role: r.role,
            duration_s: r.duration_s,
            utterances,
        }
    }
}

impl Intervention {
    pub fn text(&self) -> String {
        self.utterances
            .iter()
            .map(|u| u.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeMetadata {
    pub topic: Topic,
    pub coverage: Coverage,
    pub coherence: f64,
    pub confidence: f64,
}

impl NodeMetadata {
    /// Metadata of a freshly assembled, not yet annotated node.
    pub fn unannotated(coverage: Coverage) -> Self {
        NodeMetadata {
            topic: Topic::Unknown,
            coverage,
            coherence: 0.5,
            confidence: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Monologue,
    QaPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeContent {
    Monologue {
        intervention: Intervention,
    },
    QaPair {
        question: Intervention,
        answer: Option<Intervention>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscourseNode {
    pub order_index: usize,
    #[serde(flatten)]
    pub content: NodeContent,
    pub metadata: NodeMetadata,
}

impl DiscourseNode {
    pub fn kind(&self) -> NodeKind {
        match self.content {
            NodeContent::Monologue { .. } => NodeKind::Monologue,
            NodeContent::QaPair { .. } => NodeKind::QaPair,
        }
    }

    /// Interventions in speaking order (question before answer).
    pub fn interventions(&self) -> Vec<&Intervention> {
        match &self.content {
            NodeContent::Monologue { intervention } => vec![intervention],
            NodeContent::QaPair { question, answer } => {
                let mut v = vec![question];
                v.extend(answer.iter());
                v
            }
        }
    }

    /// All utterances of the node; for pairs, question utterances then answer utterances.
    pub fn utterances(&self) -> Vec<&Utterance> {
        self.interventions()
            .into_iter()
            .flat_map(|iv| iv.utterances.iter())
            .collect()
    }

    pub fn duration_s(&self) -> f64 {
        self.interventions().iter().map(|iv| iv.duration_s).sum()
    }

    pub fn text(&self) -> String {
        self.interventions()
            .iter()
            .map(|iv| iv.text())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn answer(&self) -> Option<&Intervention> {
        match &self.content {
            NodeContent::QaPair { answer, .. } => answer.as_ref(),
            NodeContent::Monologue { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConferenceTree {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<BTreeMap<String, String>>,
    pub nodes: Vec<DiscourseNode>,
}

impl ConferenceTree {
    pub fn from_json(json: &str) -> Result<Self, TreeError> {
        parse_json(json).map_err(|(path, e)| TreeError::Schema {
            path,
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> Result<String, TreeError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self, TreeError> {
        let text = std::fs::read_to_string(path).map_err(|source| TreeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), TreeError> {
        let mut json = self.to_json()?;
        json.push('\n');
        std::fs::write(path, json).map_err(|source| TreeError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate(self)
    }

    /// Nodes in temporal order.
    ///
    /// Storage order is allowed to differ from `order_index` order; every
    /// other invariant must hold.
    pub fn flatten(&self) -> Result<Vec<&DiscourseNode>, TreeError> {
        let violations: Vec<Violation> = validate(self)
            .into_iter()
            .filter(|v| v.rule != Rule::OrderIndexIncreasing)
            .collect();
        if !violations.is_empty() {
            return Err(TreeError::Invalid(violations));
        }
        let mut nodes: Vec<&DiscourseNode> = self.nodes.iter().collect();
        nodes.sort_by_key(|n| n.order_index);
        Ok(nodes)
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeKind::Monologue => write!(f, "monologue"),
            NodeKind::QaPair => write!(f, "qa_pair"),
        }
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn flatten_keeps_sorted_order() {
        let t = tree(vec![monologue(0), pair(1, true), pair(2, false)]);
        let order: Vec<usize> = t.flatten().unwrap().iter().map(|n| n.order_index).collect();
        assert_eq!(order, vec![0, 1, 2]);
    }

    #[test]
    fn flatten_reorders_shuffled_storage() {
        let t = tree(vec![pair(2, false), monologue(0), pair(1, true)]);
        let order: Vec<usize> = t.flatten().unwrap().iter().map(|n| n.order_index).collect();
        assert_eq!(order, vec![0, 1, 2]);
    }

    #[test]
    fn flatten_rejects_empty_tree() {
        let t = tree(vec![]);
        assert!(matches!(t.flatten(), Err(TreeError::Invalid(_))));
    }

    #[test]
    fn json_round_trip_is_byte_identical() {
        let mut t = tree(vec![monologue(0), pair(1, true), pair(2, false)]);
        t.source = Some(BTreeMap::from([("ticker".to_string(), "ACME".to_string())]));
        if let NodeContent::QaPair { answer: Some(a), .. } = &mut t.nodes[1].content {
            a.utterances[0].emotions.audio = Some(EmotionVector::one_hot(Emotion::Joy));
        }
        let json = t.to_json().unwrap();
        let back = ConferenceTree::from_json(&json).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_json().unwrap(), json);
        assert!(json.contains("\"kind\": \"qa_pair\""));
        assert!(json.contains("\"answer\": null"));
        assert!(!json.contains("video"));
    }

    #[test]
    fn schema_errors_name_the_json_path() {
        let json = tree(vec![monologue(0), pair(1, true)]).to_json().unwrap();
        let bad = json.replacen("\"coverage\": \"yes\"", "\"coverage\": \"maybe\"", 1);
        assert_ne!(bad, json);
        let msg = ConferenceTree::from_json(&bad).unwrap_err().to_string();
        assert!(msg.contains("nodes[1].metadata.coverage"), "{msg}");
    }

    #[test]
    fn label_parsing_is_lenient_on_case_and_separators() {
        assert_eq!(Topic::parse("MD&A"), Some(Topic::MdAndA));
        assert_eq!(Topic::parse("md_and_a"), Some(Topic::MdAndA));
        assert_eq!(Topic::parse("Risk Factors"), Some(Topic::RiskFactors));
        assert_eq!(Coverage::parse("PARTIALLY"), Some(Coverage::Partially));
        assert_eq!(Coverage::parse("maybe"), None);
    }
}

//! Transcript ingestion: parse speaker turns, classify them, drop procedural
//! chatter, pair questions with answers and assemble a conference tree.

mod classify;
mod pairing;
mod transcript;

use thiserror::Error;

use crate::tree::{ConferenceTree, PoolingStrategy, Rule, TreeError};

pub use classify::{
    classify_all, ClassifierBackend, HeuristicClassifier, InterventionKind, RecordedClassifier,
    DEFAULT_PROCEDURAL_WORDS,
};
pub use pairing::{assemble_tree, pair_questions_answers, Draft, PairDraft};
pub use transcript::{parse_transcript, RawIntervention, Section, Transcript};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed transcript JSON at {path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("intervention {index}: {detail}")]
    Intervention { index: usize, detail: String },
    #[error("intervention {index}: classifier '{backend}' failed: {detail}")]
    Classification {
        index: usize,
        backend: String,
        detail: String,
    },
    #[error("empty conference")]
    Empty,
    #[error(transparent)]
    Tree(#[from] TreeError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub tree: ConferenceTree,
    /// Kind assigned to each intervention, by source document index.
    pub kinds: Vec<InterventionKind>,
}

pub fn ingest_transcript(
    json: &str,
    classifier: &dyn ClassifierBackend,
    pooling: PoolingStrategy,
) -> Result<Ingested, IngestError> {
    let transcript = parse_transcript(json, pooling)?;
    let kinds = classify_all(&transcript.interventions, classifier)?;
    let mut by_source = vec![InterventionKind::Procedural; kinds.len()];
    for (iv, kind) in transcript.interventions.iter().zip(&kinds) {
        by_source[iv.source_index] = *kind;
    }
    let classified: Vec<(RawIntervention, InterventionKind)> = transcript
        .interventions
        .into_iter()
        .zip(kinds)
        .filter(|(_, k)| *k != InterventionKind::Procedural)
        .collect();
    let (pairs, monologues) = pair_questions_answers(&classified);
    let tree = assemble_tree(&transcript.id, monologues, pairs, transcript.source)?;
    Ok(Ingested { tree, kinds: by_source })
}

/// Ingests either a transcript or an already assembled conference document.
///
/// Conference documents pass through after validation, so feeding the
/// pipeline its own output reproduces it exactly.
pub fn ingest_document(
    json: &str,
    classifier: &dyn ClassifierBackend,
    pooling: PoolingStrategy,
) -> Result<ConferenceTree, IngestError> {
    let value: serde_json::Value = serde_json::from_str(json).map_err(|source| IngestError::Json {
        path: ".".into(),
        source,
    })?;
    if value.get("nodes").is_none() {
        return Ok(ingest_transcript(json, classifier, pooling)?.tree);
    }
    let tree = ConferenceTree::from_json(json)?;
    let violations: Vec<_> = tree
        .validate()
        .into_iter()
        .filter(|v| v.rule != Rule::OrderIndexIncreasing)
        .collect();
    if !violations.is_empty() {
        return Err(TreeError::Invalid(violations).into());
    }
    let mut tree = tree;
    tree.nodes.sort_by_key(|n| n.order_index);
    Ok(tree)
}

//! Conference-level encoder over the ordered sequence of node embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::ModelError;
use crate::tensor::layers::{encoder_layer, init_embedding, EncoderLayerParams, Linear};
use crate::tensor::{Tape, Tensor, Var};
use crate::tree::ConferenceTree;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfEncoderConfig {
    pub d_embed: usize,
    pub heads: usize,
    pub layers: usize,
    /// Maximum number of nodes in one conference.
    pub max_nodes: usize,
}

impl Default for ConfEncoderConfig {
    fn default() -> Self {
        ConfEncoderConfig {
            d_embed: 64,
            heads: 4,
            layers: 2,
            max_nodes: 256,
        }
    }
}

impl ConfEncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_embed == 0 || self.heads == 0 || self.layers == 0 || self.max_nodes == 0 {
            return Err(ModelError::Config(
                "conference encoder extents must be at least 1".into(),
            ));
        }
        if !self.d_embed.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "conference d_embed {} is not divisible by {} heads",
                self.d_embed, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfEncoderParams<T> {
    pub cls: T,
    /// `(max_nodes + 1) × d_embed`; row 0 belongs to the `[CLS]` position.
    pub positional: T,
    pub layers: Vec<EncoderLayerParams<T>>,
    pub projection: Linear<T>,
}

impl ConfEncoderParams<Tensor> {
    pub fn init(config: &ConfEncoderConfig, rng: &mut impl Rng) -> Self {
        let d = config.d_embed;
        ConfEncoderParams {
            cls: init_embedding(1, d, 0.1, rng),
            positional: init_embedding(config.max_nodes + 1, d, 0.1, rng),
            layers: (0..config.layers).map(|_| EncoderLayerParams::init(d, rng)).collect(),
            projection: Linear::init(d, d, rng),
        }
    }
}

impl<T> ConfEncoderParams<T> {
    pub fn map<U, F: FnMut(&T) -> U>(&self, f: &mut F) -> ConfEncoderParams<U> {
        ConfEncoderParams {
            cls: f(&self.cls),
            positional: f(&self.positional),
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
            projection: self.projection.map(f),
        }
    }

    pub fn visit<'a, F: FnMut(String, &'a T)>(&'a self, prefix: &str, f: &mut F) {
        f(format!("{prefix}.cls"), &self.cls);
        f(format!("{prefix}.positional"), &self.positional);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.layers.{i}"), f);
        }
        self.projection.visit(&format!("{prefix}.projection"), f);
    }
}

/// Last-layer attention of the `[CLS]` query over the whole sequence.
///
/// Each distribution has `n + 1` entries: position 0 is `[CLS]` itself and
/// position `i ≥ 1` is the `i`-th node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub per_head: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

/// Encodes an ordered list of `1 × d_embed` node embeddings into a
/// `1 × d_embed` conference embedding.
pub fn encode_conference(
    tape: &mut Tape,
    node_embeddings: &[Var],
    params: &ConfEncoderParams<Var>,
    config: &ConfEncoderConfig,
) -> Result<(Var, AttentionReport), ModelError> {
    let n = node_embeddings.len();
    if n == 0 {
        return Err(ModelError::EmptyConference);
    }
    if n > config.max_nodes {
        return Err(ModelError::Capacity {
            nodes: n,
            max: config.max_nodes,
        });
    }
    let mut sequence = Vec::with_capacity(n + 1);
    sequence.push(params.cls);
    sequence.extend_from_slice(node_embeddings);
    let x = tape.concat_rows(&sequence)?;
    let positions = tape.slice_rows(params.positional, 0, n + 1)?;
    let mut x = tape.add(x, positions)?;
    let mut last_weights = Vec::new();
    for layer in &params.layers {
        let out = encoder_layer(tape, x, layer, config.heads)?;
        x = out.output;
        last_weights = out.weights;
    }
    let cls = tape.slice_rows(x, 0, 1)?;
    let embedding = params.projection.forward(tape, cls)?;

    let per_head: Vec<Vec<f64>> = last_weights
        .iter()
        .map(|w| tape.value(*w).row_slice(0).to_vec())
        .collect();
    let heads = per_head.len() as f64;
    let mean = (0..=n)
        .map(|i| per_head.iter().map(|h| h[i]).sum::<f64>() / heads)
        .collect();
    Ok((embedding, AttentionReport { per_head, mean }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeWeight {
    pub order_index: usize,
    pub weight: f64,
}

/// Attention report file: head-averaged and per-head `[CLS]` weights over
/// nodes, with the `[CLS]` self-weight dropped and the rest renormalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionByNode {
    pub conference_id: String,
    pub per_node: Vec<NodeWeight>,
    pub per_head: Vec<Vec<f64>>,
}

fn renormalize_nodes(dist: &[f64]) -> Vec<f64> {
    let nodes = &dist[1..];
    let total: f64 = nodes.iter().sum();
    nodes.iter().map(|w| w / total).collect()
}

/// Pairs the `[CLS]`→node weights of `report` with the nodes of `tree` in
/// temporal order.
pub fn attention_by_node(report: &AttentionReport, tree: &ConferenceTree) -> Result<AttentionByNode, ModelError> {
    let nodes = tree.flatten()?;
    if report.mean.len() != nodes.len() + 1 || report.per_head.iter().any(|h| h.len() != report.mean.len()) {
        return Err(ModelError::LengthMismatch {
            expected: nodes.len() + 1,
            got: report.mean.len(),
        });
    }
    let weights = renormalize_nodes(&report.mean);
    Ok(AttentionByNode {
        conference_id: tree.id.clone(),
        per_node: nodes
            .iter()
            .zip(weights)
            .map(|(n, weight)| NodeWeight {
                order_index: n.order_index,
                weight,
            })
            .collect(),
        per_head: report.per_head.iter().map(|h| renormalize_nodes(h)).collect(),
    })
}

//! The two-level model: node encoder feeding the conference encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conf_encoder::{encode_conference, AttentionReport, ConfEncoderConfig, ConfEncoderParams};
use crate::node_encoder::{encode_node, NodeEncoderConfig, NodeEncoderParams};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::tree::{ConferenceTree, DiscourseNode, TreeError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("empty node view")]
    EmptyView,
    #[error("view index {index} out of range for {len} utterances")]
    ViewIndex { index: usize, len: usize },
    #[error("model configuration: {0}")]
    Config(String),
    #[error("conference has {nodes} nodes but the encoder holds at most {max}")]
    Capacity { nodes: usize, max: usize },
    #[error("conference has no nodes")]
    EmptyConference,
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelConfig {
    pub node: NodeEncoderConfig,
    pub conf: ConfEncoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.node.validate()?;
        self.conf.validate()?;
        if self.node.d_embed != self.conf.d_embed {
            return Err(ModelError::Config(format!(
                "node d_embed {} differs from conference d_embed {}",
                self.node.d_embed, self.conf.d_embed
            )));
        }
        Ok(())
    }

    /// Small dimensions used by the gradient suite.
    pub fn desk() -> Self {
        ModelConfig {
            node: NodeEncoderConfig {
                d_model: 8,
                heads: 2,
                layers: 1,
                d_embed: 8,
                ..Default::default()
            },
            conf: ConfEncoderConfig {
                d_embed: 8,
                heads: 2,
                layers: 1,
                max_nodes: 8,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub node: NodeEncoderParams<T>,
    pub conf: ConfEncoderParams<T>,
}

impl ModelParams<Tensor> {
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let node = NodeEncoderParams::init(&config.node, &mut rng);
        let conf = ConfEncoderParams::init(&config.conf, &mut rng);
        ModelParams { node, conf }
    }

    pub fn num_parameters(&self) -> usize {
        self.flat().iter().map(|t| t.numel()).sum()
    }

    /// Tensors in canonical order.
    pub fn flat(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| out.push(t));
        out
    }

    /// Rebuilds parameters of the same layout from tensors in canonical order.
    pub fn from_flat(&self, tensors: Vec<Tensor>) -> Result<Self, ModelError> {
        let expected = self.flat().len();
        if tensors.len() != expected {
            return Err(ModelError::LengthMismatch {
                expected,
                got: tensors.len(),
            });
        }
        for (have, want) in tensors.iter().zip(self.flat()) {
            if have.shape() != want.shape() {
                return Err(ModelError::Config(format!(
                    "tensor shape {:?} does not match expected {:?}",
                    have.shape(),
                    want.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        Ok(self.map(&mut |_| it.next().expect("length checked")))
    }

    pub fn bind_leaves(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.map(&mut |t| tape.leaf(t.clone()))
    }

    pub fn bind_constants(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.map(&mut |t| tape.constant(t.clone()))
    }
}

impl<T> ModelParams<T> {
    pub fn map<U, F: FnMut(&T) -> U>(&self, f: &mut F) -> ModelParams<U> {
        ModelParams {
            node: self.node.map(f),
            conf: self.conf.map(f),
        }
    }

    pub fn visit<'a, F: FnMut(String, &'a T)>(&'a self, f: &mut F) {
        self.node.visit("node", f);
        self.conf.visit("conf", f);
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |name, _| out.push(name));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConferenceEmbedding {
    pub embedding: Vec<f64>,
    pub attention: AttentionReport,
}

/// Configuration plus weights, for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor>,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let params = ModelParams::init(&config, seed);
        Ok(Model { config, params })
    }

    pub fn embed_node(&self, node: &DiscourseNode, view: Option<&[usize]>) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let p = self.params.bind_constants(&mut tape);
        let e = encode_node(&mut tape, node, &p.node, &self.config.node, view)?;
        Ok(tape.value(e).data().to_vec())
    }

    /// Full-conference embedding with nodes in temporal order.
    pub fn embed_conference(&self, tree: &ConferenceTree) -> Result<ConferenceEmbedding, ModelError> {
        let nodes = tree.flatten()?;
        self.embed_nodes(&nodes)
    }

    /// Embedding of an ordered node sequence (for example a conference view).
    pub fn embed_nodes(&self, nodes: &[&DiscourseNode]) -> Result<ConferenceEmbedding, ModelError> {
        let mut tape = Tape::new();
        let p = self.params.bind_constants(&mut tape);
        let mut rows = Vec::with_capacity(nodes.len());
        for node in nodes {
            rows.push(encode_node(&mut tape, node, &p.node, &self.config.node, None)?);
        }
        let (e, attention) = encode_conference(&mut tape, &rows, &p.conf, &self.config.conf)?;
        Ok(ConferenceEmbedding {
            embedding: tape.value(e).data().to_vec(),
            attention,
        })
    }
}

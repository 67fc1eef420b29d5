//! Node-level encoder: fuses the utterance emotion sequence of a discourse
//! node with its structured metadata into one fixed-size embedding.
//!
//! The content branch turns every (utterance, modality) pair into a token
//! `W_m · e + μ_m`, prepends a learned `[CLS]` token and runs a stack of
//! encoder layers; the final `[CLS]` state is the content vector. There are
//! no positional encodings at this level, so the content vector does not
//! depend on utterance order. The metadata branch is a linear projection of
//! [`featurize_metadata`]. Both are concatenated and projected to `d_embed`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::ModelError;
use crate::tensor::layers::{encoder_layer, init_embedding, init_weight, EncoderLayerParams, Linear};
use crate::tensor::{Tape, Tensor, Var};
use crate::tree::{Coverage, DiscourseNode, Modality, NodeKind, NodeMetadata, Topic, EMOTION_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_embed: usize,
    pub taxonomy_size: usize,
}

impl Default for NodeEncoderConfig {
    fn default() -> Self {
        NodeEncoderConfig {
            d_model: 64,
            heads: 4,
            layers: 2,
            d_embed: 64,
            taxonomy_size: Topic::ALL.len(),
        }
    }
}

impl NodeEncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.heads == 0 || self.layers == 0 || self.d_embed == 0 {
            return Err(ModelError::Config("node encoder extents must be at least 1".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "node d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.taxonomy_size != Topic::ALL.len() {
            return Err(ModelError::Config(format!(
                "taxonomy size {} does not match the {} topic labels",
                self.taxonomy_size,
                Topic::ALL.len()
            )));
        }
        Ok(())
    }

    pub fn metadata_width(&self) -> usize {
        metadata_width(self.taxonomy_size)
    }
}

/// Width of [`featurize_metadata`] for a taxonomy of `k` topics.
pub fn metadata_width(k: usize) -> usize {
    k + Coverage::ALL.len() + 1 + 1 + 2
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeEncoderParams<T> {
    /// One `7 × d_model` projection per modality, in [`Modality::ALL`] order.
    pub modality_proj: Vec<T>,
    /// `3 × d_model`, row `m` added to every token of modality `m`.
    pub modality_embed: T,
    pub cls: T,
    pub layers: Vec<EncoderLayerParams<T>>,
    pub metadata: Linear<T>,
    pub fusion: Linear<T>,
}

impl NodeEncoderParams<Tensor> {
    pub fn init(config: &NodeEncoderConfig, rng: &mut impl Rng) -> Self {
        let d = config.d_model;
        NodeEncoderParams {
            modality_proj: Modality::ALL.iter().map(|_| init_weight(EMOTION_DIM, d, rng)).collect(),
            modality_embed: init_embedding(Modality::ALL.len(), d, 0.1, rng),
            cls: init_embedding(1, d, 0.1, rng),
            layers: (0..config.layers).map(|_| EncoderLayerParams::init(d, rng)).collect(),
            metadata: Linear::init(config.metadata_width(), d, rng),
            fusion: Linear::init(2 * d, config.d_embed, rng),
        }
    }
}

impl<T> NodeEncoderParams<T> {
    pub fn map<U, F: FnMut(&T) -> U>(&self, f: &mut F) -> NodeEncoderParams<U> {
        NodeEncoderParams {
            modality_proj: self.modality_proj.iter().map(&mut *f).collect(),
            modality_embed: f(&self.modality_embed),
            cls: f(&self.cls),
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
            metadata: self.metadata.map(f),
            fusion: self.fusion.map(f),
        }
    }

    pub fn visit<'a, F: FnMut(String, &'a T)>(&'a self, prefix: &str, f: &mut F) {
        for (m, t) in Modality::ALL.iter().zip(&self.modality_proj) {
            f(format!("{prefix}.modality_proj.{m:?}").to_lowercase(), t);
        }
        f(format!("{prefix}.modality_embed"), &self.modality_embed);
        f(format!("{prefix}.cls"), &self.cls);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.layers.{i}"), f);
        }
        self.metadata.visit(&format!("{prefix}.metadata"), f);
        self.fusion.visit(&format!("{prefix}.fusion"), f);
    }
}

/// One-hot topic, one-hot coverage, coherence, `ln(1 + duration_s)` and a
/// one-hot node kind (monologue, qa_pair).
pub fn featurize_metadata(meta: &NodeMetadata, kind: NodeKind, duration_s: f64) -> Vec<f64> {
    let k = Topic::ALL.len();
    let mut out = vec![0.0; metadata_width(k)];
    out[meta.topic.index()] = 1.0;
    out[k + meta.coverage.index()] = 1.0;
    let base = k + Coverage::ALL.len();
    out[base] = meta.coherence;
    out[base + 1] = duration_s.max(0.0).ln_1p();
    out[base + 2 + usize::from(kind == NodeKind::QaPair)] = 1.0;
    out
}

/// Encodes `node` (or the utterance subset `view`, indexing into
/// [`DiscourseNode::utterances`]) into a `1 × d_embed` row.
pub fn encode_node(
    tape: &mut Tape,
    node: &DiscourseNode,
    params: &NodeEncoderParams<Var>,
    config: &NodeEncoderConfig,
    view: Option<&[usize]>,
) -> Result<Var, ModelError> {
    let utterances = node.utterances();
    let selected: Vec<usize> = match view {
        Some(v) => v.to_vec(),
        None => (0..utterances.len()).collect(),
    };
    if selected.is_empty() {
        return Err(ModelError::EmptyView);
    }
    if let Some(&bad) = selected.iter().find(|&&i| i >= utterances.len()) {
        return Err(ModelError::ViewIndex {
            index: bad,
            len: utterances.len(),
        });
    }

    let mut sequence = vec![params.cls];
    for modality in Modality::ALL {
        let rows: Vec<Vec<f64>> = selected
            .iter()
            .filter_map(|&i| utterances[i].emotions.get(modality))
            .map(|e| e.values().to_vec())
            .collect();
        if rows.is_empty() {
            continue;
        }
        let emotions = tape.constant(Tensor::from_rows(&rows)?);
        let projected = tape.matmul(emotions, params.modality_proj[modality.index()])?;
        let type_row = tape.slice_rows(params.modality_embed, modality.index(), 1)?;
        sequence.push(tape.add_row(projected, type_row)?);
    }
    let mut x = tape.concat_rows(&sequence)?;
    for layer in &params.layers {
        x = encoder_layer(tape, x, layer, config.heads)?.output;
    }
    let content = tape.slice_rows(x, 0, 1)?;

    let features = featurize_metadata(&node.metadata, node.kind(), node.duration_s());
    let features = tape.constant(Tensor::row(&features));
    let meta = params.metadata.forward(tape, features)?;

    let fused = tape.concat_cols(&[content, meta])?;
    Ok(params.fusion.forward(tape, fused)?)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tree::fixtures;
    use crate::tree::{EmotionVector, ModalityEmotions, NodeContent, Utterance};

    fn small_config() -> NodeEncoderConfig {
        NodeEncoderConfig {
            d_model: 8,
            heads: 2,
            layers: 1,
            d_embed: 6,
            ..Default::default()
        }
    }

    fn emotion(seed: u64) -> EmotionVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: [f64; 7] = std::array::from_fn(|_| rng.gen_range(0.01..1.0));
        EmotionVector::normalized(w).unwrap()
    }

    fn rich_node() -> DiscourseNode {
        let mut node = fixtures::pair(0, true);
        if let NodeContent::QaPair {
            question,
            answer: Some(answer),
        } = &mut node.content
        {
            for (k, iv) in [question, answer].into_iter().enumerate() {
                iv.utterances = (0..3)
                    .map(|i| Utterance {
                        index: i,
                        text: format!("sentence {i}"),
                        emotions: ModalityEmotions {
                            text: emotion(10 * k as u64 + i as u64),
                            audio: (i != 1).then(|| emotion(100 + 10 * k as u64 + i as u64)),
                            video: (i == 2).then(|| emotion(200 + i as u64)),
                        },
                    })
                    .collect();
            }
        }
        node
    }

    fn embed(
        node: &DiscourseNode,
        params: &NodeEncoderParams<Tensor>,
        cfg: &NodeEncoderConfig,
        view: Option<&[usize]>,
    ) -> Vec<f64> {
        let mut tape = Tape::new();
        let p = params.map(&mut |t| tape.constant(t.clone()));
        let out = encode_node(&mut tape, node, &p, cfg, view).unwrap();
        tape.value(out).data().to_vec()
    }

    #[test]
    fn metadata_features() {
        let meta = NodeMetadata::unannotated(Coverage::NotApplicable);
        let f = featurize_metadata(&meta, NodeKind::Monologue, 0.0);
        assert_eq!(f.len(), 16);
        assert_eq!(f[Topic::Unknown.index()], 1.0);
        assert_eq!(f[8 + 3], 1.0);
        assert_eq!(f[12], 0.5);
        assert_eq!(f[13], 0.0);
        assert_eq!(&f[14..], &[1.0, 0.0]);
        assert_eq!(f.iter().sum::<f64>(), 3.5);

        let meta = NodeMetadata {
            coverage: Coverage::Partially,
            ..meta
        };
        let f = featurize_metadata(&meta, NodeKind::QaPair, 100.0);
        assert_eq!(f[8 + 2], 1.0);
        assert!((f[13] - 4.6151).abs() < 1e-4);
        assert_eq!(&f[14..], &[0.0, 1.0]);
    }

    #[test]
    fn output_width_and_determinism() {
        let cfg = small_config();
        let params = NodeEncoderParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let node = rich_node();
        let a = embed(&node, &params, &cfg, None);
        let b = embed(&node, &params, &cfg, None);
        assert_eq!(a.len(), 6);
        assert_eq!(a, b);
        let single = fixtures::monologue(0);
        assert_eq!(embed(&single, &params, &cfg, None).len(), 6);
    }

    #[test]
    fn utterance_order_does_not_matter() {
        let cfg = small_config();
        let params = NodeEncoderParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let node = rich_node();
        let forward = embed(&node, &params, &cfg, Some(&[0, 1, 2, 3, 4, 5]));
        let shuffled = embed(&node, &params, &cfg, Some(&[4, 1, 5, 0, 3, 2]));
        let max_diff = forward
            .iter()
            .zip(&shuffled)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff <= 1e-9, "max diff {max_diff}");
    }

    #[test]
    fn audio_changes_the_embedding() {
        let cfg = small_config();
        let params = NodeEncoderParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let with_audio = rich_node();
        let mut without = with_audio.clone();
        if let NodeContent::QaPair {
            question,
            answer: Some(answer),
        } = &mut without.content
        {
            for u in question.utterances.iter_mut().chain(answer.utterances.iter_mut()) {
                u.emotions.audio = None;
            }
        }
        let a = embed(&with_audio, &params, &cfg, None);
        let b = embed(&without, &params, &cfg, None);
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn empty_and_out_of_range_views() {
        let cfg = small_config();
        let params = NodeEncoderParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let node = fixtures::monologue(0);
        let mut tape = Tape::new();
        let p = params.map(&mut |t| tape.constant(t.clone()));
        let err = encode_node(&mut tape, &node, &p, &cfg, Some(&[])).unwrap_err();
        assert!(err.to_string().contains("empty node view"));
        assert!(matches!(
            encode_node(&mut tape, &node, &p, &cfg, Some(&[3])),
            Err(ModelError::ViewIndex { index: 3, len: 1 })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(NodeEncoderConfig::default().validate().is_ok());
        let bad = NodeEncoderConfig {
            heads: 3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = NodeEncoderConfig {
            taxonomy_size: 5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}

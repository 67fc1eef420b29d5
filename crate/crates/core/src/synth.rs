//! Synthetic conferences drawn from latent profiles.
//!
//! Each conference gets a profile: a mean emotion vector, a distribution
//! over topics and a coherence regime. Every utterance emotion is the
//! profile mean plus exponential noise scaled by `1/κ`, renormalized. Two
//! views of one conference therefore share statistics while conferences
//! with different profiles differ.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::lexicon::topic_keywords;
use crate::seed;
use crate::tree::{
    ConferenceTree, Coverage, DiscourseNode, EmotionVector, Intervention, ModalityEmotions, NodeContent, NodeMetadata,
    Role, Topic, TreeError, Utterance, EMOTION_DIM,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("generator configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("{}: {source}", path.display())]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Inclusive integer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub min: usize,
    pub max: usize,
}

impl Span {
    pub const fn new(min: usize, max: usize) -> Self {
        Span { min, max }
    }

    fn draw(&self, rng: &mut impl Rng) -> usize {
        rng.gen_range(self.min..=self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub conferences: usize,
    pub monologues: Span,
    pub pairs: Span,
    pub utterances: Span,
    pub audio_prob: f64,
    pub video_prob: f64,
    pub unanswered_prob: f64,
    /// Emotion concentration κ; larger means less noise around the profile mean.
    pub concentration: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            conferences: 64,
            monologues: Span::new(2, 4),
            pairs: Span::new(3, 8),
            utterances: Span::new(1, 5),
            audio_prob: 0.7,
            video_prob: 0.4,
            unanswered_prob: 0.1,
            concentration: 10.0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |m: String| Err(SynthError::Config(m));
        for (name, s) in [
            ("monologues", self.monologues),
            ("pairs", self.pairs),
            ("utterances", self.utterances),
        ] {
            if s.min > s.max {
                return fail(format!("{name} range {}..={} is empty", s.min, s.max));
            }
        }
        if self.utterances.min == 0 {
            return fail("interventions need at least one utterance".into());
        }
        if self.monologues.min + self.pairs.min == 0 {
            return fail("conferences need at least one node".into());
        }
        for (name, p) in [
            ("audio_prob", self.audio_prob),
            ("video_prob", self.video_prob),
            ("unanswered_prob", self.unanswered_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(self.concentration > 0.0) {
            return fail(format!("concentration must be positive, got {}", self.concentration));
        }
        if self.conferences == 0 {
            return fail("corpus needs at least one conference".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoherenceRegime {
    Low,
    Medium,
    High,
}

impl CoherenceRegime {
    pub fn center(self) -> f64 {
        match self {
            CoherenceRegime::Low => 0.25,
            CoherenceRegime::Medium => 0.5,
            CoherenceRegime::High => 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentProfile {
    pub emotion_mean: EmotionVector,
    /// Probability per named topic, keyed by label.
    pub topics: BTreeMap<String, f64>,
    pub coherence: CoherenceRegime,
}

impl LatentProfile {
    /// Euclidean distance over emotion mean and topic distribution.
    pub fn distance(&self, other: &LatentProfile) -> f64 {
        let e: f64 = self
            .emotion_mean
            .values()
            .iter()
            .zip(other.emotion_mean.values())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        let t: f64 = self
            .topics
            .iter()
            .map(|(k, a)| (a - other.topics.get(k).unwrap_or(&0.0)).powi(2))
            .sum();
        (e + t).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: GeneratorConfig,
    pub conferences: BTreeMap<String, LatentProfile>,
}

fn gamma_simplex(alpha: f64, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let g = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let draws: Vec<f64> = (0..n).map(|_| g.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        draws.iter().map(|x| x / total).collect()
    } else {
        vec![1.0 / n as f64; n]
    }
}

fn draw_profile(rng: &mut impl Rng) -> LatentProfile {
    let mean = gamma_simplex(0.7, EMOTION_DIM, rng);
    let mut values = [0.0; EMOTION_DIM];
    values.copy_from_slice(&mean);
    let topics = gamma_simplex(0.5, Topic::NAMED.len(), rng);
    let coherence = [CoherenceRegime::Low, CoherenceRegime::Medium, CoherenceRegime::High][rng.gen_range(0..3)];
    LatentProfile {
        emotion_mean: EmotionVector::normalized(values).expect("simplex weights"),
        topics: Topic::NAMED
            .iter()
            .zip(topics)
            .map(|(t, p)| (t.as_str().to_string(), p))
            .collect(),
        coherence,
    }
}

fn noisy_emotion(mean: &EmotionVector, concentration: f64, rng: &mut impl Rng) -> EmotionVector {
    let mut v = [0.0; EMOTION_DIM];
    for (out, m) in v.iter_mut().zip(mean.values()) {
        let noise: f64 = Exp1.sample(rng);
        *out = m + noise / concentration;
    }
    EmotionVector::normalized(v).expect("non-negative weights")
}

struct Builder<'a> {
    config: &'a GeneratorConfig,
    profile: &'a LatentProfile,
    rng: ChaCha8Rng,
    topic_weights: WeightedIndex<f64>,
}

const MONOLOGUE_TEMPLATES: &[&str] = &[
    "This quarter our {a} work progressed alongside {b}.",
    "We remain focused on {a} and continue to watch {b}.",
    "Turning to {a}, we made steady progress on {b}.",
    "Let me say a few words on {a} before covering {b}.",
];
const QUESTION_TEMPLATES: &[&str] = &[
    "What about {a} and {b}?",
    "How do {a} and {b} look?",
    "Can you discuss {a} given {b}?",
];
const FULL_ANSWER_TEMPLATES: &[&str] = &[
    "On {a} and {b}, we expect improvement.",
    "Both {a} and {b} are tracking well.",
];
const PARTIAL_ANSWER_TEMPLATES: &[&str] = &[
    "On {a}, we are pleased, and {x} matters too.",
    "Regarding {a}, {x} remains important.",
];
const EVASIVE_ANSWER_TEMPLATES: &[&str] = &[
    "We do not break that out; {x} remains our priority.",
    "We will share more on {x} later.",
];

fn fill(template: &str, a: &str, b: &str, x: &str) -> String {
    template.replace("{a}", a).replace("{b}", b).replace("{x}", x)
}

impl Builder<'_> {
    fn topic(&mut self) -> Topic {
        Topic::NAMED[self.topic_weights.sample(&mut self.rng)]
    }

    fn keywords(&mut self, topic: Topic) -> (&'static str, &'static str) {
        let words = match topic_keywords(topic) {
            [] => topic_keywords(Topic::NAMED[self.rng.gen_range(0..Topic::NAMED.len() - 1)]),
            w => w,
        };
        let i = self.rng.gen_range(0..words.len());
        let mut j = self.rng.gen_range(0..words.len() - 1);
        if j >= i {
            j += 1;
        }
        (words[i], words[j])
    }

    fn other_keyword(&mut self, avoid: Topic) -> &'static str {
        let choices: Vec<Topic> = Topic::NAMED
            .iter()
            .copied()
            .filter(|t| *t != avoid && *t != Topic::Other)
            .collect();
        let t = choices[self.rng.gen_range(0..choices.len())];
        self.keywords(t).0
    }

    fn utterance(&mut self, index: usize, text: String, audio: bool, video: bool) -> Utterance {
        let k = self.config.concentration;
        let mean = self.profile.emotion_mean;
        let text_e = noisy_emotion(&mean, k, &mut self.rng);
        let audio = audio.then(|| noisy_emotion(&mean, k, &mut self.rng));
        let video = video.then(|| noisy_emotion(&mean, k, &mut self.rng));
        Utterance {
            index,
            text,
            emotions: ModalityEmotions {
                text: text_e,
                audio,
                video,
            },
        }
    }

    fn intervention(&mut self, speaker: String, role: Role, texts: Vec<String>) -> Intervention {
        let audio = self.rng.gen_bool(self.config.audio_prob);
        let video = self.rng.gen_bool(self.config.video_prob);
        let per = self.rng.gen_range(4.0..12.0);
        let duration_s = (per * texts.len() as f64 * 10.0).round() / 10.0;
        let utterances = texts
            .into_iter()
            .enumerate()
            .map(|(i, t)| self.utterance(i, t, audio, video))
            .collect();
        Intervention {
            speaker,
            role,
            duration_s,
            utterances,
        }
    }

    fn coherence(&mut self) -> f64 {
        let n = Normal::new(self.profile.coherence.center(), 0.08).expect("std > 0");
        let c: f64 = n.sample(&mut self.rng);
        (c.clamp(0.0, 1.0) * 1000.0).round() / 1000.0
    }

    fn texts(&mut self, templates: &[&str], a: &str, b: &str, x: &str) -> Vec<String> {
        let n = self.config.utterances.draw(&mut self.rng);
        (0..n)
            .map(|_| fill(templates[self.rng.gen_range(0..templates.len())], a, b, x))
            .collect()
    }

    fn monologue(&mut self, speaker: usize) -> DiscourseNode {
        let topic = self.topic();
        let (a, b) = self.keywords(topic);
        let texts = self.texts(MONOLOGUE_TEMPLATES, a, b, "");
        let intervention = self.intervention(format!("Executive {speaker}"), Role::Executive, texts);
        let coherence = self.coherence();
        DiscourseNode {
            order_index: 0,
            content: NodeContent::Monologue { intervention },
            metadata: NodeMetadata {
                topic,
                coverage: Coverage::NotApplicable,
                coherence,
                confidence: 1.0,
            },
        }
    }

    fn pair(&mut self, analyst: usize, executive: usize) -> DiscourseNode {
        let topic = self.topic();
        let (a, b) = self.keywords(topic);
        let question_texts = self.texts(QUESTION_TEMPLATES, a, b, "");
        let question = self.intervention(format!("Analyst {analyst}"), Role::Analyst, question_texts);
        let answered = !self.rng.gen_bool(self.config.unanswered_prob);
        let (answer, coverage) = if answered {
            let x = self.other_keyword(topic);
            let coverage = [Coverage::Yes, Coverage::Yes, Coverage::Partially, Coverage::No][self.rng.gen_range(0..4)];
            let templates = match coverage {
                Coverage::Yes => FULL_ANSWER_TEMPLATES,
                Coverage::Partially => PARTIAL_ANSWER_TEMPLATES,
                _ => EVASIVE_ANSWER_TEMPLATES,
            };
            let texts = self.texts(templates, a, b, x);
            (
                Some(self.intervention(format!("Executive {executive}"), Role::Executive, texts)),
                coverage,
            )
        } else {
            (None, Coverage::No)
        };
        let coherence = self.coherence();
        DiscourseNode {
            order_index: 0,
            content: NodeContent::QaPair { question, answer },
            metadata: NodeMetadata {
                topic,
                coverage,
                coherence,
                confidence: 1.0,
            },
        }
    }
}

/// One conference and its latent profile, fully determined by `seed`.
pub fn generate_conference(
    id: &str,
    seed: u64,
    config: &GeneratorConfig,
) -> Result<(ConferenceTree, LatentProfile), SynthError> {
    config.validate()?;
    let mut rng = seed::stream(seed, &["profile"]);
    let profile = draw_profile(&mut rng);
    // the map is keyed alphabetically; weights follow taxonomy order
    let weights: Vec<f64> = Topic::NAMED
        .iter()
        .map(|t| profile.topics[t.as_str()].max(1e-12))
        .collect();
    let mut b = Builder {
        config,
        profile: &profile,
        rng: seed::stream(seed, &["structure"]),
        topic_weights: WeightedIndex::new(&weights).expect("positive weights"),
    };
    let executives = b.rng.gen_range(1..=3);
    let monologues = config.monologues.draw(&mut b.rng);
    let pairs = config.pairs.draw(&mut b.rng);
    let mut nodes = Vec::with_capacity(monologues + pairs);
    let opening = if pairs > 0 && monologues >= 2 {
        monologues - 1
    } else {
        monologues
    };
    for i in 0..opening {
        nodes.push(b.monologue(i % executives + 1));
    }
    for i in 0..pairs {
        let exec = b.rng.gen_range(1..=executives);
        nodes.push(b.pair(i + 1, exec));
    }
    for _ in opening..monologues {
        nodes.push(b.monologue(1));
    }
    for (i, node) in nodes.iter_mut().enumerate() {
        node.order_index = i;
    }
    let mut source = BTreeMap::new();
    source.insert("generator".to_string(), "synth".to_string());
    source.insert("seed".to_string(), seed.to_string());
    let tree = ConferenceTree {
        id: id.to_string(),
        source: Some(source),
        nodes,
    };
    let violations = tree.validate();
    if !violations.is_empty() {
        return Err(TreeError::Invalid(violations).into());
    }
    Ok((tree, profile))
}

pub fn conference_id(index: usize) -> String {
    format!("synth-{index:04}")
}

/// `config.conferences` trees; conference `i` uses the seed derived from
/// `(config.seed, i)`.
pub fn generate_corpus(config: &GeneratorConfig) -> Result<(Vec<ConferenceTree>, Manifest), SynthError> {
    config.validate()?;
    let mut trees = Vec::with_capacity(config.conferences);
    let mut profiles = BTreeMap::new();
    for i in 0..config.conferences {
        let id = conference_id(i);
        let seed = seed::derive_seed(config.seed, &["conference", &i.to_string()]);
        let (tree, profile) = generate_conference(&id, seed, config)?;
        profiles.insert(id, profile);
        trees.push(tree);
    }
    Ok((
        trees,
        Manifest {
            config: config.clone(),
            conferences: profiles,
        },
    ))
}

/// Writes `<id>.json` per conference and `manifest.json` into `dir`.
pub fn write_corpus(dir: &Path, trees: &[ConferenceTree], manifest: &Manifest) -> Result<(), SynthError> {
    fs::create_dir_all(dir).map_err(|source| SynthError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for tree in trees {
        tree.save(&dir.join(format!("{}.json", tree.id)))?;
    }
    let path = dir.join("manifest.json");
    let mut json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    json.push('\n');
    fs::write(&path, json).map_err(|source| SynthError::Io { path, source })
}

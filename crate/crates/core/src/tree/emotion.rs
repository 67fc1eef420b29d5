//! Seven-way emotion distributions and frame pooling.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::TreeError;

/// Number of emotion categories.
pub const EMOTION_DIM: usize = 7;

/// Tolerance on the simplex sum constraint.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// Emotion categories in their canonical component order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Emotion {
    Anger,
    Disgust,
    Fear,
    Joy,
    Neutral,
    Sadness,
    Surprise,
}

impl Emotion {
    pub const ALL: [Emotion; EMOTION_DIM] = [
        Emotion::Anger,
        Emotion::Disgust,
        Emotion::Fear,
        Emotion::Joy,
        Emotion::Neutral,
        Emotion::Sadness,
        Emotion::Surprise,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// A probability vector over [`Emotion::ALL`].
///
/// Deserialization accepts any seven reals so that invalid inputs can be
/// reported by tree validation instead of failing the whole parse; use
/// [`EmotionVector::new`] when the simplex constraint must hold on
/// construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmotionVector([f64; EMOTION_DIM]);

impl EmotionVector {
    pub fn new(values: [f64; EMOTION_DIM]) -> Result<Self, TreeError> {
        let v = EmotionVector(values);
        v.check()?;
        Ok(v)
    }

    /// Wraps raw values without checking them.
    pub fn from_raw(values: [f64; EMOTION_DIM]) -> Self {
        EmotionVector(values)
    }

    /// The neutral-ignorance prior: every component 1/7.
    pub fn uniform() -> Self {
        EmotionVector([1.0 / EMOTION_DIM as f64; EMOTION_DIM])
    }

    pub fn one_hot(emotion: Emotion) -> Self {
        let mut values = [0.0; EMOTION_DIM];
        values[emotion.index()] = 1.0;
        EmotionVector(values)
    }

    /// Scales non-negative weights onto the simplex.
    pub fn normalized(weights: [f64; EMOTION_DIM]) -> Result<Self, TreeError> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(TreeError::Emotion(format!("cannot normalize weights {weights:?}")));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(TreeError::Emotion("cannot normalize an all-zero weight vector".into()));
        }
        let mut values = weights;
        for v in values.iter_mut() {
            *v /= total;
        }
        Ok(EmotionVector(values))
    }

    pub fn values(&self) -> &[f64; EMOTION_DIM] {
        &self.0
    }

    pub fn get(&self, emotion: Emotion) -> f64 {
        self.0[emotion.index()]
    }

    /// First emotion (in canonical order) holding the largest component.
    pub fn argmax(&self) -> Emotion {
        let mut best = 0;
        for i in 1..EMOTION_DIM {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        Emotion::ALL[best]
    }

    pub fn check(&self) -> Result<(), TreeError> {
        if let Some(i) = self.0.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(TreeError::Emotion(format!(
                "component {:?} = {} is negative or not finite",
                Emotion::ALL[i],
                self.0[i]
            )));
        }
        let total: f64 = self.0.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(TreeError::Emotion(format!("components sum to {total}, expected 1")));
        }
        Ok(())
    }
}

impl fmt::Display for EmotionVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.4}")?;
        }
        write!(f, "]")
    }
}

/// How per-frame video predictions collapse into one sentence-level vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingStrategy {
    #[default]
    Mean,
    Max,
    Mode,
}

impl std::str::FromStr for PoolingStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(PoolingStrategy::Mean),
            "max" => Ok(PoolingStrategy::Max),
            "mode" => Ok(PoolingStrategy::Mode),
            other => Err(format!(
                "unknown pooling strategy '{other}' (expected mean, max or mode)"
            )),
        }
    }
}

/// Pools frame-level emotion vectors into a single vector.
///
/// `Max` renormalizes the componentwise maximum back onto the simplex.
/// `Mode` returns the one-hot vector of the most frequent per-frame argmax;
/// ties go to the emotion listed first in [`Emotion::ALL`].
pub fn aggregate_frame_emotions(
    frames: &[EmotionVector],
    strategy: PoolingStrategy,
) -> Result<EmotionVector, TreeError> {
    if frames.is_empty() {
        return Err(TreeError::NoFrames);
    }
    match strategy {
        PoolingStrategy::Mean => {
            let n = frames.len() as f64;
            let mut acc = [0.0; EMOTION_DIM];
            for frame in frames {
                for (a, v) in acc.iter_mut().zip(frame.values()) {
                    *a += v;
                }
            }
            for a in acc.iter_mut() {
                *a /= n;
            }
            Ok(EmotionVector(acc))
        }
        PoolingStrategy::Max => {
            let mut acc = [0.0f64; EMOTION_DIM];
            for frame in frames {
                for (a, v) in acc.iter_mut().zip(frame.values()) {
                    *a = a.max(*v);
                }
            }
            EmotionVector::normalized(acc)
        }
        PoolingStrategy::Mode => {
            let mut counts = [0usize; EMOTION_DIM];
            for frame in frames {
                counts[frame.argmax().index()] += 1;
            }
            let mut best = 0;
            for i in 1..EMOTION_DIM {
                if counts[i] > counts[best] {
                    best = i;
                }
            }
            Ok(EmotionVector::one_hot(Emotion::ALL[best]))
        }
    }
}

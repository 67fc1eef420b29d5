use std::collections::BTreeMap;

use serde::Deserialize;

use crate::tree::{
    aggregate_frame_emotions, parse_json, EmotionVector, ModalityEmotions, PoolingStrategy, Role, Utterance,
    EMOTION_DIM,
};

use super::IngestError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Prepared,
    #[serde(alias = "q_and_a", alias = "qanda")]
    Qa,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TranscriptDoc {
    id: String,
    #[serde(default)]
    source: Option<BTreeMap<String, String>>,
    interventions: Vec<InterventionDoc>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InterventionDoc {
    speaker: String,
    #[serde(default)]
    role: Option<Role>,
    section: Section,
    start_s: f64,
    end_s: f64,
    sentences: Vec<SentenceDoc>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SentenceDoc {
    text: String,
    #[serde(default)]
    emotions: Option<EmotionsDoc>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmotionsDoc {
    #[serde(default)]
    text: Option<[f64; EMOTION_DIM]>,
    #[serde(default)]
    audio: Option<[f64; EMOTION_DIM]>,
    #[serde(default)]
    video: Option<[f64; EMOTION_DIM]>,
    #[serde(default)]
    video_frames: Option<Vec<[f64; EMOTION_DIM]>>,
}

/// One speaker turn as it appears in a transcript.
#[derive(Debug, Clone, PartialEq)]
pub struct RawIntervention {
    /// Position in the source document, before sorting.
    pub source_index: usize,
    pub speaker: String,
    pub role: Option<Role>,
    pub section: Section,
    pub start_s: f64,
    pub end_s: f64,
    pub sentences: Vec<Utterance>,
}

impl RawIntervention {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn text(&self) -> String {
        self.sentences
            .iter()
            .map(|s| s.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub id: String,
    pub source: Option<BTreeMap<String, String>>,
    /// Sorted by `start_s`; equal start times keep document order.
    pub interventions: Vec<RawIntervention>,
}

fn emotion(
    values: [f64; EMOTION_DIM],
    index: usize,
    sentence: usize,
    modality: &str,
) -> Result<EmotionVector, IngestError> {
    EmotionVector::new(values).map_err(|e| IngestError::Intervention {
        index,
        detail: format!("sentence {sentence}: {modality} emotions: {e}"),
    })
}

fn sentence(
    doc: SentenceDoc,
    index: usize,
    position: usize,
    pooling: PoolingStrategy,
) -> Result<Utterance, IngestError> {
    let bad = |detail: String| IngestError::Intervention {
        index,
        detail: format!("sentence {position}: {detail}"),
    };
    if doc.text.trim().is_empty() {
        return Err(bad("empty text".into()));
    }
    let e = doc.emotions.unwrap_or_default();
    let text = match e.text {
        Some(v) => emotion(v, index, position, "text")?,
        None => EmotionVector::uniform(),
    };
    let audio = e.audio.map(|v| emotion(v, index, position, "audio")).transpose()?;
    let video = match (e.video, e.video_frames) {
        (Some(_), Some(_)) => return Err(bad("both video and video_frames given".into())),
        (Some(v), None) => Some(emotion(v, index, position, "video")?),
        (None, Some(frames)) => {
            let frames = frames
                .into_iter()
                .map(|f| emotion(f, index, position, "video frame"))
                .collect::<Result<Vec<_>, _>>()?;
            Some(aggregate_frame_emotions(&frames, pooling).map_err(|e| bad(e.to_string()))?)
        }
        (None, None) => None,
    };
    Ok(Utterance {
        index: position,
        text: doc.text,
        emotions: ModalityEmotions { text, audio, video },
    })
}

/// Parses a transcript document.
///
/// Sentences without text emotions get the uniform vector; video frames are
/// pooled with `pooling`.
pub fn parse_transcript(json: &str, pooling: PoolingStrategy) -> Result<Transcript, IngestError> {
    let doc: TranscriptDoc = parse_json(json).map_err(|(path, source)| IngestError::Json { path, source })?;
    let mut interventions = Vec::with_capacity(doc.interventions.len());
    for (index, iv) in doc.interventions.into_iter().enumerate() {
        let bad = |detail: &str| IngestError::Intervention {
            index,
            detail: detail.to_string(),
        };
        if !iv.start_s.is_finite() || !iv.end_s.is_finite() {
            return Err(bad("timestamps must be finite"));
        }
        if iv.end_s < iv.start_s {
            return Err(bad("negative duration (end_s < start_s)"));
        }
        if iv.sentences.is_empty() {
            return Err(bad("empty sentence list"));
        }
        let sentences = iv
            .sentences
            .into_iter()
            .enumerate()
            .map(|(i, s)| sentence(s, index, i, pooling))
            .collect::<Result<Vec<_>, _>>()?;
        interventions.push(RawIntervention {
            source_index: index,
            speaker: iv.speaker,
            role: iv.role,
            section: iv.section,
            start_s: iv.start_s,
            end_s: iv.end_s,
            sentences,
        });
    }
    interventions.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    Ok(Transcript {
        id: doc.id,
        source: doc.source,
        interventions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(interventions: &str) -> String {
        format!(r#"{{"id": "t", "interventions": [{interventions}]}}"#)
    }

    const PREPARED: &str = r#"{"speaker": "CEO", "role": "executive", "section": "prepared", "start_s": 2.0, "end_s": 9.5, "sentences": [{"text": "Welcome."}]}"#;

    #[test]
    fn single_intervention_duration() {
        let t = parse_transcript(&doc(PREPARED), PoolingStrategy::Mean).unwrap();
        assert_eq!(t.interventions.len(), 1);
        assert_eq!(t.interventions[0].duration_s(), 7.5);
        assert_eq!(t.interventions[0].role, Some(Role::Executive));
    }

    #[test]
    fn sorted_by_start_time() {
        let late = r#"{"speaker": "B", "section": "qa", "start_s": 20, "end_s": 21, "sentences": [{"text": "Late"}]}"#;
        let t = parse_transcript(&doc(&format!("{late}, {PREPARED}")), PoolingStrategy::Mean).unwrap();
        let speakers: Vec<&str> = t.interventions.iter().map(|i| i.speaker.as_str()).collect();
        assert_eq!(speakers, ["CEO", "B"]);
        assert_eq!(t.interventions[1].source_index, 0);
    }

    #[test]
    fn missing_emotions_fall_back_to_uniform() {
        let t = parse_transcript(&doc(PREPARED), PoolingStrategy::Mean).unwrap();
        let e = &t.interventions[0].sentences[0].emotions;
        assert!(e.text.values().iter().all(|v| (v - 1.0 / 7.0).abs() < 1e-15));
        assert!(e.audio.is_none() && e.video.is_none());
    }

    #[test]
    fn video_frames_are_pooled() {
        let iv = r#"{"speaker": "A", "section": "qa", "start_s": 0, "end_s": 1, "sentences": [{"text": "Hi",
            "emotions": {"video_frames": [[0.6,0.4,0,0,0,0,0], [0.2,0.8,0,0,0,0,0]]}}]}"#;
        let t = parse_transcript(&doc(iv), PoolingStrategy::Max).unwrap();
        let v = t.interventions[0].sentences[0].emotions.video.unwrap();
        assert!((v.values()[0] - 0.6 / 1.4).abs() < 1e-12);
        assert!((v.values()[1] - 0.8 / 1.4).abs() < 1e-12);
    }

    #[test]
    fn errors_name_the_intervention() {
        let neg = r#"{"speaker": "A", "section": "qa", "start_s": 5, "end_s": 1, "sentences": [{"text": "x"}]}"#;
        let empty = r#"{"speaker": "A", "section": "qa", "start_s": 0, "end_s": 1, "sentences": []}"#;
        let off = r#"{"speaker": "A", "section": "qa", "start_s": 0, "end_s": 1, "sentences": [{"text": "x", "emotions": {"text": [0.5,0,0,0,0,0,0]}}]}"#;
        for (body, needle) in [(neg, "negative duration"), (empty, "empty sentence"), (off, "sum to")] {
            let err = parse_transcript(&doc(&format!("{PREPARED}, {body}")), PoolingStrategy::Mean).unwrap_err();
            let msg = err.to_string();
            assert!(msg.contains("intervention 1") && msg.contains(needle), "{msg}");
        }
        assert!(matches!(
            parse_transcript("{", PoolingStrategy::Mean),
            Err(IngestError::Json { .. })
        ));
        let typo = r#"{"speaker": "A", "section": "qa", "start_s": 0, "end_s": 1, "sentences": [{"txt": "x"}]}"#;
        let msg = parse_transcript(&doc(&format!("{PREPARED}, {typo}")), PoolingStrategy::Mean)
            .unwrap_err()
            .to_string();
        assert!(msg.contains("interventions[1].sentences[0]"), "{msg}");
    }
}

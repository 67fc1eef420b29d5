use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{make_prediction, BackendError, BackendPrediction, Label, LabelBackend, LabelTask, TaskKind};

pub const DEFAULT_MAX_RETRIES: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Server root, e.g. `http://127.0.0.1:11434`; requests go to `<base_url>/api/generate`.
    pub base_url: String,
    pub model: String,
    pub temperature: f64,
    pub timeout_s: f64,
    /// Extra attempts after a failed or unparseable response.
    pub max_retries: u32,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        RemoteConfig {
            base_url: base_url.into(),
            model: model.into(),
            temperature: 0.7,
            timeout_s: 60.0,
            max_retries: DEFAULT_MAX_RETRIES,
        }
    }
}

/// Client for a local inference server with an Ollama-style completion endpoint.
///
/// The prompt asks for strict JSON `{"label": ..., "confidence": ...}`.
pub struct RemoteBackend {
    id: String,
    config: RemoteConfig,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct GenerateResponse {
    response: String,
}

#[derive(Deserialize)]
struct Answer {
    label: Label,
    confidence: f64,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, String> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_s))
            .build()
            .map_err(|e| e.to_string())?;
        Ok(RemoteBackend {
            id: format!("remote:{}", config.model),
            config,
            client,
        })
    }

    pub fn prompt(task: &LabelTask) -> String {
        let format = r#"Reply with JSON only, exactly {"label": <label>, "confidence": <number between 0 and 1>}."#;
        match task.kind {
            TaskKind::Topic => format!(
                "Classify the earnings call passage into one 10-K section. Allowed labels: {}.\n{format}\n\nPassage:\n{}",
                TaskKind::Topic.vocabulary().join(", "),
                task.text
            ),
            TaskKind::Coverage => format!(
                "Does the answer address the analyst's question? Allowed labels: yes, no, partially.\n{format}\n\nQuestion:\n{}\n\nAnswer:\n{}",
                task.question.as_deref().unwrap_or(""),
                task.text
            ),
            TaskKind::Coherence => format!(
                "Rate how consistent the answer is with the earlier prepared remarks, as a number from 0 (contradictory) to 1 (fully consistent). The label must be that number.\n{format}\n\nPrepared remarks:\n{}\n\nAnswer:\n{}",
                task.context.as_deref().unwrap_or(""),
                task.text
            ),
        }
    }

    fn url(&self) -> String {
        format!("{}/api/generate", self.config.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, task: &LabelTask, seed: u64) -> Result<BackendPrediction, String> {
        let body = json!({
            "model": self.config.model,
            "prompt": Self::prompt(task),
            "stream": false,
            "format": "json",
            "options": {"temperature": self.config.temperature, "seed": seed},
        });
        let resp = self
            .client
            .post(self.url())
            .json(&body)
            .send()
            .map_err(|e| format!("request: {e}"))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| format!("reading response: {e}"))?;
        if !status.is_success() {
            return Err(format!("HTTP {status}: {}", text.chars().take(200).collect::<String>()));
        }
        let outer: GenerateResponse = serde_json::from_str(&text).map_err(|e| format!("response envelope: {e}"))?;
        let answer = parse_answer(&outer.response)?;
        make_prediction(&self.id, task, seed, answer.label, answer.confidence)
    }
}

/// Parses the model's reply, tolerating prose around a single JSON object.
fn parse_answer(reply: &str) -> Result<Answer, String> {
    let start = reply.find('{').ok_or("no JSON object in reply")?;
    let end = reply.rfind('}').ok_or("no JSON object in reply")?;
    if end < start {
        return Err("no JSON object in reply".into());
    }
    serde_json::from_str(&reply[start..=end]).map_err(|e| format!("label JSON: {e}"))
}

impl LabelBackend for RemoteBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn predict(&self, task: &LabelTask, seed: u64) -> Result<BackendPrediction, BackendError> {
        let mut last = String::new();
        let attempts = self.config.max_retries + 1;
        for _ in 0..attempts {
            match self.attempt(task, seed) {
                Ok(p) => return Ok(p),
                Err(e) => last = e,
            }
        }
        Err(BackendError {
            backend: self.id.clone(),
            attempts,
            detail: last,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};
    use std::thread;

    /// Serves the given `response` field values in turn, one per request.
    fn serve(replies: Vec<String>) -> (String, Arc<Mutex<Vec<serde_json::Value>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        thread::spawn(move || {
            for reply in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream);
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                log.lock().unwrap().push(serde_json::from_slice(&body).unwrap());
                let payload = json!({"model": "m", "response": reply, "done": true}).to_string();
                let mut stream = reader.into_inner();
                write!(
                    stream,
                    "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{payload}",
                    payload.len()
                )
                .unwrap();
            }
        });
        (format!("http://{addr}"), seen)
    }

    fn task() -> LabelTask {
        LabelTask {
            kind: TaskKind::Coverage,
            conference_id: "c".into(),
            order_index: 1,
            text: "Margins will expand.".into(),
            question: Some("What about margins?".into()),
            context: None,
        }
    }

    #[test]
    fn parses_label_and_sends_seed() {
        let (url, seen) = serve(vec![r#"{"label": "Partially", "confidence": 0.7}"#.into()]);
        let b = RemoteBackend::new(RemoteConfig::new(url, "llama3")).unwrap();
        let p = b.predict(&task(), 42).unwrap();
        assert_eq!(p.label, Label::Category("partially".into()));
        assert_eq!(p.confidence, 0.7);
        assert_eq!(p.backend_id, "remote:llama3");
        let req = &seen.lock().unwrap()[0];
        assert_eq!(req["model"], "llama3");
        assert_eq!(req["options"]["seed"], 42);
        assert!(req["prompt"].as_str().unwrap().contains("What about margins?"));
    }

    #[test]
    fn retries_malformed_then_succeeds() {
        let (url, seen) = serve(vec!["not json".into(), r#"{"label": "yes", "confidence": 0.9}"#.into()]);
        let b = RemoteBackend::new(RemoteConfig::new(url, "m")).unwrap();
        assert_eq!(b.predict(&task(), 1).unwrap().label, Label::Category("yes".into()));
        assert_eq!(seen.lock().unwrap().len(), 2);
    }

    #[test]
    fn gives_up_after_retries() {
        let bad = vec![
            "{\"label\": \"maybe\", \"confidence\": 0.5}".to_string(),
            "{oops".into(),
            "{\"label\": \"yes\", \"confidence\": 7}".into(),
            "{\"label\": \"yes\"}".into(),
        ];
        let (url, seen) = serve(bad);
        let b = RemoteBackend::new(RemoteConfig::new(url, "m")).unwrap();
        let err = b.predict(&task(), 1).unwrap_err();
        assert_eq!(err.attempts, 4);
        assert_eq!(seen.lock().unwrap().len(), 4);
        assert!(err.detail.contains("label JSON"), "{err}");
    }

    #[test]
    fn unreachable_server_errors() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let mut config = RemoteConfig::new(format!("http://127.0.0.1:{port}"), "m");
        config.max_retries = 0;
        let err = RemoteBackend::new(config).unwrap().predict(&task(), 1).unwrap_err();
        assert_eq!(err.attempts, 1);
        assert!(err.detail.starts_with("request"), "{err}");
    }

    #[test]
    fn reply_with_prose_around_json() {
        let a = parse_answer("Sure! {\"label\": 0.25, \"confidence\": 1} done").unwrap();
        assert_eq!(a.label, Label::Score(0.25));
    }
}

//! Layered settings: built-in defaults, then the config file, then
//! environment variables, then command-line flags.
//!
//! The config file is plain `key = value` text; `#` starts a comment.
//! Every key can also be set from the environment as `CONFTREE_<KEY>` with
//! dots turned into underscores (`node.d_model` is `CONFTREE_NODE_D_MODEL`).

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use conftree::annotate::RemoteConfig;
use conftree::conf_encoder::ConfEncoderConfig;
use conftree::model::ModelConfig;
use conftree::node_encoder::NodeEncoderConfig;
use conftree::synth::{GeneratorConfig, Span};
use conftree::train::TrainingConfig;

pub const CONFIG_ENV: &str = "CONFTREE_CONFIG";
pub const LLM_URL_ENV: &str = "ANNOTATE_LLM_URL";
pub const ECHO_FILE: &str = "effective-config.txt";

pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { name, default, help }
}

pub const KEYS: &[Key] = &[
    key(
        "d_embed",
        "64",
        "Embedding width shared by node and conference encoders",
    ),
    key("node.d_model", "64", "Node encoder model width"),
    key("node.heads", "4", "Node encoder attention heads"),
    key("node.layers", "2", "Node encoder layers"),
    key("conf.heads", "4", "Conference encoder attention heads"),
    key("conf.layers", "2", "Conference encoder layers"),
    key(
        "conf.max_nodes",
        "256",
        "Longest conference the positional table supports",
    ),
    key("temperature", "0.1", "NT-Xent temperature"),
    key("node_keep", "0.8", "Utterance keep probability for node views"),
    key("conf_keep", "0.8", "Node keep probability for conference views"),
    key("lambda", "1", "Weight of the conference loss"),
    key("batch_size", "8", "Conferences per batch"),
    key(
        "nodes_per_conference",
        "4",
        "Nodes sampled per conference for the node loss",
    ),
    key("learning_rate", "0.001", "Adam learning rate"),
    key("beta1", "0.9", "Adam first-moment decay"),
    key("beta2", "0.999", "Adam second-moment decay"),
    key("eps", "1e-8", "Adam epsilon"),
    key("epochs", "30", "Epochs to train (total, including resumed ones)"),
    key("seed", "0", "Training seed"),
    key("view.seed", "0", "Seed for the evaluation views written by embed"),
    key("synth.conferences", "64", "Conferences to generate"),
    key("synth.seed", "0", "Generator seed"),
    key("synth.monologues", "2-4", "Monologues per conference (MIN-MAX)"),
    key("synth.pairs", "3-8", "Question/answer pairs per conference (MIN-MAX)"),
    key("synth.utterances", "1-5", "Utterances per intervention (MIN-MAX)"),
    key("synth.audio_prob", "0.7", "Probability an utterance has audio emotions"),
    key("synth.video_prob", "0.4", "Probability an utterance has video emotions"),
    key("synth.unanswered_prob", "0.1", "Probability a question has no answer"),
    key(
        "synth.concentration",
        "10",
        "Emotion concentration; larger is less noisy",
    ),
    key("ingest.pooling", "mean", "Video frame pooling: mean, max or mode"),
    key(
        "ingest.procedural_words",
        "",
        "Word list file replacing the built-in procedural lexicon",
    ),
    key(
        "annotate.backends",
        "rule",
        "Comma-separated backends: rule, noisy:RATE, fixture:PATH, remote:MODEL",
    ),
    key("annotate.runs", "3", "Runs per backend and task"),
    key("annotate.seed", "0", "Seed from which run seeds derive"),
    key(
        "annotate.llm_url",
        "",
        "Inference server root for remote backends (also ANNOTATE_LLM_URL)",
    ),
    key(
        "annotate.llm_temperature",
        "0.7",
        "Sampling temperature sent to remote backends",
    ),
    key("annotate.llm_timeout_s", "60", "Remote request timeout in seconds"),
    key(
        "annotate.llm_retries",
        "3",
        "Extra attempts after a failed remote request",
    ),
];

fn model_values(model: &ModelConfig) -> Vec<(&'static str, f64)> {
    vec![
        ("d_embed", model.conf.d_embed as f64),
        ("node.d_model", model.node.d_model as f64),
        ("node.heads", model.node.heads as f64),
        ("node.layers", model.node.layers as f64),
        ("conf.heads", model.conf.heads as f64),
        ("conf.layers", model.conf.layers as f64),
        ("conf.max_nodes", model.conf.max_nodes as f64),
    ]
}

fn training_values(training: &TrainingConfig) -> Vec<(&'static str, f64)> {
    vec![
        ("temperature", training.temperature),
        ("node_keep", training.node_keep),
        ("conf_keep", training.conf_keep),
        ("lambda", training.lambda),
        ("batch_size", training.batch_size as f64),
        ("nodes_per_conference", training.nodes_per_conference as f64),
        ("learning_rate", training.learning_rate),
        ("beta1", training.beta1),
        ("beta2", training.beta2),
        ("eps", training.eps),
        ("seed", training.seed as f64),
    ]
}

pub fn find(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

/// Flag help text carrying the default and the backing config key.
pub fn flag_help(name: &str) -> String {
    let k = find(name).unwrap_or_else(|| panic!("unknown config key {name}"));
    let default = if k.default.is_empty() { "unset" } else { k.default };
    format!("{} [default: {default}; config key: {}]", k.help, k.name)
}

pub fn env_name(key: &str) -> String {
    format!("CONFTREE_{}", key.to_ascii_uppercase().replace('.', "_"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    Default,
    File(PathBuf, usize),
    Env(String),
    Flag,
    Checkpoint(PathBuf),
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Default => write!(f, "default"),
            Source::File(path, line) => write!(f, "{}:{line}", path.display()),
            Source::Env(var) => write!(f, "env {var}"),
            Source::Flag => write!(f, "flag"),
            Source::Checkpoint(path) => write!(f, "checkpoint {}", path.display()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Settings {
    values: BTreeMap<&'static str, (String, Source)>,
}

/// Splits `key = value` lines; blank lines and `#` comments are skipped.
fn parse_file(text: &str, path: &Path) -> Result<Vec<(usize, &'static str, String)>> {
    let mut out: Vec<(usize, &'static str, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{}:{line_no}: expected `key = value`", path.display()))?;
        let k = k.trim();
        let key = find(k).ok_or_else(|| anyhow!("{}:{line_no}: unknown config key '{k}'", path.display()))?;
        if let Some((first, ..)) = out.iter().find(|(_, name, _)| *name == key.name) {
            bail!("{}:{line_no}: key '{k}' already set on line {first}", path.display());
        }
        out.push((line_no, key.name, v.trim().to_string()));
    }
    Ok(out)
}

/// Drops a trailing comment: `#` at the start or after whitespace.
fn strip_comment(line: &str) -> &str {
    let bytes = line.as_bytes();
    for (i, b) in bytes.iter().enumerate() {
        if *b == b'#' && (i == 0 || bytes[i - 1].is_ascii_whitespace()) {
            return &line[..i];
        }
    }
    line
}

impl Settings {
    pub fn defaults() -> Self {
        let values = KEYS
            .iter()
            .map(|k| (k.name, (k.default.to_string(), Source::Default)))
            .collect();
        Settings { values }
    }

    /// Resolves every key. `config_path` comes from `--config`, else from
    /// `CONFTREE_CONFIG`; `env` looks up variables; `flags` are explicit
    /// command-line values.
    pub fn resolve(
        config_path: Option<&Path>,
        env: &dyn Fn(&str) -> Option<String>,
        flags: &[(String, String)],
    ) -> Result<Self> {
        let mut s = Self::defaults();
        let path = config_path
            .map(Path::to_path_buf)
            .or_else(|| env(CONFIG_ENV).filter(|p| !p.is_empty()).map(PathBuf::from));
        if let Some(path) = path {
            let text =
                std::fs::read_to_string(&path).with_context(|| format!("reading config file {}", path.display()))?;
            for (line, name, value) in parse_file(&text, &path)? {
                s.values.insert(name, (value, Source::File(path.clone(), line)));
            }
        }
        for k in KEYS {
            let var = env_name(k.name);
            if let Some(v) = env(&var) {
                s.values.insert(k.name, (v, Source::Env(var)));
            }
        }
        if let Some(v) = env(LLM_URL_ENV) {
            s.values
                .insert("annotate.llm_url", (v, Source::Env(LLM_URL_ENV.into())));
        }
        for (name, value) in flags {
            let key = find(name).ok_or_else(|| anyhow!("unknown config key '{name}' given with --set"))?;
            s.values.insert(key.name, (value.clone(), Source::Flag));
        }
        Ok(s)
    }

    pub fn raw(&self, name: &str) -> &str {
        &self.entry(name).0
    }

    fn entry(&self, name: &str) -> &(String, Source) {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("unknown config key {name}"))
    }

    pub fn source(&self, name: &str) -> &Source {
        &self.entry(name).1
    }

    pub fn is_explicit(&self, name: &str) -> bool {
        *self.source(name) != Source::Default
    }

    pub fn get<T: FromStr>(&self, name: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let (value, source) = self.entry(name);
        value
            .trim()
            .parse()
            .map_err(|e| anyhow!("config key '{name}' = '{value}' (from {source}): {e}"))
    }

    pub fn span(&self, name: &str) -> Result<Span> {
        let (value, source) = self.entry(name);
        let bad = || anyhow!("config key '{name}' = '{value}' (from {source}): expected MIN-MAX");
        let (lo, hi) = value.split_once('-').unwrap_or((value, value));
        let lo = lo.trim().parse().map_err(|_| bad())?;
        let hi = hi.trim().parse().map_err(|_| bad())?;
        Ok(Span::new(lo, hi))
    }

    /// Empty values mean unset.
    pub fn optional(&self, name: &str) -> Option<&str> {
        Some(self.raw(name)).filter(|v| !v.is_empty())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let d_embed = self.get("d_embed")?;
        let config = ModelConfig {
            node: NodeEncoderConfig {
                d_model: self.get("node.d_model")?,
                heads: self.get("node.heads")?,
                layers: self.get("node.layers")?,
                d_embed,
                ..Default::default()
            },
            conf: ConfEncoderConfig {
                d_embed,
                heads: self.get("conf.heads")?,
                layers: self.get("conf.layers")?,
                max_nodes: self.get("conf.max_nodes")?,
            },
        };
        config.validate()?;
        Ok(config)
    }

    pub fn training_config(&self) -> Result<TrainingConfig> {
        let config = TrainingConfig {
            temperature: self.get("temperature")?,
            node_keep: self.get("node_keep")?,
            conf_keep: self.get("conf_keep")?,
            lambda: self.get("lambda")?,
            batch_size: self.get("batch_size")?,
            nodes_per_conference: self.get("nodes_per_conference")?,
            learning_rate: self.get("learning_rate")?,
            beta1: self.get("beta1")?,
            beta2: self.get("beta2")?,
            eps: self.get("eps")?,
            epochs: self.get("epochs")?,
            seed: self.get("seed")?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn generator_config(&self) -> Result<GeneratorConfig> {
        let config = GeneratorConfig {
            conferences: self.get("synth.conferences")?,
            monologues: self.span("synth.monologues")?,
            pairs: self.span("synth.pairs")?,
            utterances: self.span("synth.utterances")?,
            audio_prob: self.get("synth.audio_prob")?,
            video_prob: self.get("synth.video_prob")?,
            unanswered_prob: self.get("synth.unanswered_prob")?,
            concentration: self.get("synth.concentration")?,
            seed: self.get("synth.seed")?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn remote_config(&self, model: &str) -> Result<RemoteConfig> {
        let url = self.optional("annotate.llm_url").ok_or_else(|| {
            anyhow!("backend remote:{model} needs a server URL: set {LLM_URL_ENV} or config key annotate.llm_url")
        })?;
        let mut config = RemoteConfig::new(url, model);
        config.temperature = self.get("annotate.llm_temperature")?;
        config.timeout_s = self.get("annotate.llm_timeout_s")?;
        config.max_retries = self.get("annotate.llm_retries")?;
        Ok(config)
    }

    /// Checks explicitly set keys against a checkpoint, then fills every
    /// other model key (and training key except `epochs`) from it. Training
    /// keys are only compared when `strict_training` is set.
    pub fn adopt_checkpoint(
        &mut self,
        path: &Path,
        model: &ModelConfig,
        training: &TrainingConfig,
        strict_training: bool,
    ) -> Result<()> {
        let m = model_values(model);
        let t = training_values(training);
        let mut conflicts = self.conflicts(&m);
        if strict_training {
            conflicts.extend(self.conflicts(&t));
        }
        if !conflicts.is_empty() {
            bail!(
                "settings disagree with checkpoint {}: {}",
                path.display(),
                conflicts.join("; ")
            );
        }
        for (name, value) in m.into_iter().chain(t) {
            if !self.is_explicit(name) {
                self.values
                    .insert(name, (value.to_string(), Source::Checkpoint(path.to_path_buf())));
            }
        }
        Ok(())
    }

    fn conflicts(&self, actual: &[(&str, f64)]) -> Vec<String> {
        actual
            .iter()
            .filter(|(name, _)| self.is_explicit(name))
            .filter(|(name, value)| self.get::<f64>(name).map_or(true, |v| v != *value))
            .map(|(name, value)| {
                format!(
                    "{name} = {} (from {}) but the checkpoint has {value}",
                    self.raw(name),
                    self.source(name)
                )
            })
            .collect()
    }

    /// The effective settings as a config file, each line annotated with its source.
    pub fn render(&self) -> String {
        let mut out = String::from("# effective configuration\n");
        for k in KEYS {
            let (value, source) = self.entry(k.name);
            out.push_str(&format!("{} = {value}  # {source}\n", k.name));
        }
        out
    }

    pub fn echo(&self, dir: &Path) -> Result<()> {
        let path = dir.join(ECHO_FILE);
        std::fs::write(&path, self.render()).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn env(vars: &[(&str, &str)]) -> impl Fn(&str) -> Option<String> {
        let map: HashMap<String, String> = vars.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        move |k| map.get(k).cloned()
    }

    #[test]
    fn defaults_build_valid_configs() {
        let s = Settings::defaults();
        assert_eq!(s.training_config().unwrap(), TrainingConfig::default());
        assert_eq!(s.generator_config().unwrap(), GeneratorConfig::default());
        assert_eq!(s.model_config().unwrap(), ModelConfig::default());
    }

    #[test]
    fn precedence_is_flag_env_file_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        std::fs::write(&path, "# comment\nepochs = 5\nseed = 1  # trailing\nlambda=2\n\n").unwrap();
        let e = env(&[("CONFTREE_SEED", "2"), ("CONFTREE_LAMBDA", "3")]);
        let s = Settings::resolve(Some(&path), &e, &[("lambda".into(), "4".into())]).unwrap();
        assert_eq!(s.get::<usize>("epochs").unwrap(), 5);
        assert_eq!(*s.source("epochs"), Source::File(path.clone(), 2));
        assert_eq!(s.get::<u64>("seed").unwrap(), 2);
        assert_eq!(s.get::<f64>("lambda").unwrap(), 4.0);
        assert_eq!(s.get::<f64>("temperature").unwrap(), 0.1);
        assert!(!s.is_explicit("temperature"));
    }

    #[test]
    fn config_path_from_env() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        std::fs::write(&path, "node.d_model = 16\n").unwrap();
        let e = env(&[(CONFIG_ENV, path.to_str().unwrap())]);
        let s = Settings::resolve(None, &e, &[]).unwrap();
        assert_eq!(s.get::<usize>("node.d_model").unwrap(), 16);
    }

    #[test]
    fn llm_url_alias() {
        let e = env(&[(LLM_URL_ENV, "http://localhost:11434")]);
        let s = Settings::resolve(None, &e, &[]).unwrap();
        assert_eq!(s.remote_config("m").unwrap().base_url, "http://localhost:11434");
        assert!(Settings::defaults()
            .remote_config("m")
            .unwrap_err()
            .to_string()
            .contains(LLM_URL_ENV));
    }

    #[test]
    fn file_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        for (text, needle) in [
            ("epochs = 1\nepoch = 2\n", ":2: unknown config key 'epoch'"),
            ("seed\n", ":1: expected"),
            ("seed = 1\nseed = 2\n", "already set on line 1"),
        ] {
            std::fs::write(&path, text).unwrap();
            let msg = Settings::resolve(Some(&path), &env(&[]), &[]).unwrap_err().to_string();
            assert!(msg.contains(needle), "{msg}");
        }
    }

    #[test]
    fn bad_values_name_key_and_source() {
        let s = Settings::resolve(None, &env(&[("CONFTREE_BATCH_SIZE", "eight")]), &[]).unwrap();
        let msg = s.training_config().unwrap_err().to_string();
        assert!(
            msg.contains("batch_size") && msg.contains("env CONFTREE_BATCH_SIZE"),
            "{msg}"
        );
        assert!(Settings::resolve(None, &env(&[]), &[("nope".into(), "1".into())]).is_err());
    }

    #[test]
    fn spans_parse() {
        let s = Settings::resolve(None, &env(&[]), &[("synth.pairs".into(), "5".into())]).unwrap();
        assert_eq!(s.span("synth.pairs").unwrap(), Span::new(5, 5));
        assert_eq!(s.span("synth.monologues").unwrap(), Span::new(2, 4));
    }

    #[test]
    fn rendered_config_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let s = Settings::resolve(None, &env(&[]), &[("epochs".into(), "7".into())]).unwrap();
        s.echo(dir.path()).unwrap();
        let back = Settings::resolve(Some(&dir.path().join(ECHO_FILE)), &env(&[]), &[]).unwrap();
        for k in KEYS {
            assert_eq!(back.raw(k.name), s.raw(k.name), "{}", k.name);
        }
    }

    #[test]
    fn checkpoint_fills_implicit_keys_and_rejects_conflicts() {
        let model = ModelConfig::desk();
        let training = TrainingConfig {
            seed: 9,
            epochs: 3,
            ..Default::default()
        };
        let path = Path::new("run/checkpoint.ckpt");
        let mut s = Settings::defaults();
        s.adopt_checkpoint(path, &model, &training, true).unwrap();
        assert_eq!(s.model_config().unwrap(), model);
        assert_eq!(s.get::<u64>("seed").unwrap(), 9);
        assert_eq!(s.get::<usize>("epochs").unwrap(), 30);
        assert_eq!(s.get::<f64>("eps").unwrap(), 1e-8);
        assert_eq!(*s.source("d_embed"), Source::Checkpoint(path.into()));

        let flags = [
            ("d_embed".to_string(), "32".to_string()),
            ("seed".to_string(), "1".to_string()),
        ];
        let mut s = Settings::resolve(None, &env(&[]), &flags).unwrap();
        let msg = s
            .clone()
            .adopt_checkpoint(path, &model, &training, false)
            .unwrap_err()
            .to_string();
        assert!(
            msg.contains("d_embed = 32 (from flag) but the checkpoint has 8") && !msg.contains("seed"),
            "{msg}"
        );
        let flags = [("seed".to_string(), "1".to_string())];
        s = Settings::resolve(None, &env(&[]), &flags).unwrap();
        s.clone().adopt_checkpoint(path, &model, &training, false).unwrap();
        assert!(s
            .adopt_checkpoint(path, &model, &training, true)
            .unwrap_err()
            .to_string()
            .contains("seed = 1"));
    }

    #[test]
    fn every_key_has_help() {
        for k in KEYS {
            assert!(!k.help.is_empty());
            assert!(flag_help(k.name).contains(k.name));
        }
        assert_eq!(env_name("node.d_model"), "CONFTREE_NODE_D_MODEL");
    }
}

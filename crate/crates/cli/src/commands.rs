use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use conftree::annotate::{
    annotate_tree, AnnotateError, Annotated, Ensemble, FixtureBackend, LabelBackend, NoisyBackend, RemoteBackend,
    RuleBackend,
};
use conftree::conf_encoder::attention_by_node;
use conftree::eval::{embed_corpus, evaluate, EmbeddingFile, ViewSpec};
use conftree::gradient_suite::{run_suite, TOLERANCE};
use conftree::ingest::{ingest_document, ClassifierBackend, HeuristicClassifier, RecordedClassifier};
use conftree::synth::{generate_corpus, write_corpus};
use conftree::train::{epoch_means, Checkpoint, Start};
use conftree::tree::{parse_json, ConferenceTree, PoolingStrategy};

use crate::config::Settings;

/// Per-file outputs that live next to conference files but are not conferences.
const SIDE_SUFFIXES: [&str; 3] = [".report.json", ".kinds.json", ".attention.json"];

fn is_conference_file(path: &Path) -> bool {
    let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
        return false;
    };
    name.ends_with(".json") && name != "manifest.json" && !SIDE_SUFFIXES.iter().any(|s| name.ends_with(s))
}

/// Files as given; directories expand to their JSON documents in name order.
fn expand_inputs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("reading directory {}", p.display()))?
                .map(|e| e.map(|e| e.path()))
                .collect::<Result<_, _>>()
                .with_context(|| format!("reading directory {}", p.display()))?;
            found.retain(|f| f.is_file() && is_conference_file(f));
            if found.is_empty() {
                bail!("no JSON documents in {}", p.display());
            }
            found.sort();
            out.extend(found);
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            bail!("{}: no such file or directory", p.display());
        }
    }
    Ok(out)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value)?;
    json.push('\n');
    write(path, &json)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_corpus(inputs: &[PathBuf]) -> Result<Vec<ConferenceTree>> {
    let mut seen: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut trees = Vec::new();
    for path in expand_inputs(inputs)? {
        let tree = ConferenceTree::load(&path).with_context(|| path.display().to_string())?;
        if let Some(first) = seen.insert(tree.id.clone(), path.clone()) {
            bail!(
                "{}: conference id '{}' already read from {}",
                path.display(),
                tree.id,
                first.display()
            );
        }
        trees.push(tree);
    }
    Ok(trees)
}

fn tree_path(dir: &Path, id: &str, suffix: &str) -> Result<PathBuf> {
    if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
        bail!("conference id '{id}' cannot be used as a file name");
    }
    Ok(dir.join(format!("{id}{suffix}")))
}

pub fn synth(settings: &Settings, out: &Path) -> Result<()> {
    let config = settings.generator_config()?;
    let (trees, manifest) = generate_corpus(&config)?;
    write_corpus(out, &trees, &manifest)?;
    settings.echo(out)?;
    println!(
        "wrote {} conferences and manifest.json to {}",
        trees.len(),
        out.display()
    );
    Ok(())
}

pub fn ingest(settings: &Settings, inputs: &[PathBuf], out: &Path, labels: Option<&Path>) -> Result<()> {
    let pooling: PoolingStrategy = settings.get("ingest.pooling")?;
    let heuristic = match settings.optional("ingest.procedural_words") {
        Some(p) => HeuristicClassifier::from_word_list(&read(Path::new(p))?),
        None => HeuristicClassifier::default(),
    };
    let recorded = match labels {
        Some(p) => Some(RecordedClassifier::from_json(&read(p)?).map_err(|e| anyhow!("{}: {e}", p.display()))?),
        None => None,
    };
    let files = expand_inputs(inputs)?;
    if recorded.is_some() && files.len() != 1 {
        bail!("--labels applies to exactly one transcript, got {}", files.len());
    }
    let classifier: &dyn ClassifierBackend = match &recorded {
        Some(r) => r,
        None => &heuristic,
    };
    create_dir(out)?;
    let mut seen: BTreeMap<String, PathBuf> = BTreeMap::new();
    for path in &files {
        let tree = ingest_document(&read(path)?, classifier, pooling).with_context(|| path.display().to_string())?;
        if let Some(first) = seen.insert(tree.id.clone(), path.clone()) {
            bail!(
                "{}: conference id '{}' already produced by {}",
                path.display(),
                tree.id,
                first.display()
            );
        }
        tree.save(&tree_path(out, &tree.id, ".json")?)?;
    }
    settings.echo(out)?;
    println!("ingested {} conference(s) into {}", files.len(), out.display());
    Ok(())
}

fn backend(spec: &str, settings: &Settings) -> Result<Box<dyn LabelBackend>> {
    let backend: Box<dyn LabelBackend> = match spec.split_once(':') {
        None if spec == "rule" => Box::new(RuleBackend),
        Some(("noisy", rate)) => {
            let rate: f64 = rate.parse().map_err(|e| anyhow!("backend '{spec}': noise rate: {e}"))?;
            Box::new(
                NoisyBackend::new(spec, Box::new(RuleBackend), rate).map_err(|e| anyhow!("backend '{spec}': {e}"))?,
            )
        }
        Some(("fixture", path)) => {
            let path = Path::new(path);
            Box::new(FixtureBackend::from_json(&read(path)?).map_err(|e| anyhow!("{}: {e}", path.display()))?)
        }
        Some(("remote", model)) if !model.is_empty() => {
            Box::new(RemoteBackend::new(settings.remote_config(model)?).map_err(|e| anyhow!("backend '{spec}': {e}"))?)
        }
        _ => bail!("unknown backend '{spec}'; expected rule, noisy:RATE, fixture:PATH or remote:MODEL"),
    };
    Ok(backend)
}

fn ensemble(settings: &Settings) -> Result<Ensemble> {
    let specs: Vec<&str> = settings
        .raw("annotate.backends")
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if specs.is_empty() {
        bail!("no annotation backends configured");
    }
    Ok(Ensemble {
        backends: specs.iter().map(|s| backend(s, settings)).collect::<Result<_>>()?,
        runs: settings.get("annotate.runs")?,
        seed: settings.get("annotate.seed")?,
    })
}

pub fn annotate(settings: &Settings, inputs: &[PathBuf], out: &Path) -> Result<()> {
    let ensemble = ensemble(settings)?;
    let corpus = load_corpus(inputs)?;
    create_dir(out)?;
    let save = |a: &Annotated| -> Result<()> {
        a.tree.save(&tree_path(out, &a.tree.id, ".json")?)?;
        write_json(&tree_path(out, &a.tree.id, ".report.json")?, &a.report)
    };
    let mut failed = Vec::new();
    for tree in &corpus {
        match annotate_tree(tree, &ensemble) {
            Ok(a) => save(&a)?,
            Err(AnnotateError::Partial { annotated, failures }) => {
                save(&annotated)?;
                let err = AnnotateError::Partial { annotated, failures };
                eprintln!("{}: {err}", tree.id);
                failed.push(tree.id.clone());
            }
            Err(e) => return Err(e).with_context(|| format!("conference '{}'", tree.id)),
        }
    }
    settings.echo(out)?;
    if !failed.is_empty() {
        bail!(
            "{} of {} conference(s) left partly unannotated: {}; see their report files",
            failed.len(),
            corpus.len(),
            failed.join(", ")
        );
    }
    println!("annotated {} conference(s) into {}", corpus.len(), out.display());
    Ok(())
}

pub fn train(settings: &mut Settings, corpus_dir: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let corpus = load_corpus(&[corpus_dir.to_path_buf()])?;
    let start = match resume {
        Some(path) => {
            let checkpoint = Checkpoint::load(path)?;
            settings.adopt_checkpoint(path, &checkpoint.model.config, &checkpoint.training, true)?;
            Start::Resume {
                checkpoint,
                epochs: settings.get("epochs")?,
            }
        }
        None => Start::Fresh {
            model: settings.model_config()?,
            training: settings.training_config()?,
        },
    };
    create_dir(out)?;
    settings.echo(out)?;
    let outcome = conftree::train::train(&corpus, start, out)?;
    for (epoch, mean) in epoch_means(&outcome.losses) {
        println!("epoch {epoch:>4}  mean loss {mean:.6}");
    }
    println!("checkpoint: {}", outcome.final_checkpoint.display());
    Ok(())
}

fn load_model(settings: &mut Settings, path: &Path) -> Result<Checkpoint> {
    let checkpoint = Checkpoint::load(path)?;
    settings.adopt_checkpoint(path, &checkpoint.model.config, &checkpoint.training, false)?;
    Ok(checkpoint)
}

pub fn embed(settings: &mut Settings, checkpoint: &Path, inputs: &[PathBuf], out: &Path) -> Result<()> {
    let ckpt = load_model(settings, checkpoint)?;
    let corpus = load_corpus(inputs)?;
    let spec = ViewSpec {
        node_keep: settings.get("node_keep")?,
        conf_keep: settings.get("conf_keep")?,
        nodes_per_conference: settings.get("nodes_per_conference")?,
        seed: settings.get("view.seed")?,
    };
    let file = embed_corpus(&ckpt.model, ckpt.epoch, &corpus, &spec)?;
    create_dir(out)?;
    write_json(&out.join("embeddings.json"), &file)?;
    settings.echo(out)?;
    println!(
        "embedded {} conference(s), {} conference view pair(s), {} node view pair(s) into {}",
        file.conferences.len(),
        file.conference_views.len(),
        file.node_views.len(),
        out.join("embeddings.json").display()
    );
    Ok(())
}

pub fn attention(settings: &mut Settings, checkpoint: &Path, inputs: &[PathBuf], out: &Path) -> Result<()> {
    let ckpt = load_model(settings, checkpoint)?;
    let corpus = load_corpus(inputs)?;
    create_dir(out)?;
    for tree in &corpus {
        let embedding = ckpt
            .model
            .embed_conference(tree)
            .with_context(|| format!("conference '{}'", tree.id))?;
        let report = attention_by_node(&embedding.attention, tree)?;
        write_json(&tree_path(out, &tree.id, ".attention.json")?, &report)?;
    }
    settings.echo(out)?;
    println!(
        "wrote attention for {} conference(s) into {}",
        corpus.len(),
        out.display()
    );
    Ok(())
}

pub fn eval(settings: &Settings, embeddings: &Path, out: &Path) -> Result<()> {
    let file: EmbeddingFile =
        parse_json(&read(embeddings)?).map_err(|(path, e)| anyhow!("{} at {path}: {e}", embeddings.display()))?;
    let (report, csv) = evaluate(&file)?;
    create_dir(out)?;
    write_json(&out.join("metrics.json"), &report)?;
    write(&out.join("projection.csv"), &csv)?;
    settings.echo(out)?;
    for (level, m) in [("conference", &report.conference), ("node", &report.node)] {
        let r5 = m.retrieval_at_5.map_or("n/a".to_string(), |r| format!("{r:.4}"));
        println!(
            "{level:<10}  pairs {:>4}  retrieval@1 {:.4}  retrieval@5 {r5}  alignment {:.4}  uniformity {:.4}",
            m.pairs, m.retrieval_at_1, m.alignment, m.uniformity
        );
    }
    Ok(())
}

pub fn gradcheck(seed: u64) -> Result<()> {
    let report = run_suite(seed)?;
    for c in &report.checks {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<40} {:>6} components  max rel error {:.3e}  {verdict}",
            c.name, c.components, c.max_rel_error
        );
    }
    println!(
        "max relative error: {:.3e} (tolerance {TOLERANCE:e})",
        report.max_rel_error
    );
    println!("elapsed: {:.2} s", report.elapsed_s);
    if !report.passed() {
        bail!(
            "max relative error {:.3e} is not below {TOLERANCE:e}",
            report.max_rel_error
        );
    }
    Ok(())
}

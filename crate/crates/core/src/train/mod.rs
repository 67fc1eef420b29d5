//! Two-level contrastive training: view sampling, NT-Xent at node and
//! conference level, Adam updates, checkpoints and the epoch loop.

mod adam;
mod checkpoint;
mod loss;
mod views;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_VERSION};
pub use loss::{adjacent_pairs, nt_xent, nt_xent_value};
pub use views::{
    keep_subset, sample_conference_positions, sample_conference_views, sample_node_views, sample_nodes, ViewKey,
};

use crate::conf_encoder::encode_conference;
use crate::model::{Model, ModelConfig, ModelError, ModelParams};
use crate::node_encoder::encode_node;
use crate::seed;
use crate::tensor::{Tape, TensorError, Var};
use crate::tree::{ConferenceTree, TreeError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("training configuration: {0}")]
    Config(String),
    #[error("corpus has {have} conferences but a batch needs {need}")]
    CorpusTooSmall { have: usize, need: usize },
    #[error("checkpoint {}: {detail}", path.display())]
    Checkpoint { path: PathBuf, detail: String },
    #[error("checkpoint {} has format version {found}, expected {expected}", path.display())]
    Version { path: PathBuf, found: u32, expected: u32 },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub temperature: f64,
    /// Utterance keep probability for node views.
    pub node_keep: f64,
    /// Node keep probability for conference views.
    pub conf_keep: f64,
    /// Weight of the conference loss in the total.
    pub lambda: f64,
    pub batch_size: usize,
    /// Nodes sampled per conference for the node-level loss.
    pub nodes_per_conference: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            temperature: 0.1,
            node_keep: 0.8,
            conf_keep: 0.8,
            lambda: 1.0,
            batch_size: 8,
            nodes_per_conference: 4,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 30,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::Config(msg));
        if !(self.temperature > 0.0) {
            return fail(format!("temperature must be positive, got {}", self.temperature));
        }
        views::check_keep_ratio("node keep ratio", self.node_keep)?;
        views::check_keep_ratio("conference keep ratio", self.conf_keep)?;
        if self.batch_size < 2 {
            return fail(format!("batch size must be at least 2, got {}", self.batch_size));
        }
        if self.nodes_per_conference == 0 {
            return fail("nodes per conference must be at least 1".into());
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return fail(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        if !(self.learning_rate > 0.0) || !(self.eps > 0.0) {
            return fail("learning rate and eps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// `L_node + λ·L_conf`.
    Joint,
    /// `L_node` only; the conference branch is never built.
    NodeOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodePlan {
    /// Position of the node in temporal order.
    pub position: usize,
    pub views: [Vec<usize>; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConferencePlan {
    pub nodes: Vec<NodePlan>,
    /// Node positions of the two conference views.
    pub views: [Vec<usize>; 2],
}

/// All random choices of one step, fixed ahead of the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub conferences: Vec<ConferencePlan>,
}

impl BatchPlan {
    pub fn sample(batch: &[&ConferenceTree], config: &TrainingConfig, epoch: usize) -> Result<Self, TrainError> {
        let mut conferences = Vec::with_capacity(batch.len());
        for tree in batch {
            let nodes = tree.flatten()?;
            let key = |index| ViewKey {
                seed: config.seed,
                conference_id: &tree.id,
                index,
                epoch,
            };
            let picked = sample_nodes(nodes.len(), config.nodes_per_conference, key(usize::MAX));
            let mut node_plans = Vec::with_capacity(picked.len());
            for position in picked {
                let views = sample_node_views(nodes[position], config.node_keep, key(position))?;
                node_plans.push(NodePlan { position, views });
            }
            let views = sample_conference_positions(nodes.len(), config.conf_keep, key(usize::MAX))?;
            conferences.push(ConferencePlan {
                nodes: node_plans,
                views,
            });
        }
        Ok(BatchPlan { conferences })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub node: Var,
    pub conf: Option<Var>,
    pub total: Var,
}

/// Builds the two-level loss of `batch` under `plan` on `tape`.
pub fn batch_loss(
    tape: &mut Tape,
    params: &ModelParams<Var>,
    model: &ModelConfig,
    batch: &[&ConferenceTree],
    plan: &BatchPlan,
    config: &TrainingConfig,
    objective: Objective,
) -> Result<LossVars, TrainError> {
    if batch.len() < 2 {
        return Err(TrainError::Config(format!(
            "batch needs at least 2 conferences, got {}",
            batch.len()
        )));
    }
    if plan.conferences.len() != batch.len() {
        return Err(TrainError::Config("plan does not match batch".into()));
    }
    let flat: Vec<_> = batch.iter().map(|t| t.flatten()).collect::<Result<_, _>>()?;

    let mut node_rows = Vec::new();
    for (nodes, cp) in flat.iter().zip(&plan.conferences) {
        for np in &cp.nodes {
            for view in &np.views {
                node_rows.push(encode_node(
                    tape,
                    nodes[np.position],
                    &params.node,
                    &model.node,
                    Some(view),
                )?);
            }
        }
    }
    let z = tape.concat_rows(&node_rows)?;
    let node = nt_xent(tape, z, &adjacent_pairs(node_rows.len() / 2), config.temperature)?;
    if objective == Objective::NodeOnly {
        return Ok(LossVars {
            node,
            conf: None,
            total: node,
        });
    }

    let mut conf_rows = Vec::with_capacity(2 * batch.len());
    for (nodes, cp) in flat.iter().zip(&plan.conferences) {
        let mut full = BTreeMap::new();
        for &p in cp.views.iter().flatten() {
            if let std::collections::btree_map::Entry::Vacant(slot) = full.entry(p) {
                slot.insert(encode_node(tape, nodes[p], &params.node, &model.node, None)?);
            }
        }
        for view in &cp.views {
            let rows: Vec<Var> = view.iter().map(|p| full[p]).collect();
            conf_rows.push(encode_conference(tape, &rows, &params.conf, &model.conf)?.0);
        }
    }
    let z = tape.concat_rows(&conf_rows)?;
    let conf = nt_xent(tape, z, &adjacent_pairs(batch.len()), config.temperature)?;
    let weighted = tape.scale(conf, config.lambda);
    let total = tape.add(node, weighted)?;
    Ok(LossVars {
        node,
        conf: Some(conf),
        total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub epoch: usize,
    pub step: usize,
    pub node: f64,
    /// Zero under [`Objective::NodeOnly`].
    pub conf: f64,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "epoch,step,node_loss,conf_loss,total";

pub fn loss_csv(records: &[StepLoss]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.step, r.node, r.conf, r.total);
    }
    out
}

pub fn parse_loss_csv(text: &str) -> Result<Vec<StepLoss>, TrainError> {
    let bad = |line: usize| TrainError::Config(format!("loss log line {line} is malformed"));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(i + 1));
        }
        out.push(StepLoss {
            epoch: f[0].parse().map_err(|_| bad(i + 1))?,
            step: f[1].parse().map_err(|_| bad(i + 1))?,
            node: f[2].parse().map_err(|_| bad(i + 1))?,
            conf: f[3].parse().map_err(|_| bad(i + 1))?,
            total: f[4].parse().map_err(|_| bad(i + 1))?,
        });
    }
    Ok(out)
}

/// Mean total loss per epoch, in epoch order.
pub fn epoch_means(records: &[StepLoss]) -> Vec<(usize, f64)> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = acc.entry(r.epoch).or_insert((0.0, 0));
        e.0 += r.total;
        e.1 += 1;
    }
    acc.into_iter().map(|(e, (s, n))| (e, s / n as f64)).collect()
}

/// Model, optimizer and epoch counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub model: Model,
    pub training: TrainingConfig,
    pub optimizer: Adam,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps.
    pub step: usize,
}

impl Trainer {
    pub fn new(model: ModelConfig, training: TrainingConfig) -> Result<Self, TrainError> {
        training.validate()?;
        let model = Model::init(model, seed::derive_seed(training.seed, &["init"]))?;
        let optimizer = Adam::new(training.adam(), &model.params.flat());
        Ok(Trainer {
            model,
            training,
            optimizer,
            epoch: 0,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, TrainError> {
        ckpt.training.validate()?;
        let step = ckpt.optimizer.step as usize;
        Ok(Trainer {
            model: ckpt.model,
            training: ckpt.training,
            optimizer: ckpt.optimizer,
            epoch: ckpt.epoch,
            step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            training: self.training.clone(),
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
        }
    }

    /// One forward/backward pass and one optimizer update.
    pub fn step(
        &mut self,
        batch: &[&ConferenceTree],
        plan: &BatchPlan,
        objective: Objective,
    ) -> Result<(f64, f64, f64), TrainError> {
        let mut tape = Tape::new();
        let params = self.model.params.bind_leaves(&mut tape);
        let loss = batch_loss(
            &mut tape,
            &params,
            &self.model.config,
            batch,
            plan,
            &self.training,
            objective,
        )?;
        let total = tape.value(loss.total).data()[0];
        if !total.is_finite() {
            return Err(TensorError::Numeric {
                op: "train_step",
                detail: format!("loss is {total}"),
            }
            .into());
        }
        let grads = tape.backward(loss.total)?;
        let mut vars = Vec::new();
        params.visit(&mut |_, v| vars.push(*v));
        let grads: Vec<_> = vars.iter().map(|v| grads.get(*v)).collect();
        let updated = self.optimizer.update(&self.model.params.flat(), &grads);
        self.model.params = self.model.params.from_flat(updated)?;
        self.step += 1;
        let node = tape.value(loss.node).data()[0];
        let conf = loss.conf.map_or(0.0, |c| tape.value(c).data()[0]);
        Ok((node, conf, total))
    }

    /// Corpus indices per batch for `epoch`; a trailing batch too small to
    /// hold a negative is dropped.
    pub fn epoch_batches(&self, corpus_len: usize, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..corpus_len).collect();
        order.shuffle(&mut seed::stream(self.training.seed, &["shuffle", &epoch.to_string()]));
        order
            .chunks(self.training.batch_size)
            .filter(|c| c.len() >= 2)
            .map(<[usize]>::to_vec)
            .collect()
    }

    pub fn run_epoch(&mut self, corpus: &[ConferenceTree]) -> Result<Vec<StepLoss>, TrainError> {
        if corpus.len() < self.training.batch_size {
            return Err(TrainError::CorpusTooSmall {
                have: corpus.len(),
                need: self.training.batch_size,
            });
        }
        let epoch = self.epoch + 1;
        let mut records = Vec::new();
        for indices in self.epoch_batches(corpus.len(), epoch) {
            let batch: Vec<&ConferenceTree> = indices.iter().map(|&i| &corpus[i]).collect();
            let plan = BatchPlan::sample(&batch, &self.training, epoch)?;
            let (node, conf, total) = self.step(&batch, &plan, Objective::Joint)?;
            records.push(StepLoss {
                epoch,
                step: self.step,
                node,
                conf,
                total,
            });
        }
        self.epoch = epoch;
        Ok(records)
    }
}

pub enum Start {
    Fresh {
        model: ModelConfig,
        training: TrainingConfig,
    },
    /// Continue from a checkpoint until `epochs` epochs are complete.
    Resume { checkpoint: Checkpoint, epochs: usize },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub losses: Vec<StepLoss>,
    pub final_checkpoint: PathBuf,
}

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("epoch-{epoch:04}.ckpt"))
}

fn write(path: &Path, contents: &[u8]) -> Result<(), TrainError> {
    fs::write(path, contents).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Runs the epoch loop, writing `checkpoints/epoch-NNNN.ckpt`,
/// `checkpoint.ckpt` (latest) and `loss.csv` under `out_dir` after every epoch.
pub fn train(corpus: &[ConferenceTree], start: Start, out_dir: &Path) -> Result<TrainOutcome, TrainError> {
    let ckpt_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|source| TrainError::Io {
        path: ckpt_dir.clone(),
        source,
    })?;
    let log_path = out_dir.join("loss.csv");

    let (mut trainer, mut losses) = match start {
        Start::Fresh { model, training } => (Trainer::new(model, training)?, Vec::new()),
        Start::Resume { checkpoint, epochs } => {
            let mut trainer = Trainer::from_checkpoint(checkpoint)?;
            trainer.training.epochs = epochs;
            let previous = match fs::read_to_string(&log_path) {
                Ok(text) => parse_loss_csv(&text)?,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
                Err(source) => return Err(TrainError::Io { path: log_path, source }),
            };
            let kept = previous.into_iter().filter(|r| r.epoch <= trainer.epoch).collect();
            (trainer, kept)
        }
    };
    let need = trainer.training.batch_size.max(2);
    if corpus.len() < need {
        return Err(TrainError::CorpusTooSmall {
            have: corpus.len(),
            need,
        });
    }
    for tree in corpus {
        let violations = tree.validate();
        let relevant: Vec<_> = violations
            .into_iter()
            .filter(|v| v.rule != crate::tree::Rule::OrderIndexIncreasing)
            .collect();
        if !relevant.is_empty() {
            return Err(TreeError::Invalid(relevant).into());
        }
    }

    let latest = out_dir.join("checkpoint.ckpt");
    while trainer.epoch < trainer.training.epochs {
        losses.extend(trainer.run_epoch(corpus)?);
        let ckpt = trainer.checkpoint();
        ckpt.save(&checkpoint_path(out_dir, trainer.epoch))?;
        ckpt.save(&latest)?;
        write(&log_path, loss_csv(&losses).as_bytes())?;
    }
    if !latest.exists() {
        trainer.checkpoint().save(&latest)?;
        write(&log_path, loss_csv(&losses).as_bytes())?;
    }
    Ok(TrainOutcome {
        trainer,
        losses,
        final_checkpoint: latest,
    })
}

//! Numerical gradient checks over every tape op, the transformer blocks and
//! the complete two-level training loss.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::model::{ModelConfig, ModelParams};
use crate::synth::{generate_corpus, GeneratorConfig, Span};
use crate::tensor::layers::{
    encoder_layer, init_embedding, multi_head_self_attention, AttentionParams, EncoderLayerParams, LAYER_NORM_EPS,
};
use crate::tensor::{grad_check, Tape, Tensor, TensorError, Var, DEFAULT_EPSILON};
use crate::train::{batch_loss, BatchPlan, Objective, TrainingConfig};
use crate::tree::ConferenceTree;

pub const TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub components: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
    pub max_rel_error: f64,
    pub elapsed_s: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    init_embedding(rows, cols, 1.0, rng)
}

/// Random entries pushed at least `gap` away from zero.
fn away_from_zero(rows: usize, cols: usize, gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = random(rows, cols, rng);
    for x in t.data_mut() {
        *x = x.signum() * (x.abs() + gap);
    }
    t
}

/// Reduces a matrix to a scalar with fixed random row and column weights,
/// so every entry of `out` contributes with a distinct coefficient.
fn readout(tape: &mut Tape, out: Var, seed: u64) -> Result<Var, TensorError> {
    let (rows, cols) = (tape.value(out).rows(), tape.value(out).cols());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let left = tape.constant(random(1, rows, &mut rng));
    let right = tape.constant(random(cols, 1, &mut rng));
    let a = tape.matmul(left, out)?;
    let b = tape.matmul(a, right)?;
    Ok(tape.sum(b))
}

fn check<F>(name: &str, params: &[Tensor], f: F) -> Result<CheckResult, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let r = grad_check(f, params, DEFAULT_EPSILON)?;
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error: r.max_rel_error,
        components: r.components,
        analytic: r.analytic,
        numeric: r.numeric,
    })
}

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var, TensorError>;

/// One check per tape op.
pub fn op_checks(seed: u64) -> Result<Vec<CheckResult>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |rows, cols| random(rows, cols, &mut rng);
    let a34 = r(3, 4);
    let b34 = r(3, 4);
    let b42 = r(4, 2);
    let b24 = r(2, 4);
    let row4 = r(1, 4);
    let a35 = r(3, 5);
    let a36 = r(3, 6);
    let g6 = r(1, 6);
    let b6 = r(1, 6);
    let a32 = r(3, 2);
    let a33 = r(3, 3);
    let logits = r(4, 4);
    let relu_in = away_from_zero(3, 4, 0.1, &mut rng);

    let cases: Vec<(&str, Vec<Tensor>, OpFn)> = vec![
        ("matmul", vec![a34.clone(), b42], |t, p| {
            let y = t.matmul(p[0], p[1])?;
            readout(t, y, 1)
        }),
        ("matmul_t", vec![a34.clone(), b24], |t, p| {
            let y = t.matmul_t(p[0], p[1])?;
            readout(t, y, 2)
        }),
        ("transpose", vec![a34.clone()], |t, p| {
            let y = t.transpose(p[0])?;
            readout(t, y, 3)
        }),
        ("add", vec![a34.clone(), b34.clone()], |t, p| {
            let y = t.add(p[0], p[1])?;
            readout(t, y, 4)
        }),
        ("add_row", vec![a34.clone(), row4], |t, p| {
            let y = t.add_row(p[0], p[1])?;
            readout(t, y, 5)
        }),
        ("scale", vec![a34.clone()], |t, p| {
            let y = t.scale(p[0], -1.7);
            readout(t, y, 6)
        }),
        ("relu", vec![relu_in], |t, p| {
            let y = t.relu(p[0]);
            readout(t, y, 7)
        }),
        ("softmax_rows", vec![a35], |t, p| {
            let y = t.softmax_rows(p[0])?;
            readout(t, y, 8)
        }),
        ("layer_norm", vec![a36, g6, b6], |t, p| {
            let y = t.layer_norm(p[0], p[1], p[2], LAYER_NORM_EPS)?;
            readout(t, y, 9)
        }),
        ("slice_cols", vec![a34.clone()], |t, p| {
            let y = t.slice_cols(p[0], 1, 2)?;
            readout(t, y, 10)
        }),
        ("slice_rows", vec![a34.clone()], |t, p| {
            let y = t.slice_rows(p[0], 1, 2)?;
            readout(t, y, 11)
        }),
        ("concat_cols", vec![a32.clone(), a33], |t, p| {
            let y = t.concat_cols(&[p[0], p[1]])?;
            readout(t, y, 12)
        }),
        ("concat_rows", vec![a34.clone(), b34], |t, p| {
            let y = t.concat_rows(&[p[0], p[1]])?;
            readout(t, y, 13)
        }),
        ("normalize_rows", vec![a34.clone()], |t, p| {
            let y = t.normalize_rows(p[0])?;
            readout(t, y, 14)
        }),
        ("sum", vec![a34], |t, p| {
            let y = t.sum(p[0]);
            let s = t.scale(y, 0.5);
            let y2 = t.matmul(s, s)?;
            Ok(t.sum(y2))
        }),
        ("masked_cross_entropy", vec![logits], |t, p| {
            t.masked_cross_entropy(p[0], &[1, 0, 3, 2])
        }),
    ];
    cases
        .into_iter()
        .map(|(name, params, f)| check(name, &params, f))
        .collect()
}

fn collect<'a>(visit: impl FnOnce(&mut dyn FnMut(String, &'a Tensor)), out: &mut Vec<Tensor>) {
    visit(&mut |_, t| out.push(t.clone()));
}

/// Attention and encoder blocks with all of their parameters perturbed.
pub fn block_checks(seed: u64) -> Result<Vec<CheckResult>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let x = random(4, 8, &mut rng);
    let attn = AttentionParams::init(8, &mut rng);
    let layer = EncoderLayerParams::init(8, &mut rng);

    let mut params = vec![x.clone()];
    collect(|f| attn.visit("a", &mut |n, t| f(n, t)), &mut params);
    let attn_ref = &attn;
    let a = check("multi_head_self_attention", &params, |t, p| {
        let mut it = p[1..].iter().copied();
        let ap = attn_ref.map(&mut |_| it.next().expect("parameter count"));
        let out = multi_head_self_attention(t, p[0], &ap, 2)?;
        readout(t, out.output, 20)
    })?;

    let mut params = vec![x];
    collect(|f| layer.visit("l", &mut |n, t| f(n, t)), &mut params);
    let layer_ref = &layer;
    let l = check("encoder_layer", &params, |t, p| {
        let mut it = p[1..].iter().copied();
        let lp = layer_ref.map(&mut |_| it.next().expect("parameter count"));
        let out = encoder_layer(t, p[0], &lp, 2)?;
        readout(t, out.output, 21)
    })?;
    Ok(vec![a, l])
}

/// Two 3-node conferences used by the full-loss check.
pub fn tiny_corpus(seed: u64) -> Vec<ConferenceTree> {
    let config = GeneratorConfig {
        conferences: 2,
        monologues: Span::new(1, 1),
        pairs: Span::new(2, 2),
        utterances: Span::new(1, 3),
        audio_prob: 0.7,
        video_prob: 0.5,
        unanswered_prob: 0.0,
        seed,
        ..Default::default()
    };
    generate_corpus(&config).expect("valid generator config").0
}

/// The complete two-level loss (B = 2, M = 2) at small dimensions.
pub fn full_loss_check(seed: u64) -> Result<CheckResult, TensorError> {
    let model = ModelConfig::desk();
    let training = TrainingConfig {
        batch_size: 2,
        nodes_per_conference: 2,
        seed,
        ..Default::default()
    };
    let corpus = tiny_corpus(seed);
    let batch: Vec<&ConferenceTree> = corpus.iter().collect();
    let plan = BatchPlan::sample(&batch, &training, 1).map_err(|e| TensorError::Contract(e.to_string()))?;
    let template = ModelParams::init(&model, seed);
    let params: Vec<Tensor> = template.flat().into_iter().cloned().collect();
    check("two_level_loss", &params, |tape, vars| {
        let mut it = vars.iter().copied();
        let p = template.map(&mut |_| it.next().expect("parameter count"));
        let loss = batch_loss(tape, &p, &model, &batch, &plan, &training, Objective::Joint)
            .map_err(|e| TensorError::Contract(e.to_string()))?;
        Ok(loss.total)
    })
}

/// Node-level loss only, perturbing just the node encoder parameters.
pub fn node_loss_check(seed: u64) -> Result<CheckResult, TensorError> {
    let model = ModelConfig::desk();
    let training = TrainingConfig {
        batch_size: 2,
        nodes_per_conference: 2,
        seed,
        ..Default::default()
    };
    let corpus = tiny_corpus(seed);
    let batch: Vec<&ConferenceTree> = corpus.iter().collect();
    let plan = BatchPlan::sample(&batch, &training, 1).map_err(|e| TensorError::Contract(e.to_string()))?;
    let template = ModelParams::init(&model, seed);
    let mut params = Vec::new();
    collect(|f| template.node.visit("node", &mut |n, t| f(n, t)), &mut params);
    check("node_loss", &params, |tape, vars| {
        let mut it = vars.iter().copied();
        let node = template.node.map(&mut |_| it.next().expect("parameter count"));
        let conf = template.conf.map(&mut |t| tape.constant(t.clone()));
        let p = ModelParams { node, conf };
        let loss = batch_loss(tape, &p, &model, &batch, &plan, &training, Objective::NodeOnly)
            .map_err(|e| TensorError::Contract(e.to_string()))?;
        Ok(loss.node)
    })
}

pub fn run_suite(seed: u64) -> Result<SuiteReport, TensorError> {
    let start = Instant::now();
    let mut checks = op_checks(seed)?;
    checks.extend(block_checks(seed)?);
    checks.push(node_loss_check(seed)?);
    checks.push(full_loss_check(seed)?);
    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(SuiteReport {
        checks,
        max_rel_error,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for c in op_checks(0).unwrap().into_iter().chain(block_checks(0).unwrap()) {
            assert!(c.passed(), "{}: {:e}", c.name, c.max_rel_error);
        }
    }

    #[test]
    fn node_loss_passes() {
        let c = node_loss_check(0).unwrap();
        assert!(c.passed(), "{:e}", c.max_rel_error);
        assert!(c.components > 0);
    }

    #[test]
    fn tiny_corpus_has_three_node_conferences() {
        let corpus = tiny_corpus(0);
        assert_eq!(corpus.len(), 2);
        assert!(corpus.iter().all(|t| t.nodes.len() == 3));
    }
}

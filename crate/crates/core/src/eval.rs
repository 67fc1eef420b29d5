//! Embedding quality metrics and export.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelError};
use crate::train::{sample_conference_positions, sample_node_views, sample_nodes, TrainError, ViewKey};
use crate::tree::{ConferenceTree, TreeError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cosine similarity of a zero vector")]
    ZeroVector,
    #[error("vectors have lengths {0} and {1}")]
    Dimension(usize, usize),
    #[error("evaluation: {0}")]
    Config(String),
    #[error("need at least {need} embeddings, got {have}")]
    TooFew { need: usize, have: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Dimension(a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(EvalError::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

fn unit(v: &[f64]) -> Result<Vec<f64>, EvalError> {
    let n = norm(v);
    if n == 0.0 {
        return Err(EvalError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn partners(len: usize, pairs: &[(usize, usize)]) -> Result<Vec<usize>, EvalError> {
    if len != 2 * pairs.len() {
        return Err(EvalError::Config(format!(
            "{} pairs over {len} embeddings",
            pairs.len()
        )));
    }
    let mut out = vec![usize::MAX; len];
    for &(a, b) in pairs {
        if a == b || a >= len || b >= len || out[a] != usize::MAX || out[b] != usize::MAX {
            return Err(EvalError::Config(format!(
                "pairing is not a perfect matching at ({a}, {b})"
            )));
        }
        out[a] = b;
        out[b] = a;
    }
    Ok(out)
}

/// Fraction of views whose partner is among the `k` most similar other
/// views. Ties in similarity rank the lower index first.
pub fn retrieval_at_k(embeddings: &[Vec<f64>], pairs: &[(usize, usize)], k: usize) -> Result<f64, EvalError> {
    let n = embeddings.len();
    if pairs.len() < 2 {
        return Err(EvalError::TooFew { need: 4, have: n });
    }
    let partner = partners(n, pairs)?;
    if k == 0 || k >= n {
        return Err(EvalError::Config(format!("k must lie in 1..{n}, got {k}")));
    }
    let units = embeddings.iter().map(|v| unit(v)).collect::<Result<Vec<_>, _>>()?;
    let mut hits = 0usize;
    for i in 0..n {
        let target = dot(&units[i], &units[partner[i]]);
        let j = partner[i];
        let better = (0..n)
            .filter(|&c| c != i && c != j)
            .filter(|&c| {
                let s = dot(&units[i], &units[c]);
                s > target || (s == target && c < j)
            })
            .count();
        if better < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// `(alignment, uniformity)` of L2-normalized embeddings.
pub fn alignment_uniformity(embeddings: &[Vec<f64>], pairs: &[(usize, usize)]) -> Result<(f64, f64), EvalError> {
    if embeddings.len() < 2 {
        return Err(EvalError::TooFew {
            need: 2,
            have: embeddings.len(),
        });
    }
    partners(embeddings.len(), pairs)?;
    let units = embeddings.iter().map(|v| unit(v)).collect::<Result<Vec<_>, _>>()?;
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let alignment = pairs.iter().map(|&(a, b)| sq(&units[a], &units[b])).sum::<f64>() / pairs.len() as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..units.len() {
        for j in i + 1..units.len() {
            total += (-2.0 * sq(&units[i], &units[j])).exp();
            count += 1;
        }
    }
    Ok((alignment, (total / count as f64).ln()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub coordinates: Vec<Vec<f64>>,
    pub explained_variance_ratio: Vec<f64>,
    /// Unit principal axes, one per output dimension.
    pub components: Vec<Vec<f64>>,
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and eigenvectors (as columns of the `n × n` result).
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect())
        .collect();
    let scale: f64 = a.iter().flatten().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j].powi(2))
            .sum();
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

/// Projects mean-centred embeddings onto their top `dims` principal axes.
/// Each axis is signed so that its largest-magnitude component is positive.
pub fn pca_project(embeddings: &[Vec<f64>], dims: usize) -> Result<Projection, EvalError> {
    let n = embeddings.len();
    if dims == 0 {
        return Err(EvalError::Config("dims must be at least 1".into()));
    }
    if n < dims + 1 {
        return Err(EvalError::TooFew {
            need: dims + 1,
            have: n,
        });
    }
    let d = embeddings[0].len();
    if let Some(bad) = embeddings.iter().find(|e| e.len() != d) {
        return Err(EvalError::Dimension(d, bad.len()));
    }
    if dims > d {
        return Err(EvalError::Config(format!(
            "cannot project {d}-dimensional data onto {dims} axes"
        )));
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| embeddings.iter().map(|e| e[j]).sum::<f64>() / n as f64)
        .collect();
    let centred: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| e.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for row in &centred {
        for i in 0..d {
            for j in i..d {
                cov[i][j] += row[i] * row[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i][j] /= (n - 1) as f64;
            cov[j][i] = cov[i][j];
        }
    }
    let (values, vectors) = jacobi_eigen(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();

    let mut components = Vec::with_capacity(dims);
    let mut ratios = Vec::with_capacity(dims);
    for &idx in order.iter().take(dims) {
        let mut axis: Vec<f64> = vectors.iter().map(|row| row[idx]).collect();
        let lead = axis
            .iter()
            .enumerate()
            .fold(0, |best, (i, x)| if x.abs() > axis[best].abs() { i } else { best });
        if axis[lead] < 0.0 {
            axis.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(axis);
        ratios.push(if total > 0.0 { values[idx].max(0.0) / total } else { 0.0 });
    }
    let coordinates = centred
        .iter()
        .map(|row| components.iter().map(|c| dot(row, c)).collect())
        .collect();
    Ok(Projection {
        coordinates,
        explained_variance_ratio: ratios,
        components,
    })
}

/// `id,x,y` rows (further columns for more than two dimensions).
pub fn projection_csv(ids: &[String], projection: &Projection) -> String {
    let dims = projection.components.len();
    let mut out = String::from("id");
    for i in 0..dims {
        match i {
            0 => out.push_str(",x"),
            1 => out.push_str(",y"),
            _ => {
                let _ = write!(out, ",c{i}");
            }
        }
    }
    out.push('\n');
    for (id, row) in ids.iter().zip(&projection.coordinates) {
        out.push_str(id);
        for x in row {
            let _ = write!(out, ",{x}");
        }
        out.push('\n');
    }
    out
}

/// Two embeddings per id, stored adjacently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPair {
    pub id: String,
    pub view_a: Vec<f64>,
    pub view_b: Vec<f64>,
}

pub fn flatten_pairs(pairs: &[ViewPair]) -> (Vec<Vec<f64>>, Vec<(usize, usize)>) {
    let rows = pairs
        .iter()
        .flat_map(|p| [p.view_a.clone(), p.view_b.clone()])
        .collect();
    (rows, crate::train::adjacent_pairs(pairs.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub node_keep: f64,
    pub conf_keep: f64,
    pub nodes_per_conference: usize,
    pub seed: u64,
}

fn view_key(seed: u64, tree: &ConferenceTree, index: usize) -> ViewKey<'_> {
    ViewKey {
        seed,
        conference_id: &tree.id,
        index,
        epoch: 0,
    }
}

/// Embeddings of two node-subset views per conference.
pub fn conference_view_pairs(
    model: &Model,
    corpus: &[ConferenceTree],
    spec: &ViewSpec,
) -> Result<Vec<ViewPair>, EvalError> {
    let mut out = Vec::with_capacity(corpus.len());
    for tree in corpus {
        let nodes = tree.flatten()?;
        let [a, b] = sample_conference_positions(nodes.len(), spec.conf_keep, view_key(spec.seed, tree, usize::MAX))?;
        let pick = |p: &[usize]| p.iter().map(|&i| nodes[i]).collect::<Vec<_>>();
        out.push(ViewPair {
            id: tree.id.clone(),
            view_a: model.embed_nodes(&pick(&a))?.embedding,
            view_b: model.embed_nodes(&pick(&b))?.embedding,
        });
    }
    Ok(out)
}

/// Embeddings of two utterance-subset views for up to `nodes_per_conference`
/// nodes of every conference. Ids are `<conference>#<order_index>`.
pub fn node_view_pairs(model: &Model, corpus: &[ConferenceTree], spec: &ViewSpec) -> Result<Vec<ViewPair>, EvalError> {
    let mut out = Vec::new();
    for tree in corpus {
        let nodes = tree.flatten()?;
        for p in sample_nodes(
            nodes.len(),
            spec.nodes_per_conference,
            view_key(spec.seed, tree, usize::MAX),
        ) {
            let [a, b] = sample_node_views(nodes[p], spec.node_keep, view_key(spec.seed, tree, p))?;
            out.push(ViewPair {
                id: format!("{}#{}", tree.id, nodes[p].order_index),
                view_a: model.embed_node(nodes[p], Some(&a))?,
                view_b: model.embed_node(nodes[p], Some(&b))?,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCosine {
    pub id: String,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub pairs: usize,
    #[serde(rename = "retrieval@1")]
    pub retrieval_at_1: f64,
    /// Absent when there are too few views for k = 5.
    #[serde(rename = "retrieval@5")]
    pub retrieval_at_5: Option<f64>,
    pub alignment: f64,
    pub uniformity: f64,
    pub cosines: Vec<PairCosine>,
}

pub fn view_metrics(pairs: &[ViewPair]) -> Result<ViewMetrics, EvalError> {
    let (rows, pairing) = flatten_pairs(pairs);
    let retrieval_at_1 = retrieval_at_k(&rows, &pairing, 1)?;
    let retrieval_at_5 = if rows.len() > 5 {
        Some(retrieval_at_k(&rows, &pairing, 5)?)
    } else {
        None
    };
    let (alignment, uniformity) = alignment_uniformity(&rows, &pairing)?;
    let cosines = pairs
        .iter()
        .map(|p| {
            Ok(PairCosine {
                id: p.id.clone(),
                cosine: cosine_similarity(&p.view_a, &p.view_b)?,
            })
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(ViewMetrics {
        pairs: pairs.len(),
        retrieval_at_1,
        retrieval_at_5,
        alignment,
        uniformity,
        cosines,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConferenceVector {
    pub id: String,
    pub embedding: Vec<f64>,
}

/// Output of the `embed` command: full-conference embeddings plus the
/// paired views that retrieval metrics are computed on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingFile {
    pub d_embed: usize,
    /// Completed training epochs of the model that produced the file.
    pub epoch: usize,
    pub views: ViewSpec,
    pub conferences: Vec<ConferenceVector>,
    pub conference_views: Vec<ViewPair>,
    pub node_views: Vec<ViewPair>,
}

pub fn embed_corpus(
    model: &Model,
    epoch: usize,
    corpus: &[ConferenceTree],
    spec: &ViewSpec,
) -> Result<EmbeddingFile, EvalError> {
    let conferences = corpus
        .iter()
        .map(|t| {
            Ok(ConferenceVector {
                id: t.id.clone(),
                embedding: model.embed_conference(t)?.embedding,
            })
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(EmbeddingFile {
        d_embed: model.config.conf.d_embed,
        epoch,
        views: *spec,
        conferences,
        conference_views: conference_view_pairs(model, corpus, spec)?,
        node_views: node_view_pairs(model, corpus, spec)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub conference: ViewMetrics,
    pub node: ViewMetrics,
    pub explained_variance_ratio: Vec<f64>,
}

/// Metrics for both view levels and the 2-D projection CSV of the
/// conference embeddings.
pub fn evaluate(file: &EmbeddingFile) -> Result<(EvalReport, String), EvalError> {
    let vectors: Vec<Vec<f64>> = file.conferences.iter().map(|c| c.embedding.clone()).collect();
    let ids: Vec<String> = file.conferences.iter().map(|c| c.id.clone()).collect();
    let projection = pca_project(&vectors, 2)?;
    let report = EvalReport {
        conference: view_metrics(&file.conference_views)?,
        node: view_metrics(&file.node_views)?,
        explained_variance_ratio: projection.explained_variance_ratio.clone(),
    };
    Ok((report, projection_csv(&ids, &projection)))
}

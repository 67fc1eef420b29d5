use rand::seq::index::sample;
use rand::Rng;

use crate::seed;
use crate::tree::{ConferenceTree, DiscourseNode};

use super::TrainError;

/// Identifies the random streams behind one pair of views.
#[derive(Debug, Clone, Copy)]
pub struct ViewKey<'a> {
    pub seed: u64,
    pub conference_id: &'a str,
    /// Node position in temporal order; unused for conference views.
    pub index: usize,
    pub epoch: usize,
}

impl ViewKey<'_> {
    fn stream(&self, tag: &str) -> rand_chacha::ChaCha8Rng {
        seed::stream(
            self.seed,
            &[
                self.conference_id,
                &self.index.to_string(),
                &self.epoch.to_string(),
                tag,
            ],
        )
    }
}

pub(crate) fn check_keep_ratio(name: &str, rho: f64) -> Result<(), TrainError> {
    if rho > 0.0 && rho <= 1.0 {
        Ok(())
    } else {
        Err(TrainError::Config(format!("{name} must lie in (0, 1], got {rho}")))
    }
}

/// Keeps each of `len` items with probability `rho`; an empty draw becomes
/// one uniformly chosen item.
pub fn keep_subset(len: usize, rho: f64, rng: &mut impl Rng) -> Vec<usize> {
    let kept: Vec<usize> = (0..len).filter(|_| rng.gen::<f64>() < rho).collect();
    if kept.is_empty() && len > 0 {
        vec![rng.gen_range(0..len)]
    } else {
        kept
    }
}

/// Two utterance subsets of `node`, as indices into its utterance list.
pub fn sample_node_views(node: &DiscourseNode, rho: f64, key: ViewKey) -> Result<[Vec<usize>; 2], TrainError> {
    check_keep_ratio("node keep ratio", rho)?;
    let len = node.utterances().len();
    if len == 0 {
        return Err(TrainError::Config(format!(
            "node {} has no utterances",
            node.order_index
        )));
    }
    Ok([
        keep_subset(len, rho, &mut key.stream("node-view-0")),
        keep_subset(len, rho, &mut key.stream("node-view-1")),
    ])
}

/// Two node subsets of a conference with `len` nodes, as temporal positions.
pub fn sample_conference_positions(len: usize, rho: f64, key: ViewKey) -> Result<[Vec<usize>; 2], TrainError> {
    check_keep_ratio("conference keep ratio", rho)?;
    if len == 0 {
        return Err(TrainError::Config(format!(
            "conference {} has no nodes",
            key.conference_id
        )));
    }
    Ok([
        keep_subset(len, rho, &mut key.stream("conference-view-0")),
        keep_subset(len, rho, &mut key.stream("conference-view-1")),
    ])
}

/// Two node-subset trees with order preserved and `order_index` relabelled
/// to `0..k`.
pub fn sample_conference_views(
    tree: &ConferenceTree,
    rho: f64,
    key: ViewKey,
) -> Result<[ConferenceTree; 2], TrainError> {
    let nodes = tree.flatten()?;
    let [a, b] = sample_conference_positions(nodes.len(), rho, key)?;
    let build = |positions: &[usize]| ConferenceTree {
        id: tree.id.clone(),
        source: tree.source.clone(),
        nodes: positions
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let mut node = nodes[p].clone();
                node.order_index = i;
                node
            })
            .collect(),
    };
    Ok([build(&a), build(&b)])
}

/// Up to `m` node positions drawn uniformly without replacement, ascending.
pub fn sample_nodes(len: usize, m: usize, key: ViewKey) -> Vec<usize> {
    let mut picked = sample(&mut key.stream("node-pick"), len, m.min(len)).into_vec();
    picked.sort_unstable();
    picked
}

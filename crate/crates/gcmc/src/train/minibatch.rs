//! Without-replacement mini-batch sampling: an epoch is one seeded
//! permutation of the training edges, chunked into batches. Each batch
//! carries the distinct user/item rows it touches so the encoder can
//! restrict its forward pass to them.

use crate::data::RatingGraph;
use crate::encoder::BatchRows;
use crate::error::{Error, Result};
use crate::tensor::Rng;

/// One sampled batch: edge indices into `graph.edges` plus the induced
/// receiver rows (sorted, distinct).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Minibatch {
    pub edge_ids: Vec<usize>,
    pub rows: BatchRows,
}

impl Minibatch {
    /// Batch over an explicit edge subset (indices into `graph.edges`).
    pub fn from_edges(graph: &RatingGraph, edge_ids: &[usize]) -> Result<Minibatch> {
        for &e in edge_ids {
            if e >= graph.edge_count() {
                return Err(Error::InvalidConfig(format!(
                    "edge index {e} out of range for {} training edges",
                    graph.edge_count()
                )));
            }
        }
        Ok(Minibatch {
            edge_ids: edge_ids.to_vec(),
            rows: induced_rows(graph, edge_ids),
        })
    }
}

fn induced_rows(graph: &RatingGraph, edge_ids: &[usize]) -> BatchRows {
    let mut users: Vec<usize> = edge_ids
        .iter()
        .map(|&e| graph.edges[e].user as usize)
        .collect();
    users.sort_unstable();
    users.dedup();
    let mut items: Vec<usize> = edge_ids
        .iter()
        .map(|&e| graph.edges[e].item as usize)
        .collect();
    items.sort_unstable();
    items.dedup();
    BatchRows { users, items }
}

/// All batches of one epoch; their edge lists partition the graph's edges.
/// The final batch may be short when the edge count is not a multiple of
/// `batch_size`.
pub fn epoch_minibatches(
    graph: &RatingGraph,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<Minibatch>> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
    }
    if batch_size > graph.edge_count() {
        return Err(Error::InvalidConfig(format!(
            "batch_size {batch_size} exceeds the {} training edges",
            graph.edge_count()
        )));
    }
    let mut perm: Vec<usize> = (0..graph.edge_count()).collect();
    rng.shuffle(&mut perm);
    Ok(perm
        .chunks(batch_size)
        .map(|chunk| Minibatch {
            edge_ids: chunk.to_vec(),
            rows: induced_rows(graph, chunk),
        })
        .collect())
}

/// First batch of a fresh epoch permutation.
pub fn sample_minibatch(
    graph: &RatingGraph,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Minibatch> {
    Ok(epoch_minibatches(graph, batch_size, rng)?
        .into_iter()
        .next()
        .expect("at least one batch when edges exist"))
}

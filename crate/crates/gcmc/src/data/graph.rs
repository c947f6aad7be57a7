//! Per-level bipartite adjacency for the rating graph.

use std::collections::HashSet;

use crate::data::RatingDataset;
use crate::error::{Error, Result};
use crate::tensor::SparseMatrix;

/// One edge of the rating graph, in dense indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphEdge {
    pub user: u32,
    pub item: u32,
    pub level: u8,
}

/// Rating graph over a chosen subset of a dataset's triples.
///
/// `adj[r]` is the users-by-items 0/1 adjacency of level `r`; `adj_t[r]` is
/// its transpose, precomputed because message passing runs in both
/// directions every forward pass. Degrees count incident edges across all
/// levels (a node unseen in the subset has degree 0).
#[derive(Clone, Debug)]
pub struct RatingGraph {
    pub num_users: usize,
    pub num_items: usize,
    pub adj: Vec<SparseMatrix>,
    pub adj_t: Vec<SparseMatrix>,
    pub user_degrees: Vec<u32>,
    pub item_degrees: Vec<u32>,
    pub edges: Vec<GraphEdge>,
}

impl RatingGraph {
    pub fn num_levels(&self) -> usize {
        self.adj.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }
}

/// Builds the per-level adjacency structure from `include`d triple indices.
/// Edge order follows `include`; every dataset node keeps its row/column
/// even when it has no edges in the subset.
pub fn build_rating_graph(ds: &RatingDataset, include: &[usize]) -> Result<RatingGraph> {
    let num_levels = ds.num_levels();
    let mut edges = Vec::with_capacity(include.len());
    let mut seen = HashSet::with_capacity(include.len());
    let mut per_level: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); num_levels];
    let mut user_degrees = vec![0u32; ds.num_users];
    let mut item_degrees = vec![0u32; ds.num_items];

    for &idx in include {
        let t = ds
            .triples
            .get(idx)
            .copied()
            .ok_or_else(|| Error::Data(format!("triple index {idx} out of range")))?;
        if !seen.insert((t.user, t.item)) {
            return Err(Error::Data(format!(
                "duplicate edge for user {}, item {} in graph subset",
                t.user, t.item
            )));
        }
        edges.push(GraphEdge {
            user: t.user,
            item: t.item,
            level: t.level,
        });
        per_level[t.level as usize].push((t.user as usize, t.item as usize, 1.0));
        user_degrees[t.user as usize] += 1;
        item_degrees[t.item as usize] += 1;
    }

    let mut adj = Vec::with_capacity(num_levels);
    let mut adj_t = Vec::with_capacity(num_levels);
    for triplets in &per_level {
        let m = SparseMatrix::from_triplets(ds.num_users, ds.num_items, triplets)?;
        adj_t.push(m.transpose());
        adj.push(m);
    }

    Ok(RatingGraph {
        num_users: ds.num_users,
        num_items: ds.num_items,
        adj,
        adj_t,
        user_degrees,
        item_degrees,
        edges,
    })
}

//! Windowed conversation graphs.
//!
//! Each conversation yields one directed graph per modality; the topology is
//! identical across modalities, so a single [`ConvGraph`] is shared. An edge
//! (j, i) means utterance j is an attended neighbor of utterance i: node i
//! receives edges from its `past` preceding and `future` following
//! utterances, clamped at the conversation boundaries. The node's own state
//! re-enters through the updating functions, not the edge set, so there are
//! no self-loops.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("node index {index} out of range for graph with {nodes} nodes")]
    NodeOutOfRange { index: usize, nodes: usize },
}

/// Directed edge list for one conversation, grouped by destination.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConvGraph {
    num_nodes: usize,
    window: (usize, usize),
    /// (src, dst) pairs sorted by (dst, src).
    edges: Vec<(usize, usize)>,
    /// CSR offsets into `edges`: incoming edges of node i live at
    /// offsets[i]..offsets[i+1].
    #[serde(skip)]
    offsets: Vec<usize>,
}

/// Builds the context-window graph for a conversation of `m` utterances with
/// `past` backward and `future` forward neighbors per node.
pub fn build_graph(m: usize, past: usize, future: usize) -> ConvGraph {
    let mut edges = Vec::new();
    let mut offsets = Vec::with_capacity(m + 1);
    offsets.push(0);
    for dst in 0..m {
        let lo = dst.saturating_sub(past);
        let hi = (dst + future).min(m.saturating_sub(1));
        for src in lo..=hi {
            if src != dst {
                edges.push((src, dst));
            }
        }
        offsets.push(edges.len());
    }
    ConvGraph {
        num_nodes: m,
        window: (past, future),
        edges,
        offsets,
    }
}

impl ConvGraph {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn window(&self) -> (usize, usize) {
        self.window
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// All edges as (src, dst), sorted by destination then source.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Sources of the incoming edges of node `i`, in ascending order.
    pub fn neighbors_of(&self, i: usize) -> Result<Vec<usize>, GraphError> {
        if i >= self.num_nodes {
            return Err(GraphError::NodeOutOfRange {
                index: i,
                nodes: self.num_nodes,
            });
        }
        Ok(self.edges[self.offsets[i]..self.offsets[i + 1]]
            .iter()
            .map(|&(src, _)| src)
            .collect())
    }

    pub fn in_degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    /// Per-destination contiguous ranges into the edge list; the segment for
    /// node i covers its incoming edges. Used for segmented attention ops.
    pub fn incoming_segments(&self) -> Vec<(usize, usize)> {
        (0..self.num_nodes)
            .map(|i| (self.offsets[i], self.offsets[i + 1]))
            .collect()
    }

    /// Source index per edge, aligned with `edges`.
    pub fn edge_sources(&self) -> Vec<usize> {
        self.edges.iter().map(|&(src, _)| src).collect()
    }

    /// Destination index per edge, aligned with `edges`.
    pub fn edge_destinations(&self) -> Vec<usize> {
        self.edges.iter().map(|&(_, dst)| dst).collect()
    }

    /// Histogram of in-degrees as (degree, node count), ascending by degree.
    pub fn in_degree_histogram(&self) -> Vec<(usize, usize)> {
        let mut counts = std::collections::BTreeMap::new();
        for i in 0..self.num_nodes {
            *counts.entry(self.in_degree(i)).or_insert(0usize) += 1;
        }
        counts.into_iter().collect()
    }
}

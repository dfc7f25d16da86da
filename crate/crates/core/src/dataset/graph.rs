use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Which classes count as semantic positives of each other (besides the class itself).
///
/// Always symmetric and irreflexive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticNeighborGraph {
    neighbors: Vec<BTreeSet<usize>>,
}

impl SemanticNeighborGraph {
    /// Builds a graph from an undirected edge list.
    pub fn from_edges(class_count: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut neighbors = vec![BTreeSet::new(); class_count];
        for &(a, b) in edges {
            if a >= class_count || b >= class_count {
                return Err(Error::InvalidArgument(format!(
                    "edge ({a}, {b}) references a class outside [0, {class_count})"
                )));
            }
            if a == b {
                return Err(Error::InvalidArgument(format!("self-loop on class {a}")));
            }
            neighbors[a].insert(b);
            neighbors[b].insert(a);
        }
        Ok(Self { neighbors })
    }

    /// No neighbors at all: positives are same-class samples only.
    pub fn class_only(class_count: usize) -> Self {
        Self {
            neighbors: vec![BTreeSet::new(); class_count],
        }
    }

    /// Digits 0..9 on a cycle: each digit neighbors its predecessor and successor, 9 wraps to 0.
    pub fn digits() -> Self {
        let edges: Vec<_> = (0..10).map(|d| (d, (d + 1) % 10)).collect();
        Self::from_edges(10, &edges).expect("cycle edges are valid")
    }

    /// Chain over an increasing list of angles; adjacent entries neighbor each other.
    pub fn poses(angles_deg: &[f64]) -> Result<Self> {
        if angles_deg.is_empty() {
            return Err(Error::InvalidArgument("pose graph needs at least one angle".into()));
        }
        for w in angles_deg.windows(2) {
            if w[1] == w[0] {
                return Err(Error::InvalidArgument(format!("duplicate pose angle {}", w[0])));
            }
            if !(w[1] > w[0]) {
                return Err(Error::InvalidArgument(format!(
                    "pose angles must be strictly increasing ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        let edges: Vec<_> = (1..angles_deg.len()).map(|i| (i - 1, i)).collect();
        Self::from_edges(angles_deg.len(), &edges)
    }

    pub fn class_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, class: usize) -> &BTreeSet<usize> {
        &self.neighbors[class]
    }

    pub fn degree(&self, class: usize) -> usize {
        self.neighbors[class].len()
    }

    pub fn are_neighbors(&self, a: usize, b: usize) -> bool {
        self.neighbors.get(a).is_some_and(|n| n.contains(&b))
    }

    /// Same class or graph neighbors.
    pub fn is_positive(&self, anchor: usize, other: usize) -> bool {
        anchor == other || self.are_neighbors(anchor, other)
    }
}

/// The 10-digit cycle graph.
pub fn build_digit_neighbor_graph() -> SemanticNeighborGraph {
    SemanticNeighborGraph::digits()
}

/// The pose chain graph over `angles` (degrees, strictly increasing).
pub fn build_pose_neighbor_graph(angles: &[f64]) -> Result<SemanticNeighborGraph> {
    SemanticNeighborGraph::poses(angles)
}

use std::collections::HashSet;

use crate::error::{Error, Result};

/// Undirected territory graph. Vertices are 0-based internally; every edge is
/// stored as `(d1, d2)` with `d1 < d2`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpiGraph {
    num_vertices: usize,
    edges: Vec<(usize, usize)>,
    // per vertex: (edge index, +1 if the vertex is the first endpoint else -1)
    incidence: Vec<Vec<(usize, f64)>>,
    territories: Option<Vec<String>>,
}

impl EpiGraph {
    /// Build from 0-based edges. Edge orientation is normalized to `d1 < d2`;
    /// self-loops, duplicates and out-of-range vertices are rejected.
    pub fn new(num_vertices: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut stored = Vec::new();
        for (a, b) in edges {
            if a >= num_vertices || b >= num_vertices {
                return Err(Error::Graph(format!(
                    "edge ({}, {}) references a vertex outside 1..={num_vertices}",
                    a + 1,
                    b + 1
                )));
            }
            if a == b {
                return Err(Error::Graph(format!("self-loop on vertex {}", a + 1)));
            }
            let e = (a.min(b), a.max(b));
            if !seen.insert(e) {
                return Err(Error::Graph(format!("duplicate edge ({}, {})", e.0 + 1, e.1 + 1)));
            }
            stored.push(e);
        }
        let mut incidence = vec![Vec::new(); num_vertices];
        for (k, &(a, b)) in stored.iter().enumerate() {
            incidence[a].push((k, 1.0));
            incidence[b].push((k, -1.0));
        }
        Ok(EpiGraph { num_vertices, edges: stored, incidence, territories: None })
    }

    /// Graph with `num_vertices` isolated vertices.
    pub fn empty(num_vertices: usize) -> Self {
        EpiGraph::new(num_vertices, std::iter::empty()).expect("edgeless graph is valid")
    }

    /// Attach territory identifiers, one per vertex in vertex order.
    pub fn with_territories(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.num_vertices {
            return Err(Error::Graph(format!("{} territory names for {} vertices", names.len(), self.num_vertices)));
        }
        let unique: HashSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(Error::Graph("duplicate territory names".into()));
        }
        self.territories = Some(names);
        Ok(self)
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn territories(&self) -> Option<&[String]> {
        self.territories.as_deref()
    }

    /// Edges incident to `vertex` with the sign the vertex carries in `G`.
    pub fn incident(&self, vertex: usize) -> &[(usize, f64)] {
        &self.incidence[vertex]
    }

    pub fn degree(&self, vertex: usize) -> usize {
        self.incidence[vertex].len()
    }

    pub fn max_degree(&self) -> usize {
        self.incidence.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Induced subgraph on `keep` (vertex indices in the new order).
    pub fn subgraph(&self, keep: &[usize]) -> Result<Self> {
        let mut position = vec![None; self.num_vertices];
        for (new, &old) in keep.iter().enumerate() {
            if old >= self.num_vertices {
                return Err(Error::Graph(format!("vertex {} out of range", old + 1)));
            }
            position[old] = Some(new);
        }
        let edges = self.edges.iter().filter_map(|&(a, b)| match (position[a], position[b]) {
            (Some(x), Some(y)) => Some((x, y)),
            _ => None,
        });
        let mut g = EpiGraph::new(keep.len(), edges.collect::<Vec<_>>())?;
        if let Some(names) = &self.territories {
            g.territories = Some(keep.iter().map(|&i| names[i].clone()).collect());
        }
        Ok(g)
    }
}

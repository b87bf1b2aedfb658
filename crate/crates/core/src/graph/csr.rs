use std::collections::VecDeque;

use super::GraphError;

/// Immutable simple undirected graph in CSR form.
///
/// Every undirected edge is stored twice (once per endpoint), neighbour
/// lists are sorted and duplicate-free, and self-loops are never stored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
}

/// Counts of input pairs that did not become edges.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BuildStats {
    pub self_loops_dropped: usize,
    pub duplicates_merged: usize,
}

impl Graph {
    /// Symmetrises and deduplicates `pairs` over `num_nodes` vertices.
    pub fn from_edges(
        num_nodes: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<(Self, BuildStats), GraphError> {
        let mut stats = BuildStats::default();
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); num_nodes];
        let mut seen_pairs = 0usize;
        for (u, v) in pairs {
            for id in [u, v] {
                if id >= num_nodes {
                    return Err(GraphError::NodeOutOfRange { id, num_nodes });
                }
            }
            if u == v {
                stats.self_loops_dropped += 1;
                continue;
            }
            seen_pairs += 1;
            adj[u].push(v);
            adj[v].push(u);
        }
        let mut offsets = Vec::with_capacity(num_nodes + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for mut list in adj {
            list.sort_unstable();
            list.dedup();
            neighbors.extend_from_slice(&list);
            offsets.push(neighbors.len());
        }
        let g = Self { offsets, neighbors };
        stats.duplicates_merged = seen_pairs - g.num_edges();
        Ok((g, stats))
    }

    /// Builds from raw CSR arrays after validating every structural invariant.
    pub fn from_csr(offsets: Vec<usize>, neighbors: Vec<usize>) -> Result<Self, GraphError> {
        let g = Self { offsets, neighbors };
        g.validate()?;
        Ok(g)
    }

    /// Checks offsets, ordering, self-loops and symmetry.
    pub fn validate(&self) -> Result<(), GraphError> {
        let bad = |msg: String| Err(GraphError::Validation(msg));
        if self.offsets.first() != Some(&0) || self.offsets.last() != Some(&self.neighbors.len()) {
            return bad("offsets must start at 0 and end at the neighbour count".into());
        }
        if self.offsets.windows(2).any(|w| w[0] > w[1]) {
            return bad("offsets must be non-decreasing".into());
        }
        let n = self.num_nodes();
        for u in 0..n {
            let nbrs = self.neighbors(u);
            if nbrs.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("neighbour list of {u} is not strictly increasing"));
            }
            for &v in nbrs {
                if v >= n {
                    return Err(GraphError::NodeOutOfRange { id: v, num_nodes: n });
                }
                if v == u {
                    return bad(format!("self-loop at {u}"));
                }
                if !self.has_edge(v, u) {
                    return bad(format!("edge {u}->{v} has no reverse"));
                }
            }
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn neighbor_array(&self) -> &[usize] {
        &self.neighbors
    }

    #[inline]
    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.neighbors[self.offsets[u]..self.offsets[u + 1]]
    }

    #[inline]
    pub fn degree(&self, u: usize) -> usize {
        self.offsets[u + 1] - self.offsets[u]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    /// Each undirected edge once, as `(u, v)` with `u < v`, in CSR order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes()).flat_map(move |u| {
            self.neighbors(u).iter().copied().filter(move |&v| u < v).map(move |v| (u, v))
        })
    }

    /// Hop distance from `source` to every node, `None` when unreachable or
    /// farther than `max_depth`.
    pub fn bfs_distances(&self, source: usize, max_depth: Option<usize>) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.num_nodes()];
        let mut queue = VecDeque::new();
        dist[source] = Some(0);
        queue.push_back(source);
        while let Some(u) = queue.pop_front() {
            let d = dist[u].expect("queued nodes have a distance");
            if max_depth.is_some_and(|m| d >= m) {
                continue;
            }
            for &v in self.neighbors(u) {
                if dist[v].is_none() {
                    dist[v] = Some(d + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Connected component id per node, numbered in order of smallest member.
    pub fn components(&self) -> Vec<usize> {
        let n = self.num_nodes();
        let mut comp = vec![usize::MAX; n];
        let mut next = 0;
        let mut stack = Vec::new();
        for s in 0..n {
            if comp[s] != usize::MAX {
                continue;
            }
            comp[s] = next;
            stack.push(s);
            while let Some(u) = stack.pop() {
                for &v in self.neighbors(u) {
                    if comp[v] == usize::MAX {
                        comp[v] = next;
                        stack.push(v);
                    }
                }
            }
            next += 1;
        }
        comp
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dedups_and_drops_self_loops() {
        let (g, stats) = Graph::from_edges(2, [(0, 1), (1, 0), (1, 1)]).unwrap();
        assert_eq!(g.num_edges(), 1);
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.neighbors(1), &[0]);
        assert_eq!(stats.self_loops_dropped, 1);
        assert_eq!(stats.duplicates_merged, 1);
    }

    #[test]
    fn triangle_offsets() {
        let (g, _) = Graph::from_edges(3, [(0, 1), (1, 2), (0, 2)]).unwrap();
        assert_eq!(g.offsets(), &[0, 2, 4, 6]);
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn out_of_range_ids_fail() {
        assert_eq!(
            Graph::from_edges(2, [(0, 5)]).unwrap_err(),
            GraphError::NodeOutOfRange { id: 5, num_nodes: 2 }
        );
    }

    #[test]
    fn from_csr_rejects_asymmetry() {
        assert!(Graph::from_csr(vec![0, 1, 1], vec![1]).is_err());
        assert!(Graph::from_csr(vec![0, 1, 2], vec![1, 0]).is_ok());
    }
}

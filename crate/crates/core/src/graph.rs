//! Region structure shared by every table in the crate.
//!
//! Regions are ordered with all node regions first (region `i` is variable
//! `i`) followed by the pairwise regions. Every per-region table (potentials,
//! pseudomarginals, loss) is stored flat, using [`RegionGraph::table_range`]
//! to locate a region's slice. Pairwise configurations are indexed as
//! `L * y_i + y_j` where `(i, j)` is the edge's variable order.

use std::ops::Range;

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Node(usize),
    Edge(usize, usize),
}

impl Region {
    pub fn arity(&self) -> usize {
        match self {
            Region::Node(_) => 1,
            Region::Edge(..) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionGraph {
    num_vars: usize,
    num_labels: usize,
    regions: Vec<Region>,
    children_of: Vec<Vec<usize>>,
    parents_of: Vec<Vec<usize>>,
    /// For each node, the `(edge index, slot)` pairs of the edges containing it.
    /// `slot` is 0 when the node is the edge's first variable.
    node_links: Vec<Vec<(usize, usize)>>,
    table_offsets: Vec<usize>,
    grid_dims: Option<(usize, usize)>,
}

impl RegionGraph {
    /// 4-connected `width x height` grid. Nodes are row-major; edges list,
    /// row by row, each pixel's right neighbor then its down neighbor.
    pub fn grid(width: usize, height: usize, num_labels: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid(format!(
                "grid dimensions must be positive, got {width}x{height}"
            )));
        }
        let mut edges = Vec::with_capacity(width * (height - 1) + height * (width - 1));
        for r in 0..height {
            for c in 0..width {
                let i = r * width + c;
                if c + 1 < width {
                    edges.push((i, i + 1));
                }
                if r + 1 < height {
                    edges.push((i, i + width));
                }
            }
        }
        let mut graph = Self::from_edges(width * height, num_labels, &edges)?;
        graph.grid_dims = Some((width, height));
        Ok(graph)
    }

    /// Pairwise graph with the given edges, in the given order.
    pub fn from_edges(num_vars: usize, num_labels: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if num_vars == 0 {
            return Err(invalid("graph needs at least one variable"));
        }
        if num_labels < 2 {
            return Err(invalid(format!("need at least 2 labels, got {num_labels}")));
        }
        let mut seen = std::collections::HashSet::with_capacity(edges.len());
        for &(i, j) in edges {
            if i >= num_vars || j >= num_vars {
                return Err(Error::OutOfRange { index: i.max(j), len: num_vars });
            }
            if i == j {
                return Err(invalid(format!("self-loop on variable {i}")));
            }
            if !seen.insert((i.min(j), i.max(j))) {
                return Err(invalid(format!("duplicate edge ({i}, {j})")));
            }
        }

        let num_regions = num_vars + edges.len();
        let mut regions = Vec::with_capacity(num_regions);
        regions.extend((0..num_vars).map(Region::Node));
        regions.extend(edges.iter().map(|&(i, j)| Region::Edge(i, j)));

        let mut children_of = vec![Vec::new(); num_regions];
        let mut parents_of = vec![Vec::new(); num_regions];
        let mut node_links = vec![Vec::new(); num_vars];
        for (k, &(i, j)) in edges.iter().enumerate() {
            let alpha = num_vars + k;
            children_of[alpha] = vec![i, j];
            parents_of[i].push(alpha);
            parents_of[j].push(alpha);
            node_links[i].push((k, 0));
            node_links[j].push((k, 1));
        }

        let mut table_offsets = Vec::with_capacity(num_regions + 1);
        let mut offset = 0;
        for region in &regions {
            table_offsets.push(offset);
            offset += num_labels.pow(region.arity() as u32);
        }
        table_offsets.push(offset);

        Ok(Self {
            num_vars,
            num_labels,
            regions,
            children_of,
            parents_of,
            node_links,
            table_offsets,
            grid_dims: None,
        })
    }

    /// Builds a graph from region scopes. Singleton scopes are implied for
    /// every variable and may be omitted; scopes of more than two variables
    /// are rejected.
    pub fn from_scopes(num_vars: usize, num_labels: usize, scopes: &[Vec<usize>]) -> Result<Self> {
        let mut edges = Vec::new();
        for scope in scopes {
            match scope.as_slice() {
                [] => return Err(invalid("empty region scope")),
                [i] if *i < num_vars => {}
                [i] => return Err(Error::OutOfRange { index: *i, len: num_vars }),
                [i, j] => edges.push((*i, *j)),
                _ => {
                    return Err(invalid(format!(
                        "only node and pairwise regions are supported, got a scope of size {}",
                        scope.len()
                    )))
                }
            }
        }
        Self::from_edges(num_vars, num_labels, &edges)
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn num_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn num_edges(&self) -> usize {
        self.regions.len() - self.num_vars
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn region(&self, alpha: usize) -> Region {
        self.regions[alpha]
    }

    pub fn is_node(&self, alpha: usize) -> bool {
        alpha < self.num_vars
    }

    /// Region index of edge `k`.
    pub fn edge_region(&self, k: usize) -> usize {
        self.num_vars + k
    }

    pub fn edge_vars(&self, k: usize) -> (usize, usize) {
        match self.regions[self.num_vars + k] {
            Region::Edge(i, j) => (i, j),
            Region::Node(_) => unreachable!("edge regions follow node regions"),
        }
    }

    pub fn children_of(&self, alpha: usize) -> &[usize] {
        &self.children_of[alpha]
    }

    pub fn parents_of(&self, alpha: usize) -> &[usize] {
        &self.parents_of[alpha]
    }

    pub(crate) fn node_links(&self, node: usize) -> &[(usize, usize)] {
        &self.node_links[node]
    }

    pub fn grid_dims(&self) -> Option<(usize, usize)> {
        self.grid_dims
    }

    /// `L^{|alpha|}`.
    pub fn config_count(&self, alpha: usize) -> Result<usize> {
        if alpha >= self.regions.len() {
            return Err(Error::OutOfRange { index: alpha, len: self.regions.len() });
        }
        Ok(self.table_offsets[alpha + 1] - self.table_offsets[alpha])
    }

    /// Total length of a flat per-region table.
    pub fn table_len(&self) -> usize {
        self.table_offsets[self.regions.len()]
    }

    pub fn table_range(&self, alpha: usize) -> Range<usize> {
        self.table_offsets[alpha]..self.table_offsets[alpha + 1]
    }

    /// Total length of a flat message vector: two child messages per edge.
    pub fn message_len(&self) -> usize {
        self.num_edges() * 2 * self.num_labels
    }

    pub fn message_range(&self, edge: usize, slot: usize) -> Range<usize> {
        let start = (2 * edge + slot) * self.num_labels;
        start..start + self.num_labels
    }

    /// Configuration index of `labeling` restricted to region `alpha`.
    pub fn config_of(&self, alpha: usize, labeling: &[usize]) -> usize {
        match self.regions[alpha] {
            Region::Node(i) => labeling[i],
            Region::Edge(i, j) => self.num_labels * labeling[i] + labeling[j],
        }
    }

    /// True when the pairwise graph has no cycles (a forest).
    pub fn is_forest(&self) -> bool {
        let mut parent: Vec<usize> = (0..self.num_vars).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for k in 0..self.num_edges() {
            let (i, j) = self.edge_vars(k);
            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
            if ri == rj {
                return false;
            }
            parent[ri] = rj;
        }
        true
    }

    pub(crate) fn check_labeling(&self, labeling: &[usize]) -> Result<()> {
        if labeling.len() != self.num_vars {
            return Err(crate::error::mismatch(format!(
                "labeling has {} entries, graph has {} variables",
                labeling.len(),
                self.num_vars
            )));
        }
        if let Some(&bad) = labeling.iter().find(|&&y| y >= self.num_labels) {
            return Err(Error::OutOfRange { index: bad, len: self.num_labels });
        }
        Ok(())
    }
}

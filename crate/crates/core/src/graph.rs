//! Multi-scale tissue graphs.
//!
//! Patches are nodes. Each scale gets a spatial K-nearest-neighbor graph,
//! normalized as `D̃^{-1/2} (A + I) D̃^{-1/2}`, and every HIGH patch is tied
//! to the LOW patch whose footprint contains its center.

use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ingest::{Scale, SlideBundle};
use crate::sparse::{SparseAdjacency, SparseMatrix};

/// Default neighbor count for both scales.
pub const DEFAULT_K: usize = 8;

/// Undirected edges `(i, j)` with `i < j`, sorted.
pub type EdgeSet = Vec<(usize, usize)>;

/// Symmetrized K-NN graph under Euclidean distance.
///
/// Each node links to its `k` nearest other nodes (distance ties go to the
/// lower index); the directed edges are then merged into an undirected set,
/// so a node can end up with more than `k` neighbors.
pub fn knn_edges(coords: &[(f64, f64)], k: usize) -> Result<EdgeSet> {
    let n = coords.len();
    if n < k + 1 {
        return Err(Error::Invalid(format!(
            "K-NN with K = {k} needs at least {} nodes, got {n}",
            k + 1
        )));
    }
    if coords.iter().any(|(x, y)| !(x.is_finite() && y.is_finite())) {
        return Err(Error::Invalid("non-finite node coordinates".into()));
    }
    let mut edges = Vec::with_capacity(n * k);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (i, &(xi, yi)) in coords.iter().enumerate() {
        scratch.clear();
        scratch.extend(
            coords
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, &(xj, yj))| ((xi - xj).powi(2) + (yi - yj).powi(2), j)),
        );
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < scratch.len() {
            scratch.select_nth_unstable_by(k, cmp);
        }
        for &(_, j) in &scratch[..k] {
            edges.push((i.min(j), i.max(j)));
        }
    }
    edges.sort_unstable();
    edges.dedup();
    Ok(edges)
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` where `D̃` is the degree matrix of `A + I`.
pub fn normalize_adjacency(edges: &[(usize, usize)], n: usize) -> Result<SparseAdjacency> {
    let mut degree = vec![1.0f64; n];
    for &(i, j) in edges {
        if i == j || i >= n || j >= n {
            return Err(Error::Invalid(format!("invalid edge ({i}, {j}) for {n} nodes")));
        }
        degree[i] += 1.0;
        degree[j] += 1.0;
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut triplets = Vec::with_capacity(n + 2 * edges.len());
    for (i, s) in inv_sqrt.iter().enumerate() {
        triplets.push((i, i, s * s));
    }
    for &(i, j) in edges {
        let v = inv_sqrt[i] * inv_sqrt[j];
        triplets.push((i, j, v));
        triplets.push((j, i, v));
    }
    SparseMatrix::from_triplets(n, n, triplets)
}

/// A HIGH node whose center lies in no LOW footprint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UncontainedPatch(pub usize);

impl fmt::Display for UncontainedPatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HIGH node {} lies outside every LOW footprint", self.0)
    }
}

/// Maps each HIGH center to the LOW node whose square footprint
/// `[x ± w] × [y ± w]` contains it. Boundary points go to the lower LOW
/// index.
pub fn cross_scale_edges(
    low: &[(f64, f64)],
    half_width: f64,
    high: &[(f64, f64)],
) -> std::result::Result<Vec<usize>, UncontainedPatch> {
    high.iter()
        .enumerate()
        .map(|(h, &(x, y))| {
            low.iter()
                .position(|&(lx, ly)| (x - lx).abs() <= half_width && (y - ly).abs() <= half_width)
                .ok_or(UncontainedPatch(h))
        })
        .collect()
}

/// Directed message-passing edges of a graph: one `(src → dst)` entry per
/// non-zero of the normalized adjacency, self-loops included, grouped by
/// destination.
#[derive(Debug, Clone, PartialEq)]
pub struct GatEdges {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

impl GatEdges {
    fn from_adjacency(adj: &SparseAdjacency) -> Self {
        let (dst, src) = adj.triplets().map(|(r, c, _)| (r, c)).unzip();
        GatEdges { src, dst }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleGraph {
    pub n_low: usize,
    pub n_high: usize,
    pub adj_low: SparseAdjacency,
    pub adj_high: SparseAdjacency,
    /// LOW parent of each HIGH node.
    pub parent: Vec<usize>,
    /// HIGH children of each LOW node, ascending.
    pub children: Vec<Vec<usize>>,
    pub types_high: Vec<u8>,
    pub coords_low: Vec<(f64, f64)>,
    pub coords_high: Vec<(f64, f64)>,
    pub patch_ids_low: Vec<i64>,
    pub patch_ids_high: Vec<i64>,
    pub edges_low: GatEdges,
    pub edges_high: GatEdges,
    /// `n_low × n_high` operator averaging each LOW node's children.
    pub child_mean: SparseMatrix,
}

impl MultiScaleGraph {
    /// Assembles a graph from already computed parts.
    pub fn from_parts(
        coords_low: Vec<(f64, f64)>,
        coords_high: Vec<(f64, f64)>,
        adj_low: SparseAdjacency,
        adj_high: SparseAdjacency,
        parent: Vec<usize>,
        types_high: Vec<u8>,
    ) -> Result<Self> {
        let n_low = coords_low.len();
        let n_high = coords_high.len();
        if adj_low.rows() != n_low || adj_high.rows() != n_high || parent.len() != n_high || types_high.len() != n_high {
            return Err(Error::Invalid("graph parts disagree on node counts".into()));
        }
        let mut children = vec![Vec::new(); n_low];
        for (h, &p) in parent.iter().enumerate() {
            if p >= n_low {
                return Err(Error::Invalid(format!("HIGH node {h} has parent {p} out of range")));
            }
            children[p].push(h);
        }
        let triplets = children
            .iter()
            .enumerate()
            .flat_map(|(v, c)| {
                let w = 1.0 / c.len() as f64;
                c.iter().map(move |&h| (v, h, w))
            })
            .collect();
        let child_mean = SparseMatrix::from_triplets(n_low, n_high, triplets)?;
        Ok(MultiScaleGraph {
            n_low,
            n_high,
            edges_low: GatEdges::from_adjacency(&adj_low),
            edges_high: GatEdges::from_adjacency(&adj_high),
            adj_low,
            adj_high,
            parent,
            children,
            types_high,
            patch_ids_low: (0..n_low as i64).collect(),
            patch_ids_high: (0..n_high as i64).collect(),
            coords_low,
            coords_high,
            child_mean,
        })
    }

    /// Writes `adj_low.csv`, `adj_high.csv` (`row,col,value`) and
    /// `parents.csv` (`high_id,low_id`, patch ids) into `dir`.
    pub fn write_dump(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, body: String| -> Result<()> {
            let path = dir.join(name);
            let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(body.as_bytes()).map_err(|e| Error::io(&path, e))
        };
        for (name, adj) in [("adj_low.csv", &self.adj_low), ("adj_high.csv", &self.adj_high)] {
            let mut body = String::from("row,col,value\n");
            for (r, c, v) in adj.triplets() {
                body.push_str(&format!("{r},{c},{v}\n"));
            }
            write(name, body)?;
        }
        let mut body = String::from("high_id,low_id\n");
        for (h, &p) in self.parent.iter().enumerate() {
            body.push_str(&format!("{},{}\n", self.patch_ids_high[h], self.patch_ids_low[p]));
        }
        write("parents.csv", body)
    }
}

/// Builds both K-NN graphs and the cross-scale map for one slide.
pub fn build_multiscale(
    slide: &SlideBundle,
    k_low: usize,
    k_high: usize,
    half_width: f64,
) -> Result<MultiScaleGraph> {
    let coords_low = slide.coords(Scale::Low);
    let coords_high = slide.coords(Scale::High);
    let adj_low = normalize_adjacency(&knn_edges(&coords_low, k_low)?, coords_low.len())?;
    let adj_high = normalize_adjacency(&knn_edges(&coords_high, k_high)?, coords_high.len())?;
    let parent = cross_scale_edges(&coords_low, half_width, &coords_high).map_err(|u| {
        Error::Uncontained {
            slide: slide.slide_id.clone(),
            patch_id: slide.patches_at(Scale::High).nth(u.0).map_or(-1, |p| p.patch_id),
        }
    })?;
    let mut graph = MultiScaleGraph::from_parts(
        coords_low,
        coords_high,
        adj_low,
        adj_high,
        parent,
        slide.types_high(),
    )?;
    graph.patch_ids_low = slide.patches_at(Scale::Low).map(|p| p.patch_id).collect();
    graph.patch_ids_high = slide.patches_at(Scale::High).map(|p| p.patch_id).collect();
    Ok(graph)
}

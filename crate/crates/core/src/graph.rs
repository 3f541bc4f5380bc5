//! Directed kNN graphs over sparse frames, stored in CSR form.
//!
//! Row `i` lists the source nodes `j` of edges `j -> i`, i.e. the
//! neighbourhood that node `i` aggregates from. Every row starts with the
//! self-loop `i -> i`.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::SparseFrame;
use crate::spatial::{brute_force_knn, KdTree};
use crate::tensor::{Segments, Tensor};

pub const FEATURE_DIM: usize = 4;

/// Per-node input features `[x, y, z_masked, beam / (B - 1)]`, shape `[N, 4]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeFeatures(Tensor);

impl NodeFeatures {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn num_nodes(&self) -> usize {
        self.0.rows()
    }

    pub fn row(&self, i: usize) -> [f64; FEATURE_DIM] {
        let r = self.0.row(i);
        [r[0], r[1], r[2], r[3]]
    }

    /// Copy with the masked-z column zeroed at `rows`.
    pub fn with_z_zeroed(&self, rows: &[usize]) -> NodeFeatures {
        let mut t = self.0.clone();
        let data = t.data_mut();
        for &i in rows {
            data[i * FEATURE_DIM + 2] = 0.0;
        }
        NodeFeatures(t)
    }

    /// Wraps an `[N, 4]` tensor.
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 2 || t.cols() != FEATURE_DIM {
            return Err(Error::shape("NodeFeatures", format!("{:?}", t.shape())));
        }
        Ok(Self(t))
    }
}

pub fn build_features(frame: &SparseFrame) -> NodeFeatures {
    let denom = (frame.num_beams().max(2) - 1) as f64;
    let beams = frame.beams();
    let mut data = Vec::with_capacity(frame.len() * FEATURE_DIM);
    for i in 0..frame.len() {
        let [x, y] = frame.xy(i);
        data.extend_from_slice(&[x, y, frame.z_masked[i], beams[i] as f64 / denom]);
    }
    NodeFeatures(Tensor::new(vec![frame.len(), FEATURE_DIM], data).expect("feature shape"))
}

/// Metric used to pick neighbours.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnnSpace {
    /// Euclidean distance over `(x, y)`.
    #[default]
    Planar,
    /// Euclidean distance over `(x, y, z_masked)`.
    MaskedXyz,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    row_offsets: Vec<usize>,
    neighbor_ids: Vec<usize>,
    pub features: NodeFeatures,
    segments: Segments,
    dst: Arc<[usize]>,
    src: Arc<[usize]>,
}

impl Graph {
    /// Builds a graph from explicit CSR rows. Rows must be non-empty and free
    /// of duplicates.
    pub fn from_csr(
        row_offsets: Vec<usize>,
        neighbor_ids: Vec<usize>,
        features: NodeFeatures,
    ) -> Result<Self> {
        let n = features.num_nodes();
        if row_offsets.len() != n + 1 || row_offsets.last() != Some(&neighbor_ids.len()) {
            return Err(Error::InvalidConfig(format!(
                "CSR offsets of length {} for {n} nodes and {} edges",
                row_offsets.len(),
                neighbor_ids.len()
            )));
        }
        let segments = Segments::new(row_offsets.clone())?;
        let mut dst = Vec::with_capacity(neighbor_ids.len());
        for i in 0..n {
            let row = &neighbor_ids[segments.range(i)];
            if row.is_empty() {
                return Err(Error::InvalidConfig(format!("node {i} has no neighbours")));
            }
            if let Some(&bad) = row.iter().find(|&&j| j >= n) {
                return Err(Error::InvalidConfig(format!("neighbour id {bad} >= {n}")));
            }
            let uniq: HashSet<_> = row.iter().collect();
            if uniq.len() != row.len() {
                return Err(Error::InvalidConfig(format!("duplicate neighbour in row {i}")));
            }
            dst.extend(std::iter::repeat_n(i, row.len()));
        }
        Ok(Self {
            src: neighbor_ids.clone().into(),
            dst: dst.into(),
            row_offsets,
            neighbor_ids,
            features,
            segments,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.row_offsets.len() - 1
    }

    pub fn num_edges(&self) -> usize {
        self.neighbor_ids.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn neighbor_ids(&self) -> &[usize] {
        &self.neighbor_ids
    }

    /// Sources of the edges into node `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbor_ids[self.row_offsets[i]..self.row_offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.row_offsets[i + 1] - self.row_offsets[i]
    }

    /// One segment per destination node, over the edge list.
    pub fn segments(&self) -> &Segments {
        &self.segments
    }

    /// Source node of every edge.
    pub fn edge_src(&self) -> Arc<[usize]> {
        self.src.clone()
    }

    /// Destination node of every edge.
    pub fn edge_dst(&self) -> Arc<[usize]> {
        self.dst.clone()
    }

    /// Same topology, different node features.
    pub fn with_features(&self, features: NodeFeatures) -> Result<Self> {
        if features.num_nodes() != self.num_nodes() {
            return Err(Error::shape(
                "Graph::with_features",
                format!("{} rows for {} nodes", features.num_nodes(), self.num_nodes()),
            ));
        }
        let mut g = self.clone();
        g.features = features;
        Ok(g)
    }

    /// Dumps the edge list as `src,dst,dist` with planar distances.
    pub fn write_edge_csv(&self, frame: &SparseFrame, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let mut go = || -> std::io::Result<()> {
            writeln!(w, "src,dst,dist")?;
            for i in 0..self.num_nodes() {
                for &j in self.neighbors(i) {
                    let [xi, yi] = frame.xy(i);
                    let [xj, yj] = frame.xy(j);
                    writeln!(w, "{j},{i},{}", (xi - xj).hypot(yi - yj))?;
                }
            }
            w.flush()
        };
        go().map_err(|e| Error::io(path, e))
    }
}

fn knn_positions(frame: &SparseFrame, space: KnnSpace) -> Vec<[f64; 3]> {
    (0..frame.len())
        .map(|i| {
            let [x, y] = frame.xy(i);
            match space {
                KnnSpace::Planar => [x, y, 0.0],
                KnnSpace::MaskedXyz => [x, y, frame.z_masked[i]],
            }
        })
        .collect()
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    if k >= n {
        return Err(Error::InvalidConfig(format!("k = {k} needs more than {n} nodes")));
    }
    Ok(())
}

fn assemble(frame: &SparseFrame, rows: Vec<Vec<usize>>) -> Result<Graph> {
    let mut offsets = Vec::with_capacity(rows.len() + 1);
    offsets.push(0);
    let mut ids = Vec::with_capacity(rows.iter().map(Vec::len).sum());
    for row in rows {
        ids.extend(row);
        offsets.push(ids.len());
    }
    Graph::from_csr(offsets, ids, build_features(frame))
}

/// Each node receives edges from its `k` nearest other nodes plus itself.
/// Ties are broken by the lower point index.
pub fn build_knn_graph(frame: &SparseFrame, k: usize, space: KnnSpace) -> Result<Graph> {
    let n = frame.len();
    check_k(n, k)?;
    let pos = knn_positions(frame, space);
    let tree = KdTree::new(pos.clone());
    let rows = (0..n)
        .map(|i| {
            let mut row = Vec::with_capacity(k + 1);
            row.push(i);
            row.extend(tree.knn(&pos[i], k, Some(i)).into_iter().map(|nb| nb.index));
            row
        })
        .collect();
    assemble(frame, rows)
}

/// O(N²) reference construction with the same contract as [`build_knn_graph`].
pub fn build_knn_graph_brute_force(frame: &SparseFrame, k: usize, space: KnnSpace) -> Result<Graph> {
    let n = frame.len();
    check_k(n, k)?;
    let pos = knn_positions(frame, space);
    let rows = (0..n)
        .map(|i| {
            let mut row = vec![i];
            row.extend(brute_force_knn(&pos, &pos[i], k, Some(i)).into_iter().map(|nb| nb.index));
            row
        })
        .collect();
    assemble(frame, rows)
}

fn angle_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(std::f64::consts::TAU);
    d.min(std::f64::consts::TAU - d)
}

/// Adds scan-pattern edges: an azimuth-ordered chain inside every beam and a
/// link from each point to its azimuth-nearest point on beams `b ± 1`. All
/// added edges are bidirectional; pairs already present are not duplicated.
pub fn add_beam_edges(graph: &Graph, frame: &SparseFrame) -> Result<Graph> {
    let n = graph.num_nodes();
    if frame.len() != n {
        return Err(Error::InvalidConfig(format!(
            "frame has {} points, graph {n} nodes",
            frame.len()
        )));
    }
    let beams = frame.beams();
    let azimuth: Vec<f64> = frame.cloud.points.iter().map(|p| p.azimuth()).collect();
    let mut by_beam: Vec<Vec<usize>> = vec![Vec::new(); frame.num_beams()];
    for i in 0..n {
        by_beam[beams[i]].push(i);
    }
    for members in &mut by_beam {
        members.sort_by(|&a, &b| azimuth[a].total_cmp(&azimuth[b]).then(a.cmp(&b)));
    }

    let mut rows: Vec<Vec<usize>> = (0..n).map(|i| graph.neighbors(i).to_vec()).collect();
    let mut present: Vec<HashSet<usize>> =
        rows.iter().map(|r| r.iter().copied().collect()).collect();
    let mut link = |a: usize, b: usize| {
        if a == b {
            return;
        }
        if present[b].insert(a) {
            rows[b].push(a);
        }
        if present[a].insert(b) {
            rows[a].push(b);
        }
    };

    for members in &by_beam {
        for w in members.windows(2) {
            link(w[0], w[1]);
        }
    }
    for (b, members) in by_beam.iter().enumerate() {
        for adj in [b.checked_sub(1), Some(b + 1)].into_iter().flatten() {
            let Some(other) = by_beam.get(adj) else {
                continue;
            };
            if other.is_empty() {
                continue;
            }
            for &i in members {
                let pos = other.partition_point(|&j| azimuth[j] < azimuth[i]);
                // candidates on both sides of the insertion point, with wrap-around
                let cands = [
                    other[pos % other.len()],
                    other[(pos + other.len() - 1) % other.len()],
                ];
                let best = cands
                    .into_iter()
                    .min_by(|&p, &q| {
                        angle_gap(azimuth[i], azimuth[p])
                            .total_cmp(&angle_gap(azimuth[i], azimuth[q]))
                            .then(p.cmp(&q))
                    })
                    .expect("two candidates");
                link(i, best);
            }
        }
    }
    assemble(frame, rows)
}

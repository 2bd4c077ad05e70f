//! Knowledge graph over class and object concepts.
//!
//! Nodes are ordered seen classes, then unseen classes, then objects. The
//! base adjacency comes from a weighted edge list. The current adjacency
//! starts as the base and is replaced by the attention adjacency on each
//! refresh: cosine similarity of classifier rows on a symmetrized kNN
//! support, softmax-normalized per row.

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

use crate::array::{dot, norm, Array};
use crate::datagen::Edge;
use crate::io::{self, FormatError};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("edge endpoint {0:?} is not a node")]
    UnknownNode(String),
    #[error("edge {a:?}-{b:?} has invalid weight {weight}")]
    BadWeight { a: String, b: String, weight: f64 },
    #[error("duplicate node name {0:?}")]
    DuplicateNode(String),
    #[error("row {0} has zero degree")]
    ZeroDegree(usize),
    #[error("row {0} has zero or non-finite norm; cosine similarity is undefined")]
    ZeroNorm(usize),
    #[error("expected a square {expected}x{expected} matrix, got {actual:?}")]
    NotSquare { expected: usize, actual: Vec<usize> },
    #[error("expected {expected} rows, got {actual}")]
    RowCount { expected: usize, actual: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("adjacency entry ({row}, {col}) = {value} is negative or non-finite")]
    BadEntry { row: usize, col: usize, value: f64 },
    #[error("edge list line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeGraph {
    pub node_names: Vec<String>,
    /// `N×d_c`, one row per node.
    pub node_embeddings: Array,
    pub base_adjacency: Array,
    pub adjacency: Array,
    pub n_seen: usize,
    pub n_unseen: usize,
    pub n_objects: usize,
}

impl KnowledgeGraph {
    pub fn len(&self) -> usize {
        self.node_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_names.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_seen + self.n_unseen
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.node_names.iter().position(|n| n == name)
    }

    /// `D^{-1/2} (A + I) D^{-1/2}` of the current adjacency.
    pub fn propagation_matrix(&self) -> Result<Array, GraphError> {
        let n = self.len();
        normalize_sym(&self.adjacency.add(&Array::identity(n)).expect("square"))
    }

    pub fn reset_adjacency(&mut self) {
        self.adjacency = self.base_adjacency.clone();
    }
}

/// Node name and embedding, in graph order.
pub struct GraphNode<'a> {
    pub name: &'a str,
    pub embedding: &'a [f64],
}

/// Assembles the base adjacency. Each undirected edge is written to both
/// triangles, and repeated edges keep the largest weight.
pub fn build_graph(
    nodes: &[GraphNode<'_>],
    n_seen: usize,
    n_unseen: usize,
    edges: &[Edge],
) -> Result<KnowledgeGraph, GraphError> {
    let n = nodes.len();
    let mut index = HashMap::with_capacity(n);
    for (i, node) in nodes.iter().enumerate() {
        if index.insert(node.name, i).is_some() {
            return Err(GraphError::DuplicateNode(node.name.to_owned()));
        }
    }
    let d_c = nodes.first().map_or(0, |n| n.embedding.len());
    let rows: Vec<&[f64]> = nodes.iter().map(|n| n.embedding).collect();
    let node_embeddings = Array::from_rows(&rows, d_c).map_err(|_| GraphError::RowCount {
        expected: d_c,
        actual: 0,
    })?;
    let mut adj = Array::zeros(&[n, n]);
    for e in edges {
        let &a = index
            .get(e.a.as_str())
            .ok_or_else(|| GraphError::UnknownNode(e.a.clone()))?;
        let &b = index
            .get(e.b.as_str())
            .ok_or_else(|| GraphError::UnknownNode(e.b.clone()))?;
        if !(e.weight >= 0.0 && e.weight.is_finite()) {
            return Err(GraphError::BadWeight {
                a: e.a.clone(),
                b: e.b.clone(),
                weight: e.weight,
            });
        }
        let w = adj.get(a, b).max(e.weight);
        adj.set(a, b, w);
        adj.set(b, a, w);
    }
    if n_seen + n_unseen > n {
        return Err(GraphError::RowCount {
            expected: n_seen + n_unseen,
            actual: n,
        });
    }
    Ok(KnowledgeGraph {
        node_names: nodes.iter().map(|n| n.name.to_owned()).collect(),
        node_embeddings,
        base_adjacency: adj.clone(),
        adjacency: adj,
        n_seen,
        n_unseen,
        n_objects: n - n_seen - n_unseen,
    })
}

fn square_dim(a: &Array) -> Result<usize, GraphError> {
    match a.shape() {
        [r, c] if r == c => Ok(*r),
        s => Err(GraphError::NotSquare {
            expected: s.first().copied().unwrap_or(0),
            actual: s.to_vec(),
        }),
    }
}

/// `D^{-1/2} Â D^{-1/2}` with `D_ii = Σ_j Â_ij`.
pub fn normalize_sym(a_hat: &Array) -> Result<Array, GraphError> {
    let n = square_dim(a_hat)?;
    let mut inv_sqrt = Vec::with_capacity(n);
    for i in 0..n {
        let row = a_hat.row_slice(i);
        for (j, &v) in row.iter().enumerate() {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(GraphError::BadEntry {
                    row: i,
                    col: j,
                    value: v,
                });
            }
        }
        let d: f64 = row.iter().sum();
        if d <= 0.0 {
            return Err(GraphError::ZeroDegree(i));
        }
        inv_sqrt.push(1.0 / d.sqrt());
    }
    let mut out = a_hat.clone();
    for i in 0..n {
        for j in 0..n {
            // Scale factors first, so symmetric input gives exactly symmetric output.
            out.set(i, j, a_hat.get(i, j) * (inv_sqrt[i] * inv_sqrt[j]));
        }
    }
    Ok(out)
}

/// Indices of the `k` rows most cosine-similar to row `i`, excluding `i`.
/// Ties go to the lower index.
fn nearest(cos: &Array, i: usize, k: usize) -> Vec<usize> {
    let n = cos.rows();
    let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
    order.sort_by(|&a, &b| cos.get(i, b).total_cmp(&cos.get(i, a)).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Full pairwise cosine matrix of the rows of `w`.
pub fn cosine_matrix(w: &Array) -> Result<Array, GraphError> {
    let n = w.rows();
    let norms: Vec<f64> = (0..n).map(|i| norm(w.row_slice(i))).collect();
    if let Some(i) = norms.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(GraphError::ZeroNorm(i));
    }
    let mut out = Array::zeros(&[n, n]);
    for i in 0..n {
        for j in i..n {
            let c = dot(w.row_slice(i), w.row_slice(j)) / (norms[i] * norms[j]);
            out.set(i, j, c);
            out.set(j, i, c);
        }
    }
    Ok(out)
}

/// The kNN support: `mask[i][j]` is set when `j ∈ N_k(i)` or `i ∈ N_k(j)`.
pub fn knn_support(cos: &Array, k: usize) -> Vec<Vec<bool>> {
    let n = cos.rows();
    let mut mask = vec![vec![false; n]; n];
    for i in 0..n {
        for j in nearest(cos, i, k) {
            mask[i][j] = true;
            mask[j][i] = true;
        }
    }
    mask
}

/// Attention coefficients: cosine similarity on the kNN support, with the
/// support returned alongside since a kept coefficient can be exactly zero.
pub fn attention_coefficients(w: &Array, k: usize) -> Result<(Array, Vec<Vec<bool>>), GraphError> {
    if k == 0 {
        return Err(GraphError::ZeroK);
    }
    let cos = cosine_matrix(w)?;
    let support = knn_support(&cos, k);
    let n = w.rows();
    let mut b = Array::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            if support[i][j] {
                b.set(i, j, cos.get(i, j));
            }
        }
    }
    Ok((b, support))
}

/// Row softmax of `b` over each row's support; rows with empty support are 0.
pub fn attention_normalize(b: &Array, support: &[Vec<bool>]) -> Array {
    let n = b.rows();
    let mut a = Array::zeros(&[n, b.cols()]);
    for i in 0..n {
        let cols: Vec<usize> = (0..b.cols()).filter(|&j| support[i][j]).collect();
        if cols.is_empty() {
            continue;
        }
        let m = cols
            .iter()
            .map(|&j| b.get(i, j))
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = cols.iter().map(|&j| (b.get(i, j) - m).exp()).sum();
        for &j in &cols {
            a.set(i, j, (b.get(i, j) - m).exp() / z);
        }
    }
    a
}

/// Replaces the current adjacency with the attention adjacency of `w`.
/// Returns the Frobenius norm of the change.
pub fn refresh_adjacency(graph: &mut KnowledgeGraph, w: &Array, k: usize) -> Result<f64, GraphError> {
    if w.rows() != graph.len() {
        return Err(GraphError::RowCount {
            expected: graph.len(),
            actual: w.rows(),
        });
    }
    let (b, support) = attention_coefficients(w, k)?;
    let a = attention_normalize(&b, &support);
    let delta = a.sub(&graph.adjacency).expect("same shape").frobenius_norm();
    graph.adjacency = a;
    Ok(delta)
}

/// Parses `a<TAB>b<TAB>weight` lines; blank lines and `#` comments skipped.
pub fn parse_edge_list(text: &str) -> Result<Vec<Edge>, GraphError> {
    let mut edges = vec![];
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let t = line.trim_end_matches('\r');
        if t.trim().is_empty() || t.trim_start().starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = t.split('\t').collect();
        let [a, b, w] = parts.as_slice() else {
            return Err(GraphError::Parse {
                line: line_no,
                detail: format!("expected 3 tab-separated fields, got {}", parts.len()),
            });
        };
        let weight: f64 = w.trim().parse().map_err(|_| GraphError::Parse {
            line: line_no,
            detail: format!("bad weight {w:?}"),
        })?;
        edges.push(Edge {
            a: (*a).to_owned(),
            b: (*b).to_owned(),
            weight,
        });
    }
    Ok(edges)
}

/// Weights are written with `{}` formatting, which round-trips `f64` exactly.
pub fn format_edge_list(edges: &[Edge]) -> String {
    let mut s = String::from("# node_a\tnode_b\tweight\n");
    for e in edges {
        s.push_str(&format!("{}\t{}\t{}\n", e.a, e.b, e.weight));
    }
    s
}

pub fn save_edge_list(path: &Path, edges: &[Edge]) -> Result<(), GraphError> {
    Ok(io::write_atomic(path, format_edge_list(edges).as_bytes())?)
}

pub fn load_edge_list(path: &Path) -> Result<Vec<Edge>, GraphError> {
    let bytes = io::read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| GraphError::Parse {
        line: 0,
        detail: "not utf-8".into(),
    })?;
    parse_edge_list(&text)
}

pub fn save_vocab(path: &Path, names: &[String]) -> Result<(), GraphError> {
    let mut s = names.join("\n");
    s.push('\n');
    Ok(io::write_atomic(path, s.as_bytes())?)
}

pub fn load_vocab(path: &Path) -> Result<Vec<String>, GraphError> {
    let bytes = io::read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| GraphError::Parse {
        line: 0,
        detail: "not utf-8".into(),
    })?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn edge(a: &str, b: &str, w: f64) -> Edge {
        Edge {
            a: a.into(),
            b: b.into(),
            weight: w,
        }
    }

    fn nodes<'a>(names: &'a [&'a str], emb: &'a [Vec<f64>]) -> Vec<GraphNode<'a>> {
        names
            .iter()
            .zip(emb)
            .map(|(n, e)| GraphNode {
                name: n,
                embedding: e,
            })
            .collect()
    }

    #[test]
    fn empty_edges_give_zero_adjacency() {
        let emb = vec![vec![1.0, 0.0]; 3];
        let g = build_graph(&nodes(&["a", "b", "c"], &emb), 1, 1, &[]).unwrap();
        assert_eq!(g.base_adjacency, Array::zeros(&[3, 3]));
        assert_eq!(g.adjacency, g.base_adjacency);
        assert_eq!(g.n_objects, 1);
    }

    #[test]
    fn duplicate_edges_keep_max() {
        let emb = vec![vec![1.0, 0.0]; 2];
        let g = build_graph(
            &nodes(&["a", "b"], &emb),
            1,
            1,
            &[edge("a", "b", 0.3), edge("b", "a", 0.7), edge("a", "b", 0.5)],
        )
        .unwrap();
        assert_eq!(g.base_adjacency.get(0, 1), 0.7);
        assert_eq!(g.base_adjacency.get(1, 0), 0.7);
    }

    #[test]
    fn bad_edges_rejected() {
        let emb = vec![vec![1.0, 0.0]; 2];
        let ns = nodes(&["a", "b"], &emb);
        assert!(matches!(
            build_graph(&ns, 1, 1, &[edge("a", "z", 1.0)]),
            Err(GraphError::UnknownNode(_))
        ));
        assert!(matches!(
            build_graph(&ns, 1, 1, &[edge("a", "b", -0.1)]),
            Err(GraphError::BadWeight { .. })
        ));
    }

    #[test]
    fn normalize_fixed_points() {
        assert_eq!(normalize_sym(&Array::identity(4)).unwrap(), Array::identity(4));
        let ones = Array::ones(&[2, 2]);
        assert!(normalize_sym(&ones)
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v - 0.5).abs() < 1e-15));
        assert!(matches!(
            normalize_sym(&Array::zeros(&[2, 2])),
            Err(GraphError::ZeroDegree(0))
        ));
    }

    #[test]
    fn identical_rows_get_unit_coefficients() {
        let w = Array::ones(&[4, 3]);
        let (b, support) = attention_coefficients(&w, 1).unwrap();
        for i in 0..4 {
            assert!(!support[i][i]);
            for j in 0..4 {
                if support[i][j] {
                    assert!((b.get(i, j) - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn orthogonal_rows_keep_support_with_zero_values() {
        let w = Array::identity(4);
        let (b, support) = attention_coefficients(&w, 1).unwrap();
        assert!(b.data().iter().all(|&v| v == 0.0));
        // Ties broken by lowest index: node i's nearest is 0 (or 1 for i = 0).
        assert!(support[0][1] && support[1][0] && support[2][0] && support[3][0]);
        let a = attention_normalize(&b, &support);
        for i in 0..4 {
            let s: f64 = a.row_slice(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_norm_row_is_named() {
        let w = Array::matrix(3, 2, vec![1., 0., 0., 0., 0., 1.]).unwrap();
        assert!(matches!(attention_coefficients(&w, 1), Err(GraphError::ZeroNorm(1))));
        assert!(matches!(attention_coefficients(&Array::identity(2), 0), Err(GraphError::ZeroK)));
    }

    #[test]
    fn masked_softmax_simple_rows() {
        let b = Array::matrix(2, 3, vec![0.0, 0.4, 0.4, 0.9, 0.0, 0.0]).unwrap();
        let support = vec![vec![false, true, true], vec![true, false, false]];
        let a = attention_normalize(&b, &support);
        assert_eq!(a.row_slice(0), &[0.0, 0.5, 0.5]);
        assert_eq!(a.row_slice(1), &[1.0, 0.0, 0.0]);
        let empty = vec![vec![false; 3]; 2];
        assert_eq!(attention_normalize(&b, &empty), Array::zeros(&[2, 3]));
    }

    #[test]
    fn refresh_saturates_and_is_idempotent() {
        let emb: Vec<Vec<f64>> = (0..5).map(|i| vec![1.0 + i as f64, (i * i) as f64 - 2.0]).collect();
        let names = ["a", "b", "c", "d", "e"];
        let mut g = build_graph(&nodes(&names, &emb), 2, 2, &[edge("a", "e", 1.0)]).unwrap();
        let w = g.node_embeddings.clone();
        refresh_adjacency(&mut g, &w, 4).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(g.adjacency.get(i, j) > 0.0, i != j);
            }
        }
        let first = g.adjacency.clone();
        let delta = refresh_adjacency(&mut g, &w, 4).unwrap();
        assert_eq!(g.adjacency, first);
        assert_eq!(delta, 0.0);
        assert_eq!(g.base_adjacency.get(0, 4), 1.0);
        assert!(refresh_adjacency(&mut g, &Array::ones(&[3, 2]), 1).is_err());
    }

    #[test]
    fn edge_list_text_round_trip() {
        let text = "# comment\n\na\tb\t0.25\nb\tc\t1e-3\n";
        let edges = parse_edge_list(text).unwrap();
        assert_eq!(edges.len(), 2);
        assert_eq!(edges[1].weight, 1e-3);
        assert_eq!(parse_edge_list(&format_edge_list(&edges)).unwrap(), edges);
        assert!(matches!(parse_edge_list("a b 1\n"), Err(GraphError::Parse { line: 1, .. })));
        assert!(matches!(parse_edge_list("a\tb\tx\n"), Err(GraphError::Parse { .. })));
    }
}

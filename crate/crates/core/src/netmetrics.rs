//! Post-hoc network measures on correlation-threshold graphs: per-node
//! transitivity, degree, and nodal efficiency (plus the graph-level
//! mean), computed on simple graphs built by thresholding Pearson
//! correlations of per-subject ROI summaries.

use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// How `roi_summary` weights the columns of a view slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SummaryWeights {
    /// Per-column sample standard deviations, normalized to sum 1.
    /// Falls back to the plain mean when every column is constant.
    #[default]
    StdWeighted,
    /// Plain mean.
    Uniform,
}

/// Collapse a multi-column view slice to one scalar per subject by a
/// weighted mean of its columns.
pub fn roi_summary(view_slice: &DMatrix<f64>, weights: SummaryWeights) -> Result<DVector<f64>> {
    let (n, m) = view_slice.shape();
    if m == 0 {
        return Err(Error::Invalid("ROI summary needs at least one column".into()));
    }
    let w = match weights {
        SummaryWeights::Uniform => vec![1.0 / m as f64; m],
        SummaryWeights::StdWeighted => {
            let stds: Vec<f64> = (0..m)
                .map(|j| {
                    if n < 2 {
                        return 0.0;
                    }
                    let col = view_slice.column(j);
                    let mean = col.mean();
                    (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0))
                        .sqrt()
                })
                .collect();
            let total: f64 = stds.iter().sum();
            if total > 0.0 {
                stds.iter().map(|s| s / total).collect()
            } else {
                vec![1.0 / m as f64; m]
            }
        }
    };
    Ok(DVector::from_fn(n, |i, _| {
        (0..m).map(|j| w[j] * view_slice[(i, j)]).sum()
    }))
}

/// Undirected simple graph: symmetric boolean adjacency, no
/// self-loops.
#[derive(Debug, Clone)]
pub struct SimpleGraph {
    labels: Vec<String>,
    adj: Vec<bool>,
    n: usize,
}

impl SimpleGraph {
    /// Empty graph on `labels.len()` nodes.
    pub fn new(labels: Vec<String>) -> Self {
        let n = labels.len();
        SimpleGraph { labels, adj: vec![false; n * n], n }
    }

    pub fn with_edges(labels: Vec<String>, edges: &[(usize, usize)]) -> Result<Self> {
        let mut g = SimpleGraph::new(labels);
        for &(a, b) in edges {
            g.add_edge(a, b)?;
        }
        Ok(g)
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Insert the undirected edge (a, b); self-loops are rejected.
    pub fn add_edge(&mut self, a: usize, b: usize) -> Result<()> {
        if a >= self.n || b >= self.n {
            return Err(Error::Invalid(format!(
                "edge ({a}, {b}) out of range for {} nodes",
                self.n
            )));
        }
        if a == b {
            return Err(Error::Invalid(format!("self-loop at node {a} rejected")));
        }
        self.adj[a * self.n + b] = true;
        self.adj[b * self.n + a] = true;
        Ok(())
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        a != b && a < self.n && b < self.n && self.adj[a * self.n + b]
    }

    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&u| self.has_edge(v, u))
    }

    pub fn n_edges(&self) -> usize {
        (0..self.n).map(|v| self.neighbors(v).count()).sum::<usize>() / 2
    }
}

/// Graph from pairwise Pearson correlations of summary columns:
/// edge (i, j) iff corr > threshold. Constant columns have undefined
/// correlations; those nodes are left isolated and their indices are
/// returned so callers can warn.
pub fn correlation_graph(
    summaries: &DMatrix<f64>,
    labels: &[String],
    threshold: f64,
) -> Result<(SimpleGraph, Vec<usize>)> {
    let (n, m) = summaries.shape();
    if m < 2 {
        return Err(Error::Invalid(format!(
            "correlation graph needs at least 2 columns, got {m}"
        )));
    }
    if labels.len() != m {
        return Err(Error::Invalid(format!(
            "{} labels for {m} columns",
            labels.len()
        )));
    }
    if n < 2 {
        return Err(Error::Invalid("correlation needs at least 2 subjects".into()));
    }
    let means: Vec<f64> = (0..m).map(|j| summaries.column(j).mean()).collect();
    let ss: Vec<f64> = (0..m)
        .map(|j| summaries.column(j).iter().map(|v| (v - means[j]).powi(2)).sum())
        .collect();
    let constant: Vec<usize> = (0..m).filter(|&j| ss[j] <= 0.0).collect();
    let mut g = SimpleGraph::new(labels.to_vec());
    for a in 0..m {
        if ss[a] <= 0.0 {
            continue;
        }
        for b in (a + 1)..m {
            if ss[b] <= 0.0 {
                continue;
            }
            let cov: f64 = (0..n)
                .map(|i| (summaries[(i, a)] - means[a]) * (summaries[(i, b)] - means[b]))
                .sum();
            let corr = cov / (ss[a] * ss[b]).sqrt();
            if corr > threshold {
                g.add_edge(a, b)?;
            }
        }
    }
    Ok((g, constant))
}

/// Number of edges incident to v.
pub fn node_degree(g: &SimpleGraph, v: usize) -> usize {
    g.neighbors(v).count()
}

/// Local clustering coefficient: edges among v's neighbors divided by
/// the number of neighbor pairs; 0 by convention when degree < 2.
pub fn node_transitivity(g: &SimpleGraph, v: usize) -> f64 {
    let nb: Vec<usize> = g.neighbors(v).collect();
    let d = nb.len();
    if d < 2 {
        return 0.0;
    }
    let mut links = 0usize;
    for i in 0..d {
        for j in (i + 1)..d {
            if g.has_edge(nb[i], nb[j]) {
                links += 1;
            }
        }
    }
    links as f64 / (d * (d - 1) / 2) as f64
}

/// BFS distances from v (usize::MAX when unreachable).
fn bfs_distances(g: &SimpleGraph, v: usize) -> Vec<usize> {
    let n = g.n_nodes();
    let mut dist = vec![usize::MAX; n];
    dist[v] = 0;
    let mut queue = std::collections::VecDeque::from([v]);
    while let Some(u) = queue.pop_front() {
        for w in g.neighbors(u) {
            if dist[w] == usize::MAX {
                dist[w] = dist[u] + 1;
                queue.push_back(w);
            }
        }
    }
    dist
}

/// Mean over u != v of 1/d(v, u) with 1/infinity = 0, distances by
/// BFS. The sum runs in node-index order so results are reproducible
/// to the bit.
pub fn nodal_efficiency(g: &SimpleGraph, v: usize) -> f64 {
    let n = g.n_nodes();
    if n < 2 {
        return 0.0;
    }
    let dist = bfs_distances(g, v);
    let mut sum = 0.0;
    for (u, &d) in dist.iter().enumerate() {
        if u != v && d != usize::MAX {
            sum += 1.0 / d as f64;
        }
    }
    sum / (n - 1) as f64
}

/// Mean of all nodal efficiencies.
pub fn global_efficiency(g: &SimpleGraph) -> f64 {
    let n = g.n_nodes();
    if n == 0 {
        return 0.0;
    }
    (0..n).map(|v| nodal_efficiency(g, v)).sum::<f64>() / n as f64
}

/// Per-node metric table as TSV: node, transitivity, degree,
/// nodal_efficiency; one row per node in label order.
pub fn metrics_tsv(g: &SimpleGraph) -> String {
    let mut out = String::from("node\ttransitivity\tdegree\tnodal_efficiency\n");
    for v in 0..g.n_nodes() {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            g.labels()[v],
            node_transitivity(g, v),
            node_degree(g, v),
            nodal_efficiency(g, v)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("n{i}")).collect()
    }

    fn random_graph(n: usize, p: f64, rng: &mut ChaCha12Rng) -> SimpleGraph {
        let mut g = SimpleGraph::new(labels(n));
        for a in 0..n {
            for b in (a + 1)..n {
                if rng.gen::<f64>() < p {
                    g.add_edge(a, b).unwrap();
                }
            }
        }
        g
    }

    #[test]
    fn roi_summary_single_column_is_identity() {
        let m = DMatrix::from_column_slice(4, 1, &[1.0, -2.0, 3.5, 0.0]);
        let s = roi_summary(&m, SummaryWeights::StdWeighted).unwrap();
        for i in 0..4 {
            assert_eq!(s[i], m[(i, 0)]);
        }
    }

    #[test]
    fn roi_summary_equal_variance_is_plain_mean() {
        let m = DMatrix::from_columns(&[
            DVector::from_vec(vec![1.0, 2.0, 3.0]),
            DVector::from_vec(vec![10.0, 11.0, 12.0]),
        ]);
        let s = roi_summary(&m, SummaryWeights::StdWeighted).unwrap();
        let u = roi_summary(&m, SummaryWeights::Uniform).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(s[i], (m[(i, 0)] + m[(i, 1)]) / 2.0, epsilon = 1e-14);
            assert_abs_diff_eq!(u[i], s[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn roi_summary_two_column_hand_formula() {
        // col A: [1, 2, 3] (std 1), col B: [10, 10, 16] (std sqrt(12))
        let m = DMatrix::from_columns(&[
            DVector::from_vec(vec![1.0, 2.0, 3.0]),
            DVector::from_vec(vec![10.0, 10.0, 16.0]),
        ]);
        let s = roi_summary(&m, SummaryWeights::StdWeighted).unwrap();
        let sd_b = 12.0f64.sqrt();
        let (wa, wb) = (1.0 / (1.0 + sd_b), sd_b / (1.0 + sd_b));
        for i in 0..3 {
            assert_abs_diff_eq!(s[i], wa * m[(i, 0)] + wb * m[(i, 1)], epsilon = 1e-14);
        }
    }

    #[test]
    fn roi_summary_all_constant_falls_back_to_mean() {
        let m = DMatrix::from_columns(&[
            DVector::from_element(3, 2.0),
            DVector::from_element(3, 4.0),
        ]);
        let s = roi_summary(&m, SummaryWeights::StdWeighted).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(s[i], 3.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn correlation_graph_threshold_above_one_is_empty() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let m = DMatrix::from_fn(20, 4, |_, _| rng.gen::<f64>());
        let (g, constant) = correlation_graph(&m, &labels(4), 1.01).unwrap();
        assert_eq!(g.n_edges(), 0);
        assert!(constant.is_empty());
    }

    #[test]
    fn correlation_graph_duplicated_columns_always_connected() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let col: Vec<f64> = (0..15).map(|_| rng.gen()).collect();
        let m = DMatrix::from_columns(&[
            DVector::from_vec(col.clone()),
            DVector::from_vec(col),
        ]);
        let (g, _) = correlation_graph(&m, &labels(2), 0.999999).unwrap();
        assert!(g.has_edge(0, 1));
    }

    #[test]
    fn correlation_graph_matches_direct_pearson() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let n = 12;
        let m = DMatrix::from_fn(n, 4, |_, _| rng.gen::<f64>() - 0.5);
        let thr = 0.2;
        let (g, _) = correlation_graph(&m, &labels(4), thr).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                if a == b {
                    continue;
                }
                // independent textbook Pearson
                let (ca, cb) = (m.column(a), m.column(b));
                let (ma, mb) = (ca.mean(), cb.mean());
                let mut num = 0.0;
                let mut va = 0.0;
                let mut vb = 0.0;
                for i in 0..n {
                    num += (ca[i] - ma) * (cb[i] - mb);
                    va += (ca[i] - ma).powi(2);
                    vb += (cb[i] - mb).powi(2);
                }
                let r = num / (va.sqrt() * vb.sqrt());
                assert_eq!(g.has_edge(a, b), r > thr, "pair ({a},{b}) r={r}");
            }
        }
    }

    #[test]
    fn correlation_graph_isolates_constant_columns() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let col: Vec<f64> = (0..10).map(|_| rng.gen()).collect();
        let m = DMatrix::from_columns(&[
            DVector::from_vec(col.clone()),
            DVector::from_element(10, 7.0),
            DVector::from_vec(col),
        ]);
        let (g, constant) = correlation_graph(&m, &labels(3), -2.0).unwrap();
        assert_eq!(constant, vec![1]);
        assert_eq!(node_degree(&g, 1), 0);
        assert!(g.has_edge(0, 2));
    }

    #[test]
    fn transitivity_triangle_and_path() {
        let tri = SimpleGraph::with_edges(labels(3), &[(0, 1), (1, 2), (0, 2)]).unwrap();
        for v in 0..3 {
            assert_eq!(node_transitivity(&tri, v), 1.0);
        }
        let path = SimpleGraph::with_edges(labels(3), &[(0, 1), (1, 2)]).unwrap();
        assert_eq!(node_transitivity(&path, 1), 0.0);
        // degree-1 endpoints use the degree < 2 convention
        assert_eq!(node_transitivity(&path, 0), 0.0);
    }

    #[test]
    fn transitivity_matches_exhaustive_triples() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..20 {
            let g = random_graph(5, 0.5, &mut rng);
            for v in 0..5 {
                // brute force: count connected pairs among neighbors
                let nb: Vec<usize> = (0..5).filter(|&u| g.has_edge(v, u)).collect();
                let d = nb.len();
                let expected = if d < 2 {
                    0.0
                } else {
                    let mut links = 0;
                    for i in 0..d {
                        for j in (i + 1)..d {
                            if g.has_edge(nb[i], nb[j]) {
                                links += 1;
                            }
                        }
                    }
                    links as f64 / (d * (d - 1) / 2) as f64
                };
                assert_eq!(node_transitivity(&g, v), expected);
            }
        }
    }

    #[test]
    fn degree_star_and_isolated() {
        let star = SimpleGraph::with_edges(labels(4), &[(0, 1), (0, 2), (0, 3)]).unwrap();
        assert_eq!(node_degree(&star, 0), 3);
        assert_eq!(node_degree(&star, 1), 1);
        let mut g = SimpleGraph::new(labels(2));
        assert_eq!(node_degree(&g, 0), 0);
        g.add_edge(0, 1).unwrap();
        assert_eq!(node_degree(&g, 0), 1);
    }

    #[test]
    fn efficiency_complete_and_disconnected() {
        let mut k4 = SimpleGraph::new(labels(4));
        for a in 0..4 {
            for b in (a + 1)..4 {
                k4.add_edge(a, b).unwrap();
            }
        }
        for v in 0..4 {
            assert_eq!(nodal_efficiency(&k4, v), 1.0);
        }
        assert_eq!(global_efficiency(&k4), 1.0);
        let empty = SimpleGraph::new(labels(3));
        for v in 0..3 {
            assert_eq!(nodal_efficiency(&empty, v), 0.0);
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)] // indexed loops mirror the matrix oracle
    fn efficiency_matches_floyd_warshall() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        for _ in 0..20 {
            let n = 6;
            let g = random_graph(n, 0.4, &mut rng);
            // Floyd-Warshall oracle
            let inf = usize::MAX / 4;
            let mut d = vec![vec![inf; n]; n];
            for v in 0..n {
                d[v][v] = 0;
                for u in 0..n {
                    if g.has_edge(v, u) {
                        d[v][u] = 1;
                    }
                }
            }
            for k in 0..n {
                for i in 0..n {
                    for j in 0..n {
                        if d[i][k] + d[k][j] < d[i][j] {
                            d[i][j] = d[i][k] + d[k][j];
                        }
                    }
                }
            }
            for v in 0..n {
                let mut sum = 0.0;
                for u in 0..n {
                    if u != v && d[v][u] < inf {
                        sum += 1.0 / d[v][u] as f64;
                    }
                }
                let expected = sum / (n - 1) as f64;
                assert_eq!(nodal_efficiency(&g, v), expected, "node {v}");
            }
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)] // node indices drive both graphs
    fn metrics_invariant_to_relabeling() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let n = 6;
        let g = random_graph(n, 0.5, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut h = SimpleGraph::new(labels(n));
        for a in 0..n {
            for b in (a + 1)..n {
                if g.has_edge(a, b) {
                    h.add_edge(perm[a], perm[b]).unwrap();
                }
            }
        }
        for v in 0..n {
            assert_eq!(node_degree(&g, v), node_degree(&h, perm[v]));
            assert_abs_diff_eq!(
                node_transitivity(&g, v),
                node_transitivity(&h, perm[v]),
                epsilon = 1e-15
            );
            assert_abs_diff_eq!(
                nodal_efficiency(&g, v),
                nodal_efficiency(&h, perm[v]),
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn adding_edges_never_decreases_degree_or_efficiency() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        for _ in 0..10 {
            let n = 6;
            let g = random_graph(n, 0.3, &mut rng);
            // pick a random non-edge
            let non_edges: Vec<(usize, usize)> = (0..n)
                .flat_map(|a| ((a + 1)..n).map(move |b| (a, b)))
                .filter(|&(a, b)| !g.has_edge(a, b))
                .collect();
            if non_edges.is_empty() {
                continue;
            }
            let &(a, b) = non_edges.choose(&mut rng).unwrap();
            let mut g2 = g.clone();
            g2.add_edge(a, b).unwrap();
            for v in 0..n {
                assert!(node_degree(&g2, v) >= node_degree(&g, v));
                assert!(nodal_efficiency(&g2, v) >= nodal_efficiency(&g, v) - 1e-15);
            }
        }
    }

    #[test]
    fn graph_rejects_self_loops_and_out_of_range() {
        let mut g = SimpleGraph::new(labels(3));
        assert!(g.add_edge(1, 1).is_err());
        assert!(g.add_edge(0, 3).is_err());
    }

    #[test]
    fn metrics_tsv_shape() {
        let g = SimpleGraph::with_edges(labels(3), &[(0, 1)]).unwrap();
        let tsv = metrics_tsv(&g);
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "node\ttransitivity\tdegree\tnodal_efficiency");
        assert!(lines[1].starts_with("n0\t"));
    }
}

//! Graph representations, adjacency normalization, and the three-way
//! skeleton partitioning into self / centripetal / centrifugal edge sets.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An unweighted graph over `N` nodes with a binary adjacency matrix.
/// Self-loops live only in normalized matrices, never in `adjacency`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSpec {
    n_nodes: usize,
    /// Row-major N×N, entries in {0,1}, zero diagonal.
    adjacency: Vec<f64>,
    undirected: bool,
}

impl GraphSpec {
    /// Validated constructor; collects all violations before failing.
    pub fn new(n_nodes: usize, rows: &[Vec<f64>], undirected: bool) -> Result<GraphSpec> {
        let g = GraphSpec::new_unchecked(n_nodes, rows, undirected)?;
        let violations = validate_graph(&g);
        if violations.is_empty() {
            Ok(g)
        } else {
            Err(Error::GraphValidation(violations))
        }
    }

    /// Structural construction only (dimensions); content checks are left
    /// to [`validate_graph`].
    pub fn new_unchecked(n_nodes: usize, rows: &[Vec<f64>], undirected: bool) -> Result<GraphSpec> {
        if n_nodes == 0 {
            return Err(Error::config("graph must have at least one node"));
        }
        if rows.len() != n_nodes || rows.iter().any(|r| r.len() != n_nodes) {
            return Err(Error::shape(format!(
                "adjacency must be {n_nodes}x{n_nodes}"
            )));
        }
        let mut adjacency = Vec::with_capacity(n_nodes * n_nodes);
        for r in rows {
            adjacency.extend_from_slice(r);
        }
        Ok(GraphSpec {
            n_nodes,
            adjacency,
            undirected,
        })
    }

    /// Undirected graph from an edge list.
    pub fn from_edges(n_nodes: usize, edges: &[(usize, usize)]) -> Result<GraphSpec> {
        if n_nodes == 0 {
            return Err(Error::config("graph must have at least one node"));
        }
        let mut adjacency = vec![0.0; n_nodes * n_nodes];
        for &(u, v) in edges {
            if u >= n_nodes || v >= n_nodes {
                return Err(Error::Index(format!(
                    "edge ({u}, {v}) out of range for {n_nodes} nodes"
                )));
            }
            if u == v {
                return Err(Error::data(format!("self-loop at node {u}")));
            }
            adjacency[u * n_nodes + v] = 1.0;
            adjacency[v * n_nodes + u] = 1.0;
        }
        Ok(GraphSpec {
            n_nodes,
            adjacency,
            undirected: true,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn undirected(&self) -> bool {
        self.undirected
    }

    pub fn adjacency(&self) -> &[f64] {
        &self.adjacency
    }

    pub fn adjacency_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n_nodes, self.n_nodes], self.adjacency.clone())
            .expect("adjacency is always N*N")
    }

    pub fn adjacency_rows(&self) -> Vec<Vec<f64>> {
        (0..self.n_nodes)
            .map(|i| self.adjacency[i * self.n_nodes..(i + 1) * self.n_nodes].to_vec())
            .collect()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adjacency[u * self.n_nodes + v] != 0.0
    }

    pub fn neighbors(&self, u: usize) -> Vec<usize> {
        (0..self.n_nodes).filter(|&v| self.has_edge(u, v)).collect()
    }

    pub fn degree(&self, u: usize) -> usize {
        self.neighbors(u).len()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for u in 0..self.n_nodes {
            for v in 0..self.n_nodes {
                if self.has_edge(u, v) && (!self.undirected || u < v) {
                    out.push((u, v));
                }
            }
        }
        out
    }
}

/// All content violations of a graph: non-binary entries, nonzero diagonal,
/// asymmetry when the undirected flag is set. Empty means valid.
pub fn validate_graph(g: &GraphSpec) -> Vec<String> {
    let n = g.n_nodes;
    let a = &g.adjacency;
    let mut violations = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let v = a[i * n + j];
            if v != 0.0 && v != 1.0 {
                violations.push(format!("non-binary entry {v} at ({i}, {j})"));
            }
        }
    }
    for i in 0..n {
        if a[i * n + i] != 0.0 {
            violations.push(format!("nonzero diagonal at {i}"));
        }
    }
    if g.undirected {
        for i in 0..n {
            for j in i + 1..n {
                if a[i * n + j] != a[j * n + i] {
                    violations.push(format!("asymmetry at ({i}, {j})"));
                }
            }
        }
    }
    violations
}

/// Symmetric normalization with self-loops added:
/// `Â = D^{-1/2} (A + I) D^{-1/2}` where `D` is the degree matrix of
/// `A + I`, so every node has degree >= 1.
pub fn normalize_adjacency(g: &GraphSpec) -> Tensor {
    Tensor::new(
        vec![g.n_nodes, g.n_nodes],
        normalize_matrix(&g.adjacency, g.n_nodes),
    )
    .expect("length always N*N")
}

/// Core of the normalization, applied to a raw (possibly directed) binary
/// matrix. Degrees are row sums of `A + I`.
pub(crate) fn normalize_matrix(a: &[f64], n: usize) -> Vec<f64> {
    let mut with_loops = a.to_vec();
    for i in 0..n {
        with_loops[i * n + i] += 1.0;
    }
    let deg: Vec<f64> = (0..n)
        .map(|i| with_loops[i * n..(i + 1) * n].iter().sum())
        .collect();
    let inv_sqrt: Vec<f64> = deg.iter().map(|&d| 1.0 / d.sqrt()).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = inv_sqrt[i] * with_loops[i * n + j] * inv_sqrt[j];
        }
    }
    out
}

/// The skeleton adjacency split into self / centripetal / centrifugal
/// partitions, plus their individually normalized forms.
#[derive(Debug, Clone)]
pub struct PartitionedAdjacency {
    /// `[A_1, A_2, A_3]`: identity pattern, edges directed into the node
    /// nearer the center, edges directed away.
    pub partitions: [Tensor; 3],
    /// `Â_p = D_p^{-1/2}(A_p + I)D_p^{-1/2}` per partition.
    pub normalized: [Tensor; 3],
    pub center_node: usize,
}

impl PartitionedAdjacency {
    pub fn n_nodes(&self) -> usize {
        self.partitions[0].shape()[0]
    }
}

/// Hop distances from `center`; unreachable nodes map to `usize::MAX`.
pub fn hop_distances(g: &GraphSpec, center: usize) -> Result<Vec<usize>> {
    if center >= g.n_nodes() {
        return Err(Error::Index(format!(
            "center node {center} out of range for {} nodes",
            g.n_nodes()
        )));
    }
    let mut dist = vec![usize::MAX; g.n_nodes()];
    dist[center] = 0;
    let mut queue = std::collections::VecDeque::from([center]);
    while let Some(u) = queue.pop_front() {
        for v in g.neighbors(u) {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    Ok(dist)
}

/// Split each undirected edge into its two directions: the direction into
/// the endpoint nearer `center` joins the centripetal partition `A_2`, the
/// other the centrifugal `A_3`. Equidistant endpoints tie-break toward the
/// lower-indexed node. `joint_distances` defaults to BFS hop counts.
pub fn partition_skeleton(
    g: &GraphSpec,
    center: usize,
    joint_distances: Option<&[usize]>,
) -> Result<PartitionedAdjacency> {
    let n = g.n_nodes();
    if center >= n {
        return Err(Error::Index(format!(
            "center node {center} out of range for {n} nodes"
        )));
    }
    let dist: Vec<usize> = match joint_distances {
        Some(d) => {
            if d.len() != n {
                return Err(Error::shape(format!(
                    "joint_distances has length {}, expected {n}",
                    d.len()
                )));
            }
            d.to_vec()
        }
        None => hop_distances(g, center)?,
    };
    // Neighbors must sit within one hop of each other; a larger gap means
    // the distance table cannot come from this graph.
    let mut bad = Vec::new();
    for (u, v) in g.edges() {
        let (du, dv) = (dist[u], dist[v]);
        if du.abs_diff(dv) > 1 {
            bad.push(format!(
                "edge ({u}, {v}) connects distances {du} and {dv}"
            ));
        }
    }
    if !bad.is_empty() {
        return Err(Error::GraphValidation(bad));
    }

    let mut a2 = vec![0.0; n * n];
    let mut a3 = vec![0.0; n * n];
    for (u, v) in g.edges() {
        // Directed entry [x][y] is the edge x→y (into y).
        let (nearer, farther) = if dist[v] < dist[u] {
            (v, u)
        } else if dist[u] < dist[v] {
            (u, v)
        } else {
            (u.min(v), u.max(v))
        };
        a2[farther * n + nearer] = 1.0;
        a3[nearer * n + farther] = 1.0;
    }
    let a1: Vec<f64> = Tensor::eye(n).values().to_vec();
    let tensor = |v: Vec<f64>| Tensor::new(vec![n, n], v).expect("N*N by construction");
    let normalized = [
        tensor(normalize_matrix(&a1, n)),
        tensor(normalize_matrix(&a2, n)),
        tensor(normalize_matrix(&a3, n)),
    ];
    Ok(PartitionedAdjacency {
        partitions: [tensor(a1), tensor(a2), tensor(a3)],
        normalized,
        center_node: center,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> GraphSpec {
        GraphSpec::from_edges(3, &[(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn validate_accepts_path() {
        assert!(validate_graph(&path3()).is_empty());
    }

    #[test]
    fn validate_flags_diagonal_nonbinary_and_asymmetry() {
        let g = GraphSpec::new_unchecked(
            2,
            &[vec![1.0, 1.0], vec![0.0, 0.0]],
            true,
        )
        .unwrap();
        let v = validate_graph(&g);
        assert!(v.iter().any(|m| m.contains("nonzero diagonal at 0")), "{v:?}");
        assert!(v.iter().any(|m| m.contains("asymmetry at (0, 1)")), "{v:?}");

        let g = GraphSpec::new_unchecked(1, &[vec![2.0]], true).unwrap();
        let v = validate_graph(&g);
        assert!(v.iter().any(|m| m.contains("non-binary")), "{v:?}");
    }

    #[test]
    fn new_rejects_invalid_via_validation_error() {
        let err = GraphSpec::new(1, &[vec![2.0]], true).unwrap_err();
        assert!(matches!(err, Error::GraphValidation(_)));
    }

    #[test]
    fn normalize_lone_node() {
        let g = GraphSpec::from_edges(1, &[]).unwrap();
        assert_eq!(normalize_adjacency(&g).values(), &[1.0]);
    }

    #[test]
    fn normalize_two_cycle_hand_computed() {
        let g = GraphSpec::from_edges(2, &[(0, 1)]).unwrap();
        let a = normalize_adjacency(&g);
        for &v in a.values() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_ring_matches_regular_closed_form() {
        // degree-2 ring: every nonzero entry is 1/(d+1) = 1/3
        let n = 6;
        let edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        let g = GraphSpec::from_edges(n, &edges).unwrap();
        let a = normalize_adjacency(&g);
        for &v in a.values() {
            assert!(v == 0.0 || (v - 1.0 / 3.0).abs() < 1e-15, "entry {v}");
        }
    }

    #[test]
    fn normalize_preserves_sparsity_pattern_of_a_plus_i() {
        let g = path3();
        let a = normalize_adjacency(&g);
        let n = 3;
        for i in 0..n {
            for j in 0..n {
                let should_be_nonzero = i == j || g.has_edge(i, j);
                assert_eq!(a.values()[i * n + j] != 0.0, should_be_nonzero);
            }
        }
    }

    #[test]
    fn normalize_symmetric_input_gives_symmetric_output() {
        let g = GraphSpec::from_edges(4, &[(0, 1), (1, 2), (2, 3), (0, 3), (0, 2)]).unwrap();
        let a = normalize_adjacency(&g);
        for i in 0..4 {
            for j in 0..4 {
                assert!((a.values()[i * 4 + j] - a.values()[j * 4 + i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn partition_two_node_chain() {
        let g = GraphSpec::from_edges(2, &[(0, 1)]).unwrap();
        let p = partition_skeleton(&g, 0, None).unwrap();
        assert_eq!(p.partitions[0].values(), Tensor::eye(2).values());
        // edge into the nearer node (0) is centripetal: 1→0
        assert_eq!(p.partitions[1].values(), &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(p.partitions[2].values(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn partition_single_node() {
        let g = GraphSpec::from_edges(1, &[]).unwrap();
        let p = partition_skeleton(&g, 0, None).unwrap();
        assert_eq!(p.partitions[0].values(), &[1.0]);
        assert_eq!(p.partitions[1].values(), &[0.0]);
        assert_eq!(p.partitions[2].values(), &[0.0]);
    }

    #[test]
    fn partition_equidistant_triangle_keeps_invariants() {
        let g = GraphSpec::from_edges(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        let p = partition_skeleton(&g, 0, Some(&[0, 0, 0])).unwrap();
        assert_partition_invariants(&g, &p);
        // tie rule: direction into the lower-indexed endpoint is centripetal
        let n = 3;
        let a2 = p.partitions[1].values();
        assert_eq!(a2[n], 1.0, "1→0 centripetal");
        assert_eq!(a2[2 * n], 1.0, "2→0 centripetal");
        assert_eq!(a2[2 * n + 1], 1.0, "2→1 centripetal");
    }

    #[test]
    fn partition_rejects_inconsistent_distances_naming_edge() {
        let g = GraphSpec::from_edges(2, &[(0, 1)]).unwrap();
        let err = partition_skeleton(&g, 0, Some(&[0, 5])).unwrap_err();
        match err {
            Error::GraphValidation(v) => {
                assert!(v.iter().any(|m| m.contains("(0, 1)")), "{v:?}");
            }
            other => panic!("expected validation error, got {other}"),
        }
    }

    #[test]
    fn partition_center_out_of_range() {
        let g = path3();
        assert!(matches!(
            partition_skeleton(&g, 9, None).unwrap_err(),
            Error::Index(_)
        ));
    }

    fn assert_partition_invariants(g: &GraphSpec, p: &PartitionedAdjacency) {
        let n = g.n_nodes();
        let (a1, a2, a3) = (
            p.partitions[0].values(),
            p.partitions[1].values(),
            p.partitions[2].values(),
        );
        for i in 0..n {
            for j in 0..n {
                let idx = i * n + j;
                assert_eq!(a1[idx], if i == j { 1.0 } else { 0.0 });
                assert_eq!(a2[idx] + a3[idx], g.adjacency()[idx], "A2+A3=A at ({i},{j})");
                assert_eq!(a2[idx] * a3[idx], 0.0, "A2∘A3=0 at ({i},{j})");
            }
        }
    }

    #[test]
    fn partition_invariants_on_random_trees() {
        use crate::rng::RandomStream;
        let mut rng = RandomStream::new(2024);
        for _ in 0..25 {
            let n = 2 + rng.below(10);
            // random tree: attach node i to a uniformly chosen earlier node
            let edges: Vec<(usize, usize)> =
                (1..n).map(|i| (i, rng.below(i))).collect();
            let g = GraphSpec::from_edges(n, &edges).unwrap();
            let center = rng.below(n);
            let p = partition_skeleton(&g, center, None).unwrap();
            assert_partition_invariants(&g, &p);
        }
    }

    #[test]
    fn partition_normalized_matches_eq3_pattern() {
        let g = path3();
        let p = partition_skeleton(&g, 1, None).unwrap();
        // A_1 = I → normalized is D^{-1/2}(I+I)D^{-1/2} with D=2I → I
        for (i, &v) in p.normalized[0].values().iter().enumerate() {
            let expect = if i % 4 == 0 { 1.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-15);
        }
    }
}

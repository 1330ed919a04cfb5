//! Undirected connected communication graphs and their spectral quantities.
//!
//! A [`NetworkGraph`] is immutable after construction: adjacency, Laplacian,
//! incidence matrix, algebraic connectivity `lambda2` and largest Laplacian
//! eigenvalue `lambda_max` are all computed once in [`build_graph`] and can
//! be shared read-only across parallel rollouts.

use crate::error::{Error, Result};
use crate::linalg::{jacobi_symmetric_eigen, Mat};
use rand_chacha::rand_core::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EIGEN_TOL: f64 = 1e-10;
const EIGEN_MAX_SWEEPS: usize = 10_000;

/// Undirected connected topology with derived spectral quantities.
#[derive(Debug, Clone)]
pub struct NetworkGraph {
    pub n_agents: usize,
    /// Unordered edges, stored as (min, max), sorted lexicographically.
    pub edges: Vec<(usize, usize)>,
    pub adjacency: Mat,
    pub laplacian: Mat,
    /// Incidence matrix with lexicographic orientation: the smaller endpoint
    /// of each edge gets +1, the larger -1.
    pub incidence: Mat,
    /// Algebraic connectivity (smallest nonzero Laplacian eigenvalue).
    pub lambda2: f64,
    /// Largest Laplacian eigenvalue.
    pub lambda_max: f64,
    neighbors: Vec<Vec<usize>>,
}

impl NetworkGraph {
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }
}

/// Projection onto the subspace orthogonal to the consensus direction:
/// H = I - (1/N) 11ᵀ.
#[derive(Debug, Clone)]
pub struct ProjectionMatrix {
    pub h: Mat,
}

impl ProjectionMatrix {
    pub fn for_agents(n: usize) -> Self {
        let mut h = Mat::identity(n);
        let inv = 1.0 / n as f64;
        for i in 0..n {
            for j in 0..n {
                h[(i, j)] -= inv;
            }
        }
        ProjectionMatrix { h }
    }
}

/// Build a graph from an explicit edge list, verifying connectivity and
/// computing all spectral quantities.
pub fn build_graph(n_agents: usize, edges: &[(usize, usize)]) -> Result<NetworkGraph> {
    if n_agents < 2 {
        return Err(Error::TooFewAgents(n_agents));
    }
    let mut canon: Vec<(usize, usize)> = Vec::with_capacity(edges.len());
    for &(a, b) in edges {
        if a == b {
            return Err(Error::InvalidEdge(a, b, "self-loop"));
        }
        if a >= n_agents || b >= n_agents {
            return Err(Error::InvalidEdge(a, b, "endpoint out of range"));
        }
        let e = (a.min(b), a.max(b));
        if canon.contains(&e) {
            return Err(Error::InvalidEdge(a, b, "duplicate edge"));
        }
        canon.push(e);
    }
    canon.sort_unstable();

    let n = n_agents;
    let mut adjacency = Mat::zeros(n, n);
    let mut neighbors = vec![Vec::new(); n];
    for &(a, b) in &canon {
        adjacency[(a, b)] = 1.0;
        adjacency[(b, a)] = 1.0;
        neighbors[a].push(b);
        neighbors[b].push(a);
    }
    for nb in &mut neighbors {
        nb.sort_unstable();
    }

    let components = connected_components(n, &neighbors);
    if components.len() != 1 {
        return Err(Error::DisconnectedGraph(components));
    }

    let mut laplacian = Mat::zeros(n, n);
    for i in 0..n {
        laplacian[(i, i)] = neighbors[i].len() as f64;
        for &j in &neighbors[i] {
            laplacian[(i, j)] = -1.0;
        }
    }

    let mut incidence = Mat::zeros(n, canon.len());
    for (e, &(a, b)) in canon.iter().enumerate() {
        incidence[(a, e)] = 1.0;
        incidence[(b, e)] = -1.0;
    }

    let eig = jacobi_symmetric_eigen(&laplacian, EIGEN_TOL, EIGEN_MAX_SWEEPS)?;
    let lambda2 = eig.values[1];
    let lambda_max = eig.values[n - 1];
    debug_assert!(eig.values[0].abs() < 1e-8);

    Ok(NetworkGraph {
        n_agents: n,
        edges: canon,
        adjacency,
        laplacian,
        incidence,
        lambda2,
        lambda_max,
        neighbors,
    })
}

fn connected_components(n: usize, neighbors: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut seen = vec![false; n];
    let mut components = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(v) = stack.pop() {
            comp.push(v);
            for &w in &neighbors[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        comp.sort_unstable();
        components.push(comp);
    }
    components
}

/// Named graph generators used by run configs.
pub fn complete(n: usize) -> Result<NetworkGraph> {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            edges.push((i, j));
        }
    }
    build_graph(n, &edges)
}

pub fn path(n: usize) -> Result<NetworkGraph> {
    let edges: Vec<(usize, usize)> = (0..n.saturating_sub(1)).map(|i| (i, i + 1)).collect();
    build_graph(n, &edges)
}

pub fn ring(n: usize) -> Result<NetworkGraph> {
    if n < 3 {
        return Err(Error::InvalidParameter(format!(
            "ring generator requires n >= 3, got {n}"
        )));
    }
    let edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    build_graph(n, &edges)
}

/// Random connected graph: a random attachment tree plus independent extra
/// edges with probability `extra_edge_prob`. Deterministic for a given seed.
pub fn random_connected(n: usize, extra_edge_prob: f64, seed: u64) -> Result<NetworkGraph> {
    if !(0.0..=1.0).contains(&extra_edge_prob) {
        return Err(Error::InvalidParameter(format!(
            "extra_edge_prob must be in [0,1], got {extra_edge_prob}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for v in 1..n {
        let parent = (rng.next_u64() % v as u64) as usize;
        edges.push((parent, v));
    }
    for i in 0..n {
        for j in i + 1..n {
            if edges.contains(&(i, j)) || edges.contains(&(j, i)) {
                continue;
            }
            let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            if u < extra_edge_prob {
                edges.push((i, j));
            }
        }
    }
    build_graph(n, &edges)
}

/// Apply (H ⊗ I_n) to a stacked state vector: subtract the across-agent mean
/// from every state component. `z` is laid out agent-major with `state_dim`
/// components per agent.
pub fn disagreement(z: &[f64], graph: &NetworkGraph, state_dim: usize) -> Result<Vec<f64>> {
    let n = graph.n_agents;
    if state_dim == 0 || z.len() != n * state_dim {
        return Err(Error::DimensionMismatch {
            expected: n * state_dim,
            got: z.len(),
            context: "disagreement input",
        });
    }
    let mut out = vec![0.0; z.len()];
    for c in 0..state_dim {
        let mean = (0..n).map(|i| z[i * state_dim + c]).sum::<f64>() / n as f64;
        for i in 0..n {
            out[i * state_dim + c] = z[i * state_dim + c] - mean;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm;
    use proptest::prelude::*;

    /// Brute-force eigenvalue oracle for 3x3 symmetric matrices: roots of the
    /// characteristic polynomial via the trigonometric cubic formula.
    fn eig3_oracle(m: &Mat) -> [f64; 3] {
        assert_eq!((m.rows, m.cols), (3, 3));
        let (a, b, c) = (m[(0, 0)], m[(0, 1)], m[(0, 2)]);
        let (d, e) = (m[(1, 1)], m[(1, 2)]);
        let f = m[(2, 2)];
        // Monic characteristic polynomial x^3 + A x^2 + B x + C.
        let big_a = -(a + d + f);
        let big_b = a * d + a * f + d * f - b * b - c * c - e * e;
        let big_c = -(a * d * f + 2.0 * b * c * e - a * e * e - b * b * f - c * c * d);
        // Depressed cubic t^3 + p t + q with x = t - A/3.
        let p = big_b - big_a * big_a / 3.0;
        let q = 2.0 * big_a.powi(3) / 27.0 - big_a * big_b / 3.0 + big_c;
        let shift = -big_a / 3.0;
        // A symmetric matrix has three real roots (p <= 0).
        let r = (-p / 3.0).max(0.0).sqrt();
        let theta = if r == 0.0 {
            0.0
        } else {
            ((3.0 * q) / (2.0 * p) * (-3.0 / p).sqrt())
                .clamp(-1.0, 1.0)
                .acos()
                / 3.0
        };
        let mut roots = [0.0; 3];
        for (k, root) in roots.iter_mut().enumerate() {
            *root = 2.0 * r * (theta - 2.0 * std::f64::consts::PI * k as f64 / 3.0).cos() + shift;
        }
        roots.sort_by(f64::total_cmp);
        roots
    }

    #[test]
    fn complete_graph_k5_spectrum() {
        let g = complete(5).unwrap();
        assert!((g.lambda2 - 5.0).abs() < 1e-9);
        assert!((g.lambda_max - 5.0).abs() < 1e-9);
    }

    #[test]
    fn path_two_nodes_spectrum() {
        let g = path(2).unwrap();
        assert!((g.lambda2 - 2.0).abs() < 1e-12);
        assert!((g.lambda_max - 2.0).abs() < 1e-12);
    }

    #[test]
    fn path_three_nodes_matches_cubic_oracle() {
        let g = path(3).unwrap();
        let oracle = eig3_oracle(&g.laplacian);
        assert!(oracle[0].abs() < 1e-9, "oracle {:?}", oracle);
        assert!((g.lambda2 - oracle[1]).abs() < 1e-9);
        assert!((g.lambda_max - oracle[2]).abs() < 1e-9);
        // Known spectrum of the 3-path Laplacian.
        assert!((oracle[1] - 1.0).abs() < 1e-12);
        assert!((oracle[2] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn laplacian_identities_hold() {
        for g in [complete(5).unwrap(), path(4).unwrap(), ring(6).unwrap()] {
            let ddt = g.incidence.matmul(&g.incidence.transpose());
            assert!(g.laplacian.max_abs_diff(&ddt) < 1e-12);
            for i in 0..g.n_agents {
                let row_sum: f64 = (0..g.n_agents).map(|j| g.laplacian[(i, j)]).sum();
                assert_eq!(row_sum, 0.0);
            }
            assert!(g.lambda2 > 0.0 && g.lambda2 <= g.lambda_max + 1e-12);
        }
    }

    #[test]
    fn eigenvalue_residuals_small() {
        let g = ring(7).unwrap();
        let eig = jacobi_symmetric_eigen(&g.laplacian, 1e-12, 10_000).unwrap();
        for k in [1, g.n_agents - 1] {
            let v: Vec<f64> = (0..g.n_agents).map(|i| eig.vectors[(i, k)]).collect();
            let qv = g.laplacian.matvec(&v);
            let resid: Vec<f64> = qv
                .iter()
                .zip(&v)
                .map(|(x, y)| x - eig.values[k] * y)
                .collect();
            assert!(norm(&resid) < 1e-8);
        }
    }

    #[test]
    fn disconnected_graph_reports_components() {
        let err = build_graph(4, &[(0, 1), (2, 3)]).unwrap_err();
        match err {
            Error::DisconnectedGraph(comps) => {
                assert_eq!(comps, vec![vec![0, 1], vec![2, 3]]);
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn bad_edges_rejected() {
        assert!(build_graph(3, &[(0, 0)]).is_err());
        assert!(build_graph(3, &[(0, 1), (1, 0)]).is_err());
        assert!(build_graph(3, &[(0, 5)]).is_err());
        assert!(build_graph(1, &[]).is_err());
    }

    #[test]
    fn projection_matrix_identities() {
        let p = ProjectionMatrix::for_agents(5);
        assert!(p.h.max_abs_diff(&p.h.transpose()) < 1e-15);
        assert!(p.h.matmul(&p.h).max_abs_diff(&p.h) < 1e-12);
        let ones = vec![1.0; 5];
        assert!(norm(&p.h.matvec(&ones)) < 1e-12);
    }

    #[test]
    fn disagreement_examples() {
        let g2 = path(2).unwrap();
        let g3 = path(3).unwrap();
        assert_eq!(disagreement(&[1.0, -1.0], &g2, 1).unwrap(), vec![1.0, -1.0]);
        assert_eq!(
            disagreement(&[1.0, 2.0, 3.0], &g3, 1).unwrap(),
            vec![-1.0, 0.0, 1.0]
        );
        let same = disagreement(&[4.0, 4.0, 4.0], &g3, 1).unwrap();
        assert!(norm(&same) < 1e-15);
        assert!(disagreement(&[1.0, 2.0], &g3, 1).is_err());
    }

    #[test]
    fn random_connected_deterministic() {
        let a = random_connected(8, 0.3, 7).unwrap();
        let b = random_connected(8, 0.3, 7).unwrap();
        assert_eq!(a.edges, b.edges);
        let c = random_connected(8, 0.3, 8).unwrap();
        assert!(a.edges != c.edges || a.n_agents == c.n_agents);
    }

    proptest! {
        #[test]
        fn random_graphs_satisfy_spectral_invariants(n in 2usize..12, seed in 0u64..500) {
            let g = random_connected(n, 0.4, seed).unwrap();
            let ddt = g.incidence.matmul(&g.incidence.transpose());
            prop_assert!(g.laplacian.max_abs_diff(&ddt) < 1e-12);
            prop_assert!(g.lambda2 > 1e-9);
            prop_assert!(g.lambda2 <= g.lambda_max + 1e-12);
            // Laplacian PSD: smallest eigenvalue is ~0.
            let eig = jacobi_symmetric_eigen(&g.laplacian, 1e-12, 10_000).unwrap();
            prop_assert!(eig.values[0] > -1e-9);
        }

        #[test]
        fn disagreement_is_idempotent_and_zero_mean(
            vals in prop::collection::vec(-100.0f64..100.0, 2..10)
        ) {
            let n = vals.len();
            let g = complete(n.max(2)).unwrap();
            let vals = if n >= 2 { vals } else { vec![0.0, 0.0] };
            let x = disagreement(&vals, &g, 1).unwrap();
            let xx = disagreement(&x, &g, 1).unwrap();
            let diff: Vec<f64> = x.iter().zip(&xx).map(|(a, b)| a - b).collect();
            prop_assert!(norm(&diff) < 1e-10);
            prop_assert!(x.iter().sum::<f64>().abs() < 1e-10);
        }
    }
}

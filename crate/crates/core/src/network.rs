//! Directed contact networks and Perron-Frobenius machinery.
//!
//! Nodes are indexed from zero in memory. The CSV edge-list format uses
//! 1-based indices, one row `src,dst,weight` per directed edge `src -> dst`,
//! where `weight` is the rate at which `src` infects `dst`.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Iteration cap for [`spectral_radius`].
pub const POWER_ITERATION_CAP: usize = 10_000;
/// Default convergence tolerance for [`spectral_radius`].
pub const DEFAULT_RHO_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("node index {index} out of range for {n} nodes")]
    NodeOutOfRange { index: usize, n: usize },
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("duplicate edge {src} -> {dst}")]
    DuplicateEdge { src: usize, dst: usize },
    #[error("rate {rate} on edge {src} -> {dst} is outside (0, 1)")]
    RateOutOfRange { src: usize, dst: usize, rate: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix entry ({row}, {col}) = {value} is negative or not finite")]
    NegativeEntry { row: usize, col: usize, value: f64 },
    #[error("matrix is not irreducible")]
    Reducible,
    #[error("power iteration did not converge within {0} iterations")]
    NoConvergence(usize),
    #[error("vector entry {index} = {value} is not strictly positive")]
    NonPositiveVector { index: usize, value: f64 },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A directed transmission link `src -> dst` with nominal rate `rate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub rate: f64,
}

/// Directed weighted contact graph. Edges are kept sorted by `(dst, src)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactNetwork {
    n: usize,
    edges: Vec<Edge>,
}

impl ContactNetwork {
    pub fn new(n: usize, mut edges: Vec<Edge>) -> Result<Self, NetworkError> {
        let mut seen = BTreeSet::new();
        for e in &edges {
            for index in [e.src, e.dst] {
                if index >= n {
                    return Err(NetworkError::NodeOutOfRange { index, n });
                }
            }
            if e.src == e.dst {
                return Err(NetworkError::SelfLoop(e.src));
            }
            if !(e.rate > 0.0 && e.rate < 1.0) {
                return Err(NetworkError::RateOutOfRange {
                    src: e.src,
                    dst: e.dst,
                    rate: e.rate,
                });
            }
            if !seen.insert((e.dst, e.src)) {
                return Err(NetworkError::DuplicateEdge {
                    src: e.src,
                    dst: e.dst,
                });
            }
        }
        edges.sort_by_key(|e| (e.dst, e.src));
        Ok(Self { n, edges })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Edges pointing into `node`, sorted by source.
    pub fn in_edges(&self, node: usize) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.dst == node)
    }

    pub fn has_edge(&self, src: usize, dst: usize) -> bool {
        self.edges
            .binary_search_by_key(&(dst, src), |e| (e.dst, e.src))
            .is_ok()
    }

    /// The nominal contact matrix, `B[dst][src] = rate`.
    pub fn rate_matrix(&self) -> NonnegativeMatrix {
        self.scaled_rate_matrix(1.0)
    }

    pub fn scaled_rate_matrix(&self, scale: f64) -> NonnegativeMatrix {
        let mut m = DMatrix::zeros(self.n, self.n);
        for e in &self.edges {
            m[(e.dst, e.src)] = scale * e.rate;
        }
        NonnegativeMatrix(m)
    }

    /// Same topology with every rate multiplied by `scale`.
    pub fn rescaled(&self, scale: f64) -> Result<Self, NetworkError> {
        let edges = self
            .edges
            .iter()
            .map(|e| Edge {
                rate: e.rate * scale,
                ..*e
            })
            .collect();
        Self::new(self.n, edges)
    }

    /// Weighted in-degree plus weighted out-degree of every node.
    pub fn total_weighted_degree(&self) -> Vec<f64> {
        let mut deg = vec![0.0; self.n];
        for e in &self.edges {
            deg[e.src] += e.rate;
            deg[e.dst] += e.rate;
        }
        deg
    }

    pub fn read_csv<R: Read>(n: usize, reader: R) -> Result<Self, NetworkError> {
        #[derive(Deserialize)]
        struct Row {
            src: usize,
            dst: usize,
            weight: f64,
        }
        let mut rdr = csv::Reader::from_reader(reader);
        let mut edges = Vec::new();
        for row in rdr.deserialize() {
            let row: Row = row?;
            for index in [row.src, row.dst] {
                if index == 0 || index > n {
                    return Err(NetworkError::NodeOutOfRange { index, n });
                }
            }
            edges.push(Edge {
                src: row.src - 1,
                dst: row.dst - 1,
                rate: row.weight,
            });
        }
        Self::new(n, edges)
    }

    pub fn load_csv(n: usize, path: &Path) -> Result<Self, NetworkError> {
        Self::read_csv(n, std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), NetworkError> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["src", "dst", "weight"])?;
        for e in &self.edges {
            wtr.write_record([
                (e.src + 1).to_string(),
                (e.dst + 1).to_string(),
                e.rate.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Square matrix with nonnegative finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct NonnegativeMatrix(DMatrix<f64>);

impl NonnegativeMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self, NetworkError> {
        if m.nrows() != m.ncols() {
            return Err(NetworkError::DimensionMismatch {
                expected: m.nrows(),
                got: m.ncols(),
            });
        }
        for c in 0..m.ncols() {
            for r in 0..m.nrows() {
                let value = m[(r, c)];
                if !(value >= 0.0 && value.is_finite()) {
                    return Err(NetworkError::NegativeEntry { row: r, col: c, value });
                }
            }
        }
        Ok(Self(m))
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, NetworkError> {
        let n = rows.len();
        for r in rows {
            if r.len() != n {
                return Err(NetworkError::DimensionMismatch {
                    expected: n,
                    got: r.len(),
                });
            }
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DMatrix::zeros(n, n))
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.0[(row, col)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (&self.0 * DVector::from_column_slice(v))
            .iter()
            .copied()
            .collect()
    }

    /// Strong connectivity of the off-diagonal support graph.
    pub fn is_irreducible(&self) -> bool {
        let n = self.n();
        let adj: Vec<Vec<usize>> = (0..n)
            .map(|i| (0..n).filter(|&j| j != i && self.0[(j, i)] > 0.0).collect())
            .collect();
        strongly_connected(n, &adj)
    }
}

/// `M(B, dc) = B + diag(dc)`.
pub fn state_matrix(b: &NonnegativeMatrix, dc: &[f64]) -> Result<NonnegativeMatrix, NetworkError> {
    if dc.len() != b.n() {
        return Err(NetworkError::DimensionMismatch {
            expected: b.n(),
            got: dc.len(),
        });
    }
    let mut m = b.0.clone();
    for (i, &d) in dc.iter().enumerate() {
        m[(i, i)] += d;
    }
    NonnegativeMatrix::new(m)
}

/// Two-pass reachability from node 0 on the graph and on its transpose.
pub fn is_strongly_connected(net: &ContactNetwork) -> bool {
    let n = net.n();
    let mut adj = vec![Vec::new(); n];
    for e in net.edges() {
        adj[e.src].push(e.dst);
    }
    strongly_connected(n, &adj)
}

fn strongly_connected(n: usize, adj: &[Vec<usize>]) -> bool {
    if n <= 1 {
        return true;
    }
    let mut rev = vec![Vec::new(); n];
    for (u, outs) in adj.iter().enumerate() {
        for &v in outs {
            rev[v].push(u);
        }
    }
    reaches_all(n, adj) && reaches_all(n, &rev)
}

fn reaches_all(n: usize, adj: &[Vec<usize>]) -> bool {
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(u) = stack.pop() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Perron root and eigenvector of an irreducible nonnegative matrix.
#[derive(Debug, Clone)]
pub struct Perron {
    pub rho: f64,
    /// Strictly positive, unit 1-norm.
    pub vector: Vec<f64>,
    pub iterations: usize,
}

/// Power iteration on the shifted matrix `M + sI`, which is primitive whenever
/// `M` is irreducible, so the iteration converges even for periodic `M`.
///
/// Terminates once the Collatz-Wielandt bracket
/// `min_i (Mv)_i / v_i <= rho <= max_i (Mv)_i / v_i` is narrower than
/// `tol * max(1, rho)`.
pub fn spectral_radius(m: &NonnegativeMatrix, tol: f64) -> Result<Perron, NetworkError> {
    let n = m.n();
    if n == 0 {
        return Err(NetworkError::DimensionMismatch { expected: 1, got: 0 });
    }
    if n == 1 {
        return Ok(Perron {
            rho: m.get(0, 0),
            vector: vec![1.0],
            iterations: 0,
        });
    }
    let a = &m.0;
    let shift = {
        let total: f64 = a.iter().sum();
        (total / n as f64).max(f64::MIN_POSITIVE)
    };
    let mut v = vec![1.0 / n as f64; n];
    let mut w = vec![0.0; n];
    let mut prev_rho = f64::NAN;
    for iter in 1..=POWER_ITERATION_CAP {
        for (i, wi) in w.iter_mut().enumerate() {
            let mut acc = shift * v[i];
            for (j, vj) in v.iter().enumerate() {
                acc += a[(i, j)] * vj;
            }
            *wi = acc;
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..n {
            if !(v[i] > 0.0) {
                return Err(NetworkError::Reducible);
            }
            let ratio = w[i] / v[i];
            lo = lo.min(ratio);
            hi = hi.max(ratio);
        }
        // ||w||_1 with ||v||_1 = 1 lies inside the bracket.
        let norm: f64 = w.iter().sum();
        let rho = norm - shift;
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(NetworkError::Reducible);
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
        let scale = rho.abs().max(1.0);
        if hi - lo <= tol * scale && (rho - prev_rho).abs() <= tol * scale {
            if v.iter().any(|&x| !(x > 0.0)) {
                return Err(NetworkError::Reducible);
            }
            return Ok(Perron {
                rho,
                vector: v,
                iterations: iter,
            });
        }
        prev_rho = rho;
    }
    Err(NetworkError::NoConvergence(POWER_ITERATION_CAP))
}

/// `max_i sum_j M_ij u_j / u_i`, an upper bound on the spectral radius that
/// is tight at the Perron vector.
pub fn inf_max_value(m: &NonnegativeMatrix, u: &[f64]) -> Result<f64, NetworkError> {
    let n = m.n();
    if u.len() != n {
        return Err(NetworkError::DimensionMismatch {
            expected: n,
            got: u.len(),
        });
    }
    if let Some((index, &value)) = u.iter().enumerate().find(|(_, &x)| !(x > 0.0)) {
        return Err(NetworkError::NonPositiveVector { index, value });
    }
    Ok((0..n)
        .map(|i| (0..n).map(|j| m.get(i, j) * u[j]).sum::<f64>() / u[i])
        .fold(f64::NEG_INFINITY, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn edge(src: usize, dst: usize, rate: f64) -> Edge {
        Edge { src, dst, rate }
    }

    #[test]
    fn state_matrix_places_diagonal() {
        let z = NonnegativeMatrix::zeros(2);
        let m = state_matrix(&z, &[0.5, 0.5]).unwrap();
        assert_eq!(m, NonnegativeMatrix::from_rows(&[&[0.5, 0.0], &[0.0, 0.5]]).unwrap());

        let b = NonnegativeMatrix::from_rows(&[&[0.0, 0.2], &[0.0, 0.0]]).unwrap();
        let m = state_matrix(&b, &[0.5, 0.5]).unwrap();
        assert_eq!(m, NonnegativeMatrix::from_rows(&[&[0.5, 0.2], &[0.0, 0.5]]).unwrap());

        assert!(matches!(
            state_matrix(&b, &[0.5]),
            Err(NetworkError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn connectivity() {
        let two_cycle = ContactNetwork::new(2, vec![edge(0, 1, 0.2), edge(1, 0, 0.2)]).unwrap();
        assert!(is_strongly_connected(&two_cycle));
        let one_way = ContactNetwork::new(2, vec![edge(0, 1, 0.2)]).unwrap();
        assert!(!is_strongly_connected(&one_way));
        let chord = ContactNetwork::new(
            3,
            vec![edge(0, 1, 0.1), edge(1, 2, 0.1), edge(2, 0, 0.1), edge(0, 2, 0.1)],
        )
        .unwrap();
        assert!(is_strongly_connected(&chord));
    }

    #[test]
    fn rejects_invalid_networks() {
        assert!(matches!(
            ContactNetwork::new(2, vec![edge(0, 0, 0.1)]),
            Err(NetworkError::SelfLoop(0))
        ));
        assert!(matches!(
            ContactNetwork::new(2, vec![edge(0, 1, 0.1), edge(0, 1, 0.3)]),
            Err(NetworkError::DuplicateEdge { .. })
        ));
        assert!(matches!(
            ContactNetwork::new(2, vec![edge(0, 1, 1.0)]),
            Err(NetworkError::RateOutOfRange { .. })
        ));
        assert!(matches!(
            ContactNetwork::new(2, vec![edge(0, 2, 0.1)]),
            Err(NetworkError::NodeOutOfRange { .. })
        ));
    }

    #[test]
    fn spectral_radius_small_cases() {
        let id = NonnegativeMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        // The identity is reducible but the uniform start is already an eigenvector.
        let p = spectral_radius(&id, DEFAULT_RHO_TOL).unwrap();
        assert!(close(p.rho, 1.0, 1e-12));
        assert!(close(p.vector[0], 0.5, 1e-12) && close(p.vector[1], 0.5, 1e-12));

        let swap = NonnegativeMatrix::from_rows(&[&[0.0, 0.5], &[0.5, 0.0]]).unwrap();
        assert!(close(spectral_radius(&swap, DEFAULT_RHO_TOL).unwrap().rho, 0.5, 1e-10));

        let sym = NonnegativeMatrix::from_rows(&[&[0.5, 0.2], &[0.2, 0.5]]).unwrap();
        let p = spectral_radius(&sym, DEFAULT_RHO_TOL).unwrap();
        assert!(close(p.rho, 0.7, 1e-10));
        assert!(close(p.vector[0], 0.5, 1e-10));
    }

    #[test]
    fn periodic_matrix_with_nonuniform_perron_vector() {
        // [[0, 0.8], [0.2, 0]] has rho = 0.4 and is 2-periodic.
        let m = NonnegativeMatrix::from_rows(&[&[0.0, 0.8], &[0.2, 0.0]]).unwrap();
        let p = spectral_radius(&m, DEFAULT_RHO_TOL).unwrap();
        assert!(close(p.rho, 0.4, 1e-9));
        assert!(close(p.vector[0] / p.vector[1], 2.0, 1e-8));
    }

    #[test]
    fn inf_max_examples() {
        let d = NonnegativeMatrix::from_rows(&[&[0.3, 0.0], &[0.0, 0.9]]).unwrap();
        assert!(close(inf_max_value(&d, &[1.0, 1.0]).unwrap(), 0.9, 1e-15));
        let sym = NonnegativeMatrix::from_rows(&[&[0.5, 0.2], &[0.2, 0.5]]).unwrap();
        assert!(close(inf_max_value(&sym, &[1.0, 1.0]).unwrap(), 0.7, 1e-15));
        let skew = NonnegativeMatrix::from_rows(&[&[0.5, 0.4], &[0.1, 0.5]]).unwrap();
        assert!(close(inf_max_value(&skew, &[1.0, 1.0]).unwrap(), 0.9, 1e-15));
        let rho = spectral_radius(&skew, DEFAULT_RHO_TOL).unwrap().rho;
        assert!(close(rho, 0.7, 1e-10));
        assert!(matches!(
            inf_max_value(&skew, &[1.0, 0.0]),
            Err(NetworkError::NonPositiveVector { index: 1, .. })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let net = ContactNetwork::new(
            3,
            vec![edge(0, 1, 0.125), edge(1, 2, 0.3), edge(2, 0, 0.07)],
        )
        .unwrap();
        let mut buf = Vec::new();
        net.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("src,dst,weight\n"));
        assert!(text.contains("1,2,0.125"));
        let back = ContactNetwork::read_csv(3, buf.as_slice()).unwrap();
        assert_eq!(back, net);
        assert!(ContactNetwork::read_csv(3, "src,dst,weight\n0,1,0.1\n".as_bytes()).is_err());
    }
}

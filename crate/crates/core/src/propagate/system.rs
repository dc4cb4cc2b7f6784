use super::sparse::CsrMatrix;
use super::{Edge, EdgeSet};
use crate::interchange::LogitGrid;

/// `A = D_ρ + τL` together with its parts.
#[derive(Debug, Clone)]
pub struct GridSystem {
    pub operator: CsrMatrix,
    pub laplacian: CsrMatrix,
    pub rho: Vec<f64>,
    pub tau: f64,
}

impl GridSystem {
    pub fn nodes(&self) -> usize {
        self.rho.len()
    }

    /// Right-hand side `D_ρ z` for one channel.
    pub fn rhs(&self, z: &[f64]) -> Vec<f64> {
        self.rho.iter().zip(z).map(|(r, v)| r * v).collect()
    }
}

/// Weighted graph Laplacian (degree minus adjacency).
pub fn laplacian(n: usize, edges: &[Edge]) -> CsrMatrix {
    let mut t = Vec::with_capacity(n + 4 * edges.len());
    t.extend((0..n).map(|i| (i, i, 0.0)));
    for e in edges {
        t.push((e.i, e.i, e.a));
        t.push((e.j, e.j, e.a));
        t.push((e.i, e.j, -e.a));
        t.push((e.j, e.i, -e.a));
    }
    CsrMatrix::from_triplets(n, t)
}

pub fn assemble_system(rho: &[f64], edges: &EdgeSet, tau: f64) -> GridSystem {
    let n = rho.len();
    let lap = laplacian(n, &edges.edges);
    let mut t = Vec::with_capacity(lap.nnz());
    for r in 0..n {
        for (c, v) in lap.row(r) {
            let d = if r == c { rho[r] } else { 0.0 };
            t.push((r, c, d + tau * v));
        }
    }
    GridSystem {
        operator: CsrMatrix::from_triplets(n, t),
        laplacian: lap,
        rho: rho.to_vec(),
        tau,
    }
}

/// Objective for one channel:
/// `½ Σ ρ_i (f_i − z_i)² + τ/2 Σ_(i,j) a_ij (f_i − f_j)²`.
pub fn channel_energy(z: &[f64], f: &[f64], rho: &[f64], edges: &[Edge], tau: f64) -> f64 {
    let data: f64 = rho
        .iter()
        .zip(f.iter().zip(z))
        .map(|(r, (fi, zi))| r * (fi - zi).powi(2))
        .sum();
    let smooth: f64 = edges.iter().map(|e| e.a * (f[e.i] - f[e.j]).powi(2)).sum();
    0.5 * data + 0.5 * tau * smooth
}

/// Objective summed over every class channel.
pub fn energy(z: &LogitGrid, f: &LogitGrid, rho: &[f64], edges: &[Edge], tau: f64) -> f64 {
    (0..z.classes())
        .map(|c| channel_energy(&z.channel(c), &f.channel(c), rho, edges, tau))
        .sum()
}

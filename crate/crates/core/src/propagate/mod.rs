//! Text-aware Laplacian propagation on a pooled grid.
//!
//! The fused logit field is pooled to `H_g x W_g`, a class graph is built from
//! prototype similarities, node confidences and 4-connected edge weights are
//! derived from it and the gray image, and the regularized system
//! `(D_ρ + τL) F = D_ρ Z_g` is solved per class with a fixed number of CG
//! iterations.

pub mod cg;
pub mod sparse;
mod system;

pub use cg::{cg_solve, cg_solve_channel, CgOutcome, ChannelReport, ChannelSolve};
pub use sparse::CsrMatrix;
pub use system::{assemble_system, channel_energy, energy, laplacian, GridSystem};

use nalgebra::DMatrix;

use crate::error::{PearlError, Result, StageExt};
use crate::interchange::{
    GrayImage, LabelMap, LogitGrid, PipelineConfig, PrototypeMatrix, TensorContainer, TensorEntry,
};
use crate::par::Exec;
use crate::resample::{adaptive_avg_pool, upsample_logits};

#[derive(Debug, Clone)]
pub struct ClassGraph {
    pub g: DMatrix<f64>,
    pub tau_s: f64,
    pub beta: f64,
}

impl ClassGraph {
    pub fn classes(&self) -> usize {
        self.g.nrows()
    }

    /// `xᵀ G y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let c = self.classes();
        let mut s = 0.0;
        for r in 0..c {
            if x[r] == 0.0 {
                continue;
            }
            let gy: f64 = (0..c).map(|k| self.g[(r, k)] * y[k]).sum();
            s += x[r] * gy;
        }
        s
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    v.iter_mut().for_each(|x| *x /= total);
}

/// `G = rownorm(rowsoftmax(T Tᵀ / τ_s) + β I)`.
pub fn class_graph(t: &PrototypeMatrix, tau_s: f64, beta: f64) -> Result<ClassGraph> {
    if !(tau_s > 0.0) {
        return Err(PearlError::validation("tau_s", "must be > 0"));
    }
    if !(beta >= 0.0) {
        return Err(PearlError::validation("beta", "must be >= 0"));
    }
    let tm = t.matrix();
    let mut g = (tm * tm.transpose()) / tau_s;
    let c = g.nrows();
    for r in 0..c {
        let mut row: Vec<f64> = g.row(r).iter().copied().collect();
        softmax_in_place(&mut row);
        row[r] += beta;
        let total: f64 = row.iter().sum();
        for (k, v) in row.into_iter().enumerate() {
            g[(r, k)] = v / total;
        }
    }
    Ok(ClassGraph { g, tau_s, beta })
}

/// Pooled logits and gray image on the propagation grid.
#[derive(Debug, Clone)]
pub struct PooledGrid {
    pub logits: LogitGrid,
    pub gray: GrayImage,
}

pub fn pool_to_grid(z: &LogitGrid, gray: &GrayImage, grid_h: usize, grid_w: usize) -> Result<PooledGrid> {
    if (gray.height, gray.width) != (z.height(), z.width()) {
        return Err(PearlError::Dimension(format!(
            "gray image {}x{} does not match logits {}x{}",
            gray.height,
            gray.width,
            z.height(),
            z.width()
        )));
    }
    let zl = adaptive_avg_pool(z.scores(), z.height(), z.width(), z.classes(), grid_h, grid_w)?;
    let gl = adaptive_avg_pool(&gray.data, gray.height, gray.width, 1, grid_h, grid_w)?;
    Ok(PooledGrid {
        logits: LogitGrid::new(grid_h, grid_w, z.classes(), zl)?,
        gray: GrayImage {
            height: grid_h,
            width: grid_w,
            data: gl.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        },
    })
}

/// Pooled grid with per-node probabilities and confidences.
#[derive(Debug, Clone)]
pub struct GridField {
    pub logits: LogitGrid,
    pub gray: GrayImage,
    /// Softmax of each node's logits, position-major like `logits`.
    pub probs: Vec<f64>,
    pub rho: Vec<f64>,
}

impl GridField {
    pub fn prob(&self, i: usize) -> &[f64] {
        let c = self.logits.classes();
        &self.probs[i * c..(i + 1) * c]
    }
}

/// `p = softmax(z)`, `ρ = max(max p, ε)² (1 + pᵀGp)`.
pub fn node_stats(pooled: PooledGrid, graph: &ClassGraph, epsilon: f64) -> Result<GridField> {
    if !(epsilon > 0.0) {
        return Err(PearlError::validation("epsilon", "must be > 0"));
    }
    let c = pooled.logits.classes();
    if c != graph.classes() {
        return Err(PearlError::Dimension(format!(
            "logits have {c} classes, class graph has {}",
            graph.classes()
        )));
    }
    let mut probs = pooled.logits.scores().to_vec();
    let mut rho = Vec::with_capacity(pooled.logits.nodes());
    for p in probs.chunks_mut(c) {
        softmax_in_place(p);
        let gamma = p.iter().copied().fold(0.0, f64::max);
        let u = graph.bilinear(p, p);
        rho.push(gamma.max(epsilon).powi(2) * (1.0 + u));
    }
    Ok(GridField {
        logits: pooled.logits,
        gray: pooled.gray,
        probs,
        rho,
    })
}

/// Undirected edge `i < j` with weight `a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub a: f64,
}

#[derive(Debug, Clone)]
pub struct EdgeSet {
    pub edges: Vec<Edge>,
    pub kappa: f64,
    pub lambda: f64,
}

/// 4-connected edges in row-major order (right neighbor, then down neighbor),
/// `a = exp(−κ|Δgray|) (1 + λ clip(p_iᵀ G p_j))`.
pub fn edge_set(field: &GridField, graph: &ClassGraph, kappa: f64, lambda: f64) -> EdgeSet {
    let (h, w) = (field.gray.height, field.gray.width);
    let weight = |i: usize, j: usize| {
        let b = (-kappa * (field.gray.data[i] - field.gray.data[j]).abs()).exp();
        let g = graph.bilinear(field.prob(i), field.prob(j)).clamp(0.0, 1.0);
        Edge { i, j, a: b * (1.0 + lambda * g) }
    };
    let mut edges = Vec::with_capacity(2 * h * w);
    for r in 0..h {
        for s in 0..w {
            let i = r * w + s;
            if s + 1 < w {
                edges.push(weight(i, i + 1));
            }
            if r + 1 < h {
                edges.push(weight(i, i + w));
            }
        }
    }
    EdgeSet {
        edges,
        kappa,
        lambda,
    }
}

/// Everything produced on the grid by one propagation run.
#[derive(Debug, Clone)]
pub struct Refinement {
    pub graph: ClassGraph,
    pub field: GridField,
    pub edges: EdgeSet,
    pub system: GridSystem,
    pub solution: CgOutcome,
}

impl Refinement {
    /// Refined grid logits `F_g`.
    pub fn refined(&self) -> &LogitGrid {
        &self.solution.field
    }

    pub fn energy_before(&self) -> f64 {
        let z = &self.field.logits;
        energy(z, z, &self.field.rho, &self.edges.edges, self.system.tau)
    }

    pub fn energy_after(&self) -> f64 {
        energy(
            &self.field.logits,
            self.refined(),
            &self.field.rho,
            &self.edges.edges,
            self.system.tau,
        )
    }

    /// `A` and `L` as `nnz x 3` (row, col, value) triplets, plus `rho` and `G`.
    pub fn system_dump(&self) -> TensorContainer {
        fn coo(name: &str, m: &CsrMatrix) -> TensorEntry {
            let mut data = Vec::with_capacity(3 * m.nnz());
            for r in 0..m.dim() {
                for (c, v) in m.row(r) {
                    data.extend([r as f32, c as f32, v as f32]);
                }
            }
            TensorEntry {
                name: name.into(),
                shape: vec![m.nnz(), 3],
                data,
            }
        }
        let mut out = TensorContainer::default();
        let (h, w) = (self.field.gray.height, self.field.gray.width);
        let entries = [
            coo("A", &self.system.operator),
            coo("L", &self.system.laplacian),
            TensorEntry {
                name: "rho".into(),
                shape: vec![h, w],
                data: self.field.rho.iter().map(|&v| v as f32).collect(),
            },
            TensorEntry::from_matrix("G", &self.graph.g),
        ];
        for e in entries {
            out.push(e).expect("dump names are distinct");
        }
        out
    }
}

/// Propagates an already pooled grid.
pub fn refine_grid(
    pooled: PooledGrid,
    prototypes: &PrototypeMatrix,
    config: &PipelineConfig,
    exec: Exec,
) -> Result<Refinement> {
    let graph = class_graph(prototypes, config.tau_s, config.beta).stage("class_graph")?;
    let field = node_stats(pooled, &graph, config.epsilon).stage("node_stats")?;
    let edges = edge_set(&field, &graph, config.kappa, config.lambda);
    let system = assemble_system(&field.rho, &edges, config.tau);
    let solution = cg_solve(&system, &field.logits, config.cg_iters, exec).stage("cg_solve")?;
    log::debug!(
        "propagation on {}x{} grid: max relative residual {:.3e}",
        field.gray.height,
        field.gray.width,
        solution.max_relative_residual()
    );
    Ok(Refinement {
        graph,
        field,
        edges,
        system,
        solution,
    })
}

/// Pools `z` and `gray` to the configured grid and propagates.
pub fn refine(
    z: &LogitGrid,
    gray: &GrayImage,
    prototypes: &PrototypeMatrix,
    config: &PipelineConfig,
    exec: Exec,
) -> Result<Refinement> {
    let pooled = pool_to_grid(z, gray, config.grid_h, config.grid_w).stage("pool_to_grid")?;
    refine_grid(pooled, prototypes, config, exec)
}

/// Upsamples grid logits to `out_h x out_w` and takes the per-pixel argmax.
pub fn finalize(f_g: &LogitGrid, out_h: usize, out_w: usize) -> Result<(LabelMap, LogitGrid)> {
    if out_h < f_g.height() || out_w < f_g.width() {
        return Err(PearlError::Dimension(format!(
            "output {out_h}x{out_w} is smaller than the {}x{} grid",
            f_g.height(),
            f_g.width()
        )));
    }
    let f = upsample_logits(f_g, out_h, out_w);
    Ok((f.argmax(), f))
}

//! Fixed-iteration conjugate gradients on the grid system.

use super::sparse::CsrMatrix;
use super::system::GridSystem;
use crate::error::{PearlError, Result};
use crate::interchange::LogitGrid;
use crate::par::Exec;

/// A single-channel solve.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSolve {
    pub x: Vec<f64>,
    /// Iterations actually taken; fewer than requested only when the
    /// residual or search direction underflowed to zero.
    pub iterations: usize,
    /// `‖b − A x‖ / ‖b‖` (absolute when `b = 0`).
    pub relative_residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Residual growth within one iteration treated as numerical breakdown.
pub const BREAKDOWN_GROWTH: f64 = 10.0;

/// Runs `iters` CG iterations on `A x = b` from `x0`, calling `observe(k, x)`
/// after each one.
pub fn cg_solve_channel(
    a: &CsrMatrix,
    b: &[f64],
    x0: &[f64],
    iters: usize,
    mut observe: impl FnMut(usize, &[f64]),
) -> Result<ChannelSolve> {
    let n = a.dim();
    if b.len() != n || x0.len() != n {
        return Err(PearlError::Dimension(format!(
            "system of size {n}, rhs {}, guess {}",
            b.len(),
            x0.len()
        )));
    }
    let mut x = x0.to_vec();
    let mut ap = a.mul_vec(&x);
    let mut r: Vec<f64> = b.iter().zip(&ap).map(|(bi, ai)| bi - ai).collect();
    let mut p = r.clone();
    let mut rs = dot(&r, &r);
    let mut taken = 0;
    for k in 0..iters {
        if rs == 0.0 {
            break;
        }
        a.mul_vec_into(&p, &mut ap);
        let curvature = dot(&p, &ap);
        if curvature == 0.0 && dot(&p, &p) < f64::MIN_POSITIVE {
            break;
        }
        if !(curvature > 0.0) {
            return Err(PearlError::Solver(format!(
                "non-positive curvature {curvature:e} at CG iteration {k}; operator is not SPD"
            )));
        }
        let alpha = rs / curvature;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rs_new = dot(&r, &r);
        if !rs_new.is_finite() || rs_new > BREAKDOWN_GROWTH * BREAKDOWN_GROWTH * rs {
            return Err(PearlError::Solver(format!(
                "CG residual grew from {:e} to {:e} at iteration {k}",
                rs.sqrt(),
                rs_new.sqrt()
            )));
        }
        let beta = rs_new / rs;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rs = rs_new;
        taken = k + 1;
        observe(k, &x);
    }
    let ax = a.mul_vec(&x);
    let true_res = b.iter().zip(&ax).map(|(bi, ai)| (bi - ai).powi(2)).sum::<f64>().sqrt();
    let b_norm = dot(b, b).sqrt();
    Ok(ChannelSolve {
        x,
        iterations: taken,
        relative_residual: if b_norm > 0.0 { true_res / b_norm } else { true_res },
    })
}

/// Per-channel CG diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelReport {
    pub iterations: usize,
    pub relative_residual: f64,
}

#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub field: LogitGrid,
    pub channels: Vec<ChannelReport>,
}

impl CgOutcome {
    pub fn max_relative_residual(&self) -> f64 {
        self.channels.iter().map(|c| c.relative_residual).fold(0.0, f64::max)
    }
}

/// Solves `A F = D_ρ Z_g` channel by channel, starting from `Z_g`.
pub fn cg_solve(system: &GridSystem, z_g: &LogitGrid, iters: usize, exec: Exec) -> Result<CgOutcome> {
    if z_g.nodes() != system.nodes() {
        return Err(PearlError::Dimension(format!(
            "logits cover {} nodes, system has {}",
            z_g.nodes(),
            system.nodes()
        )));
    }
    let solves = exec.try_map_range(z_g.classes(), |c| {
        let z = z_g.channel(c);
        cg_solve_channel(&system.operator, &system.rhs(&z), &z, iters, |_, _| {})
            .map_err(|e| match e {
                PearlError::Solver(m) => PearlError::Solver(format!("class channel {c}: {m}")),
                other => other,
            })
    })?;
    let channels = solves
        .iter()
        .map(|s| ChannelReport {
            iterations: s.iterations,
            relative_residual: s.relative_residual,
        })
        .collect();
    let planes: Vec<Vec<f64>> = solves.into_iter().map(|s| s.x).collect();
    let field = LogitGrid::from_channels(z_g.height(), z_g.width(), &planes)
        .map_err(|e| PearlError::Solver(format!("CG produced an invalid field: {e}")))?;
    Ok(CgOutcome { field, channels })
}

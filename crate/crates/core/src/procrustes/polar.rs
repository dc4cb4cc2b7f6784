//! Orthogonal polar factor of a square matrix: exact via SVD, or
//! multiplication-only via a Newton–Schulz-type iteration.

use nalgebra::DMatrix;

use crate::error::{PearlError, Result};
use crate::interchange::SolverKind;

/// Orthogonality tolerance promised by the SVD route.
pub const SVD_ORTHO_TOL: f64 = 1e-5;
/// Orthogonality tolerance promised by the iterative route at its default count.
pub const NS_ORTHO_TOL: f64 = 1e-3;
/// Orthogonality residual above which the iterative route reports failure.
pub const NS_FAILURE_TOL: f64 = 1e-2;
pub const DEFAULT_NS_ITERS: usize = 8;

/// Relative singular-value threshold below which a cross-covariance is
/// treated as rank deficient.
const RANK_TOL: f64 = 1e-10;

/// Odd quintic steps `X <- aX + bX(XᵀX) + cX(XᵀX)²`.
///
/// The first seven entries are the Polar Express minimax schedule (Amsel et
/// al., 2025) for singular values in `[1e-3, 1]`. Later steps use the
/// classical quintic `(15x - 10x³ + 3x⁵) / 8`, which has 1 as an attracting
/// fixed point.
const SCHEDULE: [(f64, f64, f64); 7] = [
    (8.28721201814563, -23.595886519098837, 17.300387312530933),
    (4.107059111542203, -2.9478499167379106, 0.5448431082926601),
    (3.9486908534822946, -2.908902115962949, 0.5518191394370137),
    (3.3184196573706015, -2.488488024314874, 0.51004894012372),
    (2.300652019954817, -1.6689039845747493, 0.4188073119525673),
    (1.891301407787398, -1.2679958271945868, 0.37680408948524835),
    (1.8750014808534479, -1.2500016453999487, 0.3750001645474248),
];
const CLASSICAL_QUINTIC: (f64, f64, f64) = (1.875, -1.25, 0.375);
/// Headroom applied to the scaled start and the minimax steps.
const SAFETY: f64 = 1.01;

fn step_coefficients(k: usize) -> (f64, f64, f64) {
    match SCHEDULE.get(k) {
        Some(&(a, b, c)) => (a / SAFETY, b / SAFETY.powi(3), c / SAFETY.powi(5)),
        None => CLASSICAL_QUINTIC,
    }
}

/// Result of a polar solve.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    pub rotation: DMatrix<f64>,
    pub solver: SolverKind,
    /// `‖K_c R − Q_c‖_F`, when the clouds were available.
    pub residual: Option<f64>,
    pub iterations: usize,
    /// The cross-covariance was rank deficient; `rotation` is one valid
    /// orthogonal completion.
    pub degenerate: bool,
    /// The iterative solver failed and the SVD route produced this result.
    pub fell_back: bool,
}

impl AlignmentResult {
    pub fn identity(d: usize) -> Self {
        Self {
            rotation: DMatrix::identity(d, d),
            solver: SolverKind::Svd,
            residual: None,
            iterations: 0,
            degenerate: false,
            fell_back: false,
        }
    }

    /// `‖RᵀR − I‖_F`.
    pub fn orthogonality_error(&self) -> f64 {
        orthogonality_error(&self.rotation)
    }

    pub fn determinant(&self) -> f64 {
        self.rotation.determinant()
    }
}

pub fn orthogonality_error(r: &DMatrix<f64>) -> f64 {
    let d = r.ncols();
    (r.transpose() * r - DMatrix::<f64>::identity(d, d)).norm()
}

fn check_square(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(PearlError::Dimension(format!(
            "polar factor needs a non-empty square matrix, got {:?}",
            m.shape()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(PearlError::validation("cross_covariance", "non-finite entries"));
    }
    Ok(())
}

/// `R = UVᵀ` from the full SVD `M = UΣVᵀ`; the maximizer of `tr(RᵀM)` over O(d).
pub fn polar_orthogonal_svd(m: &DMatrix<f64>) -> Result<AlignmentResult> {
    check_square(m)?;
    let d = m.nrows();
    let svd = m.clone().svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(PearlError::Solver("SVD did not return singular vectors".into())),
    };
    let s_max = svd.singular_values.max();
    let s_min = svd.singular_values.min();
    let degenerate = s_max == 0.0 || s_min <= RANK_TOL * s_max;
    let rotation = u * v_t;
    debug_assert_eq!(rotation.shape(), (d, d));
    Ok(AlignmentResult {
        rotation,
        solver: SolverKind::Svd,
        residual: None,
        iterations: 1,
        degenerate,
        fell_back: false,
    })
}

/// Polar factor by `iters` multiplication-only steps.
///
/// `M` is first divided by `‖MᵀM‖_F^{1/2}`, an upper bound on its spectral
/// norm that never exceeds `‖M‖_F`, so every singular value starts in `(0, 1]`.
/// Fails when the orthogonality residual after `iters` steps exceeds
/// [`NS_FAILURE_TOL`], which is what happens for rank-deficient input.
pub fn polar_orthogonal_newton_schulz(m: &DMatrix<f64>, iters: usize) -> Result<AlignmentResult> {
    check_square(m)?;
    if iters == 0 {
        return Err(PearlError::validation("ns_iters", "must be at least 1"));
    }
    let gram_norm = (m.transpose() * m).norm();
    if gram_norm == 0.0 {
        return Err(PearlError::Solver(
            "zero cross-covariance has no polar factor; use the SVD solver".into(),
        ));
    }
    let mut x = m / (gram_norm.sqrt() * SAFETY);
    for k in 0..iters {
        let (a, b, c) = step_coefficients(k);
        let xtx = x.transpose() * &x;
        let poly = &xtx * b + &xtx * &xtx * c;
        x = &x * a + &x * poly;
    }
    let err = orthogonality_error(&x);
    if !err.is_finite() || err > NS_FAILURE_TOL {
        return Err(PearlError::Solver(format!(
            "Newton-Schulz polar iteration did not converge in {iters} steps \
             (orthogonality residual {err:.3e}); fall back to the SVD solver"
        )));
    }
    Ok(AlignmentResult {
        rotation: x,
        solver: SolverKind::NewtonSchulz,
        residual: None,
        iterations: iters,
        degenerate: false,
        fell_back: false,
    })
}

/// Runs the configured solver; an iterative failure falls back to SVD.
pub fn polar_factor(m: &DMatrix<f64>, solver: SolverKind, ns_iters: usize) -> Result<AlignmentResult> {
    match solver {
        SolverKind::Svd => polar_orthogonal_svd(m),
        SolverKind::NewtonSchulz => match polar_orthogonal_newton_schulz(m, ns_iters) {
            Ok(r) => Ok(r),
            Err(PearlError::Solver(msg)) => {
                log::debug!("{msg}");
                let mut r = polar_orthogonal_svd(m)?;
                r.fell_back = true;
                Ok(r)
            }
            Err(e) => Err(e),
        },
    }
}

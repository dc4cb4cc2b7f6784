//! Procrustes alignment of keys to queries inside the last attention block,
//! and patch–text scoring of the re-attended features.

mod block;
mod polar;

pub use block::{align_block, AttentionBlock, BlockOutput, BlockTail, HeadReport, LayerNorm, Mlp};
pub use polar::{
    orthogonality_error, polar_factor, polar_orthogonal_newton_schulz, polar_orthogonal_svd,
    AlignmentResult, DEFAULT_NS_ITERS, NS_FAILURE_TOL, NS_ORTHO_TOL, SVD_ORTHO_TOL,
};

use nalgebra::{DMatrix, DVector};

use crate::error::{PearlError, Result};
use crate::interchange::{HeadTensors, LogitGrid, PrototypeMatrix, SolverKind};

/// Weighted centroids and centered token clouds of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredClouds {
    pub q_c: DMatrix<f64>,
    pub k_c: DMatrix<f64>,
    pub mu_q: DVector<f64>,
    pub mu_k: DVector<f64>,
    pub weights: DVector<f64>,
}

/// Token weights proportional to query row norms, summing to one.
///
/// With `zero_cls` the CLS token gets weight 0. If every eligible row is
/// zero the weights fall back to uniform over the eligible tokens.
pub fn token_weights(q: &DMatrix<f64>, cls_index: Option<usize>, zero_cls: bool) -> DVector<f64> {
    let n = q.nrows();
    let excluded = if zero_cls { cls_index.filter(|&c| c < n) } else { None };
    let mut w = DVector::from_fn(n, |i, _| {
        if Some(i) == excluded {
            0.0
        } else {
            q.row(i).norm()
        }
    });
    let total = w.sum();
    if total > 0.0 && total.is_finite() {
        w /= total;
        return w;
    }
    let eligible = n - usize::from(excluded.is_some() && n > 1);
    DVector::from_fn(n, |i, _| {
        if Some(i) == excluded && n > 1 {
            0.0
        } else {
            1.0 / eligible as f64
        }
    })
}

fn weighted_mean(x: &DMatrix<f64>, pi: &DVector<f64>) -> DVector<f64> {
    x.transpose() * pi
}

fn subtract_row(x: &DMatrix<f64>, mu: &DVector<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        row -= mu.transpose();
    }
    out
}

/// `μ = Σ π_n x_n` and `X − 1μᵀ` for both clouds.
pub fn weighted_center(q: &DMatrix<f64>, k: &DMatrix<f64>, pi: &DVector<f64>) -> Result<CenteredClouds> {
    if q.shape() != k.shape() || pi.len() != q.nrows() {
        return Err(PearlError::Dimension(format!(
            "Q {:?}, K {:?}, weights {}",
            q.shape(),
            k.shape(),
            pi.len()
        )));
    }
    let mu_q = weighted_mean(q, pi);
    let mu_k = weighted_mean(k, pi);
    Ok(CenteredClouds {
        q_c: subtract_row(q, &mu_q),
        k_c: subtract_row(k, &mu_k),
        mu_q,
        mu_k,
        weights: pi.clone(),
    })
}

/// `M = K_cᵀ Q_c`.
pub fn cross_covariance(cc: &CenteredClouds) -> DMatrix<f64> {
    cc.k_c.transpose() * &cc.q_c
}

/// Solves the Procrustes problem for one head and records the fit residual.
pub fn solve_alignment(cc: &CenteredClouds, solver: SolverKind, ns_iters: usize) -> Result<AlignmentResult> {
    let mut r = polar_factor(&cross_covariance(cc), solver, ns_iters)?;
    r.residual = Some((&cc.k_c * &r.rotation - &cc.q_c).norm());
    Ok(r)
}

fn softmax_rows(mut s: DMatrix<f64>) -> DMatrix<f64> {
    for mut row in s.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    s
}

/// Row-stochastic attention `softmax(d^{-1/2} Q (K R)ᵀ [+ d^{-1/2} K_c K_cᵀ])`.
pub fn attention_weights(
    head: &HeadTensors,
    rotation: &DMatrix<f64>,
    key_key: Option<&DMatrix<f64>>,
) -> DMatrix<f64> {
    let scale = (head.head_dim() as f64).powf(-0.5);
    let rotated = &head.k * rotation;
    let mut scores = &head.q * rotated.transpose() * scale;
    if let Some(k_c) = key_key {
        scores += k_c * k_c.transpose() * scale;
    }
    softmax_rows(scores)
}

/// Re-attended head output `Ã V` with keys rotated by `rotation`.
pub fn aligned_attention(
    head: &HeadTensors,
    rotation: &DMatrix<f64>,
    use_key_key: bool,
    cc: &CenteredClouds,
) -> Result<DMatrix<f64>> {
    let d = head.head_dim();
    if rotation.shape() != (d, d) || cc.k_c.shape() != head.k.shape() {
        return Err(PearlError::Dimension(format!(
            "rotation {:?} / centered keys {:?} do not fit a head of width {d}",
            rotation.shape(),
            cc.k_c.shape()
        )));
    }
    let a = attention_weights(head, rotation, use_key_key.then_some(&cc.k_c));
    Ok(a * &head.v)
}

/// Unmodified attention output `softmax(d^{-1/2} Q Kᵀ) V`.
pub fn baseline_attention(head: &HeadTensors) -> DMatrix<f64> {
    let d = head.head_dim();
    attention_weights(head, &DMatrix::identity(d, d), None) * &head.v
}

/// Scaled cosine logits of patch features against the prototypes.
///
/// `features` holds one row per patch in row-major grid order. Zero rows score
/// 0 for every class; their count is returned alongside the grid.
pub fn aligned_logits(
    features: &DMatrix<f64>,
    prototypes: &PrototypeMatrix,
    grid_h: usize,
    grid_w: usize,
) -> Result<(LogitGrid, usize)> {
    let t = prototypes.matrix();
    if features.ncols() != t.ncols() {
        return Err(PearlError::Dimension(format!(
            "feature width {} differs from prototype width {}",
            features.ncols(),
            t.ncols()
        )));
    }
    if features.nrows() != grid_h * grid_w {
        return Err(PearlError::Dimension(format!(
            "{} feature rows for a {grid_h}x{grid_w} patch grid",
            features.nrows()
        )));
    }
    let alpha = (t.ncols() as f64).powf(-0.5);
    let classes = t.nrows();
    let dots = features * t.transpose();
    let mut scores = Vec::with_capacity(features.nrows() * classes);
    let mut zero_rows = 0;
    for (r, row) in features.row_iter().enumerate() {
        let norm = row.norm();
        if norm == 0.0 {
            zero_rows += 1;
            scores.extend(std::iter::repeat_n(0.0, classes));
            continue;
        }
        for c in 0..classes {
            let t_norm = t.row(c).norm();
            scores.push(alpha * dots[(r, c)] / (norm * t_norm));
        }
    }
    if zero_rows > 0 {
        log::warn!("{zero_rows} zero-norm patch features scored as 0");
    }
    Ok((LogitGrid::new(grid_h, grid_w, classes, scores)?, zero_rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rng: &mut impl Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    }

    fn random_rotation(rng: &mut impl Rng, d: usize) -> DMatrix<f64> {
        let qr = gaussian(rng, d, d).qr();
        let (q, r) = (qr.q(), qr.r());
        DMatrix::from_fn(d, d, |i, j| q[(i, j)] * r[(j, j)].signum())
    }

    #[test]
    fn equal_norms_give_uniform_weights() {
        let q = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, -1.0, 0.6, 0.8]);
        let w = token_weights(&q, None, false);
        assert!(w.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn weights_follow_row_norms() {
        let q = DMatrix::from_row_slice(3, 2, &[3.0, 0.0, 0.0, 4.0, 0.0, 0.0]);
        let w = token_weights(&q, None, false);
        assert!((w[0] - 3.0 / 7.0).abs() < 1e-15);
        assert!((w[1] - 4.0 / 7.0).abs() < 1e-15);
        assert_eq!(w[2], 0.0);
    }

    #[test]
    fn zeroed_cls_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = gaussian(&mut rng, 5, 3);
        let w = token_weights(&q, Some(0), true);
        assert_eq!(w[0], 0.0);
        assert!((w.sum() - 1.0).abs() < 1e-12);
        let norms: Vec<f64> = (1..5).map(|i| q.row(i).norm()).collect();
        let total: f64 = norms.iter().sum();
        for i in 1..5 {
            assert!((w[i] - norms[i - 1] / total).abs() < 1e-12);
        }
        // Flag off keeps the CLS weight.
        assert!(token_weights(&q, Some(0), false)[0] > 0.0);
    }

    #[test]
    fn all_zero_queries_fall_back_to_uniform() {
        let w = token_weights(&DMatrix::zeros(4, 2), None, false);
        assert!(w.iter().all(|&v| v == 0.25));
        let w = token_weights(&DMatrix::zeros(4, 2), Some(0), true);
        assert_eq!(w[0], 0.0);
        assert!((w.sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn centering_identical_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = gaussian(&mut rng, 6, 3);
        let pi = DVector::from_element(6, 1.0 / 6.0);
        let cc = weighted_center(&q, &q, &pi).unwrap();
        assert_eq!(cc.q_c, cc.k_c);
        for c in 0..3 {
            let mean = q.column(c).mean();
            assert!((cc.mu_q[c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn centering_point_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = gaussian(&mut rng, 5, 3);
        let k = gaussian(&mut rng, 5, 3);
        let mut pi = DVector::zeros(5);
        pi[2] = 1.0;
        let cc = weighted_center(&q, &k, &pi).unwrap();
        assert_eq!(cc.mu_q, q.row(2).transpose());
        assert!(cc.q_c.row(2).norm() == 0.0 && cc.k_c.row(2).norm() == 0.0);
    }

    #[test]
    fn centered_weighted_mean_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = gaussian(&mut rng, 6, 3);
        let k = gaussian(&mut rng, 6, 3);
        let pi = token_weights(&q, None, false);
        let cc = weighted_center(&q, &k, &pi).unwrap();
        // Oracle: explicit weighted sum of centered rows.
        for x in [&cc.q_c, &cc.k_c] {
            for c in 0..3 {
                let s: f64 = (0..6).map(|n| pi[n] * x[(n, c)]).sum();
                assert!(s.abs() < 1e-6);
            }
        }
        assert!(weighted_center(&q, &k, &DVector::zeros(5)).is_err());
    }

    #[test]
    fn cross_covariance_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = gaussian(&mut rng, 8, 3);
        let pi = DVector::from_element(8, 0.125);
        let cc = weighted_center(&q, &q, &pi).unwrap();
        let m = cross_covariance(&cc);
        assert!((&m - m.transpose()).norm() < 1e-12);
        assert!(m.clone().symmetric_eigenvalues().iter().all(|&e| e > -1e-12));

        // Orthonormal columns, keys = queries with columns permuted.
        let qc = DMatrix::from_row_slice(4, 3, &[
            0.5, 0.5, 0.5, 0.5, -0.5, -0.5, 0.5, 0.5, -0.5, 0.5, -0.5, 0.5,
        ]);
        let perm = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let kc = &qc * &perm;
        let cc = CenteredClouds {
            q_c: qc.clone(),
            k_c: kc,
            mu_q: DVector::zeros(3),
            mu_k: DVector::zeros(3),
            weights: DVector::zeros(4),
        };
        let gram = qc.transpose() * &qc;
        assert!((cross_covariance(&cc) - perm.transpose() * gram).norm() < 1e-12);

        let cc = CenteredClouds { k_c: DMatrix::zeros(4, 3), ..cc };
        assert_eq!(cross_covariance(&cc), DMatrix::zeros(3, 3));
    }

    #[test]
    fn exact_fit_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for d in 2..=6 {
            let q = gaussian(&mut rng, 20, d);
            let r0 = random_rotation(&mut rng, d);
            let k = &q * r0.transpose();
            let pi = token_weights(&q, None, false);
            let cc = weighted_center(&q, &k, &pi).unwrap();
            for solver in [SolverKind::Svd, SolverKind::NewtonSchulz] {
                let r = solve_alignment(&cc, solver, DEFAULT_NS_ITERS).unwrap();
                assert!((&r.rotation - &r0).norm() < 1e-5, "d={d} {solver}");
                assert!(r.residual.unwrap() < 1e-6);
                // Norm preservation.
                assert!(((&k * &r.rotation).norm() - k.norm()).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn identity_rotation_reduces_to_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let head = HeadTensors::new(
            gaussian(&mut rng, 7, 4),
            gaussian(&mut rng, 7, 4),
            gaussian(&mut rng, 7, 4),
        )
        .unwrap();
        let pi = token_weights(&head.q, Some(0), true);
        let cc = weighted_center(&head.q, &head.k, &pi).unwrap();
        let y = aligned_attention(&head, &DMatrix::identity(4, 4), false, &cc).unwrap();
        assert!((y - baseline_attention(&head)).norm() < 1e-12);
    }

    #[test]
    fn attention_matches_dense_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (n, d) = (8, 4);
        let head = HeadTensors::new(
            gaussian(&mut rng, n, d),
            gaussian(&mut rng, n, d),
            gaussian(&mut rng, n, d),
        )
        .unwrap();
        let pi = token_weights(&head.q, Some(0), true);
        let cc = weighted_center(&head.q, &head.k, &pi).unwrap();
        let r = solve_alignment(&cc, SolverKind::Svd, 8).unwrap().rotation;
        let y = aligned_attention(&head, &r, true, &cc).unwrap();

        // Scalar re-evaluation of every score, softmax and weighted sum.
        let kr: Vec<Vec<f64>> = (0..n)
            .map(|m| (0..d).map(|j| (0..d).map(|l| head.k[(m, l)] * r[(l, j)]).sum()).collect())
            .collect();
        let s = 1.0 / (d as f64).sqrt();
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|m| {
                    let qk: f64 = (0..d).map(|j| head.q[(i, j)] * kr[m][j]).sum();
                    let kk: f64 = (0..d).map(|j| cc.k_c[(i, j)] * cc.k_c[(m, j)]).sum();
                    s * qk + s * kk
                })
                .collect();
            let e: Vec<f64> = scores.iter().map(|v| v.exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..d {
                let want: f64 = (0..n).map(|m| e[m] / z * head.v[(m, j)]).sum();
                assert!((y[(i, j)] - want).abs() < 1e-10);
            }
        }
        let a = attention_weights(&head, &r, Some(&cc.k_c));
        for row in a.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn logits_cases() {
        let t = PrototypeMatrix::from_matrix(DMatrix::from_row_slice(
            2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        ))
        .unwrap();
        let f = DMatrix::from_row_slice(2, 4, &[3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 5.0]);
        let (z, zero_rows) = aligned_logits(&f, &t, 1, 2).unwrap();
        assert_eq!(zero_rows, 0);
        assert!((z.get(0, 0, 0) - 0.5).abs() < 1e-15);
        assert_eq!(z.get(0, 0, 1), 0.0);
        assert_eq!(z.node(1), &[0.0, 0.0]);

        let f0 = DMatrix::zeros(1, 4);
        let (z, zero_rows) = aligned_logits(&f0, &t, 1, 1).unwrap();
        assert_eq!((zero_rows, z.node(0)), (1, &[0.0, 0.0][..]));
        assert!(aligned_logits(&f0, &t, 2, 1).is_err());
    }

    #[test]
    fn logits_match_normalized_dot_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let t = PrototypeMatrix::normalized(gaussian(&mut rng, 3, 6)).unwrap();
        let f = gaussian(&mut rng, 4, 6);
        let (z, _) = aligned_logits(&f, &t, 2, 2).unwrap();
        let bound = 1.0 / 6f64.sqrt();
        for p in 0..4 {
            for c in 0..3 {
                let dot: f64 = (0..6).map(|j| f[(p, j)] * t.matrix()[(c, j)]).sum();
                let nf: f64 = (0..6).map(|j| f[(p, j)].powi(2)).sum::<f64>().sqrt();
                let want = bound * dot / nf;
                assert!((z.node(p)[c] - want).abs() < 1e-12);
                assert!(z.node(p)[c].abs() <= bound + 1e-12);
            }
        }
    }
}

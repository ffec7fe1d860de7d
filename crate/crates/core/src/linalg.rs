//! Small dense linear algebra used by the denoisers and the state evolution.
//!
//! Every matrix handled here is L×L or 2L×2L (L ≤ 4), so clarity wins over
//! speed. The large products (design matrix times iterate) go straight
//! through nalgebra's gemm in the AMP engine.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{AmpError, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Condition number above which an inversion is ridge-regularized.
pub const RIDGE_COND_LIMIT: f64 = 1e12;
/// Ridge weight relative to tr(A)/L.
pub const RIDGE_SCALE: f64 = 1e-10;
/// Eigenvalues below `-PSD_TOLERANCE * max(1, λ_max)` mean the matrix is not PSD.
pub const PSD_TOLERANCE: f64 = 1e-8;

pub fn symmetrize(a: &Mat) -> Mat {
    (a + a.transpose()) * 0.5
}

pub fn is_finite(a: &Mat) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Spectral norm (largest singular value).
pub fn op_norm(a: &Mat) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone().singular_values().max()
}

pub fn condition_number(a: &Mat) -> f64 {
    let sv = a.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if max == 0.0 {
        f64::INFINITY
    } else if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Moore-Penrose pseudoinverse with the usual `eps * max(m, n) * σ_max` cutoff.
pub fn pinv(a: &Mat) -> Mat {
    let (r, c) = a.shape();
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = f64::EPSILON * (r.max(c) as f64) * smax;
    let u = svd.u.expect("requested u");
    let vt = svd.v_t.expect("requested v_t");
    let mut out = Mat::zeros(c, r);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > tol && s > 0.0 {
            out += (vt.row(k).transpose() * u.column(k).transpose()) / s;
        }
    }
    out
}

/// Pseudoinverse dropping singular values below `rel * σ_max`.
pub fn truncated_pinv(a: &Mat, rel: f64) -> Mat {
    let (r, c) = a.shape();
    let svd = a.clone().svd(true, true);
    let tol = rel * svd.singular_values.max();
    let u = svd.u.expect("requested u");
    let vt = svd.v_t.expect("requested v_t");
    let mut out = Mat::zeros(c, r);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > tol && s > 0.0 {
            out += (vt.row(k).transpose() * u.column(k).transpose()) / s;
        }
    }
    out
}

/// Result of a guarded inversion.
#[derive(Debug, Clone)]
pub struct Inverse {
    pub inverse: Mat,
    /// The matrix that was actually inverted (A, or A + λI on the ridge path).
    pub inverted: Mat,
    pub ridged: bool,
    /// A was identically zero, so the pseudoinverse (zero) was returned.
    pub degenerate: bool,
}

/// Inverts a symmetric PSD matrix with a guard against near-singularity.
///
/// The condition number is measured after symmetric diagonal equilibration
/// `D^{-1/2} A D^{-1/2}`, so blocks living on very different scales (for
/// example a huge noise variance next to unit signal variances) are not
/// mistaken for singular ones. Above 1e12 the equilibrated matrix receives the
/// ridge `1e-10·tr/L·I`, which in the original scale is `A + 1e-10·diag(A)`.
/// Rows with a zero diagonal get the plain `1e-10·tr(A)/L` weight, and an
/// all-zero matrix falls back to the pseudoinverse.
pub fn regularized_inverse(a: &Mat) -> Inverse {
    let l = a.nrows();
    assert_eq!(l, a.ncols(), "regularized_inverse needs a square matrix");
    if l == 0 {
        return Inverse {
            inverse: Mat::zeros(0, 0),
            inverted: Mat::zeros(0, 0),
            ridged: false,
            degenerate: false,
        };
    }
    let mean_diag = a.trace() / l as f64;
    if !(mean_diag > 0.0) || !is_finite(a) {
        return Inverse {
            inverse: pinv(a),
            inverted: a.clone(),
            ridged: true,
            degenerate: true,
        };
    }
    let scale: Vector = a
        .diagonal()
        .map(|d| if d > 0.0 { d } else { mean_diag });
    let root = scale.map(f64::sqrt);
    let equilibrated = Mat::from_fn(l, l, |i, j| a[(i, j)] / (root[i] * root[j]));
    let cond = condition_number(&equilibrated);
    if cond.is_finite() && cond <= RIDGE_COND_LIMIT {
        if let Some(inv) = a.clone().try_inverse() {
            if is_finite(&inv) {
                return Inverse {
                    inverse: inv,
                    inverted: a.clone(),
                    ridged: false,
                    degenerate: false,
                };
            }
        }
    }
    let lambda = RIDGE_SCALE * equilibrated.trace() / l as f64;
    let shifted = a + Mat::from_diagonal(&(&scale * lambda));
    match shifted.clone().try_inverse() {
        Some(inv) if is_finite(&inv) => Inverse {
            inverse: inv,
            inverted: shifted,
            ridged: true,
            degenerate: false,
        },
        _ => Inverse {
            inverse: pinv(a),
            inverted: a.clone(),
            ridged: true,
            degenerate: true,
        },
    }
}

/// Like [`regularized_inverse`], but an ill-conditioned symmetric PSD matrix
/// gets a truncated spectral inverse of its equilibrated form instead of a
/// ridge: eigenvalues below `1e-10·λ_max` are dropped.
///
/// The result G satisfies AGA ≈ A, so products such as Σ₁₂Σ₂₂⁻¹Σ₂₁ stay exact
/// when A is genuinely singular (identical signals), where the ridge would
/// amplify rounding noise in the null space by ~1e10.
pub fn truncated_inverse(a: &Mat) -> Inverse {
    let plain = regularized_inverse(a);
    if !plain.ridged || plain.degenerate {
        return plain;
    }
    let l = a.nrows();
    let sym = symmetrize(a);
    let mean_diag = sym.trace() / l as f64;
    let root: Vector = sym
        .diagonal()
        .map(|d| if d > 0.0 { d.sqrt() } else { mean_diag.sqrt() });
    let equilibrated = Mat::from_fn(l, l, |i, j| sym[(i, j)] / (root[i] * root[j]));
    let eig = SymmetricEigen::new(equilibrated);
    let cutoff = RIDGE_SCALE * eig.eigenvalues.max();
    let inv_values = eig
        .eigenvalues
        .map(|v| if v > cutoff { 1.0 / v } else { 0.0 });
    let inner = &eig.eigenvectors * Mat::from_diagonal(&inv_values) * eig.eigenvectors.transpose();
    let inverse = Mat::from_fn(l, l, |i, j| inner[(i, j)] / (root[i] * root[j]));
    Inverse {
        inverse: symmetrize(&inverse),
        inverted: sym,
        ridged: true,
        degenerate: false,
    }
}

/// Inverse when well conditioned, pseudoinverse otherwise.
pub fn inverse_or_pinv(a: &Mat) -> (Mat, bool) {
    let cond = condition_number(a);
    if cond.is_finite() && cond <= RIDGE_COND_LIMIT {
        if let Some(inv) = a.clone().try_inverse() {
            return (inv, false);
        }
    }
    (pinv(a), true)
}

/// Clips tiny negative eigenvalues of a symmetric matrix to zero.
///
/// Fails when an eigenvalue is below `-1e-8 * max(1, λ_max)`.
pub fn repair_psd(a: &Mat) -> Result<Mat> {
    let sym = symmetrize(a);
    if !is_finite(&sym) {
        return Err(AmpError::numerical("non-finite entries in covariance"));
    }
    let eig = SymmetricEigen::new(sym.clone());
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let tol = PSD_TOLERANCE * lmax.max(1.0);
    let lmin = eig.eigenvalues.min();
    if lmin < -tol {
        return Err(AmpError::numerical(format!(
            "matrix is not positive semidefinite (min eigenvalue {lmin:e})"
        )));
    }
    if lmin >= 0.0 {
        return Ok(sym);
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    Ok(symmetrize(
        &(&eig.eigenvectors * Mat::from_diagonal(&clipped) * eig.eigenvectors.transpose()),
    ))
}

/// Returns F with F Fᵀ = A for a PSD matrix A (possibly singular).
pub fn psd_factor(a: &Mat) -> Result<Mat> {
    let repaired = repair_psd(a)?;
    let eig = SymmetricEigen::new(repaired);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * Mat::from_diagonal(&roots))
}

/// log det of a symmetric positive definite matrix.
pub fn log_det_spd(a: &Mat) -> f64 {
    match a.clone().cholesky() {
        Some(ch) => 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>(),
        None => {
            let eig = SymmetricEigen::new(symmetrize(a));
            eig.eigenvalues
                .iter()
                .map(|v| v.max(f64::MIN_POSITIVE).ln())
                .sum()
        }
    }
}

/// Zero-mean multivariate Gaussian log-density with a precomputed
/// (possibly ridge-regularized) precision matrix.
#[derive(Debug, Clone)]
pub struct GaussianLogDensity {
    precision: Mat,
    log_norm: f64,
    pub ridged: bool,
}

impl GaussianLogDensity {
    pub fn new(cov: &Mat) -> Self {
        let inv = regularized_inverse(&symmetrize(cov));
        let d = cov.nrows() as f64;
        let log_det = if inv.degenerate {
            0.0
        } else {
            log_det_spd(&inv.inverted)
        };
        GaussianLogDensity {
            precision: symmetrize(&inv.inverse),
            log_norm: -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + log_det),
            ridged: inv.ridged,
        }
    }

    pub fn precision(&self) -> &Mat {
        &self.precision
    }

    pub fn log_pdf(&self, x: &Vector) -> f64 {
        self.log_norm - 0.5 * x.dot(&(&self.precision * x))
    }
}

/// Numerically stable log Σ exp(vᵢ).
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Extracts the (i, j) L×L block of a 2L×2L matrix, with i, j ∈ {0, 1}.
pub fn block(a: &Mat, l: usize, i: usize, j: usize) -> Mat {
    a.view((i * l, j * l), (l, l)).into_owned()
}

/// Assembles a 2L×2L matrix from its four L×L blocks.
pub fn from_blocks(b11: &Mat, b12: &Mat, b21: &Mat, b22: &Mat) -> Mat {
    let l = b11.nrows();
    let mut out = Mat::zeros(2 * l, 2 * l);
    out.view_mut((0, 0), (l, l)).copy_from(b11);
    out.view_mut((0, l), (l, l)).copy_from(b12);
    out.view_mut((l, 0), (l, l)).copy_from(b21);
    out.view_mut((l, l), (l, l)).copy_from(b22);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn well_conditioned_inverse_is_exact() {
        let a = Mat::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let inv = regularized_inverse(&a);
        assert!(!inv.ridged);
        assert_relative_eq!(&a * &inv.inverse, Mat::identity(2, 2), epsilon = 1e-12);
    }

    #[test]
    fn singular_matrix_takes_ridge_path() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let inv = regularized_inverse(&a);
        assert!(inv.ridged && !inv.degenerate);
        assert!(is_finite(&inv.inverse));
        // in-range vectors are recovered
        let x = Vector::from_vec(vec![1.0, 1.0]);
        let y = &a * (&inv.inverse * &x);
        assert_relative_eq!(y, x, epsilon = 1e-6);
    }

    #[test]
    fn mixed_scales_are_not_ridged() {
        let a = Mat::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 1e12]);
        let inv = regularized_inverse(&a);
        assert!(!inv.ridged);
        assert_relative_eq!(&a * &inv.inverse, Mat::identity(2, 2), epsilon = 1e-9);
    }

    #[test]
    fn zero_matrix_is_degenerate() {
        let inv = regularized_inverse(&Mat::zeros(2, 2));
        assert!(inv.degenerate);
        assert_eq!(inv.inverse, Mat::zeros(2, 2));
    }

    #[test]
    fn pinv_of_diag() {
        let a = Mat::from_diagonal(&Vector::from_vec(vec![2.0, 0.0]));
        assert_relative_eq!(
            pinv(&a),
            Mat::from_diagonal(&Vector::from_vec(vec![0.5, 0.0])),
            epsilon = 1e-15
        );
    }

    #[test]
    fn repair_clips_tiny_negatives_and_rejects_large_ones() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-12]);
        let r = repair_psd(&a).unwrap();
        assert!(r[(1, 1)] >= 0.0);
        let b = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-3]);
        assert!(repair_psd(&b).is_err());
    }

    #[test]
    fn psd_factor_reproduces_singular_matrix() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let f = psd_factor(&a).unwrap();
        assert_relative_eq!(&f * f.transpose(), a, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_density_matches_scalar_formula() {
        let d = GaussianLogDensity::new(&Mat::from_element(1, 1, 4.0));
        let x = Vector::from_element(1, 1.0);
        let expected = -0.5 * (2.0 * std::f64::consts::PI * 4.0).ln() - 0.5 * 0.25;
        assert_relative_eq!(d.log_pdf(&x), expected, epsilon = 1e-14);
    }

    #[test]
    fn log_sum_exp_handles_underflow() {
        let v = [-1000.0, -1000.0];
        assert_relative_eq!(log_sum_exp(&v), -1000.0 + 2f64.ln(), epsilon = 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }
}

//! Small dense solvers: non-negative least squares and least-squares rigid rotation.

use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector, Matrix3, Vector3, SVD};

/// Solves `min ‖A x − b‖²` subject to `x ≥ 0` (Lawson–Hanson active set),
/// given the normal-equation terms `gram = AᵀA` and `rhs = Aᵀb`.
pub fn nnls_normal(gram: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let n = rhs.len();
    let mut x = DVector::<f64>::zeros(n);
    let mut passive = vec![false; n];
    let scale = rhs.amax().max(gram.amax()).max(f64::MIN_POSITIVE);
    let tol = 1e-13 * scale;

    for _ in 0..3 * n + 3 {
        let w = rhs - gram * &x;
        let next = (0..n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&a, &b| w[a].total_cmp(&w[b]));
        let Some(j) = next else { break };
        passive[j] = true;

        for _ in 0..3 * n + 3 {
            let z = solve_passive(gram, rhs, &passive);
            if (0..n).all(|k| !passive[k] || z[k] > 0.0) {
                x = z;
                break;
            }
            let mut alpha = f64::INFINITY;
            for k in 0..n {
                if passive[k] && z[k] <= 0.0 {
                    let denom = x[k] - z[k];
                    if denom > 0.0 {
                        alpha = alpha.min(x[k] / denom);
                    }
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            x += (&z - &x) * alpha;
            let floor = 1e-14 * (1.0 + x.amax());
            for k in 0..n {
                if passive[k] && x[k] <= floor {
                    passive[k] = false;
                    x[k] = 0.0;
                }
            }
        }
    }
    x
}

fn solve_passive(gram: &DMatrix<f64>, rhs: &DVector<f64>, passive: &[bool]) -> DVector<f64> {
    let idx: Vec<usize> = (0..passive.len()).filter(|&k| passive[k]).collect();
    let m = idx.len();
    let mut out = DVector::<f64>::zeros(passive.len());
    if m == 0 {
        return out;
    }
    let sub = DMatrix::from_fn(m, m, |r, c| gram[(idx[r], idx[c])]);
    let sub_rhs = DVector::from_fn(m, |r, _| rhs[idx[r]]);
    let sol = match sub.clone().cholesky() {
        Some(ch) => ch.solve(&sub_rhs),
        None => sub
            .lu()
            .solve(&sub_rhs)
            .unwrap_or_else(|| DVector::zeros(m)),
    };
    for (r, &k) in idx.iter().enumerate() {
        out[k] = sol[r];
    }
    out
}

/// Rotation `R` minimizing `Σ ‖R·source_i − target_i‖²` over already-centered
/// point pairs. Always a proper rotation (det = +1).
pub fn best_rotation(source: &[Vector3<f64>], target: &[Vector3<f64>]) -> Matrix3<f64> {
    let mut cov = Matrix3::<f64>::zeros();
    for (a, b) in source.iter().zip(target) {
        cov += a * b.transpose();
    }
    let svd = SVD::new(cov, true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Matrix3::identity();
    };
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose()
}

pub fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    let mut c = Vector3::zeros();
    for p in points {
        c += p;
    }
    c / points.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nnls_matches_unconstrained_when_positive() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, -1.0]);
        let truth = DVector::from_vec(vec![0.3, 0.7]);
        let b = &a * &truth;
        let x = nnls_normal(&(a.transpose() * &a), &(a.transpose() * &b));
        assert!((x - truth).amax() < 1e-12);
    }

    #[test]
    fn nnls_clips_negative_component() {
        // Unconstrained optimum is (1, -1); with x >= 0 the second is pinned at 0.
        let a = DMatrix::<f64>::identity(2, 2);
        let b = DVector::from_vec(vec![1.0, -1.0]);
        let x = nnls_normal(&(a.transpose() * &a), &(a.transpose() * &b));
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert_eq!(x[1], 0.0);
    }

    #[test]
    fn nnls_handles_opposing_columns() {
        let col = [1.0, 2.0, -0.5];
        let a = DMatrix::from_fn(3, 2, |r, c| if c == 0 { col[r] } else { -col[r] });
        let b = DVector::from_fn(3, |r, _| -0.4 * col[r]);
        let x = nnls_normal(&(a.transpose() * &a), &(a.transpose() * &b));
        assert!(x[0].abs() < 1e-12);
        assert!((x[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn rotation_recovered_from_rotated_points() {
        let r = nalgebra::Rotation3::from_euler_angles(0.3, -0.2, 0.7).into_inner();
        let pts = [
            Vector3::new(1.0, 0.0, 0.2),
            Vector3::new(0.0, 1.0, -0.3),
            Vector3::new(-1.0, -0.5, 0.1),
            Vector3::new(0.2, 0.3, 1.0),
        ];
        let c = centroid(&pts);
        let src: Vec<_> = pts.iter().map(|p| p - c).collect();
        let dst: Vec<_> = src.iter().map(|p| r * p).collect();
        let est = best_rotation(&src, &dst);
        assert!((est - r).amax() < 1e-12);
        assert!((est.determinant() - 1.0).abs() < 1e-12);
    }
}

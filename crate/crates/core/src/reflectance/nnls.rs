//! Small nonnegative least squares (Lawson–Hanson active set) operating on
//! the normal equations. The problems here are tiny: K unknowns per weight
//! row or per basis-column update.

use nalgebra::{DMatrix, DVector};

/// Solve `min ‖Ax − b‖² s.t. x ≥ 0` given `AᵀA` and `Aᵀb`.
pub fn nnls_normal(ata: &DMatrix<f64>, atb: &DVector<f64>, tol: f64) -> DVector<f64> {
    let n = atb.len();
    let mut passive = vec![false; n];
    let mut x = DVector::zeros(n);
    // Gradient of ½‖Ax−b‖² is AᵀA x − Aᵀb.
    let mut w = atb - ata * &x;
    for _ in 0..(3 * n + 10) {
        // Most negative-gradient inactive variable.
        let mut best = None;
        let mut best_w = tol;
        for i in 0..n {
            if !passive[i] && w[i] > best_w {
                best_w = w[i];
                best = Some(i);
            }
        }
        let Some(enter) = best else { break };
        passive[enter] = true;
        loop {
            // Solve the unconstrained problem on the passive set.
            let idx: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
            let k = idx.len();
            let mut sub = DMatrix::zeros(k, k);
            let mut rhs = DVector::zeros(k);
            for (r, &i) in idx.iter().enumerate() {
                rhs[r] = atb[i];
                for (c, &j) in idx.iter().enumerate() {
                    sub[(r, c)] = ata[(i, j)];
                }
            }
            let sol = sub
                .clone()
                .cholesky()
                .map(|ch| ch.solve(&rhs))
                .unwrap_or_else(|| {
                    sub.svd(true, true)
                        .solve(&rhs, 1e-12)
                        .unwrap_or_else(|_| DVector::zeros(k))
                });
            if sol.iter().all(|&v| v > 0.0) {
                x.fill(0.0);
                for (r, &i) in idx.iter().enumerate() {
                    x[i] = sol[r];
                }
                break;
            }
            // Step toward the subproblem solution until a variable hits 0.
            let mut alpha = f64::MAX;
            for (r, &i) in idx.iter().enumerate() {
                if sol[r] <= 0.0 {
                    let a = x[i] / (x[i] - sol[r]);
                    alpha = alpha.min(a);
                }
            }
            let alpha = alpha.clamp(0.0, 1.0);
            for (r, &i) in idx.iter().enumerate() {
                x[i] += alpha * (sol[r] - x[i]);
                if x[i] <= tol.max(1e-14) {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
        }
        w = atb - ata * &x;
    }
    x
}

/// Dense-matrix convenience wrapper: `min ‖Ax − b‖², x ≥ 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>, tol: f64) -> DVector<f64> {
    let ata = a.transpose() * a;
    let atb = a.transpose() * b;
    nnls_normal(&ata, &atb, tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconstrained_optimum_in_positive_orthant() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let x = nnls(&a, &b, 1e-12);
        // Least squares solution of this system is x = (4/3, 7/3).
        assert!((x[0] - 4.0 / 3.0).abs() < 1e-10);
        assert!((x[1] - 7.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn negative_solution_is_clamped() {
        // b pulls x[1] negative; NNLS must zero it.
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = DVector::from_vec(vec![2.0, -3.0]);
        let x = nnls(&a, &b, 1e-12);
        assert!((x[0] - 2.0).abs() < 1e-12);
        assert_eq!(x[1], 0.0);
    }

    #[test]
    fn matches_projection_on_random_problems() {
        // Optimality (KKT): gradient ≥ 0 where x = 0, ≈ 0 where x > 0.
        let mut seed = 5u64;
        let mut rand01 = move || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
            (seed >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..50 {
            let rows = 8;
            let cols = 4;
            let a = DMatrix::from_fn(rows, cols, |_, _| rand01() * 2.0 - 0.5);
            let b = DVector::from_fn(rows, |_, _| rand01() * 2.0 - 1.0);
            let x = nnls(&a, &b, 1e-12);
            let grad = a.transpose() * (&a * &x - &b);
            for i in 0..cols {
                if x[i] > 1e-10 {
                    assert!(grad[i].abs() < 1e-8, "active gradient {}", grad[i]);
                } else {
                    assert!(grad[i] > -1e-8, "inactive gradient {}", grad[i]);
                }
            }
        }
    }
}

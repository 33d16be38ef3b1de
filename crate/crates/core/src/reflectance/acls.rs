//! Alternating constrained least squares: nonnegative low-rank factorization
//! `V ≈ W·H` of a matrix with missing entries. Rows of W and columns of H
//! are updated by exact small NNLS solves over the observed entries, so the
//! masked objective is non-increasing at every half-step. An optional
//! second-difference smoothness penalty along the θ_h axis of BRDF-layout
//! columns is supported (solved by monotone column sweeps).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use super::nnls::nnls_normal;
use super::{N_PHI, N_THETA_D, N_THETA_H};

#[derive(Debug, Error)]
pub enum AclsError {
    #[error("rank {k} exceeds the number of rows {rows}")]
    RankTooLarge { k: usize, rows: usize },
    #[error("observation matrix contains non-finite observed entries")]
    NonFinite,
    #[error("observation matrix has no observed entries")]
    AllMissing,
}

#[derive(Debug, Clone, Copy)]
pub struct AclsOptions {
    pub iterations: usize,
    /// Stop when the relative objective change falls below this.
    pub tol: f64,
    pub seed: u64,
    /// Weight of the θ_h second-difference penalty on H (0 disables). Only
    /// meaningful with `brdf_layout`.
    pub smoothness: f64,
    /// Columns follow the 90×2×5 BRDF layout (flat = θ_h·10 + θ_d·5 + φ).
    pub brdf_layout: bool,
}

impl Default for AclsOptions {
    fn default() -> Self {
        Self {
            iterations: 200,
            tol: 1e-10,
            seed: 1,
            smoothness: 0.0,
            brdf_layout: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AclsResult {
    /// Row-major N×K mixing weights.
    pub w: Vec<f64>,
    /// Row-major K×M basis matrix.
    pub h: Vec<f64>,
    /// Objective after every half-step (masked residual + penalty).
    pub objective_trace: Vec<f64>,
    pub empty_rows: usize,
}

/// Masked Frobenius objective plus smoothness penalty.
fn objective(
    values: &[f64],
    mask: &[bool],
    w: &[f64],
    h: &[f64],
    n: usize,
    m: usize,
    k: usize,
    options: &AclsOptions,
) -> f64 {
    let mut obj = 0.0;
    for i in 0..n {
        for j in 0..m {
            if !mask[i * m + j] {
                continue;
            }
            let mut pred = 0.0;
            for kk in 0..k {
                pred += w[i * k + kk] * h[kk * m + j];
            }
            let r = pred - values[i * m + j];
            obj += r * r;
        }
    }
    if options.smoothness > 0.0 && options.brdf_layout {
        for kk in 0..k {
            for td in 0..N_THETA_D {
                for phi in 0..N_PHI {
                    for t in 1..N_THETA_H - 1 {
                        let col = |tt: usize| tt * N_THETA_D * N_PHI + td * N_PHI + phi;
                        let d = h[kk * m + col(t - 1)] - 2.0 * h[kk * m + col(t)]
                            + h[kk * m + col(t + 1)];
                        obj += options.smoothness * d * d;
                    }
                }
            }
        }
    }
    obj
}

/// Factorize a masked nonnegative matrix. `values`/`mask` are row-major
/// N×M; missing entries are ignored by every norm.
pub fn acls_factorize(
    values: &[f64],
    mask: &[bool],
    n: usize,
    m: usize,
    k: usize,
    options: &AclsOptions,
) -> Result<AclsResult, AclsError> {
    assert_eq!(values.len(), n * m);
    assert_eq!(mask.len(), n * m);
    if k > n {
        return Err(AclsError::RankTooLarge { k, rows: n });
    }
    for i in 0..n * m {
        if mask[i] && !values[i].is_finite() {
            return Err(AclsError::NonFinite);
        }
    }
    if !mask.iter().any(|&b| b) {
        return Err(AclsError::AllMissing);
    }

    // Column means of the observed data seed H; a deterministic jitter
    // breaks the rank-1 symmetry between the K bases.
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut col_mean = vec![0.0f64; m];
    for j in 0..m {
        let mut s = 0.0;
        let mut c = 0usize;
        for i in 0..n {
            if mask[i * m + j] {
                s += values[i * m + j];
                c += 1;
            }
        }
        col_mean[j] = if c > 0 { s / c as f64 } else { 0.0 };
    }
    let grand_mean = col_mean.iter().sum::<f64>() / m as f64;
    let mut h: Vec<f64> = (0..k * m)
        .map(|idx| {
            let j = idx % m;
            let base = if col_mean[j] > 0.0 {
                col_mean[j]
            } else {
                grand_mean.max(1e-6)
            };
            base * (0.25 + 1.5 * rng.random::<f64>())
        })
        .collect();
    let mut w = vec![0.0f64; n * k];
    let mut trace = Vec::new();
    let empty_rows = (0..n)
        .filter(|&i| (0..m).all(|j| !mask[i * m + j]))
        .count();

    let mut prev_obj = f64::MAX;
    for _ in 0..options.iterations {
        // W-step: exact NNLS per row over its observed columns.
        let h_ref = &h;
        let new_w: Vec<f64> = (0..n)
            .into_par_iter()
            .flat_map_iter(|i| {
                let mut ata = DMatrix::<f64>::zeros(k, k);
                let mut atb = DVector::<f64>::zeros(k);
                let mut any = false;
                for j in 0..m {
                    if !mask[i * m + j] {
                        continue;
                    }
                    any = true;
                    for a in 0..k {
                        let ha = h_ref[a * m + j];
                        atb[a] += ha * values[i * m + j];
                        for b in a..k {
                            ata[(a, b)] += ha * h_ref[b * m + j];
                        }
                    }
                }
                for a in 0..k {
                    for b in 0..a {
                        ata[(a, b)] = ata[(b, a)];
                    }
                }
                let row = if any {
                    nnls_normal(&ata, &atb, 1e-10)
                } else {
                    DVector::zeros(k)
                };
                (0..k).map(move |kk| row[kk]).collect::<Vec<f64>>()
            })
            .collect();
        w = new_w;
        trace.push(objective(values, mask, &w, &h, n, m, k, options));

        // H-step: exact NNLS per column (parallel when no smoothness
        // coupling, monotone in-place sweep otherwise).
        if options.smoothness > 0.0 && options.brdf_layout {
            h_step_smooth(values, mask, &w, &mut h, n, m, k, options);
        } else {
            let w_ref = &w;
            let cols: Vec<Vec<f64>> = (0..m)
                .into_par_iter()
                .map(|j| {
                    let mut ata = DMatrix::<f64>::zeros(k, k);
                    let mut atb = DVector::<f64>::zeros(k);
                    let mut any = false;
                    for i in 0..n {
                        if !mask[i * m + j] {
                            continue;
                        }
                        any = true;
                        for a in 0..k {
                            let wa = w_ref[i * k + a];
                            atb[a] += wa * values[i * m + j];
                            for b in a..k {
                                ata[(a, b)] += wa * w_ref[i * k + b];
                            }
                        }
                    }
                    for a in 0..k {
                        for b in 0..a {
                            ata[(a, b)] = ata[(b, a)];
                        }
                    }
                    if any {
                        let col = nnls_normal(&ata, &atb, 1e-10);
                        (0..k).map(|kk| col[kk]).collect()
                    } else {
                        vec![0.0; k]
                    }
                })
                .collect();
            for (j, col) in cols.into_iter().enumerate() {
                for (kk, v) in col.into_iter().enumerate() {
                    h[kk * m + j] = v;
                }
            }
        }
        let obj = objective(values, mask, &w, &h, n, m, k, options);
        trace.push(obj);
        if prev_obj.is_finite() {
            let rel = (prev_obj - obj).abs() / prev_obj.abs().max(1e-300);
            if rel < options.tol {
                break;
            }
        }
        prev_obj = obj;
    }

    Ok(AclsResult {
        w,
        h,
        objective_trace: trace,
        empty_rows,
    })
}

/// One monotone sweep pass of the smoothness-coupled H update: each θ_h
/// column is exactly minimized with its neighbors held fixed (twice, so
/// information flows both ways).
#[allow(clippy::too_many_arguments)]
fn h_step_smooth(
    values: &[f64],
    mask: &[bool],
    w: &[f64],
    h: &mut [f64],
    n: usize,
    m: usize,
    k: usize,
    options: &AclsOptions,
) {
    let mu = options.smoothness;
    let col_of = |t: usize, td: usize, phi: usize| t * N_THETA_D * N_PHI + td * N_PHI + phi;
    for _sweep in 0..2 {
        for td in 0..N_THETA_D {
            for phi in 0..N_PHI {
                for t in 0..N_THETA_H {
                    let j = col_of(t, td, phi);
                    let mut ata = DMatrix::<f64>::zeros(k, k);
                    let mut atb = DVector::<f64>::zeros(k);
                    for i in 0..n {
                        if !mask[i * m + j] {
                            continue;
                        }
                        for a in 0..k {
                            let wa = w[i * k + a];
                            atb[a] += wa * values[i * m + j];
                            for b in a..k {
                                ata[(a, b)] += wa * w[i * k + b];
                            }
                        }
                    }
                    // Penalty rows: every second difference containing t.
                    // D_s = h[s−1] − 2h[s] + h[s+1]; coefficient of h_t in
                    // D_s is −2 for s = t and 1 for s = t±1.
                    for (s, coeff) in [
                        (t as i64, -2.0),
                        (t as i64 - 1, 1.0),
                        (t as i64 + 1, 1.0),
                    ] {
                        if s < 1 || s >= N_THETA_H as i64 - 1 {
                            continue;
                        }
                        let s = s as usize;
                        for kk in 0..k {
                            // rest = D_s with h_t's term removed.
                            let mut rest = 0.0;
                            for (tt, c) in [(s - 1, 1.0), (s, -2.0), (s + 1, 1.0)] {
                                if tt == t {
                                    continue;
                                }
                                rest += c * h[kk * m + col_of(tt, td, phi)];
                            }
                            // μ(coeff·h_t[kk] + rest)² contributes to the
                            // normal equations of unknown kk only.
                            ata[(kk, kk)] += mu * coeff * coeff;
                            atb[kk] += -mu * coeff * rest;
                        }
                    }
                    let has_data = (0..k).any(|a| ata[(a, a)] > 0.0);
                    if !has_data {
                        continue;
                    }
                    let col = nnls_normal(&ata, &atb, 1e-10);
                    for kk in 0..k {
                        h[kk * m + j] = col[kk];
                    }
                }
            }
        }
    }
}

/// Relative residual over observed entries: ‖(WH − V)_obs‖ / ‖V_obs‖.
pub fn observed_relative_residual(
    values: &[f64],
    mask: &[bool],
    w: &[f64],
    h: &[f64],
    n: usize,
    m: usize,
    k: usize,
) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        for j in 0..m {
            if !mask[i * m + j] {
                continue;
            }
            let mut pred = 0.0;
            for kk in 0..k {
                pred += w[i * k + kk] * h[kk * m + j];
            }
            num += (pred - values[i * m + j]).powi(2);
            den += values[i * m + j].powi(2);
        }
    }
    (num / den.max(1e-300)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_rank2(
        n: usize,
        m: usize,
        missing: f64,
        seed: u64,
    ) -> (Vec<f64>, Vec<bool>, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..n * 2).map(|_| 0.1 + rng.random::<f64>()).collect();
        let h: Vec<f64> = (0..2 * m).map(|_| 0.1 + rng.random::<f64>()).collect();
        let mut values = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                values[i * m + j] = w[i * 2] * h[j] + w[i * 2 + 1] * h[m + j];
            }
        }
        let mask: Vec<bool> = (0..n * m).map(|_| rng.random::<f64>() >= missing).collect();
        (values, mask, w, h)
    }

    #[test]
    fn exact_rank1_recovers() {
        let n = 20;
        let m = 15;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w_true: Vec<f64> = (0..n).map(|_| 0.2 + rng.random::<f64>()).collect();
        let h_true: Vec<f64> = (0..m).map(|_| 0.2 + rng.random::<f64>()).collect();
        let values: Vec<f64> = (0..n * m)
            .map(|idx| w_true[idx / m] * h_true[idx % m])
            .collect();
        let mask = vec![true; n * m];
        let res = acls_factorize(&values, &mask, n, m, 1, &AclsOptions::default()).unwrap();
        let rel = observed_relative_residual(&values, &mask, &res.w, &res.h, n, m, 1);
        assert!(rel < 1e-6, "relative residual {rel}");
        // The factors match up to a reciprocal scale.
        let scale = res.w[0] / w_true[0];
        for i in 0..n {
            assert!((res.w[i] / w_true[i] - scale).abs() < 1e-4 * scale.abs());
        }
    }

    #[test]
    fn rank2_with_missing_entries_fits() {
        let (values, mask, _, _) = synthetic_rank2(50, 40, 0.3, 9);
        let options = AclsOptions {
            iterations: 500,
            tol: 1e-14,
            seed: 4,
            ..Default::default()
        };
        let res = acls_factorize(&values, &mask, 50, 40, 2, &options).unwrap();
        let rel = observed_relative_residual(&values, &mask, &res.w, &res.h, 50, 40, 2);
        assert!(rel < 1e-3, "relative residual {rel}");
    }

    #[test]
    fn objective_is_monotone_on_random_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 30;
        let m = 25;
        let values: Vec<f64> = (0..n * m).map(|_| rng.random::<f64>()).collect();
        let mask: Vec<bool> = (0..n * m).map(|_| rng.random::<f64>() > 0.2).collect();
        let options = AclsOptions {
            iterations: 100,
            tol: 0.0,
            seed: 2,
            ..Default::default()
        };
        let res = acls_factorize(&values, &mask, n, m, 2, &options).unwrap();
        for pair in res.objective_trace.windows(2) {
            assert!(
                pair[1] <= pair[0] * (1.0 + 1e-12) + 1e-12,
                "objective increased: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn nonnegativity_preserved() {
        let (values, mask, _, _) = synthetic_rank2(20, 18, 0.25, 5);
        let res = acls_factorize(&values, &mask, 20, 18, 2, &AclsOptions::default()).unwrap();
        assert!(res.w.iter().all(|&v| v >= 0.0));
        assert!(res.h.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn rank_larger_than_rows_errors() {
        let r = acls_factorize(&[1.0], &[true], 1, 1, 2, &AclsOptions::default());
        assert!(matches!(r, Err(AclsError::RankTooLarge { .. })));
    }
}

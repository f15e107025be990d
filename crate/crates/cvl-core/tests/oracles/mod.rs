//! Independent oracles for the integration and acceptance suites.
//!
//! Everything in this module deliberately avoids the library's own solver
//! paths: the eigensolver is a classic cyclic Jacobi iteration on the real
//! embedding of the Hermitian matrix, expectations are naive triple loops
//! over real/imaginary parts, moments are two-pass, and regression is plain
//! textbook OLS.

#![allow(dead_code)]

use cvl_core::hermitian::{HermitianOperator, QuantumState};
use cvl_core::qcml::{loss_gradients, QcmlModel, TrainingSample};
use nalgebra::DMatrix;

/// Real symmetric embedding of a Hermitian matrix `S + iA`:
/// `[[S, -A], [A, S]]`. Its spectrum is the Hermitian spectrum doubled.
pub fn embed_real(op: &HermitianOperator) -> Vec<Vec<f64>> {
    let n = op.dim();
    let mut m = vec![vec![0.0; 2 * n]; 2 * n];
    for a in 0..n {
        for b in 0..n {
            let s = op.sym()[(a, b)];
            let t = op.antisym()[(a, b)];
            m[a][b] = s;
            m[a][b + n] = -t;
            m[a + n][b] = t;
            m[a + n][b + n] = s;
        }
    }
    m
}

/// Eigenvalues of a real symmetric matrix by cyclic Jacobi rotations,
/// sorted ascending. Independent of any library eigensolver.
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    if n == 1 {
        return vec![a[0][0]];
    }
    let scale: f64 = a
        .iter()
        .flat_map(|row| row.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(1.0);
    for _sweep in 0..200 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i][j] * a[i][j];
            }
        }
        if off.sqrt() <= 1e-13 * scale {
            break;
        }
        for p in 0..(n - 1) {
            for q in (p + 1)..n {
                let apq = a[p][q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);
                let app = a[p][p];
                let aqq = a[q][q];
                a[p][p] = app - t * apq;
                a[q][q] = aqq + t * apq;
                a[p][q] = 0.0;
                a[q][p] = 0.0;
                for i in 0..n {
                    if i != p && i != q {
                        let aip = a[i][p];
                        let aiq = a[i][q];
                        a[i][p] = aip - s * (aiq + tau * aip);
                        a[i][q] = aiq + s * (aip - tau * aiq);
                        a[p][i] = a[i][p];
                        a[q][i] = a[i][q];
                    }
                }
            }
        }
    }
    let mut diag: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    diag.sort_by(|x, y| x.partial_cmp(y).unwrap());
    diag
}

/// Minimum eigenvalue of a Hermitian operator via the Jacobi oracle.
pub fn oracle_min_eigenvalue(op: &HermitianOperator) -> f64 {
    jacobi_eigenvalues(embed_real(op))[0]
}

/// Full Hermitian spectrum via the Jacobi oracle (every second value of the
/// doubled embedding spectrum).
pub fn oracle_spectrum(op: &HermitianOperator) -> Vec<f64> {
    let doubled = jacobi_eigenvalues(embed_real(op));
    doubled.into_iter().step_by(2).collect()
}

/// Naive triple-loop evaluation of `Re( psi^dagger O psi )` using only raw
/// real/imaginary component arithmetic.
pub fn oracle_expectation(op: &HermitianOperator, state: &QuantumState) -> f64 {
    let n = op.dim();
    let mut total_re = 0.0;
    for a in 0..n {
        for b in 0..n {
            let (pr, pi) = (state.amplitudes()[a].re, state.amplitudes()[a].im);
            let (qr, qi) = (state.amplitudes()[b].re, state.amplitudes()[b].im);
            let (or_, oi) = (op.sym()[(a, b)], op.antisym()[(a, b)]);
            // conj(psi_a) * O_ab * psi_b, real part
            // conj(p) * o = (pr - i pi)(or + i oi)
            let t_re = pr * or_ + pi * oi;
            let t_im = pr * oi - pi * or_;
            total_re += t_re * qr - t_im * qi;
        }
    }
    total_re
}

/// Two-pass mean and population standard deviation over finite entries.
pub fn oracle_mean_std(values: &[f64]) -> (f64, f64) {
    let finite: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    let n = finite.len() as f64;
    let mean = finite.iter().sum::<f64>() / n;
    let var = finite.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Grouped means by explicit looping.
pub fn oracle_group_means(values: &[f64], labels: &[i32]) -> std::collections::BTreeMap<i32, f64> {
    let mut out = std::collections::BTreeMap::new();
    let mut counts: std::collections::BTreeMap<i32, usize> = std::collections::BTreeMap::new();
    for (&v, &g) in values.iter().zip(labels) {
        if v.is_finite() {
            *out.entry(g).or_insert(0.0) += v;
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    for (g, sum) in out.iter_mut() {
        *sum /= counts[g] as f64;
    }
    out
}

/// Compounded simple return over a slice of daily returns.
pub fn oracle_compound(returns: &[f64]) -> f64 {
    returns.iter().fold(1.0, |acc, r| acc * (1.0 + r)) - 1.0
}

/// OLS slope of y on x with intercept, plus its t-statistic.
pub fn oracle_ols_slope(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    assert!(x.len() == y.len() && x.len() > 2);
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let e = b - intercept - slope * a;
            e * e
        })
        .sum();
    let sigma2 = rss / (n - 2.0);
    let se = (sigma2 / sxx).sqrt();
    (slope, slope / se)
}

/// Annualized Sharpe recomputed independently in one pass over the data.
pub fn oracle_sharpe(returns: &[f64], annualization: f64) -> f64 {
    let n = returns.len() as f64;
    let sum: f64 = returns.iter().sum();
    let sum_sq: f64 = returns.iter().map(|r| r * r).sum();
    let mean = sum / n;
    let var = (sum_sq - n * mean * mean) / (n - 1.0);
    mean / var.sqrt() * annualization.sqrt()
}

/// Largest relative error between the analytic loss gradients and central
/// finite differences of the fixed-state loss, over every symmetric and
/// antisymmetric parameter of every operator.
pub fn gradient_check(model: &QcmlModel, sample: &TrainingSample, w: f64, step: f64) -> f64 {
    let psi = model.ground_state_of(&sample.features).unwrap();
    let grads = loss_gradients(model, &psi, sample, w).unwrap();
    let n = model.dim();
    let mut worst: f64 = 0.0;

    let eval = |feature_ops: Vec<HermitianOperator>, target_op: HermitianOperator| -> f64 {
        let m = QcmlModel::new(feature_ops, target_op).unwrap();
        m.loss_given_state(&psi, sample, w).unwrap()
    };

    // op_index: 0..feature_count are features, feature_count is the target
    let op_count = model.feature_count() + 1;
    for op_idx in 0..op_count {
        for a in 0..n {
            for b in a..n {
                for part in [0usize, 1] {
                    if part == 1 && a == b {
                        continue; // antisymmetric diagonal is identically zero
                    }
                    let perturb = |h: f64| -> f64 {
                        let mut feats = model.feature_ops().to_vec();
                        let mut target = model.target_op().clone();
                        let op = if op_idx < model.feature_count() {
                            &mut feats[op_idx]
                        } else {
                            &mut target
                        };
                        let mut sym = op.sym().clone();
                        let mut anti = op.antisym().clone();
                        if part == 0 {
                            sym[(a, b)] += h;
                            if a != b {
                                sym[(b, a)] += h;
                            }
                        } else {
                            anti[(a, b)] += h;
                            anti[(b, a)] -= h;
                        }
                        *op = HermitianOperator::from_parts(sym, anti).unwrap();
                        eval(feats, target)
                    };
                    let measured = (perturb(step) - perturb(-step)) / (2.0 * step);
                    let g = if op_idx < model.feature_count() {
                        &grads.feature[op_idx]
                    } else {
                        &grads.target
                    };
                    let gm: &DMatrix<f64> = if part == 0 { &g.0 } else { &g.1 };
                    let expected = if a == b { gm[(a, a)] } else { 2.0 * gm[(a, b)] };
                    let rel = (measured - expected).abs() / expected.abs().max(1e-6);
                    worst = worst.max(rel);
                }
            }
        }
    }
    worst
}

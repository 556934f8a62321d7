//! Seurat-v3 highly-variable-gene selection.
//!
//! Per gene: fit the trend of `log10(variance)` against `log10(mean)` with a
//! degree-2 local regression (span 0.3, at least 10 points; a single global
//! quadratic below 30 genes), standardize counts by the trend's standard
//! deviation, clip standardized values at `sqrt(n_cells)`, and rank genes by
//! the variance of the clipped values.

use super::{CorpusError, ExpressionMatrix, Result, Stage};

const SPAN: f64 = 0.3;
const MIN_LOCAL_POINTS: usize = 10;
const GLOBAL_FIT_BELOW: usize = 30;

/// Indices of the `n_top` most variable genes, best first. Ties go to the
/// lower gene index.
pub fn select_hvg(m: &ExpressionMatrix, n_top: usize) -> Result<Vec<usize>> {
    if n_top > m.n_genes() {
        return Err(CorpusError::InvalidArgument(format!(
            "requested {n_top} highly variable genes from {} genes",
            m.n_genes()
        )));
    }
    let scores = standardized_variances(m)?;
    let mut order: Vec<usize> = (0..m.n_genes()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(n_top);
    Ok(order)
}

/// Clipped standardized variance for every gene (0 for constant genes).
pub fn standardized_variances(m: &ExpressionMatrix) -> Result<Vec<f64>> {
    m.expect_stage(Stage::RawCounts)?;
    let n = m.n_cells();
    if n < 2 {
        return Err(CorpusError::InvalidArgument(format!(
            "variance needs at least 2 cells, got {n}"
        )));
    }
    let g = m.n_genes();
    let mut mean = vec![0.0f64; g];
    for row in m.rows() {
        for (acc, &v) in mean.iter_mut().zip(row) {
            *acc += f64::from(v);
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    let mut var = vec![0.0f64; g];
    for row in m.rows() {
        for ((acc, &v), mu) in var.iter_mut().zip(row).zip(&mean) {
            let c = f64::from(v) - mu;
            *acc += c * c;
        }
    }
    var.iter_mut().for_each(|v| *v /= (n - 1) as f64);

    let varying: Vec<usize> = (0..g).filter(|&j| var[j] > 0.0).collect();
    let xs: Vec<f64> = varying.iter().map(|&j| mean[j].log10()).collect();
    let ys: Vec<f64> = varying.iter().map(|&j| var[j].log10()).collect();
    let trend = if g < GLOBAL_FIT_BELOW {
        global_quadratic(&xs, &ys)
    } else {
        loess(&xs, &ys)
    };

    let mut reg_std = vec![0.0f64; g];
    for (k, &j) in varying.iter().enumerate() {
        reg_std[j] = 10f64.powf(trend[k]).sqrt();
    }

    let clip = (n as f64).sqrt();
    let mut scores = vec![0.0f64; g];
    for row in m.rows() {
        for &j in &varying {
            let z = ((f64::from(row[j]) - mean[j]) / reg_std[j]).min(clip);
            scores[j] += z * z;
        }
    }
    scores.iter_mut().for_each(|s| *s /= (n - 1) as f64);
    Ok(scores)
}

fn global_quadratic(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    if xs.is_empty() {
        return Vec::new();
    }
    let center = xs.iter().sum::<f64>() / xs.len() as f64;
    let w = vec![1.0; xs.len()];
    let coef = weighted_poly(xs, ys, &w, center);
    xs.iter()
        .map(|&x| {
            let u = x - center;
            coef[0] + coef[1] * u + coef[2] * u * u
        })
        .collect()
}

/// Degree-2 local regression with tricube weights, evaluated at every `x`.
fn loess(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let n = xs.len();
    if n == 0 {
        return Vec::new();
    }
    let q = ((SPAN * n as f64).ceil() as usize)
        .max(MIN_LOCAL_POINTS)
        .min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let sx: Vec<f64> = order.iter().map(|&i| xs[i]).collect();
    let sy: Vec<f64> = order.iter().map(|&i| ys[i]).collect();

    let mut fitted = vec![0.0; n];
    let mut lo = 0usize;
    for (pos, &x0) in sx.iter().enumerate() {
        // slide the q-point window [lo, lo + q) so it holds the nearest neighbours
        while lo + q < n && x0 - sx[lo] > sx[lo + q] - x0 {
            lo += 1;
        }
        let win = lo..lo + q;
        let h = (x0 - sx[win.start]).max(sx[win.end - 1] - x0);
        let w: Vec<f64> = sx[win.clone()]
            .iter()
            .map(|&x| {
                if h <= 0.0 {
                    1.0
                } else {
                    // widen slightly so the farthest neighbour keeps a small weight
                    let r = ((x - x0).abs() / (h * 1.0001)).min(1.0);
                    (1.0 - r * r * r).powi(3)
                }
            })
            .collect();
        let coef = weighted_poly(&sx[win.clone()], &sy[win], &w, x0);
        fitted[order[pos]] = coef[0];
    }
    fitted
}

/// Weighted least-squares polynomial of degree <= 2 in `x - center`.
/// Drops to lower degree when the normal equations are singular.
fn weighted_poly(xs: &[f64], ys: &[f64], w: &[f64], center: f64) -> [f64; 3] {
    for degree in (0..=2usize).rev() {
        let k = degree + 1;
        let mut a = [[0.0f64; 4]; 3];
        for ((&x, &y), &wi) in xs.iter().zip(ys).zip(w) {
            let u = x - center;
            let pow = [1.0, u, u * u];
            for r in 0..k {
                for c in 0..k {
                    a[r][c] += wi * pow[r] * pow[c];
                }
                a[r][3] += wi * pow[r] * y;
            }
        }
        if let Some(sol) = solve(&mut a, k) {
            let mut out = [0.0; 3];
            out[..k].copy_from_slice(&sol[..k]);
            return out;
        }
    }
    [0.0; 3]
}

/// Gaussian elimination with partial pivoting on a `k x (k+1)` augmented system.
fn solve(a: &mut [[f64; 4]; 3], k: usize) -> Option<[f64; 3]> {
    let scale = (0..k).map(|i| a[i][i].abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        return None;
    }
    for col in 0..k {
        let piv = (col..k).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= scale * 1e-12 {
            return None;
        }
        a.swap(col, piv);
        let pivot_row = a[col];
        for row in a.iter_mut().take(k).skip(col + 1) {
            let f = row[col] / pivot_row[col];
            for (x, &p) in row[col..=k].iter_mut().zip(&pivot_row[col..=k]) {
                *x -= f * p;
            }
        }
    }
    let mut x = [0.0; 3];
    for r in (0..k).rev() {
        let mut s = a[r][k];
        for c in r + 1..k {
            s -= a[r][c] * x[c];
        }
        x[r] = s / a[r][r];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

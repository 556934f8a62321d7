//! Forward kernels. Each function is pure; the tape calls these and stores
//! whatever the backward pass needs alongside the result.

use super::{shape_err, Result, Scalar, Tensor};

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

fn dims2<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err(op, format!("expected a 2-d tensor, got {s:?}"))),
    }
}

fn dims3<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [g, r, c] => Ok((*g, *r, *c)),
        s => Err(shape_err(op, format!("expected a 3-d tensor, got {s:?}"))),
    }
}

/// `[m, k] x [k, n] -> [m, n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2("matmul", a)?;
    let (k2, n) = dims2("matmul", b)?;
    if k != k2 {
        return Err(shape_err("matmul", format!("inner dims {k} vs {k2}")));
    }
    let mut out = Tensor::zeros(&[m, n]);
    T::gemm(
        m,
        k,
        n,
        T::ONE,
        a.data(),
        (k, 1),
        b.data(),
        (n, 1),
        T::ZERO,
        out.data_mut(),
        (n, 1),
    );
    Ok(out)
}

/// `x W + b` with `x: [N, in]`, `W: [in, out]`, `b: [out]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n_in, n_out) = dims2("linear", w)?;
    if x.last_dim() != n_in || b.len() != n_out {
        return Err(shape_err(
            "linear",
            format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let rows = x.rows();
    let mut data = Vec::with_capacity(rows * n_out);
    for _ in 0..rows {
        data.extend_from_slice(b.data());
    }
    let mut out = Tensor::new(vec![rows, n_out], data)?;
    T::gemm(
        rows,
        n_in,
        n_out,
        T::ONE,
        x.data(),
        (n_in, 1),
        w.data(),
        (n_out, 1),
        T::ONE,
        out.data_mut(),
        (n_out, 1),
    );
    Ok(out)
}

/// Batched product over the leading axis: `[G, m, k] x [G, k, n]`, or
/// `[G, m, k] x [G, n, k]^T` when `transpose_b` is set.
pub fn bmm<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, transpose_b: bool) -> Result<Tensor<T>> {
    let (g, m, k) = dims3("bmm", a)?;
    let (g2, b1, b2) = dims3("bmm", b)?;
    let (kb, n) = if transpose_b { (b2, b1) } else { (b1, b2) };
    if g != g2 || k != kb {
        return Err(shape_err(
            "bmm",
            format!(
                "{:?} x {:?} (transpose_b={transpose_b})",
                a.shape(),
                b.shape()
            ),
        ));
    }
    let mut out = Tensor::zeros(&[g, m, n]);
    let b_strides = if transpose_b { (1, k) } else { (n, 1) };
    for gi in 0..g {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            &a.data()[gi * m * k..(gi + 1) * m * k],
            (k, 1),
            &b.data()[gi * k * n..(gi + 1) * k * n],
            b_strides,
            T::ZERO,
            &mut out.data_mut()[gi * m * n..(gi + 1) * m * n],
            (n, 1),
        );
    }
    Ok(out)
}

/// Per-row normalization over the last axis, population variance.
///
/// Returns the output plus the normalized values and reciprocal standard
/// deviations (one per row) needed for the backward pass.
pub fn layer_norm_with_stats<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let d = x.last_dim();
    if gain.len() != d || bias.len() != d {
        return Err(shape_err(
            "layer_norm",
            format!(
                "feature dim {d}, gain {:?}, bias {:?}",
                gain.shape(),
                bias.shape()
            ),
        ));
    }
    let rows = x.rows();
    let mut out = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(rows);
    let inv_d = 1.0 / d as f64;
    for row in x.data().chunks_exact(d) {
        let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() * inv_d;
        let var = row
            .iter()
            .map(|v| {
                let c = v.to_f64() - mean;
                c * c
            })
            .sum::<f64>()
            * inv_d;
        let r = 1.0 / (var + eps).sqrt();
        rstd.push(T::from_f64(r));
        for (j, v) in row.iter().enumerate() {
            let h = T::from_f64((v.to_f64() - mean) * r);
            xhat.push(h);
            out.push(h * gain.data()[j] + bias.data()[j]);
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, xhat, rstd))
}

pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    layer_norm_with_stats(x, gain, bias, eps).map(|(y, _, _)| y)
}

/// Standard normal CDF.
#[inline]
pub fn normal_cdf<T: Scalar>(x: T) -> T {
    T::from_f64(0.5) * (T::ONE + (x * T::from_f64(INV_SQRT_2)).erf())
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v * normal_cdf(v)).collect();
    Tensor {
        shape: x.shape().to_vec(),
        data,
    }
}

/// `d gelu / dx = Phi(x) + x * phi(x)`.
#[inline]
pub fn gelu_derivative<T: Scalar>(x: T) -> T {
    let pdf = (T::from_f64(-0.5) * x * x).exp() * T::from_f64(0.398_942_280_401_432_7);
    normal_cdf(x) + x * pdf
}

/// Softmax over the last axis with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let d = x.last_dim();
    let mut data = Vec::with_capacity(x.len());
    if d > 0 {
        for row in x.data().chunks_exact(d) {
            let mx = row.iter().copied().fold(row[0], T::max);
            let start = data.len();
            let mut total = T::ZERO;
            for &v in row {
                let e = (v - mx).exp();
                total += e;
                data.push(e);
            }
            let inv = T::ONE / total;
            for v in &mut data[start..] {
                *v *= inv;
            }
        }
    }
    Tensor {
        shape: x.shape().to_vec(),
        data,
    }
}

/// `[G*S, H*dh] -> [G*H, S, dh]`.
pub fn split_heads<T: Scalar>(x: &Tensor<T>, groups: usize, heads: usize) -> Result<Tensor<T>> {
    let (rows, width) = dims2("split_heads", x)?;
    if groups == 0 || heads == 0 || rows % groups != 0 || width % heads != 0 {
        return Err(shape_err(
            "split_heads",
            format!("{:?} into {groups} groups x {heads} heads", x.shape()),
        ));
    }
    let seq = rows / groups;
    let dh = width / heads;
    let mut out = vec![T::ZERO; x.len()];
    let src = x.data();
    for g in 0..groups {
        for s in 0..seq {
            let row = &src[(g * seq + s) * width..(g * seq + s + 1) * width];
            for h in 0..heads {
                let dst = ((g * heads + h) * seq + s) * dh;
                out[dst..dst + dh].copy_from_slice(&row[h * dh..(h + 1) * dh]);
            }
        }
    }
    Tensor::new(vec![groups * heads, seq, dh], out)
}

/// Inverse of [`split_heads`]: `[G*H, S, dh] -> [G*S, H*dh]`.
pub fn merge_heads<T: Scalar>(x: &Tensor<T>, groups: usize, heads: usize) -> Result<Tensor<T>> {
    let (gh, seq, dh) = dims3("merge_heads", x)?;
    if groups == 0 || heads == 0 || gh != groups * heads {
        return Err(shape_err(
            "merge_heads",
            format!("{:?} from {groups} groups x {heads} heads", x.shape()),
        ));
    }
    let width = heads * dh;
    let mut out = vec![T::ZERO; x.len()];
    let src = x.data();
    for g in 0..groups {
        for h in 0..heads {
            for s in 0..seq {
                let from = ((g * heads + h) * seq + s) * dh;
                let to = (g * seq + s) * width + h * dh;
                out[to..to + dh].copy_from_slice(&src[from..from + dh]);
            }
        }
    }
    Tensor::new(vec![groups * seq, width], out)
}

//! Reverse-mode tape. Nodes are appended in evaluation order, so walking the
//! node list backwards is a reverse topological sweep.

use super::ops;
use super::{shape_err, Result, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Softmax(Var),
    Bmm {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    SplitHeads {
        x: Var,
        groups: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        groups: usize,
        heads: usize,
    },
    Embed {
        table: Var,
        value_weight: Var,
        value_bias: Var,
        mask_token: Var,
        ids: Vec<usize>,
        values: Vec<T>,
        mask: Vec<bool>,
    },
    MaskedMse {
        pred: Var,
        target: Vec<T>,
        mask: Vec<bool>,
        count: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Record of primitive operations for one forward pass.
///
/// A tape is single-threaded and meant to be built fresh for every step.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, "leaf")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::linear(self.value(x), self.value(w), self.value(b))?;
        self.push(out, Op::Linear { x, w, b }, "linear")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(
                "mul",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.scale_in_place(s);
        self.push(out, Op::Scale(x, s), "scale")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().fold(T::ZERO, |acc, &v| acc + v);
        self.push(Tensor::scalar(total), Op::Sum(x), "sum")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (out, xhat, rstd) =
            ops::layer_norm_with_stats(self.value(x), self.value(gain), self.value(bias), eps)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = ops::gelu(self.value(x));
        self.push(out, Op::Gelu(x), "gelu")
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax_rows(self.value(x));
        self.push(out, Op::Softmax(x), "softmax_rows")
    }

    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let out = ops::bmm(self.value(a), self.value(b), transpose_b)?;
        self.push(out, Op::Bmm { a, b, transpose_b }, "bmm")
    }

    pub fn split_heads(&mut self, x: Var, groups: usize, heads: usize) -> Result<Var> {
        let out = ops::split_heads(self.value(x), groups, heads)?;
        self.push(out, Op::SplitHeads { x, groups, heads }, "split_heads")
    }

    pub fn merge_heads(&mut self, x: Var, groups: usize, heads: usize) -> Result<Var> {
        let out = ops::merge_heads(self.value(x), groups, heads)?;
        self.push(out, Op::MergeHeads { x, groups, heads }, "merge_heads")
    }

    /// Token embedding: row `r` is `table[ids[r]] + value_weight * values[r] +
    /// value_bias` when observed and `table[ids[r]] + mask_token` when masked.
    /// Values at masked rows are never read.
    #[allow(clippy::too_many_arguments)]
    pub fn embed(
        &mut self,
        table: Var,
        value_weight: Var,
        value_bias: Var,
        mask_token: Var,
        ids: &[usize],
        values: &[T],
        mask: &[bool],
    ) -> Result<Var> {
        if ids.len() != values.len() || ids.len() != mask.len() {
            return Err(shape_err(
                "embed",
                format!(
                    "ids {}, values {}, mask {}",
                    ids.len(),
                    values.len(),
                    mask.len()
                ),
            ));
        }
        let tab = self.value(table);
        let (vocab, d) = match tab.shape() {
            [v, d] => (*v, *d),
            s => return Err(shape_err("embed", format!("table shape {s:?}"))),
        };
        let (wv, bv, mt) = (
            self.value(value_weight),
            self.value(value_bias),
            self.value(mask_token),
        );
        if wv.len() != d || bv.len() != d || mt.len() != d {
            return Err(shape_err(
                "embed",
                format!("width {d}, value weight {:?}", wv.shape()),
            ));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for (r, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(TensorError::InvalidArgument {
                    op: "embed",
                    detail: format!("id {id} out of range for vocabulary {vocab}"),
                });
            }
            let row = &tab.data()[id * d..(id + 1) * d];
            if mask[r] {
                out.extend(row.iter().zip(mt.data()).map(|(&e, &m)| e + m));
            } else {
                let x = values[r];
                out.extend(
                    row.iter()
                        .zip(wv.data().iter().zip(bv.data()))
                        .map(|(&e, (&w, &b))| e + w * x + b),
                );
            }
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        let values = values
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { T::ZERO } else { v })
            .collect();
        self.push(
            out,
            Op::Embed {
                table,
                value_weight,
                value_bias,
                mask_token,
                ids: ids.to_vec(),
                values,
                mask: mask.to_vec(),
            },
            "embed",
        )
    }

    /// Mean squared error over the masked entries of a flat prediction.
    pub fn masked_mse(&mut self, pred: Var, target: &[T], mask: &[bool]) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() || p.len() != mask.len() {
            return Err(shape_err(
                "masked_mse",
                format!(
                    "pred {}, target {}, mask {}",
                    p.len(),
                    target.len(),
                    mask.len()
                ),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::InvalidArgument {
                op: "masked_mse",
                detail: "empty mask set".into(),
            });
        }
        let mut total = 0.0f64;
        for ((&pv, &tv), &m) in p.data().iter().zip(target).zip(mask) {
            if m {
                let e = (pv - tv).to_f64();
                total += e * e;
            }
        }
        let loss = Tensor::scalar(T::from_f64(total / count as f64));
        self.push(
            loss,
            Op::MaskedMse {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            "masked_mse",
        )
    }

    /// Reverse sweep from a scalar `loss`, returning gradients for every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), T::ONE));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                let mut da = Tensor::zeros(ta.shape());
                // da = g b^T
                T::gemm(
                    m,
                    n,
                    k,
                    T::ONE,
                    g.data(),
                    (n, 1),
                    tb.data(),
                    (1, n),
                    T::ZERO,
                    da.data_mut(),
                    (k, 1),
                );
                let mut db = Tensor::zeros(tb.shape());
                // db = a^T g
                T::gemm(
                    k,
                    m,
                    n,
                    T::ONE,
                    ta.data(),
                    (1, k),
                    g.data(),
                    (n, 1),
                    T::ZERO,
                    db.data_mut(),
                    (n, 1),
                );
                accumulate(grads, *a, da)?;
                accumulate(grads, *b, db)?;
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n_in, n_out) = (tw.shape()[0], tw.shape()[1]);
                let rows = tx.rows();
                let mut dx = Tensor::zeros(tx.shape());
                T::gemm(
                    rows,
                    n_out,
                    n_in,
                    T::ONE,
                    g.data(),
                    (n_out, 1),
                    tw.data(),
                    (1, n_out),
                    T::ZERO,
                    dx.data_mut(),
                    (n_in, 1),
                );
                let mut dw = Tensor::zeros(tw.shape());
                T::gemm(
                    n_in,
                    rows,
                    n_out,
                    T::ONE,
                    tx.data(),
                    (1, n_in),
                    g.data(),
                    (n_out, 1),
                    T::ZERO,
                    dw.data_mut(),
                    (n_out, 1),
                );
                let mut db = Tensor::zeros(self.value(*b).shape());
                for row in g.data().chunks_exact(n_out) {
                    for (acc, &v) in db.data_mut().iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                accumulate(grads, *x, dx)?;
                accumulate(grads, *w, dw)?;
                accumulate(grads, *b, db)?;
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.clone())?;
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = zip_map(g, tb, |gv, bv| gv * bv);
                let db = zip_map(g, ta, |gv, av| gv * av);
                accumulate(grads, *a, da)?;
                accumulate(grads, *b, db)?;
            }
            Op::Scale(x, s) => {
                let mut dx = g.clone();
                dx.scale_in_place(*s);
                accumulate(grads, *x, dx)?;
            }
            Op::Sum(x) => {
                let tx = self.value(*x);
                accumulate(grads, *x, Tensor::full(tx.shape(), g.data()[0]))?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let tg = self.value(*gain);
                let d = tg.len();
                let inv_d = T::ONE / T::from_usize(d);
                let mut dx = Tensor::zeros(self.value(*x).shape());
                let mut dgain = Tensor::zeros(tg.shape());
                let mut dbias = Tensor::zeros(self.value(*bias).shape());
                let mut dxhat = vec![T::ZERO; d];
                for (r, gy) in g.data().chunks_exact(d).enumerate() {
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_dxhat = T::ZERO;
                    let mut mean_dxhat_xhat = T::ZERO;
                    for j in 0..d {
                        dgain.data_mut()[j] += gy[j] * xh[j];
                        dbias.data_mut()[j] += gy[j];
                        dxhat[j] = gy[j] * tg.data()[j];
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * xh[j];
                    }
                    mean_dxhat *= inv_d;
                    mean_dxhat_xhat *= inv_d;
                    let out = &mut dx.data_mut()[r * d..(r + 1) * d];
                    for j in 0..d {
                        out[j] = rstd[r] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
                    }
                }
                accumulate(grads, *x, dx)?;
                accumulate(grads, *gain, dgain)?;
                accumulate(grads, *bias, dbias)?;
            }
            Op::Gelu(x) => {
                let dx = zip_map(g, self.value(*x), |gv, xv| gv * ops::gelu_derivative(xv));
                accumulate(grads, *x, dx)?;
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let d = y.last_dim();
                let mut dx = Tensor::zeros(y.shape());
                for ((gy, yr), out) in g
                    .data()
                    .chunks_exact(d)
                    .zip(y.data().chunks_exact(d))
                    .zip(dx.data_mut().chunks_exact_mut(d))
                {
                    let dot = gy.iter().zip(yr).fold(T::ZERO, |acc, (&a, &b)| acc + a * b);
                    for j in 0..d {
                        out[j] = yr[j] * (gy[j] - dot);
                    }
                }
                accumulate(grads, *x, dx)?;
            }
            Op::Bmm { a, b, transpose_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (groups, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = g.shape()[2];
                let mut da = Tensor::zeros(ta.shape());
                let mut db = Tensor::zeros(tb.shape());
                for gi in 0..groups {
                    let ga = &g.data()[gi * m * n..(gi + 1) * m * n];
                    let a_blk = &ta.data()[gi * m * k..(gi + 1) * m * k];
                    let b_blk = &tb.data()[gi * k * n..(gi + 1) * k * n];
                    let da_blk = &mut da.data_mut()[gi * m * k..(gi + 1) * m * k];
                    if *transpose_b {
                        // out = a b^T with b: [n, k]; da = g b, db = g^T a
                        T::gemm(
                            m,
                            n,
                            k,
                            T::ONE,
                            ga,
                            (n, 1),
                            b_blk,
                            (k, 1),
                            T::ZERO,
                            da_blk,
                            (k, 1),
                        );
                        let db_blk = &mut db.data_mut()[gi * k * n..(gi + 1) * k * n];
                        T::gemm(
                            n,
                            m,
                            k,
                            T::ONE,
                            ga,
                            (1, n),
                            a_blk,
                            (k, 1),
                            T::ZERO,
                            db_blk,
                            (k, 1),
                        );
                    } else {
                        // out = a b with b: [k, n]; da = g b^T, db = a^T g
                        T::gemm(
                            m,
                            n,
                            k,
                            T::ONE,
                            ga,
                            (n, 1),
                            b_blk,
                            (1, n),
                            T::ZERO,
                            da_blk,
                            (k, 1),
                        );
                        let db_blk = &mut db.data_mut()[gi * k * n..(gi + 1) * k * n];
                        T::gemm(
                            k,
                            m,
                            n,
                            T::ONE,
                            a_blk,
                            (1, k),
                            ga,
                            (n, 1),
                            T::ZERO,
                            db_blk,
                            (n, 1),
                        );
                    }
                }
                accumulate(grads, *a, da)?;
                accumulate(grads, *b, db)?;
            }
            Op::SplitHeads { x, groups, heads } => {
                accumulate(grads, *x, ops::merge_heads(g, *groups, *heads)?)?;
            }
            Op::MergeHeads { x, groups, heads } => {
                accumulate(grads, *x, ops::split_heads(g, *groups, *heads)?)?;
            }
            Op::Embed {
                table,
                value_weight,
                value_bias,
                mask_token,
                ids,
                values,
                mask,
            } => {
                let tt = self.value(*table);
                let d = tt.shape()[1];
                let mut dtable = Tensor::zeros(tt.shape());
                let mut dw = Tensor::zeros(self.value(*value_weight).shape());
                let mut db = Tensor::zeros(self.value(*value_bias).shape());
                let mut dm = Tensor::zeros(self.value(*mask_token).shape());
                for (r, gy) in g.data().chunks_exact(d).enumerate() {
                    let id = ids[r];
                    for (acc, &v) in dtable.data_mut()[id * d..(id + 1) * d].iter_mut().zip(gy) {
                        *acc += v;
                    }
                    if mask[r] {
                        for (acc, &v) in dm.data_mut().iter_mut().zip(gy) {
                            *acc += v;
                        }
                    } else {
                        let x = values[r];
                        for ((w, b), &g) in dw.data_mut().iter_mut().zip(db.data_mut()).zip(gy) {
                            *w += g * x;
                            *b += g;
                        }
                    }
                }
                accumulate(grads, *table, dtable)?;
                accumulate(grads, *value_weight, dw)?;
                accumulate(grads, *value_bias, db)?;
                accumulate(grads, *mask_token, dm)?;
            }
            Op::MaskedMse {
                pred,
                target,
                mask,
                count,
            } => {
                let p = self.value(*pred);
                let scale = g.data()[0] * T::from_f64(2.0 / *count as f64);
                let mut dp = Tensor::zeros(p.shape());
                for (j, out) in dp.data_mut().iter_mut().enumerate() {
                    if mask[j] {
                        *out = scale * (p.data()[j] - target[j]);
                    }
                }
                accumulate(grads, *pred, dp)?;
            }
        }
        Ok(())
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor {
        shape: a.shape().to_vec(),
        data,
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`; zeros when the loss does not touch it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

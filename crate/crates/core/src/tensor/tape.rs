//! Wengert-list autodiff.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to push gradients back to its inputs. [`Tape::backward`] walks the
//! list in reverse once; nodes created after the loss are ignored.

use super::conv::{col2im, im2col, ConvGeometry};
use super::kernels::{gemm, Trans};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LAYER_NORM_EPS: f64 = 1e-6;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Column {
        x: Var,
        index: usize,
    },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        inner: usize,
        len: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    MeanCols(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
    MaskedSqError {
        pred: Var,
        target: Vec<f64>,
        weight: Vec<f64>,
        norm: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that influences it.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape"))
    }

    /// Gradient for `v`, zeros if the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn gelu(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    fn zip(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, name)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.map(a, |x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    /// Adds `bias[i]` to every element of row `i` (axis 0) of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let rows = *tx.shape().first().unwrap_or(&0);
        if tb.shape() != [rows] {
            return Err(Error::shape(format!(
                "row bias {:?} for input {:?}",
                tb.shape(),
                tx.shape()
            )));
        }
        let row_len = tx.len() / rows.max(1);
        let mut out = tx.clone();
        for (i, chunk) in out.data_mut().chunks_mut(row_len.max(1)).enumerate() {
            let b = tb.data()[i];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        Ok(self.push(out, Op::AddRowBias(x, bias)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Rows `[start, start + len)` along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let rows = *t.shape().first().unwrap_or(&0);
        if start + len > rows {
            return Err(Error::arg(format!(
                "row slice {start}..{} out of range for {rows} rows",
                start + len
            )));
        }
        let row_len = t.len() / rows;
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let data = t.data()[start * row_len..(start + len) * row_len].to_vec();
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    /// Concatenation along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::arg("concat of zero tensors"))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != tail[..] {
                return Err(Error::shape(format!(
                    "concat_rows: {:?} vs trailing {:?}",
                    t.shape(),
                    tail
                )));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Concatenation of matrices along axis 1.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::arg("concat of zero tensors"));
        }
        let dims = parts
            .iter()
            .map(|&p| self.value(p).dims2())
            .collect::<Result<Vec<_>>>()?;
        let rows = dims[0].0;
        if dims.iter().any(|&(r, _)| r != rows) {
            return Err(Error::shape(format!("concat_cols row mismatch: {dims:?}")));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &(_, c)) in parts.iter().zip(&dims) {
                data.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        let out = Tensor::new(&[rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Column `index` of a matrix as a vector.
    pub fn column(&mut self, x: Var, index: usize) -> Result<Var> {
        let out = self.value(x).column(index)?;
        Ok(self.push(out, Op::Column { x, index }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.map(a, gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| 1.0 / (1.0 + (-x).exp()));
        self.push(out, Op::Sigmoid(a))
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::arg(format!(
                "softmax axis {axis} invalid for shape {:?}",
                t.shape()
            )));
        }
        let len = t.shape()[axis];
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let outer: usize = t.shape()[..axis].iter().product();
        let mut out = t.clone();
        let data = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len)
                    .map(|j| data[at(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (data[at(j)] - max).exp();
                    data[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    data[at(j)] /= total;
                }
            }
        }
        Ok(self.push(out, Op::Softmax { x, inner, len }))
    }

    /// Layer normalization of every column of a `(features, tokens)` matrix,
    /// with per-feature gain and bias.
    pub fn layer_norm_cols(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (d, n) = self.value(x).dims2()?;
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(Error::shape(format!(
                "layer norm params {:?}/{:?} for {d} features",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let xs = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; d * n];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; d * n];
        for j in 0..n {
            let mean = (0..d).map(|i| xs[i * n + j]).sum::<f64>() / d as f64;
            let var = (0..d).map(|i| (xs[i * n + j] - mean).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[j] = r;
            for i in 0..d {
                let h = (xs[i * n + j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = g[i] * h + b[i];
            }
        }
        let out = Tensor::new(&[d, n], out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// `-log softmax(logits)[target]` for a single logit vector.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 1 {
            return Err(Error::shape(format!(
                "logits must be a vector, got {:?}",
                t.shape()
            )));
        }
        if target >= t.len() {
            return Err(Error::arg(format!(
                "target class {target} out of range for {} logits",
                t.len()
            )));
        }
        let max = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = t.data().iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + total.ln();
        let probs = t.data().iter().map(|&v| (v - log_z).exp()).collect();
        let loss = log_z - t.data()[target];
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Mean over axis 1 of a matrix: `(r, c) -> (r)`.
    pub fn mean_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2()?;
        let data = t
            .data()
            .chunks(c.max(1))
            .map(|row| row.iter().sum::<f64>() / c as f64)
            .collect();
        let out = Tensor::new(&[r], data)?;
        Ok(self.push(out, Op::MeanCols(a)))
    }

    /// 2-D convolution. `x`: `(c_in, h, w)`, `w`: `(c_out, c_in, k, k)`,
    /// `b`: `(c_out)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (cin, h, wd) = self.value(x).dims3()?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[1] != cin || ws[2] != ws[3] || self.value(b).shape() != [ws[0]] {
            return Err(Error::shape(format!(
                "conv2d weight {:?} / bias {:?} for input {:?}",
                ws,
                self.value(b).shape(),
                self.value(x).shape()
            )));
        }
        let cout = ws[0];
        let geom = ConvGeometry {
            channels: cin,
            height: h,
            width: wd,
            kernel: ws[2],
            stride,
            pad,
        };
        let (oh, ow) = geom
            .out_dims()
            .ok_or_else(|| Error::arg(format!("conv2d geometry {geom:?} invalid")))?;
        let cols = im2col(&geom, self.value(x).data());
        let l = oh * ow;
        let mut out = vec![0.0; cout * l];
        gemm(
            cout,
            geom.patch_len(),
            l,
            self.value(w).data(),
            Trans::No,
            &cols,
            Trans::No,
            &mut out,
            false,
        );
        for (co, row) in out.chunks_mut(l).enumerate() {
            let bias = self.value(b).data()[co];
            row.iter_mut().for_each(|v| *v += bias);
        }
        let out = Tensor::new(&[cout, oh, ow], out)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
        ))
    }

    /// 2-D transposed convolution. `x`: `(c_in, h, w)`, `w`: `(c_in, c_out, k, k)`,
    /// `b`: `(c_out)`. Output extent is `(h - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (cin, h, wd) = self.value(x).dims3()?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[0] != cin || ws[2] != ws[3] || self.value(b).shape() != [ws[1]] {
            return Err(Error::shape(format!(
                "conv_transpose2d weight {:?} / bias {:?} for input {:?}",
                ws,
                self.value(b).shape(),
                self.value(x).shape()
            )));
        }
        let (cout, k) = (ws[1], ws[2]);
        let oh = ((h.max(1) - 1) * stride + k).checked_sub(2 * pad);
        let ow = ((wd.max(1) - 1) * stride + k).checked_sub(2 * pad);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::arg("conv_transpose2d padding exceeds output"));
        };
        let geom = ConvGeometry {
            channels: cout,
            height: oh,
            width: ow,
            kernel: k,
            stride,
            pad,
        };
        if stride == 0 || geom.out_dims() != Some((h, wd)) {
            return Err(Error::arg(format!(
                "conv_transpose2d geometry {geom:?} invalid"
            )));
        }
        let l = h * wd;
        let mut cols = vec![0.0; geom.patch_len() * l];
        gemm(
            geom.patch_len(),
            cin,
            l,
            self.value(w).data(),
            Trans::Yes,
            self.value(x).data(),
            Trans::No,
            &mut cols,
            false,
        );
        let mut out = vec![0.0; cout * oh * ow];
        col2im(&geom, &cols, &mut out);
        for (co, plane) in out.chunks_mut(oh * ow).enumerate() {
            let bias = self.value(b).data()[co];
            plane.iter_mut().for_each(|v| *v += bias);
        }
        let out = Tensor::new(&[cout, oh, ow], out)?;
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, geom }))
    }

    /// `sum(weight * (pred - target)^2) / norm`; zero when `norm == 0`.
    /// `target` and `weight` are constants.
    pub fn masked_sq_error(
        &mut self,
        pred: Var,
        target: &Tensor,
        weight: &Tensor,
        norm: f64,
    ) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || p.shape() != weight.shape() {
            return Err(Error::shape(format!(
                "masked error: pred {:?}, target {:?}, weight {:?}",
                p.shape(),
                target.shape(),
                weight.shape()
            )));
        }
        let loss = if norm == 0.0 {
            0.0
        } else {
            p.data()
                .iter()
                .zip(target.data())
                .zip(weight.data())
                .map(|((&a, &t), &w)| w * (a - t) * (a - t))
                .sum::<f64>()
                / norm
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MaskedSqError {
                pred,
                target: target.data().to_vec(),
                weight: weight.data().to_vec(),
                norm,
            },
        ))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes[..n]
            .iter()
            .map(|nd| nd.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                axpy(self.slot(grads, *a), 1.0, g);
                axpy(self.slot(grads, *b), 1.0, g);
            }
            Op::Sub(a, b) => {
                axpy(self.slot(grads, *a), 1.0, g);
                axpy(self.slot(grads, *b), -1.0, g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                for (s, (gi, y)) in self.slot(grads, *a).iter_mut().zip(g.iter().zip(vb)) {
                    *s += gi * y;
                }
                for (s, (gi, x)) in self.slot(grads, *b).iter_mut().zip(g.iter().zip(va)) {
                    *s += gi * x;
                }
            }
            Op::Scale(a, s) => axpy(self.slot(grads, *a), *s, g),
            Op::AddRowBias(x, b) => {
                axpy(self.slot(grads, *x), 1.0, g);
                let rows = self.value(*b).len();
                let row_len = g.len() / rows.max(1);
                let gb = self.slot(grads, *b);
                for (r, chunk) in g.chunks(row_len.max(1)).enumerate() {
                    gb[r] += chunk.iter().sum::<f64>();
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("matrix");
                let n = self.value(*b).shape()[1];
                let vb = self.value(*b).data();
                gemm(
                    m,
                    n,
                    k,
                    g,
                    Trans::No,
                    vb,
                    Trans::Yes,
                    self.slot(grads, *a),
                    true,
                );
                let va = self.value(*a).data();
                gemm(
                    k,
                    m,
                    n,
                    va,
                    Trans::Yes,
                    g,
                    Trans::No,
                    self.slot(grads, *b),
                    true,
                );
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().expect("matrix");
                let ga = self.slot(grads, *a);
                for ii in 0..r {
                    for j in 0..c {
                        ga[ii * c + j] += g[j * r + ii];
                    }
                }
            }
            Op::Reshape(a) => axpy(self.slot(grads, *a), 1.0, g),
            Op::SliceRows { x, start } => {
                let rows = self.value(*x).shape()[0];
                let row_len = self.value(*x).len() / rows;
                let off = start * row_len;
                axpy(&mut self.slot(grads, *x)[off..off + g.len()], 1.0, g);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    axpy(self.slot(grads, *p), 1.0, &g[off..off + len]);
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.dims2().expect("matrix");
                let mut off = 0;
                for p in parts {
                    let c = self.value(*p).shape()[1];
                    let gp = self.slot(grads, *p);
                    for r in 0..rows {
                        axpy(
                            &mut gp[r * c..(r + 1) * c],
                            1.0,
                            &g[r * total + off..r * total + off + c],
                        );
                    }
                    off += c;
                }
            }
            Op::Column { x, index } => {
                let c = self.value(*x).shape()[1];
                let gx = self.slot(grads, *x);
                for (r, gi) in g.iter().enumerate() {
                    gx[r * c + index] += gi;
                }
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                for (s, (gi, &x)) in self.slot(grads, *a).iter_mut().zip(g.iter().zip(va)) {
                    *s += gi * gelu_grad(x);
                }
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                for (s, (gi, &x)) in self.slot(grads, *a).iter_mut().zip(g.iter().zip(va)) {
                    if x > 0.0 {
                        *s += gi;
                    }
                }
            }
            Op::Sigmoid(a) => {
                for (s, (gi, y)) in self.slot(grads, *a).iter_mut().zip(g.iter().zip(out)) {
                    *s += gi * y * (1.0 - y);
                }
            }
            Op::Softmax { x, inner, len } => {
                let (inner, len) = (*inner, *len);
                let outer = out.len() / (inner * len).max(1);
                let gx = self.slot(grads, *x);
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + ii;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * out[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] += out[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (d, n) = node.value.dims2().expect("matrix");
                let gam = self.value(*gamma).data();
                let mut dxhat = vec![0.0; d * n];
                {
                    let gg = self.slot(grads, *gamma);
                    for ii in 0..d {
                        for j in 0..n {
                            gg[ii] += g[ii * n + j] * xhat[ii * n + j];
                            dxhat[ii * n + j] = g[ii * n + j] * gam[ii];
                        }
                    }
                }
                {
                    let gb = self.slot(grads, *beta);
                    for ii in 0..d {
                        gb[ii] += g[ii * n..(ii + 1) * n].iter().sum::<f64>();
                    }
                }
                let gx = self.slot(grads, *x);
                let df = d as f64;
                for j in 0..n {
                    let s1: f64 = (0..d).map(|ii| dxhat[ii * n + j]).sum();
                    let s2: f64 = (0..d).map(|ii| dxhat[ii * n + j] * xhat[ii * n + j]).sum();
                    for ii in 0..d {
                        let k = ii * n + j;
                        gx[k] += rstd[j] / df * (df * dxhat[k] - s1 - xhat[k] * s2);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let gl = self.slot(grads, *logits);
                for (c, p) in probs.iter().enumerate() {
                    let onehot = if c == *target { 1.0 } else { 0.0 };
                    gl[c] += g[0] * (p - onehot);
                }
            }
            Op::Sum(a) => self.slot(grads, *a).iter_mut().for_each(|s| *s += g[0]),
            Op::Mean(a) => {
                let ga = self.slot(grads, *a);
                let inv = 1.0 / ga.len().max(1) as f64;
                ga.iter_mut().for_each(|s| *s += g[0] * inv);
            }
            Op::MeanCols(a) => {
                let c = self.value(*a).shape()[1];
                let ga = self.slot(grads, *a);
                for (r, row) in ga.chunks_mut(c.max(1)).enumerate() {
                    row.iter_mut().for_each(|s| *s += g[r] / c as f64);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let cout = self.value(*w).shape()[0];
                let kk = geom.patch_len();
                let l = g.len() / cout;
                gemm(
                    cout,
                    l,
                    kk,
                    g,
                    Trans::No,
                    cols,
                    Trans::Yes,
                    self.slot(grads, *w),
                    true,
                );
                accumulate_channel_sums(self.slot(grads, *b), g, l);
                let mut dcols = vec![0.0; kk * l];
                gemm(
                    kk,
                    cout,
                    l,
                    self.value(*w).data(),
                    Trans::Yes,
                    g,
                    Trans::No,
                    &mut dcols,
                    false,
                );
                col2im(geom, &dcols, self.slot(grads, *x));
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let cin = self.value(*x).shape()[0];
                let kk = geom.patch_len();
                let l = self.value(*x).len() / cin;
                let dcols = im2col(geom, g);
                gemm(
                    cin,
                    kk,
                    l,
                    self.value(*w).data(),
                    Trans::No,
                    &dcols,
                    Trans::No,
                    self.slot(grads, *x),
                    true,
                );
                gemm(
                    cin,
                    l,
                    kk,
                    self.value(*x).data(),
                    Trans::No,
                    &dcols,
                    Trans::Yes,
                    self.slot(grads, *w),
                    true,
                );
                accumulate_channel_sums(self.slot(grads, *b), g, geom.height * geom.width);
            }
            Op::MaskedSqError {
                pred,
                target,
                weight,
                norm,
            } => {
                if *norm == 0.0 {
                    return;
                }
                let vp = self.value(*pred).data();
                let k = 2.0 * g[0] / norm;
                let gp = self.slot(grads, *pred);
                for (idx, s) in gp.iter_mut().enumerate() {
                    *s += k * weight[idx] * (vp[idx] - target[idx]);
                }
            }
        }
    }
}

fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn accumulate_channel_sums(gb: &mut [f64], g: &[f64], plane: usize) {
    for (c, chunk) in g.chunks(plane).enumerate() {
        gb[c] += chunk.iter().sum::<f64>();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: &[usize], data: &[f64]) -> Var {
        tape.leaf(Tensor::new(shape, data.to_vec()).unwrap())
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[4], &[0.0; 4]);
        let y = t.softmax(x, 0).unwrap();
        assert_eq!(t.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_analytic_pair() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2], &[1f64.ln(), 3f64.ln()]);
        let y = t.softmax(x, 0).unwrap();
        let v = t.value(y).data();
        assert!((v[0] - 0.25).abs() < 1e-12 && (v[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2, 2], &[0.0; 4]);
        assert!(matches!(t.softmax(x, 2), Err(Error::Argument(_))));
    }

    #[test]
    fn softmax_along_axis_zero_of_matrix() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2, 3], &[0.0, 1.0, 2.0, 0.0, 1.0, 2.0]);
        let y = t.softmax(x, 0).unwrap();
        assert!(t.value(y).data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn cross_entropy_cases() {
        let mut t = Tape::new();
        let uniform = leaf(&mut t, &[10], &[0.0; 10]);
        let l = t.cross_entropy(uniform, 3).unwrap();
        assert!((t.value(l).item() - 10f64.ln()).abs() < 1e-12);

        let confident = leaf(&mut t, &[3], &[100.0, 0.0, 0.0]);
        let l = t.cross_entropy(confident, 0).unwrap();
        assert!(t.value(l).item() < 1e-12);

        assert!(matches!(
            t.cross_entropy(confident, 3),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2], &[1.0, 2.0]);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn shared_inputs_accumulate() {
        // d/dx sum(x * x) = 2x
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2], &[1.0, 2.0]);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        let g = t.backward(s).unwrap().get(x).unwrap();
        assert_eq!(g.data(), &[2.0, 4.0]);
    }

    #[test]
    fn conv_transpose_doubles_extent() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[3, 4, 4]));
        let w = t.leaf(Tensor::zeros(&[3, 5, 4, 4]));
        let b = leaf(&mut t, &[5], &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let y = t.conv_transpose2d(x, w, b, 2, 1).unwrap();
        assert_eq!(t.value(y).shape(), &[5, 8, 8]);
        assert_eq!(t.value(y).at(&[4, 7, 7]), 5.0);
    }

    #[test]
    fn conv_transpose_single_pixel_scatters_kernel() {
        // One input pixel, stride 1, no padding: output equals the kernel.
        let mut t = Tape::new();
        let x = leaf(&mut t, &[1, 1, 1], &[2.0]);
        let w = leaf(&mut t, &[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut t, &[1], &[0.0]);
        let y = t.conv_transpose2d(x, w, b, 1, 0).unwrap();
        assert_eq!(t.value(y).data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv2d_matches_direct_loop() {
        let mut t = Tape::new();
        let xd: Vec<f64> = (0..2 * 5 * 5).map(|i| (i as f64 * 0.13).sin()).collect();
        let wd: Vec<f64> = (0..3 * 2 * 3 * 3)
            .map(|i| (i as f64 * 0.29).cos())
            .collect();
        let x = leaf(&mut t, &[2, 5, 5], &xd);
        let w = leaf(&mut t, &[3, 2, 3, 3], &wd);
        let b = leaf(&mut t, &[3], &[0.1, 0.2, 0.3]);
        let y = t.conv2d(x, w, b, 2, 1).unwrap();
        let out = t.value(y);
        assert_eq!(out.shape(), &[3, 3, 3]);
        for co in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = [0.1, 0.2, 0.3][co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    acc += xd[(ci * 5 + iy as usize) * 5 + ix as usize]
                                        * wd[((co * 2 + ci) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                    }
                    assert!((out.at(&[co, oy, ox]) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn masked_sq_error_zero_norm() {
        let mut t = Tape::new();
        let p = leaf(&mut t, &[2], &[1.0, 2.0]);
        let target = Tensor::zeros(&[2]);
        let l = t
            .masked_sq_error(p, &target, &Tensor::zeros(&[2]), 0.0)
            .unwrap();
        assert_eq!(t.value(l).item(), 0.0);
        let g = t.backward(l).unwrap().get_or_zeros(p, &[2]);
        assert_eq!(g.data(), &[0.0, 0.0]);
    }
}

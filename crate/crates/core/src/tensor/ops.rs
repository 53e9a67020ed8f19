//! Differentiable operations and their backward rules.

use super::kernels::{self, ConvGeom};
use super::tape::{Node, Var};
use super::{Rng, Tensor};
use crate::error::{Error, Result};

/// Probabilities are clamped to this floor before `ln` in cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

pub(crate) enum Op {
    Leaf,
    Matmul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        input: usize,
        kernel: usize,
        geom: ConvGeom,
        cout: usize,
        cols: Vec<f64>,
    },
    ChannelBias {
        x: usize,
        b: usize,
    },
    AvgPool {
        x: usize,
        c: usize,
        h: usize,
        w: usize,
        window: usize,
        stride: usize,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Affine {
        x: usize,
        scale: f64,
    },
    ScaleBy {
        x: usize,
        s: usize,
    },
    Relu {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    Softmax {
        x: usize,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    CrossEntropy {
        probs: usize,
        target: usize,
    },
    Sum {
        x: usize,
    },
    AddBias {
        x: usize,
        b: usize,
    },
    Transpose {
        x: usize,
        rows: usize,
        cols: usize,
    },
    Reshape {
        x: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
        cols: usize,
    },
    ConcatCols {
        parts: Vec<(usize, usize)>,
    },
    SelectRow {
        x: usize,
        row: usize,
    },
    Mean {
        x: usize,
        axis: usize,
        rows: usize,
        cols: usize,
    },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Matmul { a, b, .. } | Add { a, b } | Sub { a, b } | Mul { a, b } => vec![*a, *b],
            Conv2d { input, kernel, .. } => vec![*input, *kernel],
            ChannelBias { x, b } | AddBias { x, b } => vec![*x, *b],
            ScaleBy { x, s } => vec![*x, *s],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            ConcatCols { parts } => parts.iter().map(|p| p.0).collect(),
            AvgPool { x, .. }
            | MaxPool { x, .. }
            | Affine { x, .. }
            | Relu { x }
            | Sigmoid { x }
            | Softmax { x, .. }
            | Dropout { x, .. }
            | Sum { x }
            | Transpose { x, .. }
            | Reshape { x }
            | SliceCols { x, .. }
            | SelectRow { x, .. }
            | Mean { x, .. } => vec![*x],
            CrossEntropy { probs, .. } => vec![*probs],
        }
    }

    /// Sends `d loss / d input` for each input to `acc`, given the node's
    /// output value and incoming gradient `g`.
    pub(crate) fn backward(
        &self,
        out: &Tensor,
        g: &Tensor,
        nodes: &[Node],
        acc: &mut dyn FnMut(usize, Tensor),
    ) {
        let val = |i: usize| &nodes[i].value;
        let wants = |i: usize| nodes[i].requires_grad;
        let gd = g.data();
        match self {
            Op::Leaf => {}
            Op::Matmul { a, b, m, k, n } => {
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(*m, *n, *k, gd, false, val(*b).data(), true, 0.0, &mut da);
                    acc(*a, Tensor::from_parts(vec![*m, *k], da));
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(*k, *m, *n, val(*a).data(), true, gd, false, 0.0, &mut db);
                    acc(*b, Tensor::from_parts(vec![*k, *n], db));
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cout,
                cols,
            } => {
                let (rows, p) = (geom.rows(), geom.cols());
                if wants(*kernel) {
                    let mut dk = vec![0.0; cout * rows];
                    kernels::gemm(*cout, p, rows, gd, false, cols, true, 0.0, &mut dk);
                    acc(
                        *kernel,
                        Tensor::from_parts(val(*kernel).shape().to_vec(), dk),
                    );
                }
                if wants(*input) {
                    let mut dcols = vec![0.0; rows * p];
                    kernels::gemm(
                        rows,
                        *cout,
                        p,
                        val(*kernel).data(),
                        true,
                        gd,
                        false,
                        0.0,
                        &mut dcols,
                    );
                    let mut dx = vec![0.0; geom.cin * geom.h * geom.w];
                    kernels::col2im(&dcols, geom, &mut dx);
                    acc(*input, Tensor::from_parts(val(*input).shape().to_vec(), dx));
                }
            }
            Op::ChannelBias { x, b } => {
                if wants(*x) {
                    acc(*x, g.clone());
                }
                if wants(*b) {
                    let c = val(*b).numel();
                    let hw = g.numel() / c;
                    let db = (0..c)
                        .map(|ch| gd[ch * hw..(ch + 1) * hw].iter().sum())
                        .collect();
                    acc(*b, Tensor::from_parts(vec![c], db));
                }
            }
            Op::AvgPool {
                x,
                c,
                h,
                w,
                window,
                stride,
            } => {
                let (oh, ow) = (out.shape()[1], out.shape()[2]);
                let mut dx = vec![0.0; c * h * w];
                let norm = 1.0 / (window * window) as f64;
                for ch in 0..*c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = gd[(ch * oh + oy) * ow + ox] * norm;
                            for i in 0..*window {
                                let row = (ch * h + oy * stride + i) * w + ox * stride;
                                for v in &mut dx[row..row + window] {
                                    *v += gv;
                                }
                            }
                        }
                    }
                }
                acc(*x, Tensor::from_parts(val(*x).shape().to_vec(), dx));
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; val(*x).numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += gd[o];
                }
                acc(*x, Tensor::from_parts(val(*x).shape().to_vec(), dx));
            }
            Op::Add { a, b } => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub { a, b } => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    acc(*a, zip(g, val(*b), |gv, bv| gv * bv));
                }
                if wants(*b) {
                    acc(*b, zip(g, val(*a), |gv, av| gv * av));
                }
            }
            Op::Affine { x, scale } => acc(*x, g.map(|v| v * scale)),
            Op::ScaleBy { x, s } => {
                let sv = val(*s).item();
                if wants(*x) {
                    acc(*x, g.map(|v| v * sv));
                }
                if wants(*s) {
                    let d: f64 = gd.iter().zip(val(*x).data()).map(|(a, b)| a * b).sum();
                    acc(*s, Tensor::from_parts(val(*s).shape().to_vec(), vec![d]));
                }
            }
            Op::Relu { x } => acc(
                *x,
                zip(g, val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }),
            ),
            Op::Sigmoid { x } => acc(*x, zip(g, out, |gv, y| gv * y * (1.0 - y))),
            Op::Softmax { x, outer, n, inner } => {
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..*n).map(|j| gd[idx(j)] * y[idx(j)]).sum();
                        for j in 0..*n {
                            dx[idx(j)] = y[idx(j)] * (gd[idx(j)] - dot);
                        }
                    }
                }
                acc(*x, Tensor::from_parts(out.shape().to_vec(), dx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = val(*gamma).data();
                let d = gam.len();
                let rows = xhat.len() / d;
                if wants(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let gr = &gd[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let dxhat: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                        let scale = inv_std[r] / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = scale * (d as f64 * dxhat[j] - sum_d - xr[j] * sum_dx);
                        }
                    }
                    acc(*x, Tensor::from_parts(val(*x).shape().to_vec(), dx));
                }
                if wants(*gamma) || wants(*beta) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += gd[r * d + j] * xhat[r * d + j];
                            db[j] += gd[r * d + j];
                        }
                    }
                    acc(*gamma, Tensor::from_parts(vec![d], dg));
                    acc(*beta, Tensor::from_parts(vec![d], db));
                }
            }
            Op::Dropout { x, mask } => {
                let dx = gd.iter().zip(mask).map(|(a, m)| a * m).collect();
                acc(*x, Tensor::from_parts(out.shape().to_vec(), dx));
            }
            Op::CrossEntropy { probs, target } => {
                let p = val(*probs);
                let mut dp = vec![0.0; p.numel()];
                let pt = p.data()[*target];
                if pt > PROB_FLOOR {
                    dp[*target] = -gd[0] / pt;
                }
                acc(*probs, Tensor::from_parts(p.shape().to_vec(), dp));
            }
            Op::Sum { x } => acc(*x, Tensor::full(val(*x).shape(), gd[0])),
            Op::AddBias { x, b } => {
                if wants(*x) {
                    acc(*x, g.clone());
                }
                if wants(*b) {
                    let n = val(*b).numel();
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*b, Tensor::from_parts(vec![n], db));
                }
            }
            Op::Transpose { x, rows, cols } => {
                acc(
                    *x,
                    Tensor::from_parts(vec![*rows, *cols], transpose(*cols, *rows, gd)),
                );
            }
            Op::Reshape { x } => {
                acc(
                    *x,
                    Tensor::from_parts(val(*x).shape().to_vec(), gd.to_vec()),
                );
            }
            Op::SliceCols { x, start, cols } => {
                let shape = val(*x).shape().to_vec();
                let (rows, total) = (shape[0], shape[1]);
                let mut dx = vec![0.0; rows * total];
                for r in 0..rows {
                    dx[r * total + start..r * total + start + cols]
                        .copy_from_slice(&gd[r * cols..(r + 1) * cols]);
                }
                acc(*x, Tensor::from_parts(shape, dx));
            }
            Op::ConcatCols { parts } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let rows = gd.len() / total;
                let mut offset = 0;
                for &(id, cols) in parts {
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        dx[r * cols..(r + 1) * cols]
                            .copy_from_slice(&gd[r * total + offset..r * total + offset + cols]);
                    }
                    offset += cols;
                    acc(id, Tensor::from_parts(vec![rows, cols], dx));
                }
            }
            Op::SelectRow { x, row } => {
                let shape = val(*x).shape().to_vec();
                let cols = shape[1];
                let mut dx = vec![0.0; shape[0] * cols];
                dx[row * cols..(row + 1) * cols].copy_from_slice(gd);
                acc(*x, Tensor::from_parts(shape, dx));
            }
            Op::Mean {
                x,
                axis,
                rows,
                cols,
            } => {
                let count = if *axis == 0 { *rows } else { *cols } as f64;
                let mut dx = vec![0.0; rows * cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        let o = if *axis == 0 { c } else { r };
                        dx[r * cols + c] = gd[o] / count;
                    }
                }
                acc(*x, Tensor::from_parts(vec![*rows, *cols], dx));
            }
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::dim(
            op,
            format!("expected a matrix, got shape {:?}", t.shape()),
        )),
    }
}

impl<'t> Var<'t> {
    fn unary(&self, f: impl FnOnce(&Tensor) -> (Tensor, Op)) -> Var<'t> {
        let (value, op) = self.with_value(f);
        self.tape.push(value, op)
    }

    fn binary(
        &self,
        other: Var<'t>,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<(Tensor, Op)>,
    ) -> Result<Var<'t>> {
        let (value, op) = {
            let nodes = self.tape.nodes();
            f(&nodes[self.id].value, &nodes[other.id].value)?
        };
        Ok(self.tape.push(value, op))
    }

    /// Matrix product of `M x K` and `K x N` operands.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.id, other.id);
        self.binary(other, |x, y| {
            let (m, k) = matrix_dims("matmul", x)?;
            let (k2, n) = matrix_dims("matmul", y)?;
            if k != k2 {
                return Err(Error::dim(
                    "matmul",
                    format!(
                        "inner dimensions of {:?} and {:?} disagree",
                        x.shape(),
                        y.shape()
                    ),
                ));
            }
            let mut c = vec![0.0; m * n];
            kernels::gemm(m, k, n, x.data(), false, y.data(), false, 0.0, &mut c);
            Ok((
                Tensor::from_parts(vec![m, n], c),
                Op::Matmul { a, b, m, k, n },
            ))
        })
    }

    /// 2-D cross-correlation of a `Cin x H x W` input with `Cout x Cin x k x k`
    /// kernels, zero padding.
    pub fn conv2d(&self, kernels_var: Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
        let (input, kernel) = (self.id, kernels_var.id);
        self.binary(kernels_var, |x, w| {
            if stride == 0 {
                return Err(Error::Parameter("conv2d stride must be at least 1".into()));
            }
            let [cin, h, wd] = *x.shape() else {
                return Err(Error::dim(
                    "conv2d",
                    format!("input must be C x H x W, got {:?}", x.shape()),
                ));
            };
            let [cout, kc, k, k2] = *w.shape() else {
                return Err(Error::dim(
                    "conv2d",
                    format!("kernels must be Cout x Cin x k x k, got {:?}", w.shape()),
                ));
            };
            if kc != cin || k != k2 {
                return Err(Error::dim(
                    "conv2d",
                    format!("kernels {:?} do not fit input {:?}", w.shape(), x.shape()),
                ));
            }
            if k > h + 2 * padding || k > wd + 2 * padding {
                return Err(Error::dim(
                    "conv2d",
                    format!(
                        "kernel {k}x{k} larger than padded input {:?} (padding {padding})",
                        x.shape()
                    ),
                ));
            }
            let geom = ConvGeom {
                cin,
                h,
                w: wd,
                k,
                stride,
                pad: padding,
                oh: (h + 2 * padding - k) / stride + 1,
                ow: (wd + 2 * padding - k) / stride + 1,
            };
            let cols = kernels::im2col(x.data(), &geom);
            let mut out = vec![0.0; cout * geom.cols()];
            kernels::gemm(
                cout,
                geom.rows(),
                geom.cols(),
                w.data(),
                false,
                &cols,
                false,
                0.0,
                &mut out,
            );
            Ok((
                Tensor::from_parts(vec![cout, geom.oh, geom.ow], out),
                Op::Conv2d {
                    input,
                    kernel,
                    geom,
                    cout,
                    cols,
                },
            ))
        })
    }

    /// Adds `b[c]` to every cell of channel `c` of a `C x H x W` tensor.
    pub fn channel_bias(&self, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.id, bias.id);
        self.binary(bias, |t, bv| {
            let c = t.shape()[0];
            if t.ndim() != 3 || bv.shape() != [c] {
                return Err(Error::dim(
                    "channel_bias",
                    format!(
                        "bias {:?} does not match channels of {:?}",
                        bv.shape(),
                        t.shape()
                    ),
                ));
            }
            let hw = t.numel() / c;
            let mut data = t.data().to_vec();
            for (ch, &bias) in bv.data().iter().enumerate() {
                for v in &mut data[ch * hw..(ch + 1) * hw] {
                    *v += bias;
                }
            }
            Ok((
                Tensor::from_parts(t.shape().to_vec(), data),
                Op::ChannelBias { x, b },
            ))
        })
    }

    fn pool_dims(
        &self,
        op: &'static str,
        window: usize,
        stride: usize,
    ) -> Result<(usize, usize, usize, usize, usize)> {
        let shape = self.shape();
        let [c, h, w] = shape[..] else {
            return Err(Error::dim(
                op,
                format!("input must be C x H x W, got {shape:?}"),
            ));
        };
        if window == 0 || stride == 0 {
            return Err(Error::Parameter(format!(
                "{op}: window and stride must be positive"
            )));
        }
        if window > h || window > w {
            return Err(Error::dim(
                op,
                format!("window {window} exceeds spatial extent {h}x{w}"),
            ));
        }
        Ok((
            c,
            h,
            w,
            (h - window) / stride + 1,
            (w - window) / stride + 1,
        ))
    }

    /// Mean over each `window x window` patch.
    pub fn pool_avg(&self, window: usize, stride: usize) -> Result<Var<'t>> {
        let (c, h, w, oh, ow) = self.pool_dims("pool_avg", window, stride)?;
        let x = self.id;
        Ok(self.unary(|t| {
            let d = t.data();
            let norm = (window * window) as f64;
            let mut out = vec![0.0; c * oh * ow];
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for i in 0..window {
                            let row = (ch * h + oy * stride + i) * w + ox * stride;
                            s += d[row..row + window].iter().sum::<f64>();
                        }
                        out[(ch * oh + oy) * ow + ox] = s / norm;
                    }
                }
            }
            (
                Tensor::from_parts(vec![c, oh, ow], out),
                Op::AvgPool {
                    x,
                    c,
                    h,
                    w,
                    window,
                    stride,
                },
            )
        }))
    }

    /// Max over each patch; gradient goes to the first maximal element in
    /// row-major order.
    pub fn pool_max(&self, window: usize, stride: usize) -> Result<Var<'t>> {
        let (c, h, w, oh, ow) = self.pool_dims("pool_max", window, stride)?;
        let x = self.id;
        Ok(self.unary(|t| {
            let d = t.data();
            let mut out = vec![0.0; c * oh * ow];
            let mut argmax = vec![0; c * oh * ow];
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = (f64::NEG_INFINITY, usize::MAX);
                        for i in 0..window {
                            for j in 0..window {
                                let idx = (ch * h + oy * stride + i) * w + ox * stride + j;
                                if d[idx] > best.0 || best.1 == usize::MAX {
                                    best = (d[idx], idx);
                                }
                            }
                        }
                        let o = (ch * oh + oy) * ow + ox;
                        out[o] = best.0;
                        argmax[o] = best.1;
                    }
                }
            }
            (
                Tensor::from_parts(vec![c, oh, ow], out),
                Op::MaxPool { x, argmax },
            )
        }))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.id, other.id);
        self.binary(other, |x, y| {
            same_shape("add", x, y)?;
            Ok((zip(x, y, |p, q| p + q), Op::Add { a, b }))
        })
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.id, other.id);
        self.binary(other, |x, y| {
            same_shape("sub", x, y)?;
            Ok((zip(x, y, |p, q| p - q), Op::Sub { a, b }))
        })
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.id, other.id);
        self.binary(other, |x, y| {
            same_shape("mul", x, y)?;
            Ok((zip(x, y, |p, q| p * q), Op::Mul { a, b }))
        })
    }

    /// `scale * x + shift`, both constants.
    pub fn affine(&self, scale: f64, shift: f64) -> Var<'t> {
        let x = self.id;
        self.unary(|t| (t.map(|v| scale * v + shift), Op::Affine { x, scale }))
    }

    pub fn scale(&self, factor: f64) -> Var<'t> {
        self.affine(factor, 0.0)
    }

    /// Multiplies every element by a one-element tensor.
    pub fn scale_by(&self, s: Var<'t>) -> Result<Var<'t>> {
        let (x, sid) = (self.id, s.id);
        self.binary(s, |t, sv| {
            if !sv.is_scalar() {
                return Err(Error::dim(
                    "scale_by",
                    format!("factor must be scalar, got {:?}", sv.shape()),
                ));
            }
            let f = sv.item();
            Ok((t.map(|v| v * f), Op::ScaleBy { x, s: sid }))
        })
    }

    pub fn relu(&self) -> Var<'t> {
        let x = self.id;
        self.unary(|t| (t.map(|v| v.max(0.0)), Op::Relu { x }))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let x = self.id;
        self.unary(|t| (t.map(sigmoid), Op::Sigmoid { x }))
    }

    /// Softmax along `axis`, computed after subtracting the maximum.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::dim(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        if self.with_value(|t| t.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric(
                "softmax input contains non-finite values".into(),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.id;
        Ok(self.unary(|t| {
            let d = t.data();
            let mut y = vec![0.0; d.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * n + j) * inner + i;
                    let m = (0..n).map(|j| d[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for j in 0..n {
                        let e = (d[idx(j)] - m).exp();
                        y[idx(j)] = e;
                        z += e;
                    }
                    for j in 0..n {
                        y[idx(j)] /= z;
                    }
                }
            }
            (
                Tensor::from_parts(shape.clone(), y),
                Op::Softmax { x, outer, n, inner },
            )
        }))
    }

    /// Normalizes over the last axis (population variance, `eps` inside the
    /// square root) then applies `gamma * xhat + beta`.
    pub fn layernorm(&self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (x, gid, bid) = (self.id, gamma.id, beta.id);
        let (value, op) = {
            let nodes = self.tape.nodes();
            let t = &nodes[x].value;
            let (gv, bv) = (&nodes[gid].value, &nodes[bid].value);
            let d = *t.shape().last().unwrap();
            if gv.shape() != [d] || bv.shape() != [d] {
                return Err(Error::dim(
                    "layernorm",
                    format!(
                        "gamma {:?} / beta {:?} do not match last axis of {:?}",
                        gv.shape(),
                        bv.shape(),
                        t.shape()
                    ),
                ));
            }
            let rows = t.numel() / d;
            let mut xhat = vec![0.0; t.numel()];
            let mut inv_std = vec![0.0; rows];
            let mut y = vec![0.0; t.numel()];
            for r in 0..rows {
                let row = &t.data()[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..d {
                    let xh = (row[j] - mean) * is;
                    xhat[r * d + j] = xh;
                    y[r * d + j] = gv.data()[j] * xh + bv.data()[j];
                }
            }
            (
                Tensor::from_parts(t.shape().to_vec(), y),
                Op::LayerNorm {
                    x,
                    gamma: gid,
                    beta: bid,
                    xhat,
                    inv_std,
                },
            )
        };
        Ok(self.tape.push(value, op))
    }

    /// Inverted dropout: in training each element is zeroed with probability
    /// `rate` and survivors are scaled by `1 / (1 - rate)`; otherwise identity.
    pub fn dropout(&self, rate: f64, training: bool, rng: &mut Rng) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(*self);
        }
        let keep = 1.0 / (1.0 - rate);
        let x = self.id;
        Ok(self.unary(|t| {
            let mask: Vec<f64> = (0..t.numel())
                .map(|_| if rng.bernoulli(rate) { 0.0 } else { keep })
                .collect();
            let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
            (
                Tensor::from_parts(t.shape().to_vec(), data),
                Op::Dropout { x, mask },
            )
        }))
    }

    /// `-ln(probs[target])` with probabilities floored at [`PROB_FLOOR`].
    /// Expects a distribution: non-negative entries summing to 1 within 1e-6.
    pub fn cross_entropy(&self, target: usize) -> Result<Var<'t>> {
        let probs = self.id;
        let value = self.with_value(|p| -> Result<f64> {
            if target >= p.numel() {
                return Err(Error::Index(format!(
                    "target class {target} out of range for {} classes",
                    p.numel()
                )));
            }
            if p.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Contract(
                    "cross_entropy needs non-negative finite probabilities".into(),
                ));
            }
            let s = p.sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!("probabilities sum to {s}, not 1")));
            }
            Ok(-p.data()[target].max(PROB_FLOOR).ln())
        })?;
        Ok(self
            .tape
            .push(Tensor::scalar(value), Op::CrossEntropy { probs, target }))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&self) -> Var<'t> {
        let x = self.id;
        self.unary(|t| (Tensor::scalar(t.sum()), Op::Sum { x }))
    }

    /// Adds a length-`N` vector to every row of an `M x N` matrix.
    pub fn add_bias(&self, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.id, bias.id);
        self.binary(bias, |t, bv| {
            let (_, n) = matrix_dims("add_bias", t)?;
            if bv.shape() != [n] {
                return Err(Error::dim(
                    "add_bias",
                    format!("bias {:?} vs matrix {:?}", bv.shape(), t.shape()),
                ));
            }
            let mut data = t.data().to_vec();
            for row in data.chunks_mut(n) {
                for (v, b) in row.iter_mut().zip(bv.data()) {
                    *v += b;
                }
            }
            Ok((
                Tensor::from_parts(t.shape().to_vec(), data),
                Op::AddBias { x, b },
            ))
        })
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let (rows, cols) = self.with_value(|t| matrix_dims("transpose", t))?;
        let x = self.id;
        Ok(self.unary(|t| {
            (
                Tensor::from_parts(vec![cols, rows], transpose(rows, cols, t.data())),
                Op::Transpose { x, rows, cols },
            )
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        Ok(self.tape.push(value, Op::Reshape { x: self.id }))
    }

    /// Columns `start..start + cols` of a matrix.
    pub fn slice_cols(&self, start: usize, cols: usize) -> Result<Var<'t>> {
        let (rows, total) = self.with_value(|t| matrix_dims("slice_cols", t))?;
        if cols == 0 || start + cols > total {
            return Err(Error::dim(
                "slice_cols",
                format!("columns {start}..{} of {total}", start + cols),
            ));
        }
        let x = self.id;
        Ok(self.unary(|t| {
            let d = t.data();
            let data = (0..rows)
                .flat_map(|r| {
                    d[r * total + start..r * total + start + cols]
                        .iter()
                        .copied()
                })
                .collect();
            (
                Tensor::from_parts(vec![rows, cols], data),
                Op::SliceCols { x, start, cols },
            )
        }))
    }

    /// Side-by-side concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        let tape = first.tape;
        let (value, op) = {
            let nodes = tape.nodes();
            let mut dims = Vec::with_capacity(parts.len());
            for p in parts {
                dims.push(matrix_dims("concat_cols", &nodes[p.id].value)?);
            }
            let rows = dims[0].0;
            if dims.iter().any(|d| d.0 != rows) {
                return Err(Error::dim(
                    "concat_cols",
                    format!("row counts differ: {dims:?}"),
                ));
            }
            let total: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (p, d) in parts.iter().zip(&dims) {
                    data.extend_from_slice(&nodes[p.id].value.data()[r * d.1..(r + 1) * d.1]);
                }
            }
            (
                Tensor::from_parts(vec![rows, total], data),
                Op::ConcatCols {
                    parts: parts.iter().zip(&dims).map(|(p, d)| (p.id, d.1)).collect(),
                },
            )
        };
        Ok(tape.push(value, op))
    }

    /// Row `row` of a matrix as a `1 x N` matrix.
    pub fn select_row(&self, row: usize) -> Result<Var<'t>> {
        let (rows, cols) = self.with_value(|t| matrix_dims("select_row", t))?;
        if row >= rows {
            return Err(Error::Index(format!("row {row} of {rows}")));
        }
        let x = self.id;
        Ok(self.unary(|t| {
            (
                Tensor::from_parts(
                    vec![1, cols],
                    t.data()[row * cols..(row + 1) * cols].to_vec(),
                ),
                Op::SelectRow { x, row },
            )
        }))
    }

    /// Mean of a matrix along `axis` (0: over rows, giving `[cols]`;
    /// 1: over columns, giving `[rows]`). Accumulates in index order.
    pub fn mean(&self, axis: usize) -> Result<Var<'t>> {
        let (rows, cols) = self.with_value(|t| matrix_dims("mean", t))?;
        if axis > 1 {
            return Err(Error::dim("mean", format!("axis {axis} for a matrix")));
        }
        let x = self.id;
        Ok(self.unary(|t| {
            let d = t.data();
            let data: Vec<f64> = if axis == 0 {
                let mut acc = vec![0.0; cols];
                for r in 0..rows {
                    for (a, v) in acc.iter_mut().zip(&d[r * cols..(r + 1) * cols]) {
                        *a += v;
                    }
                }
                acc.into_iter().map(|s| s / rows as f64).collect()
            } else {
                (0..rows)
                    .map(|r| {
                        let mut s = 0.0;
                        for v in &d[r * cols..(r + 1) * cols] {
                            s += v;
                        }
                        s / cols as f64
                    })
                    .collect()
            };
            let n = data.len();
            (
                Tensor::from_parts(vec![n], data),
                Op::Mean {
                    x,
                    axis,
                    rows,
                    cols,
                },
            )
        }))
    }
}

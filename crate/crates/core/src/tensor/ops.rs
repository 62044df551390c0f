//! Primitive kernels: forward evaluation and vector-Jacobian products.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Probability clamp shared by every cross-entropy evaluation.
pub const BCE_EPS: f64 = 1e-7;

/// A differentiable primitive together with its attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Elementwise sum of two equal-shape tensors.
    Add,
    /// Elementwise product of two equal-shape tensors.
    Mul,
    /// `[m, k] x [k, n]`.
    MatMul,
    /// Inputs `x [N,Cin,H,W]`, `w [Cout,Cin,kh,kw]` and optionally `b [Cout]`.
    Conv2d { stride: usize, pad: usize },
    /// Affine map: `x [N,in]`, `w [out,in]`, optional `b [out]`.
    Dense,
    LeakyRelu { slope: f64 },
    Relu,
    Sigmoid,
    /// Unpadded max pooling; gradient goes to the first maximum in scan order.
    MaxPool2d { kernel: usize, stride: usize },
    /// `[N,C,H,W] -> [N,C]`.
    GlobalAvgPool,
    /// `[N,C,H,W] -> [N,C]`, first maximum wins on ties.
    GlobalMaxPool,
    Concat { axis: usize },
    /// Bilinear resampling of `[N,C,H,W]` with align-corners-false mapping.
    BilinearResize { height: usize, width: usize },
    /// Sum of all elements to a rank-0 tensor.
    Sum,
    /// Mean of all elements to a rank-0 tensor.
    Mean,
    Scale { factor: f64 },
    /// Forward identity; contributes no gradient to its input.
    StopGradient,
    /// Mean binary cross-entropy of `sigmoid(logits)` against a constant target.
    BceWithLogits,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Mul => "mul",
            Op::MatMul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Dense => "dense",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::GlobalMaxPool => "global_max_pool",
            Op::Concat { .. } => "concat",
            Op::BilinearResize { .. } => "bilinear_upsample",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Scale { .. } => "scale",
            Op::StopGradient => "stop_gradient",
            Op::BceWithLogits => "bce_with_logits",
        }
    }

    /// Minimum and maximum input count.
    fn arity(&self) -> (usize, usize) {
        match self {
            Op::Add | Op::Mul | Op::MatMul | Op::BceWithLogits => (2, 2),
            Op::Conv2d { .. } | Op::Dense => (2, 3),
            Op::Concat { .. } => (1, usize::MAX),
            _ => (1, 1),
        }
    }
}

fn mismatch(op: &Op, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op: op.name(),
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Evaluate one primitive without recording it.
pub fn forward<T: Scalar>(op: &Op, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let (lo, hi) = op.arity();
    if inputs.len() < lo || inputs.len() > hi {
        return Err(Error::Contract(format!(
            "{} takes {lo}..={hi} inputs, got {}",
            op.name(),
            inputs.len()
        )));
    }
    let out = match op {
        Op::Add | Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(mismatch(op, a.shape(), b.shape()));
            }
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| if *op == Op::Add { x + y } else { x * y })
                .collect();
            Tensor::new(a.shape().to_vec(), data)?
        }
        Op::MatMul => matmul(op, inputs[0], inputs[1])?,
        Op::Conv2d { stride, pad } => conv2d(inputs[0], inputs[1], inputs.get(2).copied(), *stride, *pad)?,
        Op::Dense => dense(op, inputs[0], inputs[1], inputs.get(2).copied())?,
        Op::LeakyRelu { slope } => {
            let s = T::of(*slope);
            inputs[0].map(|x| if x > T::zero() { x } else { s * x })
        }
        Op::Relu => inputs[0].map(|x| if x > T::zero() { x } else { T::zero() }),
        Op::Sigmoid => inputs[0].map(sigmoid),
        Op::MaxPool2d { kernel, stride } => maxpool(op, inputs[0], *kernel, *stride)?.0,
        Op::GlobalAvgPool => {
            let (n, c, h, w) = inputs[0].dims4(op.name())?;
            let hw = h * w;
            let inv = T::one() / T::of(hw as f64);
            let data = inputs[0]
                .data()
                .chunks(hw)
                .map(|p| p.iter().copied().sum::<T>() * inv)
                .collect();
            Tensor::new(vec![n, c], data)?
        }
        Op::GlobalMaxPool => {
            let (n, c, h, w) = inputs[0].dims4(op.name())?;
            let data = inputs[0]
                .data()
                .chunks(h * w)
                .map(|p| p[first_argmax(p)])
                .collect();
            Tensor::new(vec![n, c], data)?
        }
        Op::Concat { axis } => concat(op, inputs, *axis)?,
        Op::BilinearResize { height, width } => resize_forward(op, inputs[0], *height, *width)?,
        Op::Sum => Tensor::scalar(inputs[0].data().iter().copied().sum()),
        Op::Mean => {
            let x = inputs[0];
            if x.is_empty() {
                return Err(Error::Contract("mean of an empty tensor".into()));
            }
            Tensor::scalar(x.data().iter().copied().sum::<T>() / T::of(x.len() as f64))
        }
        Op::Scale { factor } => {
            let f = T::of(*factor);
            inputs[0].map(|x| x * f)
        }
        Op::StopGradient => inputs[0].clone(),
        Op::BceWithLogits => {
            let (z, y) = (inputs[0], inputs[1]);
            if z.shape() != y.shape() {
                return Err(mismatch(op, z.shape(), y.shape()));
            }
            if z.is_empty() {
                return Err(Error::Contract("bce of an empty tensor".into()));
            }
            let total: f64 = z
                .data()
                .iter()
                .zip(y.data())
                .map(|(&zi, &yi)| bce_term(sigmoid(zi.as_f64()), yi.as_f64()))
                .sum();
            Tensor::scalar(T::of(total / z.len() as f64))
        }
    };
    if !out.all_finite() {
        return Err(Error::NumericFault { op: op.name() });
    }
    Ok(out)
}

/// Gradients of the inputs given the output gradient. `None` marks an input
/// that receives no gradient.
pub fn backward<T: Scalar>(
    op: &Op,
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    grad: &Tensor<T>,
) -> Vec<Option<Tensor<T>>> {
    match op {
        Op::Add => vec![Some(grad.clone()), Some(grad.clone())],
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let ga = zip_map(grad, b, |g, y| g * y);
            let gb = zip_map(grad, a, |g, x| g * x);
            vec![Some(ga), Some(gb)]
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let mut ga = Tensor::zeros(&[m, k]);
            let mut gb = Tensor::zeros(&[k, n]);
            for i in 0..m {
                for p in 0..k {
                    let mut acc = T::zero();
                    for j in 0..n {
                        let g = grad.data()[i * n + j];
                        acc = acc + g * b.data()[p * n + j];
                        gb.data_mut()[p * n + j] = gb.data()[p * n + j] + a.data()[i * k + p] * g;
                    }
                    ga.data_mut()[i * k + p] = acc;
                }
            }
            vec![Some(ga), Some(gb)]
        }
        Op::Conv2d { stride, pad } => {
            let (gx, gw, gb) = conv2d_backward(inputs[0], inputs[1], grad, *stride, *pad);
            let mut out = vec![Some(gx), Some(gw)];
            if inputs.len() == 3 {
                out.push(Some(gb));
            }
            out
        }
        Op::Dense => {
            let (x, w) = (inputs[0], inputs[1]);
            let (n, din) = (x.shape()[0], x.shape()[1]);
            let dout = w.shape()[0];
            let mut gx = Tensor::zeros(&[n, din]);
            let mut gw = Tensor::zeros(&[dout, din]);
            let mut gb = Tensor::zeros(&[dout]);
            for s in 0..n {
                let xr = &x.data()[s * din..(s + 1) * din];
                for o in 0..dout {
                    let g = grad.data()[s * dout + o];
                    gb.data_mut()[o] = gb.data()[o] + g;
                    let wr = &w.data()[o * din..(o + 1) * din];
                    axpy(g, wr, &mut gx.data_mut()[s * din..(s + 1) * din]);
                    axpy(g, xr, &mut gw.data_mut()[o * din..(o + 1) * din]);
                }
            }
            let mut out = vec![Some(gx), Some(gw)];
            if inputs.len() == 3 {
                out.push(Some(gb));
            }
            out
        }
        Op::LeakyRelu { slope } => {
            let s = T::of(*slope);
            vec![Some(zip_map(grad, inputs[0], |g, x| if x > T::zero() { g } else { s * g }))]
        }
        Op::Relu => vec![Some(zip_map(grad, inputs[0], |g, x| {
            if x > T::zero() {
                g
            } else {
                T::zero()
            }
        }))],
        Op::Sigmoid => vec![Some(zip_map(grad, output, |g, y| g * y * (T::one() - y)))],
        Op::MaxPool2d { kernel, stride } => {
            let x = inputs[0];
            let (_, argmax) = maxpool(op, x, *kernel, *stride).expect("validated in forward");
            let mut gx = Tensor::zeros(x.shape());
            for (&src, &g) in argmax.iter().zip(grad.data()) {
                gx.data_mut()[src] = gx.data()[src] + g;
            }
            vec![Some(gx)]
        }
        Op::GlobalAvgPool => {
            let x = inputs[0];
            let hw = x.shape()[2] * x.shape()[3];
            let inv = T::one() / T::of(hw as f64);
            let mut gx = Tensor::zeros(x.shape());
            for (plane, &g) in gx.data_mut().chunks_mut(hw).zip(grad.data()) {
                plane.fill(g * inv);
            }
            vec![Some(gx)]
        }
        Op::GlobalMaxPool => {
            let x = inputs[0];
            let hw = x.shape()[2] * x.shape()[3];
            let mut gx = Tensor::zeros(x.shape());
            for ((plane, src), &g) in gx.data_mut().chunks_mut(hw).zip(x.data().chunks(hw)).zip(grad.data()) {
                plane[first_argmax(src)] = g;
            }
            vec![Some(gx)]
        }
        Op::Concat { axis } => {
            let outer: usize = output.shape()[..*axis].iter().product();
            let inner: usize = output.shape()[axis + 1..].iter().product();
            let total = output.shape()[*axis] * inner;
            let mut offset = 0;
            inputs
                .iter()
                .map(|x| {
                    let chunk = x.shape()[*axis] * inner;
                    let mut gx = Vec::with_capacity(x.len());
                    for o in 0..outer {
                        let start = o * total + offset;
                        gx.extend_from_slice(&grad.data()[start..start + chunk]);
                    }
                    offset += chunk;
                    Some(Tensor::new(x.shape().to_vec(), gx).expect("concat split"))
                })
                .collect()
        }
        Op::BilinearResize { height, width } => {
            let x = inputs[0];
            let (n, c, h, w) = x.dims4("bilinear_upsample").expect("validated in forward");
            let ys = axis_weights(h, *height);
            let xs = axis_weights(w, *width);
            let mut gx = Tensor::zeros(x.shape());
            let out_plane = height * width;
            for p in 0..n * c {
                let g = &grad.data()[p * out_plane..(p + 1) * out_plane];
                let dst = &mut gx.data_mut()[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                    let (wy0, wy1) = (T::of(1.0 - ly), T::of(ly));
                    for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                        let (wx0, wx1) = (T::of(1.0 - lx), T::of(lx));
                        let gv = g[oy * width + ox];
                        dst[y0 * w + x0] = dst[y0 * w + x0] + gv * wy0 * wx0;
                        dst[y0 * w + x1] = dst[y0 * w + x1] + gv * wy0 * wx1;
                        dst[y1 * w + x0] = dst[y1 * w + x0] + gv * wy1 * wx0;
                        dst[y1 * w + x1] = dst[y1 * w + x1] + gv * wy1 * wx1;
                    }
                }
            }
            vec![Some(gx)]
        }
        Op::Sum => vec![Some(Tensor::full(inputs[0].shape(), grad.item()))],
        Op::Mean => {
            let x = inputs[0];
            vec![Some(Tensor::full(x.shape(), grad.item() / T::of(x.len() as f64)))]
        }
        Op::Scale { factor } => {
            let f = T::of(*factor);
            vec![Some(grad.map(|g| g * f))]
        }
        Op::StopGradient => vec![None],
        Op::BceWithLogits => {
            let (z, y) = (inputs[0], inputs[1]);
            let scale = grad.item() / T::of(z.len() as f64);
            vec![Some(zip_map(z, y, |zi, yi| (sigmoid(zi) - yi) * scale)), None]
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// One cross-entropy term with the probability clamped to `[eps, 1 - eps]`.
pub(crate) fn bce_term(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("equal shapes")
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] = lanes[l] + x[l] * y[l];
        }
    }
    let mut acc = lanes.iter().copied().sum::<T>();
    for (&x, &y) in ra.iter().zip(rb) {
        acc = acc + x * y;
    }
    acc
}

fn first_argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn matmul<T: Scalar>(op: &Op, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, k2, n) = match (a.shape(), b.shape()) {
        ([m, k], [k2, n]) => (*m, *k, *k2, *n),
        _ => return Err(mismatch(op, a.shape(), b.shape())),
    };
    if k != k2 {
        return Err(mismatch(op, a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for p in 0..k {
            let av = a.data()[i * k + p];
            axpy(av, &b.data()[p * n..(p + 1) * n], &mut out.data_mut()[i * n..(i + 1) * n]);
        }
    }
    Ok(out)
}

fn dense<T: Scalar>(op: &Op, x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, din, dout, din2) = match (x.shape(), w.shape()) {
        ([n, din], [dout, din2]) => (*n, *din, *dout, *din2),
        _ => return Err(mismatch(op, x.shape(), w.shape())),
    };
    if din != din2 {
        return Err(mismatch(op, x.shape(), w.shape()));
    }
    if let Some(b) = b {
        if b.shape() != [dout] {
            return Err(mismatch(op, w.shape(), b.shape()));
        }
    }
    let mut out = Tensor::zeros(&[n, dout]);
    for s in 0..n {
        let xr = &x.data()[s * din..(s + 1) * din];
        for o in 0..dout {
            let bias = b.map_or(T::zero(), |b| b.data()[o]);
            out.data_mut()[s * dout + o] = dot(xr, &w.data()[o * din..(o + 1) * din]) + bias;
        }
    }
    Ok(out)
}

/// Output columns `ox` whose input column `ox*stride + k - pad` lies in `[0, len)`.
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    if len + pad <= k {
        return (0, 0);
    }
    let hi = ((len - 1 + pad - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || padded < k {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let op = Op::Conv2d { stride, pad };
    let (n, cin, h, wd) = x.dims4("conv2d")?;
    let (cout, cin2, kh, kw) = w.dims4("conv2d")?;
    if cin != cin2 {
        return Err(mismatch(&op, x.shape(), w.shape()));
    }
    if let Some(b) = b {
        if b.shape() != [cout] {
            return Err(mismatch(&op, w.shape(), b.shape()));
        }
    }
    let (ho, wo) = match (conv_out(h, kh, stride, pad), conv_out(wd, kw, stride, pad)) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => return Err(mismatch(&op, x.shape(), w.shape())),
    };
    let geom = ConvGeom {
        cin,
        h,
        w: wd,
        kh,
        kw,
        stride,
        pad,
        ho,
        wo,
    };
    let (k, p) = (cin * kh * kw, ho * wo);
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    let wdat = w.data();
    for ni in 0..n {
        let cols = geom.im2col(&x.data()[ni * cin * h * wd..(ni + 1) * cin * h * wd]);
        for co in 0..cout {
            let plane = &mut out.data_mut()[(ni * cout + co) * p..(ni * cout + co + 1) * p];
            if let Some(b) = b {
                plane.fill(b.data()[co]);
            }
            for (ki, &wv) in wdat[co * k..(co + 1) * k].iter().enumerate() {
                axpy(wv, &cols[ki * p..(ki + 1) * p], plane);
            }
        }
    }
    Ok(out)
}

/// Spatial geometry of one convolution, for unfolding input patches into the
/// rows of a `[cin * kh * kw, ho * wo]` matrix and folding them back.
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    /// Calls `f(row, out_offset, in_offset, len)` for each contiguous run
    /// (stride 1) or single element (otherwise) of in-bounds taps.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let p = self.ho * self.wo;
        for ci in 0..self.cin {
            for ky in 0..self.kh {
                let (oy0, oy1) = valid_range(ky, self.pad, self.stride, self.h, self.ho);
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let (ox0, ox1) = valid_range(kx, self.pad, self.stride, self.w, self.wo);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * self.stride + ky - self.pad;
                        let in_row = ci * self.h * self.w + iy * self.w;
                        let out_row = row * p + oy * self.wo;
                        if self.stride == 1 {
                            f(row, out_row + ox0, in_row + ox0 + kx - self.pad, ox1 - ox0);
                        } else {
                            for ox in ox0..ox1 {
                                f(row, out_row + ox, in_row + ox * self.stride + kx - self.pad, 1);
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let mut cols = vec![T::zero(); self.cin * self.kh * self.kw * self.ho * self.wo];
        self.for_each_run(|_, o, i, len| cols[o..o + len].copy_from_slice(&x[i..i + len]));
        cols
    }

    fn col2im_add<T: Scalar>(&self, cols: &[T], gx: &mut [T]) {
        self.for_each_run(|_, o, i, len| {
            for (g, &c) in gx[i..i + len].iter_mut().zip(&cols[o..o + len]) {
                *g = *g + c;
            }
        });
    }
}

fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (ho, wo) = (grad.shape()[2], grad.shape()[3]);
    let geom = ConvGeom {
        cin,
        h,
        w: wd,
        kh,
        kw,
        stride,
        pad,
        ho,
        wo,
    };
    let (k, p) = (cin * kh * kw, ho * wo);
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(&[cout]);
    let (wdat, gd) = (w.data(), grad.data());
    for ni in 0..n {
        let span = ni * cin * h * wd..(ni + 1) * cin * h * wd;
        let cols = geom.im2col(&x.data()[span.clone()]);
        let mut gcols = vec![T::zero(); k * p];
        for co in 0..cout {
            let gplane = &gd[(ni * cout + co) * p..(ni * cout + co + 1) * p];
            gb.data_mut()[co] = gb.data()[co] + gplane.iter().copied().sum::<T>();
            for ki in 0..k {
                let row = ki * p..(ki + 1) * p;
                let widx = co * k + ki;
                gw.data_mut()[widx] = gw.data()[widx] + dot(gplane, &cols[row.clone()]);
                axpy(wdat[widx], gplane, &mut gcols[row]);
            }
        }
        geom.col2im_add(&gcols, &mut gx.data_mut()[span]);
    }
    (gx, gw, gb)
}

/// Pooled tensor plus, for every output element, the flat index of its source.
fn maxpool<T: Scalar>(op: &Op, x: &Tensor<T>, kernel: usize, stride: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4(op.name())?;
    if kernel == 0 || stride == 0 || h < kernel || w < kernel {
        return Err(mismatch(op, x.shape(), &[kernel, kernel]));
    }
    let (ho, wo) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    let xd = x.data();
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, arg))
}

fn concat<T: Scalar>(op: &Op, inputs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = inputs[0];
    if axis >= first.shape().len() {
        return Err(mismatch(op, first.shape(), &[axis]));
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = 0;
    for x in inputs {
        let same_rank = x.shape().len() == first.shape().len();
        let agrees = same_rank
            && x.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !agrees {
            return Err(mismatch(op, first.shape(), x.shape()));
        }
        shape[axis] += x.shape()[axis];
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for x in inputs {
            let chunk = x.shape()[axis] * inner;
            data.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(shape, data)
}

/// Per output coordinate: (low source index, high source index, weight of high).
pub(crate) fn axis_weights(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let l = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, l)
        })
        .collect()
}

fn resize_forward<T: Scalar>(op: &Op, x: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4(op.name())?;
    if height == 0 || width == 0 || h == 0 || w == 0 {
        return Err(mismatch(op, x.shape(), &[height, width]));
    }
    let ys = axis_weights(h, height);
    let xs = axis_weights(w, width);
    let mut data = Vec::with_capacity(n * c * height * width);
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for &(y0, y1, ly) in &ys {
            let (wy0, wy1) = (T::of(1.0 - ly), T::of(ly));
            for &(x0, x1, lx) in &xs {
                let (wx0, wx1) = (T::of(1.0 - lx), T::of(lx));
                let top = src[y0 * w + x0] * wx0 + src[y0 * w + x1] * wx1;
                let bottom = src[y1 * w + x0] * wx0 + src[y1 * w + x1] * wx1;
                data.push(top * wy0 + bottom * wy1);
            }
        }
    }
    Tensor::new(vec![n, c, height, width], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        forward(&Op::Conv2d { stride, pad }, &[x, w]).unwrap()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = Tensor::from_fn(&[1, 1, 3, 4], |i| i as f64 * 0.5 - 1.0);
        let k = t(&[1, 1, 1, 1], &[1.0]);
        assert_eq!(conv(&x, &k, 1, 0), x);
    }

    #[test]
    fn ones_field_gives_nines() {
        let x = Tensor::<f64>::ones(&[1, 1, 4, 4]);
        let k = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let y = conv(&x, &k, 1, 0);
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn strided_padded_conv_shape() {
        let x = Tensor::<f64>::ones(&[2, 3, 7, 5]);
        let k = Tensor::<f64>::ones(&[4, 3, 3, 3]);
        let y = conv(&x, &k, 2, 1);
        assert_eq!(y.shape(), &[2, 4, 4, 3]);
        // interior output sees a full 3x3x3 window
        assert_eq!(y.data()[3 * 4 + 3 + 1], 27.0);
        // corner sees a 2x2x3 window
        assert_eq!(y.data()[0], 12.0);
    }

    #[test]
    fn shape_error_names_primitive() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 2]);
        let err = forward(&Op::Add, &[&a, &b]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
        assert!(forward(&Op::MatMul, &[&a, &a]).is_err());
    }

    #[test]
    fn non_finite_output_is_fault() {
        let a = t(&[2], &[1e308, 1e308]);
        let err = forward(&Op::Scale { factor: 10.0 }, &[&a]).unwrap_err();
        assert!(matches!(err, Error::NumericFault { op: "scale" }));
    }

    #[test]
    fn maxpool_ties_route_to_first() {
        let x = t(&[1, 1, 2, 2], &[3.0, 3.0, 3.0, 1.0]);
        let op = Op::MaxPool2d { kernel: 2, stride: 2 };
        let y = forward(&op, &[&x]).unwrap();
        assert_eq!(y.data(), &[3.0]);
        let g = backward(&op, &[&x], &y, &t(&[1, 1, 1, 1], &[1.0]));
        assert_eq!(g[0].as_ref().unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_and_split_channels() {
        let a = Tensor::from_fn(&[1, 2, 1, 2], |i| i as f64);
        let b = Tensor::from_fn(&[1, 1, 1, 2], |i| 10.0 + i as f64);
        let op = Op::Concat { axis: 1 };
        let y = forward(&op, &[&a, &b]).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 2.0, 3.0, 10.0, 11.0]);
        let g = Tensor::from_fn(&[1, 3, 1, 2], |i| i as f64);
        let gs = backward(&op, &[&a, &b], &y, &g);
        assert_eq!(gs[0].as_ref().unwrap().data(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(gs[1].as_ref().unwrap().data(), &[4.0, 5.0]);
    }

    #[test]
    fn bilinear_same_size_is_identity() {
        let x = Tensor::from_fn(&[1, 1, 3, 5], |i| (i * i) as f64);
        let y = forward(&Op::BilinearResize { height: 3, width: 5 }, &[&x]).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn bce_matches_closed_form() {
        let z = t(&[2], &[0.0, 0.0]);
        let y = t(&[2], &[1.0, 0.0]);
        let l = forward(&Op::BceWithLogits, &[&z, &y]).unwrap();
        assert!((l.item() - std::f64::consts::LN_2).abs() < 1e-12);
    }
}

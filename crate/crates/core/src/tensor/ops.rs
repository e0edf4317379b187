use super::graph::{Graph, Op, Var};
use super::scalar::{matmul, Scalar};
use super::{Shape, Tensor};
use crate::error::{Error, Result};

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let hw = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    let line = &mut dst[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        *v = if iw < 0 || iw >= w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let hw = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            let d = &mut plane[ih as usize * w + iw as usize];
                            *d = *d + src[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Output extent of a convolution, rejecting configurations whose stride
/// does not tile the padded input exactly.
pub fn conv_output_size(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be positive"));
    }
    let padded = size + 2 * pad;
    if padded < k {
        return Err(Error::shape("conv2d", format!("kernel {k} exceeds padded input {padded}")));
    }
    if (padded - k) % stride != 0 {
        return Err(Error::shape(
            "conv2d",
            format!("stride {stride} does not tile input {size} with kernel {k}, padding {pad}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

struct Conv2d<T> {
    stride: usize,
    pad: usize,
    cols: Option<Vec<T>>,
}

impl<T: Scalar> Op<T> for Conv2d<T> {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (xs, ws, os) = (inputs[0].shape(), inputs[1].shape(), output.shape());
        let (cout, ckk, hw) = (ws.n, ws.c * ws.h * ws.w, os.plane());
        let mut dx = needs[0].then(|| vec![T::zero(); xs.numel()]);
        let mut dw = needs[1].then(|| vec![T::zero(); ws.numel()]);
        let mut dcols = vec![T::zero(); ckk * hw];
        for n in 0..xs.n {
            let g = &grad[n * cout * hw..(n + 1) * cout * hw];
            if let (Some(dw), Some(cols)) = (dw.as_mut(), self.cols.as_ref()) {
                let c = &cols[n * ckk * hw..(n + 1) * ckk * hw];
                matmul(g, false, c, true, dw, cout, hw, ckk, true);
            }
            if let Some(dx) = dx.as_mut() {
                matmul(inputs[1].data(), true, g, false, &mut dcols, ckk, cout, hw, false);
                let len = xs.row_len();
                col2im(
                    &dcols,
                    xs.c,
                    xs.h,
                    xs.w,
                    ws.h,
                    self.stride,
                    self.pad,
                    os.h,
                    os.w,
                    &mut dx[n * len..(n + 1) * len],
                );
            }
        }
        let mut out = vec![dx, dw];
        if inputs.len() == 3 {
            out.push(needs[2].then(|| {
                let mut db = vec![T::zero(); cout];
                for n in 0..xs.n {
                    for (co, d) in db.iter_mut().enumerate() {
                        let base = (n * cout + co) * hw;
                        *d = grad[base..base + hw].iter().fold(*d, |a, &b| a + b);
                    }
                }
                db
            }));
        }
        out
    }
}

struct GlobalAvgPool;

impl<T: Scalar> Op<T> for GlobalAvgPool {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let s = inputs[0].shape();
        let hw = s.plane();
        let inv = T::one() / T::of(hw as f64);
        let mut dx = Vec::with_capacity(s.numel());
        for &g in grad {
            dx.extend(std::iter::repeat_n(g * inv, hw));
        }
        vec![Some(dx)]
    }
}

struct Linear;

impl<T: Scalar> Op<T> for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (n, din, dout) = (x.shape().n, x.shape().row_len(), w.shape().n);
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); n * din];
            matmul(grad, false, w.data(), false, &mut dx, n, dout, din, false);
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![T::zero(); dout * din];
            matmul(grad, true, x.data(), false, &mut dw, dout, n, din, false);
            dw
        });
        let db = needs[2].then(|| {
            let mut db = vec![T::zero(); dout];
            for row in grad.chunks(dout) {
                db.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
            }
            db
        });
        vec![dx, dw, db]
    }
}

struct Relu;

impl<T: Scalar> Op<T> for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let dx = inputs[0]
            .data()
            .iter()
            .zip(grad)
            .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
            .collect();
        vec![Some(dx)]
    }
}

struct Sigmoid;

impl<T: Scalar> Op<T> for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let dx = out
            .data()
            .iter()
            .zip(grad)
            .map(|(&y, &g)| g * y * (T::one() - y))
            .collect();
        vec![Some(dx)]
    }
}

struct ConcatChannels;

impl<T: Scalar> Op<T> for ConcatChannels {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(&self, inputs: &[&Tensor<T>], out: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let s = out.shape();
        let hw = s.plane();
        let mut offset = 0;
        let mut grads = Vec::with_capacity(inputs.len());
        for (inp, &need) in inputs.iter().zip(needs) {
            let ci = inp.shape().c;
            grads.push(need.then(|| {
                let mut d = Vec::with_capacity(inp.numel());
                for n in 0..s.n {
                    let start = (n * s.c + offset) * hw;
                    d.extend_from_slice(&grad[start..start + ci * hw]);
                }
                d
            }));
            offset += ci;
        }
        grads
    }
}

struct SliceChannels {
    start: usize,
}

impl<T: Scalar> Op<T> for SliceChannels {
    fn name(&self) -> &'static str {
        "slice_channels"
    }

    fn backward(&self, inputs: &[&Tensor<T>], out: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let s = inputs[0].shape();
        let width = out.shape().c * s.plane();
        let mut dx = vec![T::zero(); s.numel()];
        for n in 0..s.n {
            let dst = (n * s.c + self.start) * s.plane();
            dx[dst..dst + width].copy_from_slice(&grad[n * width..(n + 1) * width]);
        }
        vec![Some(dx)]
    }
}

struct Add;

impl<T: Scalar> Op<T> for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        needs.iter().map(|&n| n.then(|| grad.to_vec())).collect()
    }
}

struct Mul;

impl<T: Scalar> Op<T> for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let scaled = |other: &Tensor<T>| -> Vec<T> {
            other.data().iter().zip(grad).map(|(&o, &g)| o * g).collect()
        };
        vec![
            needs[0].then(|| scaled(inputs[1])),
            needs[1].then(|| scaled(inputs[0])),
        ]
    }
}

struct Scale<T> {
    factor: T,
}

impl<T: Scalar> Op<T> for Scale<T> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.iter().map(|&g| g * self.factor).collect())]
    }
}

struct Reduce {
    mean: bool,
}

impl<T: Scalar> Op<T> for Reduce {
    fn name(&self) -> &'static str {
        if self.mean {
            "mean"
        } else {
            "sum"
        }
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let numel = inputs[0].numel();
        let g = if self.mean {
            grad[0] / T::of(numel as f64)
        } else {
            grad[0]
        };
        vec![Some(vec![g; numel])]
    }
}

struct SoftmaxRows;

impl<T: Scalar> Op<T> for SoftmaxRows {
    fn name(&self) -> &'static str {
        "softmax_rows"
    }

    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let len = out.shape().row_len();
        let mut dx = Vec::with_capacity(out.numel());
        for (y, g) in out.data().chunks(len).zip(grad.chunks(len)) {
            let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
            dx.extend(y.iter().zip(g).map(|(&yi, &gi)| yi * (gi - dot)));
        }
        vec![Some(dx)]
    }
}

struct L2NormalizeRows<T> {
    norms: Vec<T>,
    eps: T,
}

impl<T: Scalar> Op<T> for L2NormalizeRows<T> {
    fn name(&self) -> &'static str {
        "l2_normalize_rows"
    }

    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let len = out.shape().row_len();
        let mut dx = Vec::with_capacity(out.numel());
        for ((y, g), &norm) in out.data().chunks(len).zip(grad.chunks(len)).zip(&self.norms) {
            if norm > self.eps {
                let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                dx.extend(y.iter().zip(g).map(|(&yi, &gi)| (gi - yi * dot) / norm));
            } else {
                dx.extend(g.iter().map(|&gi| gi / self.eps));
            }
        }
        vec![Some(dx)]
    }
}

struct Reshape;

impl<T: Scalar> Op<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.to_vec())]
    }
}

impl<T: Scalar> Graph<T> {
    /// Cross-correlation of `input` (N, Cin, H, W) with `weight`
    /// (Cout, Cin, k, k).
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(input), self.shape(weight));
        xs.require_nonempty("conv2d")?;
        ws.require_nonempty("conv2d")?;
        if ws.h != ws.w {
            return Err(Error::shape("conv2d", format!("non-square kernel {ws}")));
        }
        if ws.c != xs.c {
            return Err(Error::shape("conv2d", format!("input {xs} vs weight {ws}")));
        }
        if let Some(b) = bias {
            if self.shape(b).numel() != ws.n {
                return Err(Error::shape("conv2d", format!("bias length {} for {} filters", self.shape(b).numel(), ws.n)));
            }
        }
        let k = ws.h;
        let ho = conv_output_size(xs.h, k, stride, pad)?;
        let wo = conv_output_size(xs.w, k, stride, pad)?;
        let (cout, ckk, hw) = (ws.n, ws.c * k * k, ho * wo);
        let keep_cols = self.requires_grad(weight);

        let x = self.value(input).data();
        let w = self.value(weight).data();
        let mut out = vec![T::zero(); xs.n * cout * hw];
        let mut all_cols = keep_cols.then(|| vec![T::zero(); xs.n * ckk * hw]);
        let mut scratch = vec![T::zero(); ckk * hw];
        for n in 0..xs.n {
            let cols = match all_cols.as_mut() {
                Some(all) => &mut all[n * ckk * hw..(n + 1) * ckk * hw],
                None => &mut scratch[..],
            };
            im2col(&x[n * xs.row_len()..(n + 1) * xs.row_len()], xs.c, xs.h, xs.w, k, stride, pad, ho, wo, cols);
            matmul(w, false, cols, false, &mut out[n * cout * hw..(n + 1) * cout * hw], cout, ckk, hw, false);
        }
        if let Some(b) = bias {
            let b = self.value(b).data();
            for plane in out.chunks_mut(hw).enumerate() {
                let bv = b[plane.0 % cout];
                plane.1.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
        let output = Tensor::from_vec(Shape::new(xs.n, cout, ho, wo), out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.record(Conv2d { stride, pad, cols: all_cols }, &inputs, output)
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        if s.plane() == 0 || s.n * s.c == 0 {
            return Err(Error::shape("global_avg_pool", format!("empty spatial plane {s}")));
        }
        let inv = T::one() / T::of(s.plane() as f64);
        let data: Vec<T> = self
            .value(input)
            .data()
            .chunks(s.plane())
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data)?;
        self.record(GlobalAvgPool, &[input], out)
    }

    /// Per-sample affine map: input rows (length `d_in`) times `weight`
    /// (d_out, d_in) transposed, plus `bias`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(input), self.shape(weight));
        xs.require_nonempty("linear")?;
        let (n, din, dout) = (xs.n, xs.row_len(), ws.n);
        if ws.row_len() != din {
            return Err(Error::shape("linear", format!("input rows of {din} vs weight {ws}")));
        }
        if self.shape(bias).numel() != dout {
            return Err(Error::shape("linear", format!("bias of {} for {dout} outputs", self.shape(bias).numel())));
        }
        let mut out = vec![T::zero(); n * dout];
        matmul(self.value(input).data(), false, self.value(weight).data(), true, &mut out, n, din, dout, false);
        let b = self.value(bias).data();
        for row in out.chunks_mut(dout) {
            row.iter_mut().zip(b).for_each(|(v, &bv)| *v = *v + bv);
        }
        let output = Tensor::from_vec(Shape::matrix(n, dout), out)?;
        self.record(Linear, &[input, weight, bias], output)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let out = Tensor::from_vec(x.shape(), x.data().iter().map(|&v| v.max(T::zero())).collect())?;
        self.record(Relu, &[input], out)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| T::one() / (T::one() + (-v).exp())).collect();
        let out = Tensor::from_vec(x.shape(), data)?;
        self.record(Sigmoid, &[input], out)
    }

    /// Concatenates along channels; `first` occupies the lower indices.
    pub fn concat_channels(&mut self, first: Var, second: Var) -> Result<Var> {
        let (a, b) = (self.shape(first), self.shape(second));
        if (a.n, a.h, a.w) != (b.n, b.h, b.w) {
            return Err(Error::shape("concat_channels", format!("{a} vs {b}")));
        }
        let hw = a.plane();
        let (xa, xb) = (self.value(first).data(), self.value(second).data());
        let mut data = Vec::with_capacity(a.numel() + b.numel());
        for n in 0..a.n {
            data.extend_from_slice(&xa[n * a.c * hw..(n + 1) * a.c * hw]);
            data.extend_from_slice(&xb[n * b.c * hw..(n + 1) * b.c * hw]);
        }
        let out = Tensor::from_vec(Shape::new(a.n, a.c + b.c, a.h, a.w), data)?;
        self.record(ConcatChannels, &[first, second], out)
    }

    /// Channels `[start, end)` of `input`.
    pub fn slice_channels(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(input);
        if start >= end || end > s.c {
            return Err(Error::shape("slice_channels", format!("[{start}, {end}) of {s}")));
        }
        let hw = s.plane();
        let x = self.value(input).data();
        let mut data = Vec::with_capacity(s.n * (end - start) * hw);
        for n in 0..s.n {
            data.extend_from_slice(&x[(n * s.c + start) * hw..(n * s.c + end) * hw]);
        }
        let out = Tensor::from_vec(Shape::new(s.n, end - start, s.h, s.w), data)?;
        self.record(SliceChannels { start }, &[input], out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y).and_then(|t| self.record(Add, &[a, b], t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y).and_then(|t| self.record(Mul, &[a, b], t))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let x = self.value(input);
        let out = Tensor::from_vec(x.shape(), x.data().iter().map(|&v| v * factor).collect())?;
        self.record(Scale { factor }, &[input], out)
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total = self.value(input).data().iter().copied().sum();
        self.record(Reduce { mean: false }, &[input], Tensor::scalar(total))
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let m = x.data().iter().copied().sum::<T>() / T::of(x.numel() as f64);
        self.record(Reduce { mean: true }, &[input], Tensor::scalar(m))
    }

    /// Softmax over each sample's flattened row.
    pub fn softmax_rows(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let s = x.shape();
        s.require_nonempty("softmax_rows")?;
        let mut data = Vec::with_capacity(s.numel());
        for row in x.data().chunks(s.row_len()) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = data.len();
            data.extend(row.iter().map(|&v| (v - max).exp()));
            let z: T = data[start..].iter().copied().sum();
            data[start..].iter_mut().for_each(|v| *v = *v / z);
        }
        let out = Tensor::from_vec(s, data)?;
        self.record(SoftmaxRows, &[input], out)
    }

    /// Scales each flattened row to unit L2 norm.
    ///
    /// With `eps` set, rows are divided by `max(norm, eps)`; without it a
    /// zero-norm row is an error.
    pub fn l2_normalize_rows(&mut self, input: Var, eps: Option<T>) -> Result<Var> {
        let x = self.value(input);
        let s = x.shape();
        s.require_nonempty("l2_normalize_rows")?;
        let mut norms = Vec::with_capacity(s.n);
        let mut data = Vec::with_capacity(s.numel());
        for row in x.data().chunks(s.row_len()) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let denom = match eps {
                Some(e) => norm.max(e),
                None if norm > T::zero() => norm,
                None => return Err(Error::invalid("l2_normalize_rows: zero-norm row")),
            };
            norms.push(norm);
            data.extend(row.iter().map(|&v| v / denom));
        }
        let out = Tensor::from_vec(s, data)?;
        let op = L2NormalizeRows {
            norms,
            eps: eps.unwrap_or_else(T::zero),
        };
        self.record(op, &[input], out)
    }

    pub fn reshape(&mut self, input: Var, shape: Shape) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        self.record(Reshape, &[input], out)
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(op, format!("{} vs {}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_vec(x.shape(), data)
    }
}

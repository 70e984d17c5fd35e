//! Reverse-mode differentiation over a linear tape.
//!
//! Forward operations append nodes holding their output value; `backward`
//! walks the tape in reverse and returns gradients for leaf and parameter
//! nodes.

use super::scalar::{gemm, MatRef};
use super::{NnError, ParameterSet, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(String),
    Dense { x: Var, w: Var, b: Var },
    Conv1d { x: Var, w: Var, b: Var, stride: usize, padding: usize },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    GlobalAvgPool(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    RowSqDist(Var, Var),
    Mean(Var),
    SoftmaxCe { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    SquaredError { x: Var, target: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar output with respect to leaf and parameter nodes.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

fn shape_err(msg: impl Into<String>) -> NnError {
    NnError::Shape(msg.into())
}

fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if padded < kernel || stride == 0 {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

fn im2col<T: Scalar>(
    x: &[T],
    channels: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_len: usize,
    col: &mut [T],
) {
    for c in 0..channels {
        let xs = &x[c * len..(c + 1) * len];
        for k in 0..kernel {
            let row = &mut col[(c * kernel + k) * out_len..(c * kernel + k + 1) * out_len];
            for (t, slot) in row.iter_mut().enumerate() {
                let pos = (t * stride + k) as isize - padding as isize;
                *slot = if pos >= 0 && (pos as usize) < len { xs[pos as usize] } else { T::zero() };
            }
        }
    }
}

fn col2im_add<T: Scalar>(
    col: &[T],
    channels: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_len: usize,
    dx: &mut [T],
) {
    for c in 0..channels {
        let dxs = &mut dx[c * len..(c + 1) * len];
        for k in 0..kernel {
            let row = &col[(c * kernel + k) * out_len..(c * kernel + k + 1) * out_len];
            for (t, v) in row.iter().enumerate() {
                let pos = (t * stride + k) as isize - padding as isize;
                if pos >= 0 && (pos as usize) < len {
                    dxs[pos as usize] += *v;
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, var: Var) -> T {
        self.nodes[var.0].value.data()[0]
    }

    /// Which ReLU inputs are positive, over every ReLU node in recording
    /// order. Two evaluations with equal patterns lie on the same smooth piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.nodes[x.0].value.data().iter().map(|&a| a > T::zero()))
            .collect()
    }

    /// Constant input; receives a gradient but is not a parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Bind a named parameter from `params`.
    pub fn param(&mut self, params: &ParameterSet<T>, name: &str) -> Result<Var, NnError> {
        let value = params.value(name)?.clone();
        Ok(self.push(value, Op::Param(name.to_string())))
    }

    /// `y = x·wᵀ + b`, `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.len() != 2 || ws.len() != 2 || bs != [ws[0]] || xs[1] != ws[1] {
            return Err(shape_err(format!("dense: x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (n, inp, out) = (xs[0], xs[1], ws[0]);
        let mut y = vec![T::zero(); n * out];
        for row in y.chunks_mut(out) {
            row.copy_from_slice(self.value(b).data());
        }
        gemm(
            MatRef::row_major(self.value(x).data(), n, inp),
            MatRef::row_major(self.value(w).data(), out, inp).t(),
            T::one(),
            &mut y,
        );
        Ok(self.push(Tensor::new(vec![n, out], y)?, Op::Dense { x, w, b }))
    }

    /// 1-D convolution with zero padding, `x: [n, c_in, len]`,
    /// `w: [c_out, c_in, kernel]`, `b: [c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var, NnError> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.len() != 3 || ws.len() != 3 || bs != [ws[0]] || xs[1] != ws[1] {
            return Err(shape_err(format!("conv1d: x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (n, cin, len) = (xs[0], xs[1], xs[2]);
        let (cout, kernel) = (ws[0], ws[2]);
        let out_len = conv_out_len(len, kernel, stride, padding)
            .ok_or_else(|| shape_err(format!("conv1d: input length {len} too short for kernel {kernel}")))?;
        let mut y = vec![T::zero(); n * cout * out_len];
        let mut col = vec![T::zero(); cin * kernel * out_len];
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        for s in 0..n {
            im2col(&xd[s * cin * len..(s + 1) * cin * len], cin, len, kernel, stride, padding, out_len, &mut col);
            let ys = &mut y[s * cout * out_len..(s + 1) * cout * out_len];
            for (o, row) in ys.chunks_mut(out_len).enumerate() {
                row.iter_mut().for_each(|v| *v = bd[o]);
            }
            gemm(
                MatRef::row_major(wd, cout, cin * kernel),
                MatRef::row_major(&col, cin * kernel, out_len),
                T::one(),
                ys,
            );
        }
        Ok(self.push(Tensor::new(vec![n, cout, out_len], y)?, Op::Conv1d { x, w, b, stride, padding }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| if a > T::zero() { a } else { T::zero() }).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Relu(x))
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), NnError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary_same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x + *y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary_same_shape(a, b, "sub")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x - *y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| *a * factor).collect()).expect("same shape");
        self.push(t, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| *a + c).collect()).expect("same shape");
        self.push(t, Op::AddScalar(x))
    }

    /// `[n, c, len] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, NnError> {
        let s = self.value(x).shape();
        if s.len() != 3 || s[2] == 0 {
            return Err(shape_err(format!("global_avg_pool: {s:?}")));
        }
        let (n, c, len) = (s[0], s[1], s[2]);
        let inv = T::of(1.0 / len as f64);
        let data = self
            .value(x)
            .data()
            .chunks(len)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(self.push(Tensor::new(vec![n, c], data)?, Op::GlobalAvgPool(x)))
    }

    /// Concatenate `[n, d_i]` blocks along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let n = parts.first().map(|p| self.value(*p).shape()[0]).ok_or_else(|| shape_err("concat_cols: empty"))?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.value(*p).shape();
            if s.len() != 2 || s[0] != n {
                return Err(shape_err(format!("concat_cols: part {s:?} with {n} rows")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for (p, w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(Tensor::new(vec![n, total], data)?, Op::ConcatCols(parts.to_vec())))
    }

    /// Stack `[n_i, d]` blocks along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let d = parts.first().map(|p| self.value(*p).shape()[1..].to_vec()).ok_or_else(|| shape_err("concat_rows: empty"))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let s = self.value(*p).shape();
            if s[1..] != d[..] {
                return Err(shape_err(format!("concat_rows: part {s:?} vs trailing {d:?}")));
            }
            rows += s[0];
            data.extend_from_slice(self.value(*p).data());
        }
        let mut shape = vec![rows];
        shape.extend(d);
        Ok(self.push(Tensor::new(shape, data)?, Op::ConcatRows(parts.to_vec())))
    }

    /// Select rows of `[n, ...]` by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var, NnError> {
        let s = self.value(x).shape().to_vec();
        let width: usize = s[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= s[0] {
                return Err(shape_err(format!("gather_rows: index {i} out of {} rows", s[0])));
            }
            data.extend_from_slice(&self.value(x).data()[i * width..(i + 1) * width]);
        }
        let mut shape = s;
        shape[0] = indices.len();
        Ok(self.push(Tensor::new(shape, data)?, Op::GatherRows(x, indices.to_vec())))
    }

    /// Row-wise squared euclidean distance, `[n, d] x [n, d] -> [n]`.
    pub fn row_sq_dist(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary_same_shape(a, b, "row_sq_dist")?;
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(shape_err(format!("row_sq_dist: {s:?}")));
        }
        let (n, d) = (s[0], s[1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let data = (0..n)
            .map(|r| {
                ad[r * d..(r + 1) * d]
                    .iter()
                    .zip(&bd[r * d..(r + 1) * d])
                    .map(|(x, y)| (*x - *y) * (*x - *y))
                    .sum()
            })
            .collect();
        Ok(self.push(Tensor::new(vec![n], data)?, Op::RowSqDist(a, b)))
    }

    /// Mean of all elements.
    pub fn mean(&mut self, x: Var) -> Result<Var, NnError> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(shape_err("mean of empty tensor"));
        }
        let m = v.data().iter().copied().sum::<T>() / T::of(v.len() as f64);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x)))
    }

    /// Sum of one-element nodes.
    pub fn sum_scalars(&mut self, terms: &[Var]) -> Result<Var, NnError> {
        let mut it = terms.iter();
        let mut acc = *it.next().ok_or_else(|| shape_err("sum of no terms"))?;
        for t in it {
            acc = self.add(acc, *t)?;
        }
        Ok(acc)
    }

    /// Mean softmax cross-entropy of `[n, classes]` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NnError> {
        let s = self.value(logits).shape();
        if s.len() != 2 || s[0] != targets.len() || s[0] == 0 {
            return Err(shape_err(format!("cross-entropy: logits {s:?}, {} targets", targets.len())));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(shape_err(format!("cross-entropy: target {t} >= {c} classes")));
        }
        let mut probs = vec![T::zero(); n * c];
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let z = &self.value(logits).data()[r * c..(r + 1) * c];
            let max = z.iter().copied().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (p, v) in probs[r * c..(r + 1) * c].iter_mut().zip(z) {
                *p = (*v - max).exp();
                denom += *p;
            }
            probs[r * c..(r + 1) * c].iter_mut().for_each(|p| *p = *p / denom);
            total += denom.ln() + max - z[t];
        }
        let loss = total / T::of(n as f64);
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCe { logits, targets: targets.to_vec(), probs }))
    }

    /// Sum of squared residuals divided by the leading (batch) dimension.
    pub fn squared_error(&mut self, x: Var, target: &Tensor<T>) -> Result<Var, NnError> {
        let v = self.value(x);
        if v.shape() != target.shape() {
            return Err(shape_err(format!("squared error: {:?} vs target {:?}", v.shape(), target.shape())));
        }
        let n = T::of(v.shape()[0].max(1) as f64);
        let total: T = v.data().iter().zip(target.data()).map(|(a, t)| (*a - *t) * (*a - *t)).sum();
        let loss = total / n;
        Ok(self.push(Tensor::scalar(loss), Op::SquaredError { x, target: target.data().to_vec() }))
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>, NnError> {
        if self.value(output).len() != 1 {
            return Err(shape_err(format!("backward from non-scalar {:?}", self.value(output).shape())));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut kept: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one()]);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    kept[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::Dense { x, w, b } => {
                    let xs = self.value(*x).shape();
                    let (n, inp) = (xs[0], xs[1]);
                    let out = self.value(*w).shape()[0];
                    let gx = slot(&mut grads, *x, n * inp);
                    gemm(
                        MatRef::row_major(&g, n, out),
                        MatRef::row_major(self.value(*w).data(), out, inp),
                        T::one(),
                        gx,
                    );
                    let gw = slot(&mut grads, *w, out * inp);
                    gemm(
                        MatRef::row_major(&g, n, out).t(),
                        MatRef::row_major(self.value(*x).data(), n, inp),
                        T::one(),
                        gw,
                    );
                    let gb = slot(&mut grads, *b, out);
                    for row in g.chunks(out) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += *v;
                        }
                    }
                }
                Op::Conv1d { x, w, b, stride, padding } => {
                    let xs = self.value(*x).shape();
                    let (n, cin, len) = (xs[0], xs[1], xs[2]);
                    let ws = self.value(*w).shape();
                    let (cout, kernel) = (ws[0], ws[2]);
                    let out_len = node.value.shape()[2];
                    let ck = cin * kernel;
                    let xd = self.value(*x).data();
                    let wd = self.value(*w).data();
                    let mut col = vec![T::zero(); ck * out_len];
                    let mut dcol = vec![T::zero(); ck * out_len];
                    {
                        let gb = slot(&mut grads, *b, cout);
                        for s in 0..n {
                            for (o, row) in g[s * cout * out_len..(s + 1) * cout * out_len].chunks(out_len).enumerate() {
                                gb[o] += row.iter().copied().sum::<T>();
                            }
                        }
                    }
                    for s in 0..n {
                        let gs = &g[s * cout * out_len..(s + 1) * cout * out_len];
                        im2col(&xd[s * cin * len..(s + 1) * cin * len], cin, len, kernel, *stride, *padding, out_len, &mut col);
                        let gw = slot(&mut grads, *w, cout * ck);
                        gemm(
                            MatRef::row_major(gs, cout, out_len),
                            MatRef::row_major(&col, ck, out_len).t(),
                            T::one(),
                            gw,
                        );
                        gemm(
                            MatRef::row_major(wd, cout, ck).t(),
                            MatRef::row_major(gs, cout, out_len),
                            T::zero(),
                            &mut dcol,
                        );
                        let gx = slot(&mut grads, *x, n * cin * len);
                        col2im_add(&dcol, cin, len, kernel, *stride, *padding, out_len, &mut gx[s * cin * len..(s + 1) * cin * len]);
                    }
                }
                Op::Relu(x) => {
                    let out = node.value.data();
                    let gx = slot(&mut grads, *x, out.len());
                    for ((acc, gv), o) in gx.iter_mut().zip(&g).zip(out) {
                        if *o > T::zero() {
                            *acc += *gv;
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_slice(slot(&mut grads, *a, g.len()), &g, T::one());
                    add_slice(slot(&mut grads, *b, g.len()), &g, T::one());
                }
                Op::Sub(a, b) => {
                    add_slice(slot(&mut grads, *a, g.len()), &g, T::one());
                    add_slice(slot(&mut grads, *b, g.len()), &g, -T::one());
                }
                Op::Scale(x, f) => add_slice(slot(&mut grads, *x, g.len()), &g, *f),
                Op::AddScalar(x) => add_slice(slot(&mut grads, *x, g.len()), &g, T::one()),
                Op::GlobalAvgPool(x) => {
                    let len = self.value(*x).shape()[2];
                    let inv = T::of(1.0 / len as f64);
                    let gx = slot(&mut grads, *x, g.len() * len);
                    for (chunk, gv) in gx.chunks_mut(len).zip(&g) {
                        chunk.iter_mut().for_each(|v| *v += *gv * inv);
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.shape()[1];
                    let n = node.value.shape()[0];
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).shape()[1];
                        let gp = slot(&mut grads, *p, n * w);
                        for r in 0..n {
                            add_slice(&mut gp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w], T::one());
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.value(*p).len();
                        add_slice(slot(&mut grads, *p, len), &g[offset..offset + len], T::one());
                        offset += len;
                    }
                }
                Op::GatherRows(x, idx) => {
                    let xv = self.value(*x);
                    let width = xv.len() / xv.shape()[0].max(1);
                    let gx = slot(&mut grads, *x, xv.len());
                    for (r, &i) in idx.iter().enumerate() {
                        add_slice(&mut gx[i * width..(i + 1) * width], &g[r * width..(r + 1) * width], T::one());
                    }
                }
                Op::RowSqDist(a, b) => {
                    let d = self.value(*a).shape()[1];
                    let n = g.len();
                    let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                    let two = T::of(2.0);
                    let diff: Vec<T> = (0..n * d).map(|k| two * g[k / d] * (ad[k] - bd[k])).collect();
                    add_slice(slot(&mut grads, *a, n * d), &diff, T::one());
                    add_slice(slot(&mut grads, *b, n * d), &diff, -T::one());
                }
                Op::Mean(x) => {
                    let len = self.value(*x).len();
                    let share = g[0] / T::of(len as f64);
                    slot(&mut grads, *x, len).iter_mut().for_each(|v| *v += share);
                }
                Op::SoftmaxCe { logits, targets, probs } => {
                    let c = self.value(*logits).shape()[1];
                    let n = targets.len();
                    let scale = g[0] / T::of(n as f64);
                    let gl = slot(&mut grads, *logits, n * c);
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
                Op::SquaredError { x, target } => {
                    let xv = self.value(*x);
                    let n = T::of(xv.shape()[0].max(1) as f64);
                    let scale = T::of(2.0) * g[0] / n;
                    let gx = slot(&mut grads, *x, xv.len());
                    for ((acc, a), t) in gx.iter_mut().zip(xv.data()).zip(target) {
                        *acc += scale * (*a - *t);
                    }
                }
            }
        }
        Ok(Gradients { grads: kept })
    }

    /// Add gradients of parameter nodes into `params`. Parameter nodes whose
    /// name is not in `params` are ignored, so one tape may feed several sets.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, params: &mut ParameterSet<T>) -> Result<(), NnError> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                if let Some(g) = &grads.grads[i] {
                    if params.contains(name) {
                        params.accumulate_grad(name, g)?;
                    }
                }
            }
        }
        Ok(())
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], var: Var, len: usize) -> &mut [T] {
    grads[var.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_slice<T: Scalar>(acc: &mut [T], src: &[T], factor: T) {
    for (a, s) in acc.iter_mut().zip(src) {
        *a += *s * factor;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut tape = Tape::<f64>::new();
        let xdata: Vec<f64> = (0..2 * 2 * 7).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let wdata: Vec<f64> = (0..3 * 2 * 3).map(|i| ((i * 5) % 7) as f64 * 0.1 - 0.3).collect();
        let x = tape.leaf(t(&[2, 2, 7], &xdata));
        let w = tape.leaf(t(&[3, 2, 3], &wdata));
        let b = tape.leaf(t(&[3], &[0.5, -0.5, 0.0]));
        let y = tape.conv1d(x, w, b, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 3, 4]);
        for s in 0..2 {
            for o in 0..3 {
                for j in 0..4 {
                    let mut acc = [0.5, -0.5, 0.0][o];
                    for c in 0..2 {
                        for k in 0..3 {
                            let pos = (j * 2 + k) as isize - 1;
                            if (0..7).contains(&pos) {
                                acc += wdata[o * 6 + c * 3 + k] * xdata[s * 14 + c * 7 + pos as usize];
                            }
                        }
                    }
                    let got = tape.value(y).data()[s * 12 + o * 4 + j];
                    assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn cross_entropy_of_zero_logits_is_ln_c() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::zeros(&[3, 5]));
        let l = tape.softmax_cross_entropy(z, &[0, 4, 2]).unwrap();
        assert!((tape.scalar(l) - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gather_and_concat_route_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let g = tape.gather_rows(x, &[2, 0, 2]).unwrap();
        let c = tape.concat_rows(&[g, x]).unwrap();
        let m = tape.mean(c).unwrap();
        let grads = tape.backward(m).unwrap();
        let gx = grads.get(x).unwrap().data();
        let unit = 1.0 / 12.0;
        assert_eq!(gx, &[2. * unit, 2. * unit, unit, unit, 3. * unit, 3. * unit]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.add(a, b), Err(NnError::Shape(_))));
    }
}

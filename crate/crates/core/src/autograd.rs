//! A small tape-based reverse-mode differentiation engine over dense,
//! row-major tensors.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are either
//! constants or trainable inputs; every other node records the primitive
//! that produced it, and [`Graph::backward`] walks the tape in reverse.
//! The engine is generic over [`Scalar`] so the same model code runs in
//! `f32` for training and `f64` for gradient verification.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Element type of the engine.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + Sum + AddAssign + 'static
{
    /// `c = alpha * a * b + beta * c` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                (rsa, csa): (isize, isize),
                b: &[Self],
                (rsb, csb): (isize, isize),
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the length checks above bound every strided access
                // for the row-major and transposed layouts used in this module.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// A shape-tagged dense array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64().unwrap()).collect()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// rhs broadcast over all leading dims of lhs
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Transpose(Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    MaxPool { x: Var, argmax: Vec<usize> },
    MeanPool { x: Var, axis: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { x: Var, idx: Vec<usize> },
    Sum(Var),
    Chamfer { a: Var, b: Var, nn_ab: Vec<usize>, nn_ba: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The tape.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)` element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Gradient of the last `backward` loss; `None` if unreachable or
    /// not tracked.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            &self.value(a).data,
            (k as isize, 1),
            &self.value(b).data,
            (n as isize, 1),
            T::zero(),
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), rg))
    }

    /// Elementwise sum. If `b` has as many elements as the last dimension of
    /// `a` (and shapes differ), it is broadcast across the leading dims.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let rg = self.rg(a) || self.rg(b);
        if sa == sb {
            let data = self
                .value(a)
                .data
                .iter()
                .zip(&self.value(b).data)
                .map(|(&x, &y)| x + y)
                .collect();
            return Ok(self.push(Tensor { shape: sa, data }, Op::Add(a, b), rg));
        }
        let last = *sa.last().unwrap_or(&0);
        let nb: usize = sb.iter().product();
        if sa.is_empty() || nb != last {
            return Err(mismatch("add", &sa, &sb));
        }
        let bv = &self.value(b).data;
        let data = self
            .value(a)
            .data
            .chunks_exact(last)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x + y))
            .collect();
        Ok(self.push(Tensor { shape: sa, data }, Op::AddBroadcast(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch("mul", sa, sb));
        }
        let shape = sa.to_vec();
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&e| e * s).collect(),
        };
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, s), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -T::one());
        self.add(a, nb)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(mismatch("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(mismatch("narrow", &s, &[axis, start, len]));
        }
        let (outer, full, inner) = split_axis(&s, axis);
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::Narrow { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(mismatch("reshape", s, shape));
        }
        let data = self.value(x).data.clone();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::Reshape(x),
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(mismatch("transpose", s, &[2]));
        }
        let (r, c) = (s[0], s[1]);
        let src = &self.value(x).data;
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![c, r], data }, Op::Transpose(x), rg))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&e| f(e)).collect(),
        };
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |e| if e > T::zero() { e } else { T::zero() }, Op::Relu(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::lit(GELU_C);
        let a = T::lit(GELU_A);
        let half = T::lit(0.5);
        self.map(
            x,
            |e| half * e * (T::one() + (c * (e + a * e * e * e)).tanh()),
            Op::Gelu(x),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let last = *s.last().ok_or_else(|| mismatch("softmax", &s, &[]))?;
        let mut data = self.value(x).data.clone();
        for row in data.chunks_exact_mut(last) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for e in row.iter_mut() {
                *e = (*e - mx).exp();
                z += *e;
            }
            for e in row.iter_mut() {
                *e = *e / z;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: s, data }, Op::Softmax(x), rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| mismatch("layer_norm", &s, &[]))?;
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(mismatch("layer_norm", &s, self.shape(gamma)));
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let dt = T::from_usize(d).unwrap();
        let xv = &self.value(x).data;
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor { shape: s, data: out },
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Max over `axis`, removing it. Ties resolve to the first maximum.
    pub fn max_pool(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(mismatch("max_pool", &s, &[axis]));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let src = &self.value(x).data;
        let mut data = vec![T::zero(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * len * inner + i;
                for l in 1..len {
                    let idx = (o * len + l) * inner + i;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                data[o * inner + i] = src[best];
                argmax[o * inner + i] = best;
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::MaxPool { x, argmax }, rg))
    }

    pub fn mean_pool(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(mismatch("mean_pool", &s, &[axis]));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let src = &self.value(x).data;
        let lt = T::from_usize(len).unwrap();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        for e in data.iter_mut() {
            *e = *e / lt;
        }
        let mut shape = s;
        shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::MeanPool { x, axis }, rg))
    }

    /// Rows `idx` of `x` (first axis). Indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || idx.iter().any(|&i| i >= s[0]) {
            return Err(mismatch("gather_rows", &s, idx));
        }
        let row: usize = s[1..].iter().product();
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor { shape, data },
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// A zero tensor with `n` rows where row `idx[r]` holds row `r` of `x`.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], n: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || s[0] != idx.len() || idx.iter().any(|&i| i >= n) {
            return Err(mismatch("scatter_rows", &s, idx));
        }
        let mut seen = vec![false; n];
        for &i in idx {
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidArgument(format!("scatter_rows: duplicate index {i}")));
            }
        }
        let row: usize = s[1..].iter().product();
        let src = &self.value(x).data;
        let mut data = vec![T::zero(); n * row];
        for (r, &i) in idx.iter().enumerate() {
            data[i * row..(i + 1) * row].copy_from_slice(&src[r * row..(r + 1) * row]);
        }
        let mut shape = s;
        shape[0] = n;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor { shape, data },
            Op::ScatterRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).numel().max(1)).unwrap();
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// Chamfer distance between point sets, averaged over a leading batch
    /// axis. Shapes `[p, 3]`/`[q, 3]` or `[B, p, 3]`/`[B, q, 3]`. Per pair:
    /// mean squared distance from each point of `a` to its nearest in `b`,
    /// plus the same from `b` to `a`. Ties pick the lowest index.
    pub fn chamfer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, p, q) = match (sa.as_slice(), sb.as_slice()) {
            ([p, 3], [q, 3]) => (1, *p, *q),
            ([b1, p, 3], [b2, q, 3]) if b1 == b2 => (*b1, *p, *q),
            _ => return Err(mismatch("chamfer", &sa, &sb)),
        };
        if batch == 0 || p == 0 || q == 0 {
            return Err(Error::InvalidArgument("chamfer of an empty point set".into()));
        }
        let av = &self.value(a).data;
        let bv = &self.value(b).data;
        let mut nn_ab = vec![0; batch * p];
        let mut nn_ba = vec![0; batch * q];
        let mut total = T::zero();
        let d2 = |x: &[T], y: &[T]| {
            let (dx, dy, dz) = (x[0] - y[0], x[1] - y[1], x[2] - y[2]);
            dx * dx + dy * dy + dz * dz
        };
        for bi in 0..batch {
            let pa = &av[bi * p * 3..(bi + 1) * p * 3];
            let pb = &bv[bi * q * 3..(bi + 1) * q * 3];
            let mut s_ab = T::zero();
            for i in 0..p {
                let x = &pa[i * 3..i * 3 + 3];
                let (mut best, mut bd) = (0, T::infinity());
                for j in 0..q {
                    let d = d2(x, &pb[j * 3..j * 3 + 3]);
                    if d < bd {
                        bd = d;
                        best = j;
                    }
                }
                nn_ab[bi * p + i] = best;
                s_ab += bd;
            }
            let mut s_ba = T::zero();
            for j in 0..q {
                let y = &pb[j * 3..j * 3 + 3];
                let (mut best, mut bd) = (0, T::infinity());
                for i in 0..p {
                    let d = d2(y, &pa[i * 3..i * 3 + 3]);
                    if d < bd {
                        bd = d;
                        best = i;
                    }
                }
                nn_ba[bi * q + j] = best;
                s_ba += bd;
            }
            total += s_ab / T::from_usize(p).unwrap() + s_ba / T::from_usize(q).unwrap();
        }
        let out = total / T::from_usize(batch).unwrap();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(out), Op::Chamfer { a, b, nn_ab, nn_ba }, rg))
    }

    /// Reverse pass from a scalar `loss`. Gradients of earlier calls are
    /// discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let acc = |grads: &mut [Option<Vec<T>>], v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let av = &self.value(*a).data;
                let bv = &self.value(*b).data;
                // dA = G * B^T
                acc(grads, *a, &mut |da| {
                    T::gemm(m, n, k, g, (n as isize, 1), bv, (1, n as isize), T::one(), da)
                });
                // dB = A^T * G
                acc(grads, *b, &mut |db| {
                    T::gemm(k, m, n, av, (1, k as isize), g, (n as isize, 1), T::one(), db)
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(grads, v, &mut |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                }
            }
            Op::AddBroadcast(a, b) => {
                acc(grads, *a, &mut |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                let nb = self.value(*b).numel();
                acc(grads, *b, &mut |d| {
                    for row in g.chunks_exact(nb) {
                        d.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = &self.value(*a).data;
                let bv = &self.value(*b).data;
                acc(grads, *a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                acc(grads, *b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(x, s) => {
                acc(grads, *x, &mut |d| d.iter_mut().zip(g).for_each(|(e, &y)| *e += y * *s));
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(&node.value.shape, *axis);
                let total = node.value.shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    acc(grads, v, &mut |d| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            d[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(e, &y)| *e += y);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = split_axis(self.shape(*x), *axis);
                let len = node.value.shape[*axis];
                acc(grads, *x, &mut |d| {
                    for o in 0..outer {
                        let base = o * full * inner + start * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        d[base..base + len * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(e, &y)| *e += y);
                    }
                });
            }
            Op::Reshape(x) => {
                acc(grads, *x, &mut |d| d.iter_mut().zip(g).for_each(|(e, &y)| *e += y));
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                acc(grads, *x, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = &self.value(*x).data;
                acc(grads, *x, &mut |d| {
                    for i in 0..d.len() {
                        if xv[i] > T::zero() {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = &self.value(*x).data;
                let c = T::lit(GELU_C);
                let a = T::lit(GELU_A);
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                acc(grads, *x, &mut |d| {
                    for i in 0..d.len() {
                        let e = xv[i];
                        let t = (c * (e + a * e * e * e)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * a * e * e);
                        d[i] += g[i] * (half * (T::one() + t) + half * e * dt);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = &node.value.data;
                let last = *node.value.shape.last().unwrap();
                acc(grads, *x, &mut |d| {
                    for r in 0..y.len() / last {
                        let ys = &y[r * last..(r + 1) * last];
                        let gs = &g[r * last..(r + 1) * last];
                        let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                        for j in 0..last {
                            d[r * last + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *node.value.shape.last().unwrap();
                let gv = &self.value(*gamma).data;
                let dt = T::from_usize(d).unwrap();
                acc(grads, *x, &mut |dx| {
                    for r in 0..rstd.len() {
                        let gs = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let gy = gs[j] * gv[j];
                            m1 += gy;
                            m2 += gy * xh[j];
                        }
                        m1 = m1 / dt;
                        m2 = m2 / dt;
                        for j in 0..d {
                            dx[r * d + j] += rstd[r] * (gs[j] * gv[j] - m1 - xh[j] * m2);
                        }
                    }
                });
                acc(grads, *gamma, &mut |dg| {
                    for (r, gs) in g.chunks_exact(d).enumerate() {
                        for j in 0..d {
                            dg[j] += gs[j] * xhat[r * d + j];
                        }
                    }
                });
                acc(grads, *beta, &mut |db| {
                    for gs in g.chunks_exact(d) {
                        db.iter_mut().zip(gs).for_each(|(e, &y)| *e += y);
                    }
                });
            }
            Op::MaxPool { x, argmax } => {
                acc(grads, *x, &mut |d| {
                    for (o, &src) in argmax.iter().enumerate() {
                        d[src] += g[o];
                    }
                });
            }
            Op::MeanPool { x, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let lt = T::from_usize(len).unwrap();
                acc(grads, *x, &mut |d| {
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                d[base + i] += g[o * inner + i] / lt;
                            }
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let row: usize = self.shape(*x)[1..].iter().product();
                acc(grads, *x, &mut |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        d[i * row..(i + 1) * row]
                            .iter_mut()
                            .zip(&g[r * row..(r + 1) * row])
                            .for_each(|(e, &y)| *e += y);
                    }
                });
            }
            Op::ScatterRows { x, idx } => {
                let row: usize = self.shape(*x)[1..].iter().product();
                acc(grads, *x, &mut |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        d[r * row..(r + 1) * row]
                            .iter_mut()
                            .zip(&g[i * row..(i + 1) * row])
                            .for_each(|(e, &y)| *e += y);
                    }
                });
            }
            Op::Sum(x) => {
                acc(grads, *x, &mut |d| d.iter_mut().for_each(|e| *e += g[0]));
            }
            Op::Chamfer { a, b, nn_ab, nn_ba } => {
                let sa = self.shape(*a);
                let p = sa[sa.len() - 2];
                let sb = self.shape(*b);
                let q = sb[sb.len() - 2];
                let batch = nn_ab.len() / p;
                let av = &self.value(*a).data;
                let bv = &self.value(*b).data;
                let bt = T::from_usize(batch).unwrap();
                let two = T::lit(2.0);
                let ca = g[0] * two / (bt * T::from_usize(p).unwrap());
                let cb = g[0] * two / (bt * T::from_usize(q).unwrap());
                // d/da of the a->b term and of the b->a term
                let mut ga = vec![T::zero(); av.len()];
                let mut gb = vec![T::zero(); bv.len()];
                for bi in 0..batch {
                    for i in 0..p {
                        let ia = (bi * p + i) * 3;
                        let jb = (bi * q + nn_ab[bi * p + i]) * 3;
                        for c in 0..3 {
                            let diff = ca * (av[ia + c] - bv[jb + c]);
                            ga[ia + c] += diff;
                            gb[jb + c] += -diff;
                        }
                    }
                    for j in 0..q {
                        let jb = (bi * q + j) * 3;
                        let ia = (bi * p + nn_ba[bi * q + j]) * 3;
                        for c in 0..3 {
                            let diff = cb * (bv[jb + c] - av[ia + c]);
                            gb[jb + c] += diff;
                            ga[ia + c] += -diff;
                        }
                    }
                }
                acc(grads, *a, &mut |d| d.iter_mut().zip(&ga).for_each(|(e, &y)| *e += y));
                acc(grads, *b, &mut |d| d.iter_mut().zip(&gb).for_each(|(e, &y)| *e += y));
            }
        }
    }
}

/// Central-difference gradient check of a scalar function of one tensor.
///
/// Returns the maximum over elements of `|analytic - numeric| /
/// max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic = g
        .grad(xv)
        .map(|s| s.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    let eval = |t: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let l = f(&mut g, v)?;
        Ok(g.value(l).item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data[i] += eps;
        let mut minus = x.clone();
        minus.data[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_and_softmax_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data, vec![0.0, 0.0, 2.0]);
        let c = g.constant(t(&[4], &[3.0; 4]));
        let s = g.softmax(c).unwrap();
        assert_eq!(g.value(s).data, vec![0.25; 4]);
    }

    #[test]
    fn max_pool_shape() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![5, 7, 3]));
        let p = g.max_pool(x, 1).unwrap();
        assert_eq!(g.shape(p), &[5, 3]);
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);

        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1], &[3.0]));
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn reuse_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[3], &[1.0, 2.0, 3.0]));
        let a = g.scale(x, 2.0);
        let b = g.scale(x, 5.0);
        let s = g.add(a, b).unwrap();
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[7.0; 3]);
    }

    #[test]
    fn independent_input_has_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2], &[1.0, 2.0]));
        let y = g.input(t(&[2], &[1.0, 2.0]));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert!(g.grad(y).is_none());
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2], &[1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![4, 2]));
        let e = g.matmul(a, b).unwrap_err().to_string();
        assert!(e.contains("[2, 3]") && e.contains("[4, 2]"), "{e}");
    }

    #[test]
    fn max_pool_tie_routes_to_first() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[3, 1], &[2.0, 2.0, 1.0]));
        let p = g.max_pool(x, 0).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn chamfer_small_values() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let b = g.constant(t(&[1, 3], &[1.0, 0.0, 0.0]));
        let c = g.chamfer(a, b).unwrap();
        assert_eq!(g.value(c).item(), 2.0);
        let a = g.constant(t(&[2, 3], &[0.0, 0.0, 0.0, 2.0, 0.0, 0.0]));
        let b = g.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let c = g.chamfer(a, b).unwrap();
        assert_eq!(g.value(c).item(), 2.0);
    }

    #[test]
    fn linear_function_check_is_exact_scale() {
        let x = t(&[2, 3], &[0.3, -1.2, 0.5, 2.0, 0.1, -0.7]);
        let err = finite_difference_check(
            |g, v| {
                let s = g.scale(v, 3.5);
                Ok(g.sum(s))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }
}

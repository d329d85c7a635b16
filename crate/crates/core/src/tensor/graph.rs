use std::rc::Rc;

use rand::Rng;

use super::params::{Grads, ParamId, ParamSet};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_batched: bool,
        trans_b: bool,
        alpha: T,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax {
        x: Var,
        len: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Minimum(Var, Var),
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
        inner: usize,
    },
    Slice {
        x: Var,
        outer: usize,
        len: usize,
        start: usize,
        width: usize,
        inner: usize,
    },
    SwapAxes {
        x: Var,
        dims: [usize; 5],
    },
    Reshape(Var),
    MaskedFill {
        x: Var,
        mask: Rc<[bool]>,
        period: usize,
        block: usize,
    },
    Dropout {
        x: Var,
        keep: Vec<T>,
    },
    SumAll(Var),
    MeanAll(Var),
    SumLast {
        x: Var,
        len: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
        width: usize,
    },
    PickCols {
        x: Var,
        cols: Vec<usize>,
        width: usize,
    },
    Unfold {
        x: Var,
        dims: [usize; 4],
        k: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::Embedding { .. } => "embedding_lookup",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Square(_) => "square",
            Op::Clamp { .. } => "clamp",
            Op::Minimum(..) => "minimum",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::SwapAxes { .. } => "transpose",
            Op::Reshape(_) => "reshape",
            Op::MaskedFill { .. } => "masked_fill",
            Op::Dropout { .. } => "dropout",
            Op::SumAll(_) => "reduce_sum",
            Op::MeanAll(_) => "reduce_mean",
            Op::SumLast { .. } => "sum_last",
            Op::CrossEntropy { .. } => "cross_entropy_with_logits",
            Op::GatherRows { .. } => "gather_rows",
            Op::PickCols { .. } => "pick_cols",
            Op::Unfold { .. } => "unfold",
        }
    }
}

/// Records a forward computation so that [`Graph::backward`] can replay the
/// adjoints in reverse order.
///
/// A graph built with [`Graph::inference`] binds parameters as constants and
/// never tracks gradients; its forward values are identical to a training
/// graph's.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    track: bool,
    bound: Vec<Option<Var>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            track: true,
            bound: Vec::new(),
        }
    }

    pub fn inference() -> Self {
        Self {
            track: false,
            ..Self::new()
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.track && inputs.iter().any(|&v| self.rg(v));
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that gradients flow into when tracking is on.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = self.track;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter once per graph; repeated calls return the same node.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        let idx = id.index();
        if self.bound.len() <= idx {
            self.bound.resize(idx + 1, None);
        }
        if let Some(v) = self.bound[idx] {
            return v;
        }
        let v = self.variable(params.get(id).clone());
        self.bound[idx] = Some(v);
        v
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients for every parameter in `params`; unbound parameters get zeros.
    pub fn param_grads(&self, params: &ParamSet<T>) -> Grads<T> {
        let mut grads = Grads::zeros_like(params);
        self.accumulate_param_grads(&mut grads);
        grads
    }

    pub fn accumulate_param_grads(&self, grads: &mut Grads<T>) {
        for (idx, slot) in self.bound.iter().enumerate() {
            if let Some(v) = slot {
                if let Some(g) = self.grad(*v) {
                    for (acc, &x) in grads.get_mut(idx).iter_mut().zip(g) {
                        *acc += x;
                    }
                }
            }
        }
    }

    // ----------------------------------------------------------------- ops

    /// `a[.., m, k] @ b[k, n] -> [.., m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let rows = sa[..sa.len() - 1].iter().product::<usize>();
        let mut out = vec![T::zero(); rows * n];
        unsafe {
            T::gemm(
                rows,
                k,
                n,
                T::one(),
                self.data(a).as_ptr(),
                k as isize,
                1,
                self.data(b).as_ptr(),
                n as isize,
                1,
                T::zero(),
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                batch: 1,
                m: rows,
                k,
                n,
                b_batched: false,
                trans_b: false,
                alpha: T::one(),
            },
            &[a, b],
        ))
    }

    /// Batched `alpha * a[.., m, k] @ b[.., k, n]`, or `b[.., n, k]` transposed
    /// when `trans_b`. Leading dimensions must agree.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool, alpha: T) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 3 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch = sa[..r - 2].iter().product::<usize>();
        let mut out = vec![T::zero(); batch * m * n];
        let (rsb, csb) = if trans_b {
            (1, k as isize)
        } else {
            (n as isize, 1)
        };
        let ad = self.data(a);
        let bd = self.data(b);
        for i in 0..batch {
            unsafe {
                T::gemm(
                    m,
                    k,
                    n,
                    alpha,
                    ad.as_ptr().add(i * m * k),
                    k as isize,
                    1,
                    bd.as_ptr().add(i * k * n),
                    rsb,
                    csb,
                    T::zero(),
                    out.as_mut_ptr().add(i * m * n),
                    n as isize,
                    1,
                );
            }
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_batched: true,
                trans_b,
                alpha,
            },
            &[a, b],
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, op: Op<T>, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Var {
        let shape = self.shape(a).to_vec();
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor { shape, data };
        self.push(value, op, &[a, b])
    }

    fn unary_map(&mut self, op: Op<T>, x: Var, f: impl Fn(T) -> T) -> Var {
        let shape = self.shape(x).to_vec();
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        self.push(Tensor { shape, data }, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        Ok(self.zip_map(Op::Minimum(a, b), a, b, |x, y| if x <= y { x } else { y }))
    }

    /// Adds `bias[n]` to every row of `x[.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x);
        let sb = self.shape(bias);
        if sb.len() != 1 || sx.last() != sb.first() {
            return Err(Error::shape("add_bias", sx, sb));
        }
        let n = sb[0];
        let b = self.data(bias).to_vec();
        let shape = sx.to_vec();
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        Ok(self.push(Tensor { shape, data }, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary_map(Op::Scale(x, c), x, |v| v * c)
    }

    /// Rows of `table[V, d]` selected by `ids`, shaped `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(Error::shape("embedding_lookup", st, &[]));
        }
        let (rows, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(
                "embedding_lookup",
                format!("id {bad} outside table of {rows} rows"),
            ));
        }
        let td = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let value = Tensor {
            shape: vec![ids.len(), d],
            data,
        };
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(src[at(j)]);
                }
                if max == T::neg_infinity() {
                    continue;
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        Ok(self.push(
            Tensor { shape, data: out },
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        ))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let len = *shape
            .last()
            .ok_or_else(|| Error::invalid("log_softmax", "scalar input"))?;
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for (row, dst) in src.chunks(len).zip(out.chunks_mut(len)) {
            let lse = log_sum_exp(row);
            for (o, &v) in dst.iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        Ok(self.push(Tensor { shape, data: out }, Op::LogSoftmax { x, len }, &[x]))
    }

    /// Normalizes over the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm", "eps must be positive"));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let eps = T::c(eps);
        let dn = T::c(d as f64);
        let src = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let rows = src.len() / d.max(1);
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor { shape, data: out };
        let (xhat, rstd) = if self.track { (xhat, rstd) } else { (vec![], vec![]) };
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let r2 = T::c(std::f64::consts::FRAC_1_SQRT_2);
        let half = T::c(0.5);
        self.unary_map(Op::Gelu(x), x, |v| half * v * (T::one() + (v * r2).erf()))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary_map(Op::Relu(x), x, |v| v.max(T::zero()))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary_map(Op::Sigmoid(x), x, |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary_map(Op::Tanh(x), x, |v| v.tanh())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary_map(Op::Exp(x), x, |v| v.exp())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary_map(Op::Square(x), x, |v| v * v)
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary_map(Op::Clamp { x, lo, hi }, x, |v| v.max(lo).min(hi))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} for shape {first:?}")));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(Error::shape("concat", &first, s));
            }
            widths.push(s[axis]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &w) in inputs.iter().zip(&widths) {
                let src = self.data(v);
                data.extend_from_slice(&src[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                widths,
                inner,
            },
            inputs,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, width: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + width > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + width),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            data.extend_from_slice(&src[base..base + width * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = width;
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Slice {
                x,
                outer,
                len,
                start,
                width,
                inner,
            },
            &[x],
        ))
    }

    /// Swaps two axes, materializing the result.
    pub fn transpose(&mut self, x: Var, a1: usize, a2: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (a1, a2) = (a1.min(a2), a1.max(a2));
        if a2 >= shape.len() {
            return Err(Error::invalid("transpose", format!("axes ({a1}, {a2}) for {shape:?}")));
        }
        let dims = [
            shape[..a1].iter().product(),
            shape[a1],
            shape[a1 + 1..a2].iter().product(),
            shape[a2],
            shape[a2 + 1..].iter().product(),
        ];
        let mut data = vec![T::zero(); self.data(x).len()];
        swap_copy(self.data(x), &mut data, dims, false);
        let mut out_shape = shape;
        out_shape.swap(a1, a2);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::SwapAxes { x, dims },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Writes `value` wherever `mask` is set. `mask` has shape `[batch, period]`
    /// and is broadcast over every axis of `x` between the first and the last.
    pub fn masked_fill(&mut self, x: Var, mask: Rc<[bool]>, period: usize, value: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let numel: usize = shape.iter().product();
        if shape.is_empty() || *shape.last().unwrap() != period || mask.len() != shape[0] * period {
            return Err(Error::shape("masked_fill", &shape, &[mask.len()]));
        }
        let block = numel / shape[0];
        let src = self.data(x);
        let data = src
            .iter()
            .enumerate()
            .map(|(e, &v)| {
                if mask[(e / block) * period + e % period] {
                    value
                } else {
                    v
                }
            })
            .collect();
        Ok(self.push(
            Tensor { shape, data },
            Op::MaskedFill {
                x,
                mask,
                period,
                block,
            },
            &[x],
        ))
    }

    /// Inverted dropout; identity when `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let scale = T::c(1.0 / (1.0 - rate));
        let keep: Vec<T> = (0..self.data(x).len())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { scale })
            .collect();
        let shape = self.shape(x).to_vec();
        let data = self.data(x).iter().zip(&keep).map(|(&v, &k)| v * k).collect();
        self.push(Tensor { shape, data }, Op::Dropout { x, keep }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::c(self.data(x).len() as f64);
        let s = self.data(x).iter().copied().sum::<T>() / n;
        self.push(Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// Sums over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let len = *shape
            .last()
            .ok_or_else(|| Error::invalid("sum_last", "scalar input"))?;
        let data = self.data(x).chunks(len).map(|r| r.iter().copied().sum()).collect();
        let out_shape = shape[..shape.len() - 1].to_vec();
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::SumLast { x, len },
            &[x],
        ))
    }

    /// Per-row `-log softmax(logits)[target]` for `logits[n, C]`, shape `[n]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape("cross_entropy_with_logits", &shape, &[targets.len()]));
        }
        let c = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::invalid(
                "cross_entropy_with_logits",
                format!("target {bad} outside {c} classes"),
            ));
        }
        let src = self.data(logits);
        let mut probs = vec![T::zero(); src.len()];
        let mut losses = Vec::with_capacity(targets.len());
        for (r, &t) in targets.iter().enumerate() {
            let row = &src[r * c..(r + 1) * c];
            let lse = log_sum_exp(row);
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            losses.push(lse - row[t]);
        }
        let value = Tensor {
            shape: vec![targets.len()],
            data: losses,
        };
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Selects rows of `x[n, w]`, shape `[rows.len(), w]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("gather_rows", &shape, &[]));
        }
        let (n, w) = (shape[0], shape[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::invalid("gather_rows", format!("row {bad} of {n}")));
        }
        let src = self.data(x);
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            data.extend_from_slice(&src[r * w..(r + 1) * w]);
        }
        Ok(self.push(
            Tensor {
                shape: vec![rows.len(), w],
                data,
            },
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
                width: w,
            },
            &[x],
        ))
    }

    /// `out[i] = x[i, cols[i]]` for `x[n, w]`.
    pub fn pick_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != cols.len() {
            return Err(Error::shape("pick_cols", &shape, &[cols.len()]));
        }
        let w = shape[1];
        if let Some(&bad) = cols.iter().find(|&&c| c >= w) {
            return Err(Error::invalid("pick_cols", format!("column {bad} of {w}")));
        }
        let src = self.data(x);
        let data = cols.iter().enumerate().map(|(i, &c)| src[i * w + c]).collect();
        Ok(self.push(
            Tensor {
                shape: vec![cols.len()],
                data,
            },
            Op::PickCols {
                x,
                cols: cols.to_vec(),
                width: w,
            },
            &[x],
        ))
    }

    /// Sliding `k x k` patches of an NHWC tensor (stride 1, no padding):
    /// `[B, H, W, C] -> [B * Ho * Wo, k * k * C]`.
    pub fn unfold(&mut self, x: Var, k: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || k == 0 || shape[1] < k || shape[2] < k {
            return Err(Error::shape("unfold", &shape, &[k, k]));
        }
        let dims = [shape[0], shape[1], shape[2], shape[3]];
        let (ho, wo) = (dims[1] - k + 1, dims[2] - k + 1);
        let cols = k * k * dims[3];
        let mut data = vec![T::zero(); dims[0] * ho * wo * cols];
        unfold_map(dims, k, |dst, src| data[dst] = self.data(x)[src]);
        Ok(self.push(
            Tensor {
                shape: vec![dims[0] * ho * wo, cols],
                data,
            },
            Op::Unfold { x, dims, k },
            &[x],
        ))
    }

    // ------------------------------------------------------------ backward

    /// Reverse-mode sweep from a scalar `loss`. Gradients accumulate on every
    /// tracked leaf and are readable through [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        if !self.value(loss).all_finite() {
            return Err(Error::NonFinite {
                op: self.nodes[loss.0].op.name().to_string(),
                context: " (loss)".into(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.rg(loss) {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let touched = self.backprop_node(i, &g, &mut grads);
            for v in touched {
                if let Some(buf) = &grads[v.0] {
                    if buf.iter().any(|x| !x.is_finite()) {
                        return Err(Error::NonFinite {
                            op: self.nodes[i].op.name().to_string(),
                            context: " (gradient)".into(),
                        });
                    }
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Vec<Var> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut touched = Vec::new();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.rg(v) {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.data(v).len()]);
            f(buf);
            touched.push(v);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_batched,
                trans_b,
                alpha,
            } => {
                let ad = self.data(a);
                let bd = self.data(b);
                // dA = alpha * dC @ op(B)^T
                acc(a, &mut |da| {
                    let (rs, cs) = if trans_b { (k as isize, 1) } else { (1, n as isize) };
                    if b_batched {
                        for bi in 0..batch {
                            unsafe {
                                T::gemm(
                                    m,
                                    n,
                                    k,
                                    alpha,
                                    g.as_ptr().add(bi * m * n),
                                    n as isize,
                                    1,
                                    bd.as_ptr().add(bi * k * n),
                                    rs,
                                    cs,
                                    T::one(),
                                    da.as_mut_ptr().add(bi * m * k),
                                    k as isize,
                                    1,
                                );
                            }
                        }
                    } else {
                        unsafe {
                            T::gemm(
                                batch * m,
                                n,
                                k,
                                alpha,
                                g.as_ptr(),
                                n as isize,
                                1,
                                bd.as_ptr(),
                                rs,
                                cs,
                                T::one(),
                                da.as_mut_ptr(),
                                k as isize,
                                1,
                            );
                        }
                    }
                });
                acc(b, &mut |db| {
                    if b_batched {
                        for bi in 0..batch {
                            unsafe {
                                if trans_b {
                                    // dB[n, k] = alpha * dC^T @ A
                                    T::gemm(
                                        n,
                                        m,
                                        k,
                                        alpha,
                                        g.as_ptr().add(bi * m * n),
                                        1,
                                        n as isize,
                                        ad.as_ptr().add(bi * m * k),
                                        k as isize,
                                        1,
                                        T::one(),
                                        db.as_mut_ptr().add(bi * k * n),
                                        k as isize,
                                        1,
                                    );
                                } else {
                                    // dB[k, n] = alpha * A^T @ dC
                                    T::gemm(
                                        k,
                                        m,
                                        n,
                                        alpha,
                                        ad.as_ptr().add(bi * m * k),
                                        1,
                                        k as isize,
                                        g.as_ptr().add(bi * m * n),
                                        n as isize,
                                        1,
                                        T::one(),
                                        db.as_mut_ptr().add(bi * k * n),
                                        n as isize,
                                        1,
                                    );
                                }
                            }
                        }
                    } else {
                        let rows = batch * m;
                        unsafe {
                            T::gemm(
                                k,
                                rows,
                                n,
                                alpha,
                                ad.as_ptr(),
                                1,
                                k as isize,
                                g.as_ptr(),
                                n as isize,
                                1,
                                T::one(),
                                db.as_mut_ptr(),
                                n as isize,
                                1,
                            );
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| add_into(d, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| {
                    for (x, &y) in d.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (self.data(a), self.data(b));
                acc(a, &mut |d| {
                    for ((x, &y), &o) in d.iter_mut().zip(g).zip(bd) {
                        *x += y * o;
                    }
                });
                acc(b, &mut |d| {
                    for ((x, &y), &o) in d.iter_mut().zip(g).zip(ad) {
                        *x += y * o;
                    }
                });
            }
            &Op::Minimum(a, b) => {
                let (ad, bd) = (self.data(a), self.data(b));
                acc(a, &mut |d| {
                    for j in 0..d.len() {
                        if ad[j] <= bd[j] {
                            d[j] += g[j];
                        }
                    }
                });
                acc(b, &mut |d| {
                    for j in 0..d.len() {
                        if ad[j] > bd[j] {
                            d[j] += g[j];
                        }
                    }
                });
            }
            &Op::AddBias(x, bias) => {
                acc(x, &mut |d| add_into(d, g));
                acc(bias, &mut |d| {
                    let n = d.len();
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            &Op::Scale(x, c) => acc(x, &mut |d| {
                for (x, &y) in d.iter_mut().zip(g) {
                    *x += y * c;
                }
            }),
            Op::Embedding { table, ids } => acc(*table, &mut |d| {
                let w = g.len() / ids.len().max(1);
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut d[id * w..(id + 1) * w], &g[r * w..(r + 1) * w]);
                }
            }),
            &Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => acc(x, &mut |d| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let mut dot = T::zero();
                        for j in 0..len {
                            dot += out[at(j)] * g[at(j)];
                        }
                        for j in 0..len {
                            d[at(j)] += out[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }),
            &Op::LogSoftmax { x, len } => acc(x, &mut |d| {
                for ((dr, gr), yr) in d.chunks_mut(len).zip(g.chunks(len)).zip(out.chunks(len)) {
                    let gs = gr.iter().copied().sum::<T>();
                    for j in 0..len {
                        dr[j] += gr[j] - yr[j].exp() * gs;
                    }
                }
            }),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gd = self.data(*gamma);
                let dlen = gd.len();
                let dn = T::c(dlen as f64);
                acc(*x, &mut |d| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let span = r * dlen..(r + 1) * dlen;
                        let (gr, xr) = (&g[span.clone()], &xhat[span.clone()]);
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..dlen {
                            let dxh = gr[j] * gd[j];
                            m1 += dxh;
                            m2 += dxh * xr[j];
                        }
                        m1 /= dn;
                        m2 /= dn;
                        let dr = &mut d[span];
                        for j in 0..dlen {
                            dr[j] += rs * (gr[j] * gd[j] - m1 - xr[j] * m2);
                        }
                    }
                });
                acc(*gamma, &mut |d| {
                    for (gr, xr) in g.chunks(dlen).zip(xhat.chunks(dlen)) {
                        for j in 0..dlen {
                            d[j] += gr[j] * xr[j];
                        }
                    }
                });
                acc(*beta, &mut |d| {
                    for gr in g.chunks(dlen) {
                        add_into(d, gr);
                    }
                });
            }
            &Op::Gelu(x) => {
                let xd = self.data(x);
                let r2 = T::c(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = T::c(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let half = T::c(0.5);
                acc(x, &mut |d| {
                    for j in 0..d.len() {
                        let v = xd[j];
                        let cdf = half * (T::one() + (v * r2).erf());
                        let pdf = inv_sqrt_2pi * (-half * v * v).exp();
                        d[j] += g[j] * (cdf + v * pdf);
                    }
                });
            }
            &Op::Relu(x) => {
                let xd = self.data(x);
                acc(x, &mut |d| {
                    for j in 0..d.len() {
                        if xd[j] > T::zero() {
                            d[j] += g[j];
                        }
                    }
                });
            }
            &Op::Sigmoid(x) => acc(x, &mut |d| {
                for j in 0..d.len() {
                    d[j] += g[j] * out[j] * (T::one() - out[j]);
                }
            }),
            &Op::Tanh(x) => acc(x, &mut |d| {
                for j in 0..d.len() {
                    d[j] += g[j] * (T::one() - out[j] * out[j]);
                }
            }),
            &Op::Exp(x) => acc(x, &mut |d| {
                for j in 0..d.len() {
                    d[j] += g[j] * out[j];
                }
            }),
            &Op::Square(x) => {
                let xd = self.data(x);
                let two = T::c(2.0);
                acc(x, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * two * xd[j];
                    }
                });
            }
            &Op::Clamp { x, lo, hi } => {
                let xd = self.data(x);
                acc(x, &mut |d| {
                    for j in 0..d.len() {
                        if xd[j] >= lo && xd[j] <= hi {
                            d[j] += g[j];
                        }
                    }
                });
            }
            Op::Concat {
                inputs,
                outer,
                widths,
                inner,
            } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&v, &w) in inputs.iter().zip(widths) {
                    acc(v, &mut |d| {
                        for o in 0..*outer {
                            let src = (o * total + offset) * inner;
                            add_into(&mut d[o * w * inner..(o + 1) * w * inner], &g[src..src + w * inner]);
                        }
                    });
                    offset += w;
                }
            }
            &Op::Slice {
                x,
                outer,
                len,
                start,
                width,
                inner,
            } => acc(x, &mut |d| {
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    add_into(&mut d[dst..dst + width * inner], &g[o * width * inner..(o + 1) * width * inner]);
                }
            }),
            &Op::SwapAxes { x, dims } => acc(x, &mut |d| {
                let back = [dims[0], dims[3], dims[2], dims[1], dims[4]];
                swap_copy(g, d, back, true);
            }),
            &Op::Reshape(x) => acc(x, &mut |d| add_into(d, g)),
            Op::MaskedFill {
                x,
                mask,
                period,
                block,
            } => acc(*x, &mut |d| {
                for j in 0..d.len() {
                    if !mask[(j / block) * period + j % period] {
                        d[j] += g[j];
                    }
                }
            }),
            Op::Dropout { x, keep } => acc(*x, &mut |d| {
                for j in 0..d.len() {
                    d[j] += g[j] * keep[j];
                }
            }),
            &Op::SumAll(x) => acc(x, &mut |d| {
                for v in d.iter_mut() {
                    *v += g[0];
                }
            }),
            &Op::MeanAll(x) => acc(x, &mut |d| {
                let s = g[0] / T::c(d.len() as f64);
                for v in d.iter_mut() {
                    *v += s;
                }
            }),
            &Op::SumLast { x, len } => acc(x, &mut |d| {
                for (row, &gv) in d.chunks_mut(len).zip(g) {
                    for v in row {
                        *v += gv;
                    }
                }
            }),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => acc(*logits, &mut |d| {
                let c = probs.len() / targets.len().max(1);
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        d[r * c + j] += g[r] * probs[r * c + j];
                    }
                    d[r * c + t] -= g[r];
                }
            }),
            Op::GatherRows { x, rows, width } => acc(*x, &mut |d| {
                let w = *width;
                for (r, &src) in rows.iter().enumerate() {
                    add_into(&mut d[src * w..(src + 1) * w], &g[r * w..(r + 1) * w]);
                }
            }),
            Op::PickCols { x, cols, width } => acc(*x, &mut |d| {
                for (i, &c) in cols.iter().enumerate() {
                    d[i * width + c] += g[i];
                }
            }),
            &Op::Unfold { x, dims, k } => acc(x, &mut |d| {
                unfold_map(dims, k, |dst, src| d[src] += g[dst]);
            }),
        }
        touched
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

/// Copies `(o, x1, m, x2, i)` to `(o, x2, m, x1, i)`; adds when `accumulate`.
fn swap_copy<T: Scalar>(src: &[T], dst: &mut [T], dims: [usize; 5], accumulate: bool) {
    let [outer, d1, mid, d2, inner] = dims;
    for o in 0..outer {
        for a in 0..d1 {
            for m in 0..mid {
                for b in 0..d2 {
                    let s = (((o * d1 + a) * mid + m) * d2 + b) * inner;
                    let t = (((o * d2 + b) * mid + m) * d1 + a) * inner;
                    if accumulate {
                        add_into(&mut dst[t..t + inner], &src[s..s + inner]);
                    } else {
                        dst[t..t + inner].copy_from_slice(&src[s..s + inner]);
                    }
                }
            }
        }
    }
}

fn unfold_map(dims: [usize; 4], k: usize, mut f: impl FnMut(usize, usize)) {
    let [b, h, w, c] = dims;
    let (ho, wo) = (h - k + 1, w - k + 1);
    let cols = k * k * c;
    for bi in 0..b {
        for i in 0..ho {
            for j in 0..wo {
                let row = (bi * ho + i) * wo + j;
                for di in 0..k {
                    for dj in 0..k {
                        let src = ((bi * h + i + di) * w + j + dj) * c;
                        let dst = row * cols + (di * k + dj) * c;
                        for ch in 0..c {
                            f(dst + ch, src + ch);
                        }
                    }
                }
            }
        }
    }
}

//! Differentiable primitives on [`Var`].
//!
//! Shape mismatches are programming errors and panic with the offending
//! shapes, the same contract as slice indexing.

use std::rc::Rc;

use super::graph::{Graph, Var};
use super::scalar::{sigmoid, softplus};
use super::tensor::numel;
use super::Scalar;

fn shape_panic(op: &str, a: &[usize], b: &[usize]) -> ! {
    panic!("{op}: incompatible shapes {a:?} and {b:?}")
}

impl<'g, S: Scalar> Var<'g, S> {
    fn unary(
        self,
        op: &'static str,
        f: impl Fn(S) -> S,
        df: impl Fn(S, S) -> S + 'static,
    ) -> Var<'g, S> {
        let x = self.value();
        let y: Vec<S> = x.iter().map(|&v| f(v)).collect();
        let y_rc = Rc::new(y.clone());
        let id = self.id;
        self.graph.push_op(op, self.shape(), y, &[id], move |g, sink| {
            let grad: Vec<S> =
                g.iter().zip(x.iter()).zip(y_rc.iter()).map(|((&g, &x), &y)| g * df(x, y)).collect();
            sink.add_owned(id, grad);
        })
    }

    pub fn neg(self) -> Var<'g, S> {
        self.unary("neg", |x| -x, |_, _| -S::one())
    }

    pub fn exp(self) -> Var<'g, S> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Var<'g, S> {
        self.unary("ln", |x| x.ln(), |x, _| S::one() / x)
    }

    pub fn tanh(self) -> Var<'g, S> {
        self.unary("tanh", |x| x.tanh(), |_, y| S::one() - y * y)
    }

    pub fn atanh(self) -> Var<'g, S> {
        self.unary("atanh", |x| x.atanh(), |x, _| S::one() / (S::one() - x * x))
    }

    pub fn relu(self) -> Var<'g, S> {
        self.unary("relu", |x| x.max(S::zero()), |x, _| if x > S::zero() { S::one() } else { S::zero() })
    }

    pub fn softplus(self) -> Var<'g, S> {
        self.unary("softplus", softplus, |x, _| sigmoid(x))
    }

    pub fn sigmoid(self) -> Var<'g, S> {
        self.unary("sigmoid", sigmoid, |_, y| y * (S::one() - y))
    }

    pub fn square(self) -> Var<'g, S> {
        self.unary("square", |x| x * x, |x, _| x + x)
    }

    pub fn sqrt(self) -> Var<'g, S> {
        self.unary("sqrt", |x| x.sqrt(), |_, y| S::lit(0.5) / y)
    }

    pub fn mul_scalar(self, c: S) -> Var<'g, S> {
        self.unary("mul_scalar", move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: S) -> Var<'g, S> {
        self.unary("add_scalar", move |x| x + c, |_, _| S::one())
    }

    /// `c * tanh(x / c)`: smooth clamp of magnitude to below `c`.
    pub fn soft_clamp(self, c: S) -> Var<'g, S> {
        self.unary("soft_clamp", move |x| c * (x / c).tanh(), move |_, y| S::one() - (y / c) * (y / c))
    }

    /// Copies a tensor whose shape is a suffix of `shape` (or a single
    /// element) across the leading dimensions.
    pub fn broadcast_to(self, shape: &[usize]) -> Var<'g, S> {
        let src = self.shape();
        if src.as_slice() == shape {
            return self;
        }
        let n = numel(&src);
        let suffix_ok = src.len() <= shape.len() && shape[shape.len() - src.len()..] == src[..];
        if !(suffix_ok || n == 1) {
            shape_panic("broadcast_to", &src, shape);
        }
        let x = self.value();
        let total = numel(shape);
        let y: Vec<S> = (0..total).map(|i| x[i % n]).collect();
        let id = self.id;
        self.graph.push_op("broadcast", shape.to_vec(), y, &[id], move |g, sink| {
            let buf = sink.buf(id);
            for (i, &gi) in g.iter().enumerate() {
                buf[i % n] += gi;
            }
        })
    }

    fn broadcast_pair(self, other: Var<'g, S>) -> (Var<'g, S>, Var<'g, S>) {
        self.same_graph(&other);
        let (sa, sb) = (self.shape(), other.shape());
        if sa == sb {
            (self, other)
        } else if numel(&sa) >= numel(&sb) {
            (self, other.broadcast_to(&sa))
        } else {
            (self.broadcast_to(&sb), other)
        }
    }

    fn binary(
        self,
        other: Var<'g, S>,
        op: &'static str,
        f: impl Fn(S, S) -> S,
        da: impl Fn(S, S, S) -> S + 'static,
        db: impl Fn(S, S, S) -> S + 'static,
    ) -> Var<'g, S> {
        let (a, b) = self.broadcast_pair(other);
        let (xa, xb) = (a.value(), b.value());
        let y: Vec<S> = xa.iter().zip(xb.iter()).map(|(&p, &q)| f(p, q)).collect();
        let (ia, ib) = (a.id, b.id);
        self.graph.push_op(op, a.shape(), y, &[ia, ib], move |g, sink| {
            if sink.wants(ia) {
                let grad: Vec<S> = g.iter().enumerate().map(|(i, &gi)| gi * da(xa[i], xb[i], gi)).collect();
                sink.add_owned(ia, grad);
            }
            if sink.wants(ib) {
                let grad: Vec<S> = g.iter().enumerate().map(|(i, &gi)| gi * db(xa[i], xb[i], gi)).collect();
                sink.add_owned(ib, grad);
            }
        })
    }

    pub fn add(self, other: Var<'g, S>) -> Var<'g, S> {
        self.binary(other, "add", |a, b| a + b, |_, _, _| S::one(), |_, _, _| S::one())
    }

    pub fn sub(self, other: Var<'g, S>) -> Var<'g, S> {
        self.binary(other, "sub", |a, b| a - b, |_, _, _| S::one(), |_, _, _| -S::one())
    }

    pub fn mul(self, other: Var<'g, S>) -> Var<'g, S> {
        self.binary(other, "mul", |a, b| a * b, |_, b, _| b, |a, _, _| a)
    }

    pub fn div(self, other: Var<'g, S>) -> Var<'g, S> {
        self.binary(other, "div", |a, b| a / b, |_, b, _| S::one() / b, |a, b, _| -a / (b * b))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, S> {
        let src = self.shape();
        if numel(&src) != numel(shape) {
            shape_panic("reshape", &src, shape);
        }
        let id = self.id;
        self.graph.push_op("reshape", shape.to_vec(), self.to_vec(), &[id], move |g, sink| sink.add(id, g))
    }

    /// `out[i] = x[indices[i]]` over the flattened input.
    pub fn gather(self, indices: &[usize], shape: &[usize]) -> Var<'g, S> {
        assert_eq!(indices.len(), numel(shape), "gather: {} indices for shape {:?}", indices.len(), shape);
        let x = self.value();
        let y: Vec<S> = indices
            .iter()
            .map(|&i| *x.get(i).unwrap_or_else(|| panic!("gather: index {i} out of range {}", x.len())))
            .collect();
        let idx: Rc<[usize]> = indices.into();
        let id = self.id;
        self.graph.push_op("gather", shape.to_vec(), y, &[id], move |g, sink| {
            let buf = sink.buf(id);
            for (k, &i) in idx.iter().enumerate() {
                buf[i] += g[k];
            }
        })
    }

    /// Row `i` of the leading axis.
    pub fn row(self, i: usize) -> Var<'g, S> {
        let shape = self.shape();
        let stride: usize = shape[1..].iter().product();
        assert!(i < shape[0], "row {i} out of range for shape {shape:?}");
        let idx: Vec<usize> = (i * stride..(i + 1) * stride).collect();
        self.gather(&idx, &shape[1..])
    }

    /// Single element of the flattened tensor as a scalar node.
    pub fn at(self, i: usize) -> Var<'g, S> {
        self.gather(&[i], &[])
    }

    pub fn sum(self) -> Var<'g, S> {
        let x = self.value();
        let s: S = x.iter().copied().sum();
        let n = x.len();
        let id = self.id;
        self.graph.push_op("sum", vec![], vec![s], &[id], move |g, sink| {
            let buf = sink.buf(id);
            buf.iter_mut().take(n).for_each(|b| *b += g[0]);
        })
    }

    pub fn mean(self) -> Var<'g, S> {
        let n = S::from_usize(self.numel()).expect("length");
        self.sum().mul_scalar(S::one() / n)
    }

    /// Sum over the last axis.
    pub fn sum_last(self) -> Var<'g, S> {
        let shape = self.shape();
        let d = *shape.last().expect("sum_last on a scalar");
        let x = self.value();
        let y: Vec<S> = x.chunks(d).map(|c| c.iter().copied().sum()).collect();
        let id = self.id;
        self.graph.push_op("sum_last", shape[..shape.len() - 1].to_vec(), y, &[id], move |g, sink| {
            let buf = sink.buf(id);
            for (i, b) in buf.iter_mut().enumerate() {
                *b += g[i / d];
            }
        })
    }

    /// Overflow-safe `log Σ exp(x)` along `axis`.
    pub fn logsumexp(self, axis: usize) -> Var<'g, S> {
        let shape = self.shape();
        assert!(axis < shape.len(), "logsumexp: axis {axis} out of range for {shape:?}");
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value();
        let mut y = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| x[(o * len + j) * inner + i];
                let m = (0..len).map(at).fold(S::neg_infinity(), S::max);
                let s: S = (0..len).map(|j| (at(j) - m).exp()).sum();
                y[o * inner + i] = m + s.ln();
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let y_rc = Rc::new(y.clone());
        let id = self.id;
        self.graph.push_op("logsumexp", out_shape, y, &[id], move |g, sink| {
            let buf = sink.buf(id);
            for o in 0..outer {
                for i in 0..inner {
                    let r = o * inner + i;
                    for j in 0..len {
                        let k = (o * len + j) * inner + i;
                        buf[k] += g[r] * (x[k] - y_rc[r]).exp();
                    }
                }
            }
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Var<'g, S> {
        let shape = self.shape();
        let d = *shape.last().expect("log_softmax on a scalar");
        let x = self.value();
        let mut y = Vec::with_capacity(x.len());
        for row in x.chunks(d) {
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<S>().ln();
            y.extend(row.iter().map(|&v| v - lse));
        }
        let y_rc = Rc::new(y.clone());
        let id = self.id;
        self.graph.push_op("log_softmax", shape, y, &[id], move |g, sink| {
            let buf = sink.buf(id);
            for (r, (gr, yr)) in g.chunks(d).zip(y_rc.chunks(d)).enumerate() {
                let gs: S = gr.iter().copied().sum();
                for j in 0..d {
                    buf[r * d + j] += gr[j] - yr[j].exp() * gs;
                }
            }
        })
    }

    pub fn softmax(self) -> Var<'g, S> {
        self.log_softmax().exp()
    }

    /// Mean cross-entropy of logits `[K]` or `[N, K]` against integer labels.
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> Var<'g, S> {
        let shape = self.shape();
        let k = *shape.last().expect("softmax_cross_entropy on a scalar");
        let rows = self.numel() / k;
        assert_eq!(labels.len(), rows, "softmax_cross_entropy: {} labels for {rows} rows", labels.len());
        for &l in labels {
            assert!(l < k, "softmax_cross_entropy: label {l} out of range for {k} classes");
        }
        let logp = self.log_softmax();
        let idx: Vec<usize> = labels.iter().enumerate().map(|(r, &l)| r * k + l).collect();
        logp.gather(&idx, &[rows]).mean().neg()
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(self, other: Var<'g, S>) -> Var<'g, S> {
        self.same_graph(&other);
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            shape_panic("matmul", &sa, &sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (a, b) = (self.value(), other.value());
        let mut y = vec![S::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                let brow = &b[p * n..(p + 1) * n];
                for (yv, &bv) in y[i * n..(i + 1) * n].iter_mut().zip(brow) {
                    *yv += av * bv;
                }
            }
        }
        let (ia, ib) = (self.id, other.id);
        self.graph.push_op("matmul", vec![m, n], y, &[ia, ib], move |g, sink| {
            if sink.wants(ia) {
                let buf = sink.buf(ia);
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = S::zero();
                        for j in 0..n {
                            acc += g[i * n + j] * b[p * n + j];
                        }
                        buf[i * k + p] += acc;
                    }
                }
            }
            if sink.wants(ib) {
                let buf = sink.buf(ib);
                for i in 0..m {
                    for p in 0..k {
                        let av = a[i * k + p];
                        for j in 0..n {
                            buf[p * n + j] += av * g[i * n + j];
                        }
                    }
                }
            }
        })
    }

    pub fn transpose(self) -> Var<'g, S> {
        let s = self.shape();
        assert_eq!(s.len(), 2, "transpose expects a matrix, got {s:?}");
        let (r, c) = (s[0], s[1]);
        let idx: Vec<usize> = (0..r * c).map(|k| (k % r) * c + k / r).collect();
        self.gather(&idx, &[c, r])
    }

    /// Affine map `x W^T + b` for `x` of shape `[in]` or `[N, in]`, `W` of
    /// shape `[out, in]` and `b` of shape `[out]`.
    pub fn linear(self, w: Var<'g, S>, b: Var<'g, S>) -> Var<'g, S> {
        self.same_graph(&w);
        self.same_graph(&b);
        let (sx, sw, sb) = (self.shape(), w.shape(), b.shape());
        let fin = *sx.last().unwrap_or_else(|| shape_panic("linear", &sx, &sw));
        if sw.len() != 2 || sw[1] != fin || sb != [sw[0]] || sx.len() > 2 {
            shape_panic("linear", &sx, &sw);
        }
        let fout = sw[0];
        let rows = self.numel() / fin;
        let (x, wv, bv) = (self.value(), w.value(), b.value());
        let mut y = Vec::with_capacity(rows * fout);
        for r in 0..rows {
            let xr = &x[r * fin..(r + 1) * fin];
            for o in 0..fout {
                let wr = &wv[o * fin..(o + 1) * fin];
                let dot: S = xr.iter().zip(wr).map(|(&a, &b)| a * b).sum();
                y.push(dot + bv[o]);
            }
        }
        let mut out_shape = sx.clone();
        *out_shape.last_mut().expect("non-scalar") = fout;
        let (ix, iw, ib) = (self.id, w.id, b.id);
        self.graph.push_op("linear", out_shape, y, &[ix, iw, ib], move |g, sink| {
            if sink.wants(ix) {
                let buf = sink.buf(ix);
                for r in 0..rows {
                    for o in 0..fout {
                        let go = g[r * fout + o];
                        let wr = &wv[o * fin..(o + 1) * fin];
                        for (bx, &wk) in buf[r * fin..(r + 1) * fin].iter_mut().zip(wr) {
                            *bx += go * wk;
                        }
                    }
                }
            }
            if sink.wants(iw) {
                let buf = sink.buf(iw);
                for r in 0..rows {
                    let xr = &x[r * fin..(r + 1) * fin];
                    for o in 0..fout {
                        let go = g[r * fout + o];
                        for (bw, &xk) in buf[o * fin..(o + 1) * fin].iter_mut().zip(xr) {
                            *bw += go * xk;
                        }
                    }
                }
            }
            if sink.wants(ib) {
                let buf = sink.buf(ib);
                for r in 0..rows {
                    for o in 0..fout {
                        buf[o] += g[r * fout + o];
                    }
                }
            }
        })
    }
}

impl<S: Scalar> Graph<S> {
    /// Concatenates flattened inputs into one vector.
    pub fn concat<'g>(&'g self, parts: &[Var<'g, S>]) -> Var<'g, S> {
        let mut values = Vec::new();
        let mut spans = Vec::with_capacity(parts.len());
        for p in parts {
            assert!(std::ptr::eq(p.graph, self), "concat: operand from another graph");
            let v = p.value();
            spans.push((p.id, values.len(), v.len()));
            values.extend_from_slice(&v);
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let n = values.len();
        self.push_op("concat", vec![n], values, &ids, move |g, sink| {
            for &(id, start, len) in &spans {
                sink.add(id, &g[start..start + len]);
            }
        })
    }

    /// Stacks equally shaped inputs along a new leading axis.
    pub fn stack<'g>(&'g self, parts: &[Var<'g, S>]) -> Var<'g, S> {
        assert!(!parts.is_empty(), "stack of nothing");
        let inner = parts[0].shape();
        for p in parts {
            assert_eq!(p.shape(), inner, "stack: mismatched shapes");
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner);
        self.concat(parts).reshape(&shape)
    }

    pub fn identity(&self, n: usize) -> Var<'_, S> {
        let mut v = vec![S::zero(); n * n];
        for i in 0..n {
            v[i * n + i] = S::one();
        }
        self.constant(vec![n, n], v)
    }
}

macro_rules! impl_binop {
    ($tr:ident, $method:ident, $call:ident) => {
        impl<'g, S: Scalar> std::ops::$tr for Var<'g, S> {
            type Output = Var<'g, S>;
            fn $method(self, rhs: Self) -> Self::Output {
                Var::$call(self, rhs)
            }
        }
        impl<'g, S: Scalar> std::ops::$tr<S> for Var<'g, S> {
            type Output = Var<'g, S>;
            fn $method(self, rhs: S) -> Self::Output {
                let c = self.graph.scalar(rhs);
                Var::$call(self, c)
            }
        }
    };
}

impl_binop!(Add, add, add);
impl_binop!(Sub, sub, sub);
impl_binop!(Mul, mul, mul);
impl_binop!(Div, div, div);

impl<'g, S: Scalar> std::ops::Neg for Var<'g, S> {
    type Output = Var<'g, S>;
    fn neg(self) -> Self::Output {
        Var::neg(self)
    }
}

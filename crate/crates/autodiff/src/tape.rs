//! Reverse-mode tape. Every primitive records its inputs on the tape at
//! construction time; `backward` walks the records in exact reverse order.

use crate::conv::{self, ConvSpec};
use crate::error::{dim_err, Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param(ParamId),
    Conv2d {
        x: Var,
        k: Var,
        spec: ConvSpec,
    },
    ConvTranspose2d {
        x: Var,
        k: Var,
        spec: ConvSpec,
    },
    ChannelBias {
        x: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Square(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Mse(Var, Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    StraightThrough {
        z: Var,
    },
    StopGrad,
    BlockBilinear {
        x: Var,
        y: Var,
        cores: Var,
    },
    MaskedMean {
        x: Var,
        mask: Vec<T>,
    },
    SignedSqrt {
        x: Var,
        eps: T,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Ordered record of executed primitives.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one backward pass, indexed by tape node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, ParamId)>,
    visited: usize,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Number of nodes that received a gradient during the pass.
    pub fn visited(&self) -> usize {
        self.visited
    }

    /// Adds each parameter leaf's gradient into the store. Parameters that
    /// were recorded but not reached get an explicit zero gradient.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(node, id) in &self.params {
            let p = store.param_mut(id);
            let g = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            if let Some(contrib) = &self.grads[node] {
                g.add_assign(contrib);
            }
        }
    }
}

fn acc<T: Scalar>(slot: &mut Option<Tensor<T>>, contrib: Tensor<T>) {
    match slot {
        Some(g) => g.add_assign(&contrib),
        None => *slot = Some(contrib),
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that does not feed any parameter gradient but whose
    /// gradient is still reported by [`Gradients::get`].
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant)
    }

    /// Records a parameter leaf (copied from the store).
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        self.conv2d_with(x, k, ConvSpec::new(stride, padding))
    }

    pub fn conv2d_with(&mut self, x: Var, k: Var, spec: ConvSpec) -> Result<Var> {
        let out = conv::conv2d_forward(self.value(x), self.value(k), spec)?;
        Ok(self.push(out, Op::Conv2d { x, k, spec }))
    }

    pub fn conv2d_transpose(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        self.conv2d_transpose_with(x, k, ConvSpec::new(stride, padding))
    }

    pub fn conv2d_transpose_with(&mut self, x: Var, k: Var, spec: ConvSpec) -> Result<Var> {
        let out = conv::conv_transpose_forward(self.value(x), self.value(k), spec)?;
        Ok(self.push(out, Op::ConvTranspose2d { x, k, spec }))
    }

    /// Adds a per-channel bias `b[C]` to `x[N, C, ...]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.value(x);
        let bs = self.value(b);
        if xs.rank() < 2 {
            return Err(TensorError::Rank {
                op: "channel_bias",
                expected: 2,
                found: xs.rank(),
            });
        }
        let c = xs.shape()[1];
        if bs.numel() != c {
            return Err(dim_err("channel_bias", "1 (channels)", c, bs.numel()));
        }
        let inner: usize = xs.shape()[2..].iter().product();
        let mut out = xs.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bs.data()[(i / inner) % c];
        }
        Ok(self.push(out, Op::ChannelBias { x, b }))
    }

    /// `x[N, D] · w[D, M] + b[M]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x), self.value(w));
        xs.expect_rank("linear", 2)?;
        ws.expect_rank("linear", 2)?;
        let (n, d) = (xs.shape()[0], xs.shape()[1]);
        let (wd, m) = (ws.shape()[0], ws.shape()[1]);
        if wd != d {
            return Err(dim_err("linear", "1 (inner)", wd, d));
        }
        let mut out = vec![T::zero(); n * m];
        if let Some(b) = b {
            let bs = self.value(b);
            if bs.numel() != m {
                return Err(dim_err("linear", "bias", m, bs.numel()));
            }
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bs.data());
            }
        }
        T::gemm(
            n,
            d,
            m,
            xs.data(),
            d as isize,
            1,
            ws.data(),
            m as isize,
            1,
            T::one(),
            &mut out,
            m as isize,
            1,
        );
        let out = Tensor::new(&[n, m], out)?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.expect_same_shape(op, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.exp());
        self.push(out, Op::Exp(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum();
        let n = T::from_usize(t.numel()).unwrap();
        self.push(Tensor::scalar(s / n), Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        p.expect_same_shape("mse", t)?;
        let n = T::from_usize(p.numel()).unwrap();
        let s: T = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(pred, target)))
    }

    /// Batch mean of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        l.expect_rank("softmax_cross_entropy", 2)?;
        let (n, c) = (l.shape()[0], l.shape()[1]);
        if targets.len() != n {
            return Err(dim_err("softmax_cross_entropy", "0 (batch)", n, targets.len()));
        }
        let mut probs = vec![T::zero(); n * c];
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(TensorError::ClassIndex { index: t, classes: c });
            }
            let row = &l.data()[r * c..(r + 1) * c];
            let (p, lse) = softmax_row(row);
            loss += lse - row[t];
            probs[r * c..(r + 1) * c].copy_from_slice(&p);
        }
        let loss = loss / T::from_usize(n).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Selects rows of `table[K, L]`; gradient scatters only into the selected rows.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        t.expect_rank("gather_rows", 2)?;
        let (k, l) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * l);
        for &i in indices {
            if i >= k {
                return Err(dim_err("gather_rows", "0 (row index bound)", k, i));
            }
            out.extend_from_slice(&t.data()[i * l..(i + 1) * l]);
        }
        let out = Tensor::new(&[indices.len(), l], out)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Value of `e`, gradient passed unchanged to `z` (straight-through estimator).
    pub fn straight_through(&mut self, z: Var, e: Var) -> Result<Var> {
        self.value(z).expect_same_shape("straight_through", self.value(e))?;
        let out = self.value(e).clone();
        Ok(self.push(out, Op::StraightThrough { z }))
    }

    /// Identity in the forward pass, blocks all gradient.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let out = self.value(x).clone();
        self.push(out, Op::StopGrad)
    }

    /// Block-superdiagonal bilinear product. `x, y: [N, R·c]`,
    /// `cores: [R, c, c, c']` → `[N, R·c']` with
    /// `out[n, r·c' + k] = Σ_{m,p} x[n, r·c + m] · y[n, r·c + p] · cores[r, m, p, k]`.
    pub fn block_bilinear(&mut self, x: Var, y: Var, cores: Var) -> Result<Var> {
        let (tx, ty, tc) = (self.value(x), self.value(y), self.value(cores));
        tx.expect_rank("block_bilinear", 2)?;
        tx.expect_same_shape("block_bilinear", ty)?;
        tc.expect_rank("block_bilinear", 4)?;
        let [r, c, c_b, c_out] = [tc.shape()[0], tc.shape()[1], tc.shape()[2], tc.shape()[3]];
        if c != c_b {
            return Err(dim_err("block_bilinear", "2 (core chunk)", c, c_b));
        }
        let (n, d) = (tx.shape()[0], tx.shape()[1]);
        if d != r * c {
            return Err(dim_err("block_bilinear", "1 (R·c)", r * c, d));
        }
        let mut out = vec![T::zero(); n * r * c_out];
        for b in 0..n {
            for blk in 0..r {
                let xr = &tx.data()[b * d + blk * c..b * d + (blk + 1) * c];
                let yr = &ty.data()[b * d + blk * c..b * d + (blk + 1) * c];
                let core = &tc.data()[blk * c * c * c_out..(blk + 1) * c * c * c_out];
                let o = &mut out[(b * r + blk) * c_out..(b * r + blk + 1) * c_out];
                for m in 0..c {
                    for p in 0..c {
                        let w = xr[m] * yr[p];
                        let cr = &core[(m * c + p) * c_out..(m * c + p + 1) * c_out];
                        for (ov, &cv) in o.iter_mut().zip(cr) {
                            *ov += w * cv;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[n, r * c_out], out)?;
        Ok(self.push(out, Op::BlockBilinear { x, y, cores }))
    }

    /// Mean over the last axis of `x[N, C, T]` restricted to positions where
    /// `mask[N, T]` is nonzero; divides by the mask sum, not `T`.
    pub fn masked_mean(&mut self, x: Var, mask: &Tensor<T>) -> Result<Var> {
        let tx = self.value(x);
        tx.expect_rank("masked_mean", 3)?;
        mask.expect_rank("masked_mean", 2)?;
        let (n, c, t) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        if mask.shape()[0] != n {
            return Err(dim_err("masked_mean", "0 (batch)", n, mask.shape()[0]));
        }
        if mask.shape()[1] != t {
            return Err(dim_err("masked_mean", "2 (time)", t, mask.shape()[1]));
        }
        let mut out = vec![T::zero(); n * c];
        for b in 0..n {
            let m = &mask.data()[b * t..(b + 1) * t];
            let msum: T = m.iter().copied().sum();
            if msum <= T::zero() {
                return Err(TensorError::Invalid {
                    op: "masked_mean",
                    msg: format!("mask of batch item {b} is all zero"),
                });
            }
            for ch in 0..c {
                let row = &tx.data()[(b * c + ch) * t..(b * c + ch + 1) * t];
                let s: T = row.iter().zip(m).map(|(&v, &w)| v * w).sum();
                out[b * c + ch] = s / msum;
            }
        }
        let out = Tensor::new(&[n, c], out)?;
        Ok(self.push(
            out,
            Op::MaskedMean {
                x,
                mask: mask.data().to_vec(),
            },
        ))
    }

    /// `sign(x)·(sqrt(|x| + eps) - sqrt(eps))`, a smoothed signed square root.
    pub fn signed_sqrt(&mut self, x: Var, eps: T) -> Var {
        let se = eps.sqrt();
        let out = self.value(x).map(|v| v.signum() * ((v.abs() + eps).sqrt() - se));
        self.push(out, Op::SignedSqrt { x, eps })
    }

    /// Row-wise `x / sqrt(Σx² + 1e-12)` for `x[N, D]`.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        tx.expect_rank("l2_normalize_rows", 2)?;
        let d = tx.shape()[1];
        let tiny = T::from_f64_lossy(1e-12);
        let mut norms = Vec::with_capacity(tx.shape()[0]);
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(d) {
            let nrm = (row.iter().map(|&v| v * v).sum::<T>() + tiny).sqrt();
            for v in row.iter_mut() {
                *v = *v / nrm;
            }
            norms.push(nrm);
        }
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }))
    }

    /// Reverse pass from a scalar `loss`. Each recorded node is visited at
    /// most once, in reverse execution order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: "empty tape".into(),
            });
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((i, id)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params, visited })
    }

    /// Backward pass followed by [`Gradients::accumulate_into`].
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let g = self.backward(loss)?;
        g.accumulate_into(store);
        Ok(g)
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Constant | Op::Param(_) | Op::StopGrad => {}
            Op::Conv2d { x, k, spec } => {
                let (gx, gk) = conv::conv2d_backward(val(*x), val(*k), g, *spec);
                acc(&mut grads[x.0], gx);
                acc(&mut grads[k.0], gk);
            }
            Op::ConvTranspose2d { x, k, spec } => {
                let (gx, gk) = conv::conv_transpose_backward(val(*x), val(*k), g, *spec);
                acc(&mut grads[x.0], gx);
                acc(&mut grads[k.0], gk);
            }
            Op::ChannelBias { x, b } => {
                let c = g.shape()[1];
                let inner: usize = g.shape()[2..].iter().product();
                let mut gb = vec![T::zero(); c];
                for (j, &v) in g.data().iter().enumerate() {
                    gb[(j / inner) % c] += v;
                }
                acc(&mut grads[x.0], g.clone());
                acc(&mut grads[b.0], Tensor::new(val(*b).shape(), gb).expect("bias"));
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (val(*x), val(*w));
                let (n, d) = (tx.shape()[0], tx.shape()[1]);
                let m = tw.shape()[1];
                let mut gx = vec![T::zero(); n * d];
                // gx = g · wᵀ
                T::gemm(
                    n,
                    m,
                    d,
                    g.data(),
                    m as isize,
                    1,
                    tw.data(),
                    1,
                    m as isize,
                    T::zero(),
                    &mut gx,
                    d as isize,
                    1,
                );
                let mut gw = vec![T::zero(); d * m];
                // gw = xᵀ · g
                T::gemm(
                    d,
                    n,
                    m,
                    tx.data(),
                    1,
                    d as isize,
                    g.data(),
                    m as isize,
                    1,
                    T::zero(),
                    &mut gw,
                    m as isize,
                    1,
                );
                acc(&mut grads[x.0], Tensor::new(tx.shape(), gx).expect("gx"));
                acc(&mut grads[w.0], Tensor::new(tw.shape(), gw).expect("gw"));
                if let Some(b) = b {
                    let mut gb = vec![T::zero(); m];
                    for row in g.data().chunks(m) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    acc(&mut grads[b.0], Tensor::new(val(*b).shape(), gb).expect("gb"));
                }
            }
            Op::Relu(x) => {
                let tx = val(*x);
                let data = tx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                acc(&mut grads[x.0], Tensor::new(tx.shape(), data).expect("relu"));
            }
            Op::Add(a, b) => {
                acc(&mut grads[a.0], g.clone());
                acc(&mut grads[b.0], g.clone());
            }
            Op::Sub(a, b) => {
                acc(&mut grads[a.0], g.clone());
                acc(&mut grads[b.0], g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ga = g.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
                let gb = g.data().iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
                acc(&mut grads[a.0], Tensor::new(ta.shape(), ga).expect("mul"));
                acc(&mut grads[b.0], Tensor::new(tb.shape(), gb).expect("mul"));
            }
            Op::Scale(x, s) => {
                let s = *s;
                acc(&mut grads[x.0], g.map(|v| v * s));
            }
            Op::Square(x) => {
                let tx = val(*x);
                let two = T::one() + T::one();
                let data = tx.data().iter().zip(g.data()).map(|(&v, &gv)| two * v * gv).collect();
                acc(&mut grads[x.0], Tensor::new(tx.shape(), data).expect("square"));
            }
            Op::Exp(x) => {
                let data = node.value.data().iter().zip(g.data()).map(|(&e, &gv)| e * gv).collect();
                acc(&mut grads[x.0], Tensor::new(val(*x).shape(), data).expect("exp"));
            }
            Op::Sum(x) => {
                acc(&mut grads[x.0], Tensor::full(val(*x).shape(), g.item()));
            }
            Op::Mean(x) => {
                let tx = val(*x);
                let n = T::from_usize(tx.numel()).unwrap();
                acc(&mut grads[x.0], Tensor::full(tx.shape(), g.item() / n));
            }
            Op::Reshape(x) => {
                acc(&mut grads[x.0], g.reshape(val(*x).shape()).expect("reshape"));
            }
            Op::Mse(p, t) => {
                let (tp, tt) = (val(*p), val(*t));
                let scale = (T::one() + T::one()) * g.item() / T::from_usize(tp.numel()).unwrap();
                let gp: Vec<T> = tp
                    .data()
                    .iter()
                    .zip(tt.data())
                    .map(|(&a, &b)| scale * (a - b))
                    .collect();
                let gt = gp.iter().map(|&v| -v).collect();
                acc(&mut grads[p.0], Tensor::new(tp.shape(), gp).expect("mse"));
                acc(&mut grads[t.0], Tensor::new(tt.shape(), gt).expect("mse"));
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let tl = val(*logits);
                let c = tl.shape()[1];
                let n = T::from_usize(targets.len()).unwrap();
                let scale = g.item() / n;
                let mut gl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * c + t] -= T::one();
                }
                for v in gl.iter_mut() {
                    *v *= scale;
                }
                acc(&mut grads[logits.0], Tensor::new(tl.shape(), gl).expect("ce"));
            }
            Op::GatherRows { table, indices } => {
                let tt = val(*table);
                let l = tt.shape()[1];
                let mut gt = Tensor::zeros(tt.shape());
                for (r, &idx) in indices.iter().enumerate() {
                    let dst = &mut gt.data_mut()[idx * l..(idx + 1) * l];
                    for (a, &v) in dst.iter_mut().zip(&g.data()[r * l..(r + 1) * l]) {
                        *a += v;
                    }
                }
                acc(&mut grads[table.0], gt);
            }
            Op::StraightThrough { z } => {
                acc(&mut grads[z.0], g.clone());
            }
            Op::BlockBilinear { x, y, cores } => {
                let (tx, ty, tc) = (val(*x), val(*y), val(*cores));
                let [r, c, _, c_out] = [tc.shape()[0], tc.shape()[1], tc.shape()[2], tc.shape()[3]];
                let (n, d) = (tx.shape()[0], tx.shape()[1]);
                let mut gx = vec![T::zero(); n * d];
                let mut gy = vec![T::zero(); n * d];
                let mut gc = vec![T::zero(); tc.numel()];
                for b in 0..n {
                    for blk in 0..r {
                        let off = b * d + blk * c;
                        let go = &g.data()[(b * r + blk) * c_out..(b * r + blk + 1) * c_out];
                        let core = &tc.data()[blk * c * c * c_out..(blk + 1) * c * c * c_out];
                        let gcore = &mut gc[blk * c * c * c_out..(blk + 1) * c * c * c_out];
                        for m in 0..c {
                            let xm = tx.data()[off + m];
                            for p in 0..c {
                                let yp = ty.data()[off + p];
                                let base = (m * c + p) * c_out;
                                let cr = &core[base..base + c_out];
                                // s = Σ_k go[k]·core[m,p,k]
                                let s: T = go.iter().zip(cr).map(|(&a, &b)| a * b).sum();
                                gx[off + m] += s * yp;
                                gy[off + p] += s * xm;
                                let w = xm * yp;
                                for (gcv, &gv) in gcore[base..base + c_out].iter_mut().zip(go) {
                                    *gcv += w * gv;
                                }
                            }
                        }
                    }
                }
                acc(&mut grads[x.0], Tensor::new(tx.shape(), gx).expect("bb"));
                acc(&mut grads[y.0], Tensor::new(ty.shape(), gy).expect("bb"));
                acc(&mut grads[cores.0], Tensor::new(tc.shape(), gc).expect("bb"));
            }
            Op::MaskedMean { x, mask } => {
                let tx = val(*x);
                let (n, c, t) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let mut gx = vec![T::zero(); tx.numel()];
                for b in 0..n {
                    let m = &mask[b * t..(b + 1) * t];
                    let msum: T = m.iter().copied().sum();
                    for ch in 0..c {
                        let gv = g.data()[b * c + ch] / msum;
                        let dst = &mut gx[(b * c + ch) * t..(b * c + ch + 1) * t];
                        for (a, &w) in dst.iter_mut().zip(m) {
                            *a = gv * w;
                        }
                    }
                }
                acc(&mut grads[x.0], Tensor::new(tx.shape(), gx).expect("masked_mean"));
            }
            Op::SignedSqrt { x, eps } => {
                let tx = val(*x);
                let two = T::one() + T::one();
                let data = tx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| gv / (two * (v.abs() + *eps).sqrt()))
                    .collect();
                acc(&mut grads[x.0], Tensor::new(tx.shape(), data).expect("ssqrt"));
            }
            Op::L2NormalizeRows { x, norms } => {
                let tx = val(*x);
                let d = tx.shape()[1];
                let mut gx = vec![T::zero(); tx.numel()];
                for (r, &nrm) in norms.iter().enumerate() {
                    let yr = &node.value.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] = (gr[j] - yr[j] * dot) / nrm;
                    }
                }
                acc(&mut grads[x.0], Tensor::new(tx.shape(), gx).expect("l2n"));
            }
        }
    }
}

/// Numerically stable softmax of one row; also returns log-sum-exp.
pub fn softmax_row<T: Scalar>(row: &[T]) -> (Vec<T>, T) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let z: T = exps.iter().copied().sum();
    let lse = max + z.ln();
    (exps.into_iter().map(|e| e / z).collect(), lse)
}

//! Reverse-mode automatic differentiation over dense `ndarray` tensors.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays it in reverse from a scalar root. Channel-carrying tensors keep
//! channels on the last axis, so sequences are laid out `N × T × V × C`.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis, IxDyn, Zip};

use crate::scalar::Scalar;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Sparse partitioned adjacency: `parts[k]` lists `(row, col, weight)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseAdjacency<S> {
    pub joints: usize,
    pub parts: Vec<Vec<(usize, usize, S)>>,
}

impl<S: Scalar> SparseAdjacency<S> {
    pub fn partitions(&self) -> usize {
        self.parts.len()
    }

    pub fn from_dense(stack: &[Array2<S>]) -> Self {
        let joints = stack.first().map(|a| a.nrows()).unwrap_or(0);
        let parts = stack
            .iter()
            .map(|a| {
                a.indexed_iter()
                    .filter(|(_, w)| **w != S::zero())
                    .map(|((i, j), w)| (i, j, *w))
                    .collect()
            })
            .collect();
        Self { joints, parts }
    }
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    MulChannel(Var, Var),
    AddChannel(Var, Var),
    Scale(Var, S),
    MulConst(Var, ArrayD<S>),
    Relu(Var),
    Exp(Var),
    Log(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    MeanAll(Var),
    ConcatLast(Var, Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    BatchNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Array2<S>,
        inv_std: Array1<S>,
        train: bool,
    },
    GraphMix {
        x: Var,
        adj: Arc<SparseAdjacency<S>>,
    },
    TemporalConv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        col: Array2<S>,
    },
    SoftmaxCe {
        logits: Var,
        targets: Array2<S>,
        probs: Array2<S>,
        active: Array2<S>,
    },
    Softmax(Var),
    Bmm {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
}

struct Node<S> {
    value: ArrayD<S>,
    op: Op<S>,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    n: usize,
    t_in: usize,
    t_out: usize,
    v: usize,
    c_in: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

/// Batch statistics produced by a training-mode normalisation, used for the
/// caller's running averages.
#[derive(Clone, Debug)]
pub struct BatchStats<S> {
    pub mean: Array1<S>,
    /// Biased variance over the normalised rows.
    pub var: Array1<S>,
    pub count: usize,
}

pub enum NormMode<'a, S> {
    Train { eps: S },
    Eval {
        mean: &'a Array1<S>,
        var: &'a Array1<S>,
        eps: S,
    },
}

/// Gradients of a scalar root with respect to every recorded tensor that
/// requires them.
pub struct Grads<S> {
    grads: Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn view2<S>(a: &ArrayD<S>, cols: usize) -> ArrayView2<'_, S> {
    let rows = if cols == 0 { 0 } else { a.len() / cols };
    a.view()
        .into_shape_with_order((rows, cols))
        .expect("tape tensors are kept in standard layout")
}

fn into_dyn<S, D: ndarray::Dimension>(a: ndarray::Array<S, D>) -> ArrayD<S>
where
    S: Clone,
{
    let a = if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    };
    a.into_dyn()
}

#[derive(Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<S>, op: Op<S>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: into_dyn(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: ArrayD<S>) -> Var {
        self.nodes.push(Node {
            value: into_dyn(value),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: ArrayD<S>) -> Var {
        self.nodes.push(Node {
            value: into_dyn(value),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// The value of a scalar (single-element) tensor.
    pub fn scalar(&self, v: Var) -> S {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on a tensor of {} elements", val.len());
        *val.iter().next().unwrap()
    }

    fn last_dim(&self, v: Var) -> usize {
        *self.shape(v).last().expect("tensor has at least one axis")
    }

    /// `a [m,k] · b [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(av.ndim() == 2 && bv.ndim() == 2, "matmul takes matrices");
        let y = view2(av, av.shape()[1]).dot(&view2(bv, bv.shape()[1]));
        self.push(y.into_dyn(), Op::MatMul(a, b), &[a, b])
    }

    /// Dense map over the last axis: `x [..., in] · w [in, out] + b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let wv = self.value(w);
        let (din, dout) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(self.last_dim(x), din, "linear input width");
        let mut y = view2(self.value(x), din).dot(&view2(wv, dout));
        if let Some(b) = b {
            let bv = self.value(b).view().into_shape_with_order(dout).unwrap();
            y += &bv;
        }
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = dout;
        let y = into_dyn(y).into_shape_with_order(IxDyn(&shape)).unwrap();
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(y, Op::Linear { x, w, b }, &parents)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let y = self.value(a) + self.value(b);
        self.push(y, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -S::one());
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let y = self.value(a) * self.value(b);
        self.push(y, Op::Mul(a, b), &[a, b])
    }

    /// Per-channel scale: `x [..., C] ⊙ w [C]`.
    pub fn mul_channel(&mut self, x: Var, w: Var) -> Var {
        let c = self.last_dim(x);
        let wv = self.value(w).view().into_shape_with_order(c).unwrap();
        let y = self.value(x) * &wv;
        self.push(y, Op::MulChannel(x, w), &[x, w])
    }

    /// Per-channel shift: `x [..., C] + b [C]`.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Var {
        let c = self.last_dim(x);
        let bv = self.value(b).view().into_shape_with_order(c).unwrap();
        let y = self.value(x) + &bv;
        self.push(y, Op::AddChannel(x, b), &[x, b])
    }

    pub fn scale(&mut self, x: Var, s: S) -> Var {
        let y = self.value(x).mapv(|v| v * s);
        self.push(y, Op::Scale(x, s), &[x])
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, c: ArrayD<S>) -> Var {
        assert_eq!(self.shape(x), c.shape(), "mul_const shapes");
        let y = self.value(x) * &c;
        self.push(y, Op::MulConst(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| if v > S::zero() { v } else { S::zero() });
        self.push(y, Op::Relu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| v.exp());
        self.push(y, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| v.ln());
        self.push(y, Op::Log(x), &[x])
    }

    /// Arithmetic mean along `axis`, which is removed.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let y = self
            .value(x)
            .mean_axis(Axis(axis))
            .expect("mean over a non-empty axis");
        self.push(y, Op::MeanAxis { x, axis }, &[x])
    }

    /// Mean of every element, as a 0-d tensor.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.sum() / S::of(v.len() as f64);
        self.push(ArrayD::from_elem(IxDyn(&[]), m), Op::MeanAll(x), &[x])
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let ax = Axis(av.ndim() - 1);
        let y = ndarray::concatenate(ax, &[av.view(), bv.view()]).expect("concat shapes");
        self.push(y, Op::ConcatLast(a, b), &[a, b])
    }

    /// Rows `start..end` of the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let y = self.value(x).slice_axis(Axis(0), (start..end).into()).to_owned();
        self.push(y, Op::SliceRows { x, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let y = self
            .value(x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape preserves element count");
        self.push(y, Op::Reshape(x), &[x])
    }

    /// Normalises every channel (last axis) over all remaining axes, then
    /// applies the optional affine `gamma ⊙ x̂ + beta`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mode: NormMode<'_, S>,
    ) -> (Var, Option<BatchStats<S>>) {
        let c = self.last_dim(x);
        let x2 = view2(self.value(x), c);
        let rows = x2.nrows();
        let (mean, inv_std, stats, train) = match mode {
            NormMode::Train { eps } => {
                let n = S::of(rows as f64);
                let mean = x2.sum_axis(Axis(0)) / n;
                let mut var = Array1::<S>::zeros(c);
                for row in x2.rows() {
                    Zip::from(&mut var).and(&row).and(&mean).for_each(|v, &x, &m| {
                        let d = x - m;
                        *v += d * d;
                    });
                }
                var.mapv_inplace(|v| v / n);
                let inv_std = var.mapv(|v| S::one() / (v + eps).sqrt());
                let stats = BatchStats {
                    mean: mean.clone(),
                    var,
                    count: rows,
                };
                (mean, inv_std, Some(stats), true)
            }
            NormMode::Eval { mean, var, eps } => {
                (mean.clone(), var.mapv(|v| S::one() / (v + eps).sqrt()), None, false)
            }
        };
        let mut xhat = x2.to_owned();
        for mut row in xhat.rows_mut() {
            Zip::from(&mut row)
                .and(&mean)
                .and(&inv_std)
                .for_each(|v, &m, &s| *v = (*v - m) * s);
        }
        let mut y = xhat.clone();
        if let Some(g) = gamma {
            let gv = self.value(g).view().into_shape_with_order(c).unwrap();
            y *= &gv;
        }
        if let Some(b) = beta {
            let bv = self.value(b).view().into_shape_with_order(c).unwrap();
            y += &bv;
        }
        let y = y.into_shape_with_order(IxDyn(self.shape(x))).unwrap();
        let mut parents = vec![x];
        parents.extend(gamma);
        parents.extend(beta);
        let out = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &parents,
        );
        (out, stats)
    }

    /// Spatial graph aggregation per partition: for `x [N,T,V,C]` returns
    /// `[N,T,V,K·C]` whose k-th channel block is `A_k · x` over the joint axis.
    pub fn graph_mix(&mut self, x: Var, adj: Arc<SparseAdjacency<S>>) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 4, "graph_mix takes N×T×V×C");
        let (nt, v, c) = (shape[0] * shape[1], shape[2], shape[3]);
        assert_eq!(v, adj.joints, "adjacency joint count");
        let k = adj.partitions();
        let xs = self.value(x).as_slice().unwrap();
        let mut out = vec![S::zero(); nt * v * k * c];
        for f in 0..nt {
            let xin = &xs[f * v * c..(f + 1) * v * c];
            let o = &mut out[f * v * k * c..(f + 1) * v * k * c];
            for (p, part) in adj.parts.iter().enumerate() {
                for &(i, j, a) in part {
                    let dst = &mut o[i * k * c + p * c..i * k * c + (p + 1) * c];
                    let src = &xin[j * c..(j + 1) * c];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += a * s;
                    }
                }
            }
        }
        let y = ArrayD::from_shape_vec(IxDyn(&[shape[0], shape[1], v, k * c]), out).unwrap();
        self.push(y, Op::GraphMix { x, adj }, &[x])
    }

    /// Temporal convolution applied independently at every joint of
    /// `x [N,T,V,C]`, with `w [kernel·C, C_out]` and zero padding
    /// `(kernel − 1) / 2`.
    pub fn temporal_conv(&mut self, x: Var, w: Var, b: Option<Var>, kernel: usize, stride: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 4, "temporal_conv takes N×T×V×C");
        assert!(kernel % 2 == 1 && stride >= 1, "odd kernel and positive stride");
        let pad = (kernel - 1) / 2;
        let (n, t_in, v, c_in) = (shape[0], shape[1], shape[2], shape[3]);
        let t_out = (t_in + 2 * pad - kernel) / stride + 1;
        let geom = ConvGeometry {
            n,
            t_in,
            t_out,
            v,
            c_in,
            kernel,
            stride,
            pad,
        };
        let wv = self.value(w);
        assert_eq!(wv.shape()[0], kernel * c_in, "temporal_conv weight rows");
        let c_out = wv.shape()[1];
        let xs = self.value(x).as_slice().unwrap();
        let width = kernel * c_in;
        let mut col = vec![S::zero(); n * t_out * v * width];
        for b_ in 0..n {
            for to in 0..t_out {
                for j in 0..kernel {
                    let ti = (to * stride + j) as isize - pad as isize;
                    if ti < 0 || ti >= t_in as isize {
                        continue;
                    }
                    let ti = ti as usize;
                    for vv in 0..v {
                        let row = (b_ * t_out + to) * v + vv;
                        let src = ((b_ * t_in + ti) * v + vv) * c_in;
                        col[row * width + j * c_in..row * width + (j + 1) * c_in]
                            .copy_from_slice(&xs[src..src + c_in]);
                    }
                }
            }
        }
        let col = Array2::from_shape_vec((n * t_out * v, width), col).unwrap();
        let mut y = col.dot(&view2(wv, c_out));
        if let Some(b) = b {
            let bv = self.value(b).view().into_shape_with_order(c_out).unwrap();
            y += &bv;
        }
        let y = y.into_shape_with_order(IxDyn(&[n, t_out, v, c_out])).unwrap();
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(y, Op::TemporalConv { x, w, b, geom, col }, &parents)
    }

    /// Mean cross-entropy between `softmax(logits)` and soft `targets`
    /// (rows summing to one). Log-probabilities are clamped at `ln 1e-12`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Array2<S>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.ndim(), 2, "logits are N×K");
        let k = lv.shape()[1];
        let l2 = view2(lv, k);
        assert_eq!(targets.dim(), l2.dim(), "targets match logits");
        let floor = S::of(1e-12f64.ln());
        let mut probs = Array2::<S>::zeros(l2.dim());
        let mut active = Array2::<S>::zeros(l2.dim());
        let mut total = S::zero();
        for (r, row) in l2.rows().into_iter().enumerate() {
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<S>().ln();
            for j in 0..k {
                let logp = row[j] - lse;
                probs[[r, j]] = logp.exp();
                let t = targets[[r, j]];
                if logp >= floor {
                    active[[r, j]] = S::one();
                    total -= t * logp;
                } else {
                    total -= t * floor;
                }
            }
        }
        let n = S::of(l2.nrows().max(1) as f64);
        let out = ArrayD::from_elem(IxDyn(&[]), total / n);
        self.push(
            out,
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
                active,
            },
            &[logits],
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let c = self.last_dim(x);
        let mut y = view2(self.value(x), c).to_owned();
        for mut row in y.rows_mut() {
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            row.mapv_inplace(|z| (z - m).exp());
            let s = row.sum();
            row.mapv_inplace(|z| z / s);
        }
        let y = y.into_shape_with_order(IxDyn(self.shape(x))).unwrap();
        self.push(y, Op::Softmax(x), &[x])
    }

    /// Batched product `a [B,m,k] · b [B,k,n]`, or `a · bᵀ` with `b [B,n,k]`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(av.ndim() == 3 && bv.ndim() == 3, "bmm takes 3-d tensors");
        let batch = av.shape()[0];
        let m = av.shape()[1];
        let n = if transpose_b { bv.shape()[1] } else { bv.shape()[2] };
        let mut y = ndarray::Array3::<S>::zeros((batch, m, n));
        for i in 0..batch {
            let ai = av.index_axis(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
            let bi = bv.index_axis(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
            let prod = if transpose_b { ai.dot(&bi.t()) } else { ai.dot(&bi) };
            y.index_axis_mut(Axis(0), i).assign(&prod);
        }
        self.push(y.into_dyn(), Op::Bmm { a, b, transpose_b }, &[a, b])
    }

    /// Gradients of the scalar `root` with respect to every differentiable
    /// tensor recorded before it.
    pub fn backward(&self, root: Var) -> Grads<S> {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<ArrayD<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(self.value(root).raw_dim(), S::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, g, &mut grads);
        }
        Grads { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: &Op<S>, out: &ArrayD<S>, g: ArrayD<S>, grads: &mut [Option<ArrayD<S>>]) {
        let mut acc = |v: Var, d: ArrayD<S>| {
            let d = into_dyn(d);
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot @ None => *slot = Some(d),
            }
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let g2 = view2(&g, g.shape()[1]);
                if self.wants(*a) {
                    acc(*a, g2.dot(&view2(bv, bv.shape()[1]).t()).into_dyn());
                }
                if self.wants(*b) {
                    acc(*b, view2(av, av.shape()[1]).t().dot(&g2).into_dyn());
                }
            }
            Op::Linear { x, w, b } => {
                let wv = self.value(*w);
                let (din, dout) = (wv.shape()[0], wv.shape()[1]);
                let g2 = view2(&g, dout);
                if self.wants(*x) {
                    let gx = g2.dot(&view2(wv, dout).t());
                    acc(*x, into_dyn(gx).into_shape_with_order(IxDyn(self.shape(*x))).unwrap());
                }
                if self.wants(*w) {
                    acc(*w, view2(self.value(*x), din).t().dot(&g2).into_dyn());
                }
                if let Some(b) = b {
                    let gb = g2.sum_axis(Axis(0));
                    acc(*b, into_dyn(gb).into_shape_with_order(IxDyn(self.shape(*b))).unwrap());
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g);
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(*a, &g * self.value(*b));
                }
                if self.wants(*b) {
                    acc(*b, &g * self.value(*a));
                }
            }
            Op::MulChannel(x, w) => {
                let c = self.last_dim(*x);
                let wv = self.value(*w).view().into_shape_with_order(c).unwrap();
                if self.wants(*w) {
                    let gw = (&view2(&g, c) * &view2(self.value(*x), c)).sum_axis(Axis(0));
                    acc(*w, into_dyn(gw).into_shape_with_order(IxDyn(self.shape(*w))).unwrap());
                }
                if self.wants(*x) {
                    acc(*x, &g * &wv);
                }
            }
            Op::AddChannel(x, b) => {
                let c = self.last_dim(*x);
                if self.wants(*b) {
                    let gb = view2(&g, c).sum_axis(Axis(0));
                    acc(*b, into_dyn(gb).into_shape_with_order(IxDyn(self.shape(*b))).unwrap());
                }
                acc(*x, g);
            }
            Op::Scale(x, s) => acc(*x, g.mapv(|v| v * *s)),
            Op::MulConst(x, c) => acc(*x, &g * c),
            Op::Relu(x) => {
                let mut gx = g;
                Zip::from(&mut gx).and(out).for_each(|d, &y| {
                    if y <= S::zero() {
                        *d = S::zero();
                    }
                });
                acc(*x, gx);
            }
            Op::Exp(x) => acc(*x, &g * out),
            Op::Log(x) => acc(*x, &g / self.value(*x)),
            Op::MeanAxis { x, axis } => {
                let xs = self.shape(*x);
                let n = S::of(xs[*axis] as f64);
                let gx = g.insert_axis(Axis(*axis));
                let gx = gx.broadcast(IxDyn(xs)).unwrap().mapv(|v| v / n);
                acc(*x, gx);
            }
            Op::MeanAll(x) => {
                let xs = self.value(*x);
                let gv = *g.iter().next().unwrap() / S::of(xs.len() as f64);
                acc(*x, ArrayD::from_elem(xs.raw_dim(), gv));
            }
            Op::ConcatLast(a, b) => {
                let ca = self.last_dim(*a);
                let ax = Axis(g.ndim() - 1);
                let (ga, gb) = g.view().split_at(ax, ca);
                acc(*a, ga.to_owned());
                acc(*b, gb.to_owned());
            }
            Op::SliceRows { x, start } => {
                let mut gx = ArrayD::zeros(IxDyn(self.shape(*x)));
                let n = g.shape()[0];
                gx.slice_axis_mut(Axis(0), (*start..*start + n).into()).assign(&g);
                acc(*x, gx);
            }
            Op::Reshape(x) => {
                let gx = into_dyn(g).into_shape_with_order(IxDyn(self.shape(*x))).unwrap();
                acc(*x, gx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let g2 = view2(&g, c);
                if let Some(gm) = gamma {
                    acc(*gm, into_dyn((&g2 * xhat).sum_axis(Axis(0))));
                }
                if let Some(bt) = beta {
                    acc(*bt, into_dyn(g2.sum_axis(Axis(0))));
                }
                if self.wants(*x) {
                    let mut dxhat = g2.to_owned();
                    if let Some(gm) = gamma {
                        let gv = self.value(*gm).view().into_shape_with_order(c).unwrap();
                        dxhat *= &gv;
                    }
                    let dx = if *train {
                        let m = S::of(dxhat.nrows() as f64);
                        let sum_d = dxhat.sum_axis(Axis(0));
                        let sum_dx = (&dxhat * xhat).sum_axis(Axis(0));
                        let mut dx = dxhat;
                        Zip::from(dx.rows_mut()).and(xhat.rows()).for_each(|mut d, xh| {
                            for j in 0..c {
                                d[j] = inv_std[j] * (d[j] - sum_d[j] / m - xh[j] * sum_dx[j] / m);
                            }
                        });
                        dx
                    } else {
                        dxhat * inv_std
                    };
                    acc(*x, into_dyn(dx).into_shape_with_order(IxDyn(self.shape(*x))).unwrap());
                }
            }
            Op::GraphMix { x, adj } => {
                let shape = self.shape(*x);
                let (nt, v, c) = (shape[0] * shape[1], shape[2], shape[3]);
                let k = adj.partitions();
                let gs = g.as_slice().unwrap();
                let mut gx = vec![S::zero(); nt * v * c];
                for f in 0..nt {
                    let gin = &gs[f * v * k * c..(f + 1) * v * k * c];
                    let o = &mut gx[f * v * c..(f + 1) * v * c];
                    for (p, part) in adj.parts.iter().enumerate() {
                        for &(i, j, a) in part {
                            let src = &gin[i * k * c + p * c..i * k * c + (p + 1) * c];
                            let dst = &mut o[j * c..(j + 1) * c];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += a * s;
                            }
                        }
                    }
                }
                acc(*x, ArrayD::from_shape_vec(IxDyn(shape), gx).unwrap());
            }
            Op::TemporalConv { x, w, b, geom, col } => {
                let wv = self.value(*w);
                let c_out = wv.shape()[1];
                let g2 = view2(&g, c_out);
                if self.wants(*w) {
                    acc(*w, col.t().dot(&g2).into_dyn());
                }
                if let Some(b) = b {
                    acc(*b, into_dyn(g2.sum_axis(Axis(0))));
                }
                if self.wants(*x) {
                    let gcol = g2.dot(&view2(wv, c_out).t());
                    let gc = gcol.as_slice().unwrap();
                    let ConvGeometry {
                        n,
                        t_in,
                        t_out,
                        v,
                        c_in,
                        kernel,
                        stride,
                        pad,
                    } = *geom;
                    let width = kernel * c_in;
                    let mut gx = vec![S::zero(); n * t_in * v * c_in];
                    for b_ in 0..n {
                        for to in 0..t_out {
                            for j in 0..kernel {
                                let ti = (to * stride + j) as isize - pad as isize;
                                if ti < 0 || ti >= t_in as isize {
                                    continue;
                                }
                                let ti = ti as usize;
                                for vv in 0..v {
                                    let row = (b_ * t_out + to) * v + vv;
                                    let dst = ((b_ * t_in + ti) * v + vv) * c_in;
                                    let src = &gc[row * width + j * c_in..row * width + (j + 1) * c_in];
                                    for (d, &s) in gx[dst..dst + c_in].iter_mut().zip(src) {
                                        *d += s;
                                    }
                                }
                            }
                        }
                    }
                    acc(*x, ArrayD::from_shape_vec(IxDyn(self.shape(*x)), gx).unwrap());
                }
            }
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
                active,
            } => {
                let scale = *g.iter().next().unwrap() / S::of(probs.nrows().max(1) as f64);
                let mut gl = Array2::<S>::zeros(probs.dim());
                for r in 0..probs.nrows() {
                    let weight: S = (0..probs.ncols()).map(|j| targets[[r, j]] * active[[r, j]]).sum();
                    for j in 0..probs.ncols() {
                        gl[[r, j]] = scale * (weight * probs[[r, j]] - targets[[r, j]] * active[[r, j]]);
                    }
                }
                acc(*logits, gl.into_dyn());
            }
            Op::Softmax(x) => {
                let c = self.last_dim(*x);
                let y2 = view2(out, c);
                let mut gx = view2(&g, c).to_owned();
                Zip::from(gx.rows_mut()).and(y2.rows()).for_each(|mut gr, yr| {
                    let dot: S = gr.iter().zip(yr.iter()).map(|(&a, &b)| a * b).sum();
                    Zip::from(&mut gr).and(&yr).for_each(|d, &y| *d = y * (*d - dot));
                });
                acc(*x, into_dyn(gx).into_shape_with_order(IxDyn(self.shape(*x))).unwrap());
            }
            Op::Bmm { a, b, transpose_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let batch = av.shape()[0];
                let mut ga = ArrayD::<S>::zeros(av.raw_dim());
                let mut gb = ArrayD::<S>::zeros(bv.raw_dim());
                for i in 0..batch {
                    let ai = av.index_axis(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
                    let bi = bv.index_axis(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
                    let gi = g.index_axis(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
                    if *transpose_b {
                        // y = a bᵀ
                        ga.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi));
                        gb.index_axis_mut(Axis(0), i).assign(&gi.t().dot(&ai));
                    } else {
                        ga.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()));
                        gb.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi));
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array, ArrayD};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        Array::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Central differences of `f` at `x`, one coordinate at a time.
    fn numeric_grad(x: &ArrayD<f64>, f: &dyn Fn(&ArrayD<f64>) -> f64) -> ArrayD<f64> {
        let h = 1e-5;
        let mut g = ArrayD::zeros(x.raw_dim());
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            xm.as_slice_mut().unwrap()[i] -= h;
            g.as_slice_mut().unwrap()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &ArrayD<f64>, b: &ArrayD<f64>, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.iter().zip(b.iter()) {
            let denom = x.abs().max(y.abs()).max(1e-6);
            assert!((x - y).abs() / denom < tol, "{x} vs {y}");
        }
    }

    /// Checks the analytic gradient of `build(tape, input) -> scalar` against
    /// central differences with a fixed random readout.
    fn check(shape: &[usize], seed: u64, build: &dyn Fn(&mut Tape<f64>, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, shape);
        let f = |x: &ArrayD<f64>| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone());
            let y = build(&mut t, v);
            t.scalar(y)
        };
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let y = build(&mut t, v);
        let grads = t.backward(y);
        assert_close(grads.get(v).unwrap(), &numeric_grad(&x, &f), 1e-6);
    }

    fn readout(t: &mut Tape<f64>, y: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_tensor(&mut rng, t.shape(y));
        let p = t.mul_const(y, w);
        t.mean_all(p)
    }

    #[test]
    fn matmul_and_linear() {
        check(&[3, 4], 1, &|t, x| {
            let w = t.constant(arr2(&[[0.5, -1.0], [2.0, 0.1], [0.3, 0.3], [-0.7, 1.1]]).into_dyn());
            let b = t.constant(arr1(&[0.2, -0.4]).into_dyn());
            let y = t.linear(x, w, Some(b));
            readout(t, y, 9)
        });
        check(&[4, 2], 2, &|t, w| {
            let x = t.constant(arr2(&[[0.5, -1.0, 2.0, 0.1], [0.3, 0.3, -0.7, 1.1]]).into_dyn());
            let y = t.matmul(x, w);
            readout(t, y, 3)
        });
    }

    #[test]
    fn elementwise_ops() {
        check(&[2, 3], 4, &|t, x| {
            let e = t.exp(x);
            let r = t.relu(x);
            let m = t.mul(e, r);
            let s = t.scale(m, 0.7);
            let a = t.add(s, x);
            let l = t.log(e);
            let c = t.concat_last(a, l);
            readout(t, c, 5)
        });
    }

    #[test]
    fn channel_ops_and_means() {
        check(&[3], 6, &|t, w| {
            let x = t.constant(Array::from_shape_fn(IxDyn(&[2, 4, 3]), |i| (i[0] + 2 * i[1]) as f64 * 0.1 - i[2] as f64));
            let y = t.mul_channel(x, w);
            let z = t.add_channel(y, w);
            let m = t.mean_axis(z, 1);
            readout(t, m, 7)
        });
        check(&[2, 4, 3], 8, &|t, x| {
            let m = t.mean_axis(x, 0);
            let r = t.reshape(m, &[12]);
            readout(t, r, 1)
        });
    }

    #[test]
    fn slice_rows_grad() {
        check(&[4, 3], 8, &|t, x| {
            let a = t.slice_rows(x, 1, 3);
            let b = t.slice_rows(x, 0, 2);
            let y = t.mul(a, b);
            readout(t, y, 5)
        });
    }

    #[test]
    fn batch_norm_train_and_eval() {
        check(&[5, 3], 10, &|t, x| {
            let (y, _) = t.batch_norm(x, None, None, NormMode::Train { eps: 1e-5 });
            readout(t, y, 11)
        });
        check(&[3], 12, &|t, g| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let x = t.constant(rand_tensor(&mut rng, &[4, 2, 3]));
            let (y, _) = t.batch_norm(x, Some(g), Some(g), NormMode::Train { eps: 1e-5 });
            readout(t, y, 13)
        });
        let mean = arr1(&[0.1, -0.2, 0.3]);
        let var = arr1(&[1.5, 0.5, 2.0]);
        check(&[4, 3], 14, &|t, x| {
            let (y, stats) = t.batch_norm(x, None, None, NormMode::Eval { mean: &mean, var: &var, eps: 1e-5 });
            assert!(stats.is_none());
            readout(t, y, 15)
        });
    }

    #[test]
    fn batch_norm_statistics() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(arr2(&[[1.0, 2.0], [3.0, 6.0]]).into_dyn());
        let (y, stats) = t.batch_norm(x, None, None, NormMode::Train { eps: 0.0 });
        let stats = stats.unwrap();
        assert_eq!(stats.mean, arr1(&[2.0, 4.0]));
        assert_eq!(stats.var, arr1(&[1.0, 4.0]));
        assert_eq!(t.value(y).as_slice().unwrap(), &[-1.0, -1.0, 1.0, 1.0]);
    }

    #[test]
    fn graph_mix_and_temporal_conv() {
        let adj = Arc::new(SparseAdjacency {
            joints: 3,
            parts: vec![
                vec![(0, 0, 0.5), (1, 1, 1.0), (2, 2, 0.25)],
                vec![(0, 1, 0.3), (1, 0, 0.3), (2, 1, 0.7)],
            ],
        });
        let a2 = adj.clone();
        check(&[2, 4, 3, 2], 16, &move |t, x| {
            let y = t.graph_mix(x, a2.clone());
            readout(t, y, 17)
        });
        for stride in [1, 2] {
            check(&[2, 5, 3, 2], 18, &move |t, x| {
                let mut rng = ChaCha8Rng::seed_from_u64(4);
                let w = t.constant(rand_tensor(&mut rng, &[3 * 2, 4]));
                let b = t.constant(rand_tensor(&mut rng, &[4]));
                let y = t.temporal_conv(x, w, Some(b), 3, stride);
                readout(t, y, 19)
            });
            check(&[6, 4], 20, &move |t, w| {
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                let x = t.constant(rand_tensor(&mut rng, &[2, 5, 3, 2]));
                let y = t.temporal_conv(x, w, None, 3, stride);
                readout(t, y, 21)
            });
        }
    }

    #[test]
    fn temporal_conv_shapes_and_values() {
        let mut t = Tape::<f64>::new();
        // one joint, one channel, identity-at-centre kernel
        let x = t.constant(Array::from_shape_vec(IxDyn(&[1, 4, 1, 1]), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = t.constant(Array::from_shape_vec(IxDyn(&[3, 1]), vec![1.0, 10.0, 100.0]).unwrap());
        let y = t.temporal_conv(x, w, None, 3, 1);
        assert_eq!(t.value(y).as_slice().unwrap(), &[210.0, 321.0, 432.0, 43.0]);
        let y2 = t.temporal_conv(x, w, None, 3, 2);
        assert_eq!(t.value(y2).as_slice().unwrap(), &[210.0, 432.0]);
    }

    #[test]
    fn softmax_family() {
        check(&[3, 4], 22, &|t, x| {
            let targets = arr2(&[[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.5, 0.5], [0.0, 0.0, 0.0, 1.0]]);
            t.softmax_cross_entropy(x, targets)
        });
        check(&[2, 3, 4], 23, &|t, x| {
            let y = t.softmax(x);
            readout(t, y, 24)
        });
    }

    #[test]
    fn cross_entropy_of_equal_logits_is_log_k() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(ArrayD::zeros(IxDyn(&[2, 5])));
        let targets = arr2(&[[0.0, 1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0, 1.0]]);
        let l = t.softmax_cross_entropy(x, targets);
        assert!((t.scalar(l) - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn clamped_cross_entropy_stops_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(arr2(&[[0.0, 100.0]]).into_dyn());
        let l = t.softmax_cross_entropy(x, arr2(&[[1.0, 0.0]]));
        assert!((t.scalar(l) + 1e-12f64.ln()).abs() < 1e-9);
        let g = t.backward(l);
        assert!(g.get(x).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn batched_matmul() {
        for tb in [false, true] {
            check(&[2, 3, 4], 25, &move |t, a| {
                let mut rng = ChaCha8Rng::seed_from_u64(6);
                let b = t.leaf(rand_tensor(&mut rng, if tb { &[2, 5, 4] } else { &[2, 4, 5] }));
                let y = t.bmm(a, b, tb);
                readout(t, y, 26)
            });
            check(&[2, 4, 5], 27, &move |t, b| {
                let mut rng = ChaCha8Rng::seed_from_u64(7);
                let a = t.constant(rand_tensor(&mut rng, if tb { &[2, 3, 5] } else { &[2, 3, 4] }));
                let b = if tb { t.reshape(b, &[2, 4, 5]) } else { b };
                let y = t.bmm(a, b, tb);
                readout(t, y, 28)
            });
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::<f64>::new();
        let c = t.constant(arr1(&[1.0, 2.0]).into_dyn());
        let x = t.leaf(arr1(&[3.0, 4.0]).into_dyn());
        let y = t.mul(c, x);
        let m = t.mean_all(y);
        let g = t.backward(m);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().as_slice().unwrap(), &[0.5, 1.0]);
    }
}

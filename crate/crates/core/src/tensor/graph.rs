//! Reverse-mode autodiff over a tape of eagerly evaluated ops.
//!
//! A `Graph` owns every intermediate value; `Var` is an index into it and is
//! only meaningful for the graph that produced it. Values are computed at op
//! construction, gradients on `backward` from a scalar root. Creation order
//! is topological order, so backward is a single reverse sweep.
//!
//! After `backward`, gradients are retained for leaves only; intermediate
//! buffers are dropped as soon as they have been propagated.

use super::kernels::{
    bilinear_bwd, bilinear_fwd, conv2d_bwd, conv2d_fwd, matmul_acc, matmul_nt_acc, matmul_tn_acc,
    sigmoid, ConvGeom,
};
use super::{element_count, Result, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Var(usize);

const ROW_NORM_EPS: f64 = 1e-12;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Bilinear {
        x: Var,
        c: usize,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    },
    /// `map[i]` is the source flat index of output element `i`.
    Permute {
        x: Var,
        map: Vec<u32>,
    },
    Reshape(Var),
    Stack(Vec<Var>),
    RowNormalize {
        x: Var,
        n: usize,
        c: usize,
        norms: Vec<f64>,
    },
    BceLoss {
        z: Var,
        y: Var,
    },
    SoftmaxCe {
        z: Var,
        targets: Vec<usize>,
        n: usize,
        k: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    dims: Vec<usize>,
    value: Vec<f64>,
    requires: bool,
    op: Op,
}

/// Autodiff tape. See the module docs.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that participates in gradient computation.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.dims().to_vec(), t.data().to_vec(), true, Op::Leaf)
    }

    /// Leaf treated as a constant; no gradient is computed for it.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.dims().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].dims
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::from_vec(&self.nodes[v.0].dims, self.nodes[v.0].value.clone())
            .expect("node shape is consistent")
    }

    /// Gradient of the last backward pass; `None` for constants, for leaves
    /// unreached by the root, and for non-leaf nodes.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_vec(&self.nodes[v.0].dims, g.clone()).expect("grad shape matches"))
    }

    /// Clears all gradients and re-arms `backward`.
    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
        self.backward_done = false;
    }

    // ── op constructors ──────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.nodes[a.0].value.iter().map(|&x| x * s).collect();
        let dims = self.nodes[a.0].dims.clone();
        let req = self.nodes[a.0].requires;
        self.push(dims, value, req, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.iter().map(|&x| x.max(0.0)).collect();
        let dims = self.nodes[a.0].dims.clone();
        let req = self.nodes[a.0].requires;
        self.push(dims, value, req, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.iter().map(|&x| sigmoid(x)).collect();
        let dims = self.nodes[a.0].dims.clone();
        let req = self.nodes[a.0].requires;
        self.push(dims, value, req, Op::Sigmoid(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        let req = self.nodes[a.0].requires;
        self.push(Vec::new(), vec![s], req, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.len();
        if n == 0 {
            return Err(TensorError::BadArgument {
                what: "mean",
                why: "empty tensor".into(),
            });
        }
        let s = self.nodes[a.0].value.iter().sum::<f64>() / n as f64;
        let req = self.nodes[a.0].requires;
        Ok(self.push(Vec::new(), vec![s], req, Op::Mean(a)))
    }

    /// `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (&self.nodes[a.0].dims, &self.nodes[b.0].dims);
        if ad.len() != 2 || bd.len() != 2 {
            return Err(TensorError::BadRank {
                op: "matmul",
                got: if ad.len() != 2 { ad.len() } else { bd.len() },
            });
        }
        if ad[1] != bd[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                expected: vec![ad[1]],
                got: vec![bd[0]],
            });
        }
        let (m, k, n) = (ad[0], ad[1], bd[1]);
        let mut value = vec![0.0; m * n];
        matmul_acc(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n, &mut value);
        let req = self.nodes[a.0].requires || self.nodes[b.0].requires;
        Ok(self.push(vec![m, n], value, req, Op::MatMul { a, b, m, k, n }))
    }

    /// 2D convolution with zero padding. `x` is `[ci,h,w]` or `[nb,ci,h,w]`,
    /// `w` is `[co,ci,kh,kw]`, optional bias `[co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xd = self.nodes[x.0].dims.clone();
        let wd = self.nodes[w.0].dims.clone();
        if wd.len() != 4 {
            return Err(TensorError::BadRank { op: "conv2d weight", got: wd.len() });
        }
        let batched = match xd.len() {
            3 => false,
            4 => true,
            r => return Err(TensorError::BadRank { op: "conv2d", got: r }),
        };
        let (nb, ci, h, wdt) = if batched {
            (xd[0], xd[1], xd[2], xd[3])
        } else {
            (1, xd[0], xd[1], xd[2])
        };
        if ci != wd[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: vec![wd[1]],
                got: vec![ci],
            });
        }
        if stride == 0 {
            return Err(TensorError::BadArgument { what: "conv2d stride", why: "must be positive".into() });
        }
        if h + 2 * pad < wd[2] || wdt + 2 * pad < wd[3] {
            return Err(TensorError::BadArgument {
                what: "conv2d kernel",
                why: format!("kernel {}x{} exceeds padded input {}x{}", wd[2], wd[3], h + 2 * pad, wdt + 2 * pad),
            });
        }
        if let Some(b) = bias {
            let bd = &self.nodes[b.0].dims;
            if bd.as_slice() != [wd[0]] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    expected: vec![wd[0]],
                    got: bd.clone(),
                });
            }
        }
        let geom = ConvGeom {
            n: nb,
            ci,
            h,
            w: wdt,
            co: wd[0],
            kh: wd[2],
            kw: wd[3],
            stride,
            pad,
        };
        let mut value = vec![0.0; geom.out_len()];
        conv2d_fwd(
            geom,
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            bias.map(|b| self.nodes[b.0].value.as_slice()),
            &mut value,
        );
        let out_dims = if batched {
            vec![nb, geom.co, geom.out_h(), geom.out_w()]
        } else {
            vec![geom.co, geom.out_h(), geom.out_w()]
        };
        let req = self.nodes[x.0].requires
            || self.nodes[w.0].requires
            || bias.map_or(false, |b| self.nodes[b.0].requires);
        Ok(self.push(out_dims, value, req, Op::Conv2d { x, w, bias, geom }))
    }

    /// Pointwise convolution: weight `[co,ci,1,1]`, stride 1, no padding.
    pub fn conv1x1(&mut self, x: Var, w: Var) -> Result<Var> {
        let wd = &self.nodes[w.0].dims;
        if wd.len() != 4 || wd[2] != 1 || wd[3] != 1 {
            return Err(TensorError::BadArgument {
                what: "conv1x1 weight",
                why: format!("expected [co,ci,1,1], got {wd:?}"),
            });
        }
        self.conv2d(x, w, None, 1, 0)
    }

    /// Corner-aligned bilinear resize. `x` is `[h,w]` or `[c,h,w]`.
    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        if oh == 0 || ow == 0 {
            return Err(TensorError::BadArgument {
                what: "bilinear_resize target",
                why: format!("must be positive, got {oh}x{ow}"),
            });
        }
        let xd = self.nodes[x.0].dims.clone();
        let (c, h, w, batched) = match xd.len() {
            2 => (1, xd[0], xd[1], false),
            3 => (xd[0], xd[1], xd[2], true),
            r => return Err(TensorError::BadRank { op: "bilinear_resize", got: r }),
        };
        if h == 0 || w == 0 {
            return Err(TensorError::BadArgument {
                what: "bilinear_resize input",
                why: "empty spatial extent".into(),
            });
        }
        let mut value = vec![0.0; c * oh * ow];
        bilinear_fwd(&self.nodes[x.0].value, c, h, w, oh, ow, &mut value);
        let out_dims = if batched { vec![c, oh, ow] } else { vec![oh, ow] };
        let req = self.nodes[x.0].requires;
        Ok(self.push(out_dims, value, req, Op::Bilinear { x, c, h, w, oh, ow }))
    }

    /// Reorders axes; `axes` must be a permutation of `0..ndim`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xd = self.nodes[x.0].dims.clone();
        let nd = xd.len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::BadArgument {
                what: "permute axes",
                why: format!("{axes:?} is not a permutation of 0..{nd}"),
            });
        }
        let out_dims: Vec<usize> = axes.iter().map(|&a| xd[a]).collect();
        let total = element_count(&out_dims);
        // src strides indexed by output axis
        let mut src_strides = vec![1usize; nd];
        for i in (0..nd.saturating_sub(1)).rev() {
            src_strides[i] = src_strides[i + 1] * xd[i + 1];
        }
        let strides_for_out: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; nd];
        for _ in 0..total {
            let src: usize = idx.iter().zip(&strides_for_out).map(|(i, s)| i * s).sum();
            map.push(src as u32);
            for ax in (0..nd).rev() {
                idx[ax] += 1;
                if idx[ax] < out_dims[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let xval = &self.nodes[x.0].value;
        let value: Vec<f64> = map.iter().map(|&s| xval[s as usize]).collect();
        let req = self.nodes[x.0].requires;
        Ok(self.push(out_dims, value, req, Op::Permute { x, map }))
    }

    /// Same buffer, new shape with equal element count.
    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        if element_count(dims) != self.nodes[x.0].value.len() {
            return Err(TensorError::BadElementCount {
                dims: dims.to_vec(),
                count: self.nodes[x.0].value.len(),
            });
        }
        let value = self.nodes[x.0].value.clone();
        let req = self.nodes[x.0].requires;
        Ok(self.push(dims.to_vec(), value, req, Op::Reshape(x)))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(TensorError::BadArgument { what: "stack", why: "empty input list".into() });
        };
        let base = self.nodes[first.0].dims.clone();
        for &v in xs {
            if self.nodes[v.0].dims != base {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    expected: base.clone(),
                    got: self.nodes[v.0].dims.clone(),
                });
            }
        }
        let mut value = Vec::with_capacity(xs.len() * element_count(&base));
        for &v in xs {
            value.extend_from_slice(&self.nodes[v.0].value);
        }
        let mut dims = vec![xs.len()];
        dims.extend_from_slice(&base);
        let req = xs.iter().any(|&v| self.nodes[v.0].requires);
        Ok(self.push(dims, value, req, Op::Stack(xs.to_vec())))
    }

    /// Scales each row of `[n,c]` to unit L2 norm; rows with norm below
    /// `1e-12` are left at zero and receive zero gradient.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let xd = &self.nodes[x.0].dims;
        if xd.len() != 2 {
            return Err(TensorError::BadRank { op: "row_normalize", got: xd.len() });
        }
        let (n, c) = (xd[0], xd[1]);
        let xval = &self.nodes[x.0].value;
        let mut value = vec![0.0; n * c];
        let mut norms = vec![0.0; n];
        for i in 0..n {
            let row = &xval[i * c..][..c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[i] = norm;
            if norm >= ROW_NORM_EPS {
                for j in 0..c {
                    value[i * c + j] = row[j] / norm;
                }
            }
        }
        let req = self.nodes[x.0].requires;
        Ok(self.push(vec![n, c], value, req, Op::RowNormalize { x, n, c, norms }))
    }

    /// Mean binary cross-entropy of logits `z` against hard targets `y`
    /// (same shape, entries exactly 0 or 1).
    pub fn bce_loss(&mut self, z: Var, y: Var) -> Result<Var> {
        if self.nodes[z.0].dims != self.nodes[y.0].dims {
            return Err(TensorError::ShapeMismatch {
                op: "bce_loss",
                expected: self.nodes[z.0].dims.clone(),
                got: self.nodes[y.0].dims.clone(),
            });
        }
        let n = self.nodes[z.0].value.len();
        if n == 0 {
            return Err(TensorError::BadArgument { what: "bce_loss", why: "empty tensor".into() });
        }
        let mut total = 0.0;
        for (&zi, &yi) in self.nodes[z.0].value.iter().zip(&self.nodes[y.0].value) {
            if yi != 0.0 && yi != 1.0 {
                return Err(TensorError::NonBinaryTarget(yi));
            }
            // stable form: max(z,0) - z*y + ln(1 + e^{-|z|})
            total += zi.max(0.0) - zi * yi + (-zi.abs()).exp().ln_1p();
        }
        let req = self.nodes[z.0].requires || self.nodes[y.0].requires;
        Ok(self.push(Vec::new(), vec![total / n as f64], req, Op::BceLoss { z, y }))
    }

    /// Mean softmax cross-entropy over rows of `z: [n,k]` against class
    /// indices `targets` (`len n`, each `< k`).
    pub fn softmax_ce(&mut self, z: Var, targets: &[usize]) -> Result<Var> {
        let zd = &self.nodes[z.0].dims;
        if zd.len() != 2 {
            return Err(TensorError::BadRank { op: "softmax_ce", got: zd.len() });
        }
        let (n, k) = (zd[0], zd[1]);
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_ce",
                expected: vec![n],
                got: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(TensorError::BadArgument {
                what: "softmax_ce target",
                why: format!("class {bad} out of range for {k} classes"),
            });
        }
        let zval = &self.nodes[z.0].value;
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for i in 0..n {
            let row = &zval[i * k..][..k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..k {
                let e = (row[j] - m).exp();
                probs[i * k + j] = e;
                denom += e;
            }
            for j in 0..k {
                probs[i * k + j] /= denom;
            }
            total += denom.ln() + m - row[targets[i]];
        }
        let req = self.nodes[z.0].requires;
        Ok(self.push(
            Vec::new(),
            vec![total / n as f64],
            req,
            Op::SoftmaxCe { z, targets: targets.to_vec(), n, k, probs },
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Accumulates `d root / d leaf` into every reachable leaf created with
    /// [`Graph::param`]. `root` must hold exactly one element.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(TensorError::NonScalarRoot(self.nodes[root.0].dims.clone()));
        }
        self.backward_done = true;
        if !self.nodes[root.0].requires {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue; // leaf grads are retained for the caller
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            let nodes = &self.nodes;
            let grads = &mut self.grads;
            match &nodes[idx].op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    accumulate(grads, nodes, *a, &g, |gi, g| add_assign(gi, g));
                    accumulate(grads, nodes, *b, &g, |gi, g| add_assign(gi, g));
                }
                Op::Sub(a, b) => {
                    accumulate(grads, nodes, *a, &g, |gi, g| add_assign(gi, g));
                    accumulate(grads, nodes, *b, &g, |gi, g| {
                        for (o, &v) in gi.iter_mut().zip(g) {
                            *o -= v;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    accumulate(grads, nodes, *a, &g, |gi, g| {
                        for ((o, &v), &bb) in gi.iter_mut().zip(g).zip(bv) {
                            *o += v * bb;
                        }
                    });
                    accumulate(grads, nodes, *b, &g, |gi, g| {
                        for ((o, &v), &aa) in gi.iter_mut().zip(g).zip(av) {
                            *o += v * aa;
                        }
                    });
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(grads, nodes, *a, &g, |gi, g| {
                        for (o, &v) in gi.iter_mut().zip(g) {
                            *o += v * s;
                        }
                    });
                }
                Op::Relu(a) => {
                    let av = &nodes[a.0].value;
                    accumulate(grads, nodes, *a, &g, |gi, g| {
                        for ((o, &v), &x) in gi.iter_mut().zip(g).zip(av) {
                            if x > 0.0 {
                                *o += v;
                            }
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let yv = &nodes[idx].value;
                    accumulate(grads, nodes, *a, &g, |gi, g| {
                        for ((o, &v), &y) in gi.iter_mut().zip(g).zip(yv) {
                            *o += v * y * (1.0 - y);
                        }
                    });
                }
                Op::Sum(a) => {
                    let gv = g[0];
                    accumulate(grads, nodes, *a, &g, |gi, _| {
                        for o in gi.iter_mut() {
                            *o += gv;
                        }
                    });
                }
                Op::Mean(a) => {
                    let gv = g[0] / nodes[a.0].value.len() as f64;
                    accumulate(grads, nodes, *a, &g, |gi, _| {
                        for o in gi.iter_mut() {
                            *o += gv;
                        }
                    });
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    accumulate(grads, nodes, *a, &g, |gi, g| matmul_nt_acc(g, bv, m, n, k, gi));
                    accumulate(grads, nodes, *b, &g, |gi, g| matmul_tn_acc(av, g, m, k, n, gi));
                }
                Op::Conv2d { x, w, bias, geom } => {
                    let geom = *geom;
                    let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                    accumulate(grads, nodes, *x, &g, |gi, g| {
                        conv2d_bwd(geom, xv, wv, g, Some(gi), None, None)
                    });
                    accumulate(grads, nodes, *w, &g, |gi, g| {
                        conv2d_bwd(geom, xv, wv, g, None, Some(gi), None)
                    });
                    if let Some(b) = bias {
                        accumulate(grads, nodes, *b, &g, |gi, g| {
                            conv2d_bwd(geom, xv, wv, g, None, None, Some(gi))
                        });
                    }
                }
                Op::Bilinear { x, c, h, w, oh, ow } => {
                    let (c, h, w, oh, ow) = (*c, *h, *w, *oh, *ow);
                    accumulate(grads, nodes, *x, &g, |gi, g| bilinear_bwd(g, c, h, w, oh, ow, gi));
                }
                Op::Permute { x, map } => {
                    accumulate(grads, nodes, *x, &g, |gi, g| {
                        for (&src, &v) in map.iter().zip(g) {
                            gi[src as usize] += v;
                        }
                    });
                }
                Op::Reshape(x) => {
                    accumulate(grads, nodes, *x, &g, |gi, g| add_assign(gi, g));
                }
                Op::Stack(xs) => {
                    let per = if xs.is_empty() { 0 } else { nodes[xs[0].0].value.len() };
                    for (i, &v) in xs.iter().enumerate() {
                        accumulate(grads, nodes, v, &g[i * per..(i + 1) * per], |gi, g| {
                            add_assign(gi, g)
                        });
                    }
                }
                Op::RowNormalize { x, n, c, norms } => {
                    let (n, c) = (*n, *c);
                    let yv = &nodes[idx].value;
                    accumulate(grads, nodes, *x, &g, |gi, g| {
                        for i in 0..n {
                            let norm = norms[i];
                            if norm < ROW_NORM_EPS {
                                continue;
                            }
                            let y = &yv[i * c..][..c];
                            let gr = &g[i * c..][..c];
                            let dot: f64 = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                            let go = &mut gi[i * c..][..c];
                            for j in 0..c {
                                go[j] += (gr[j] - y[j] * dot) / norm;
                            }
                        }
                    });
                }
                Op::BceLoss { z, y } => {
                    let n = nodes[z.0].value.len() as f64;
                    let scale = g[0] / n;
                    let (zv, yv) = (&nodes[z.0].value, &nodes[y.0].value);
                    accumulate(grads, nodes, *z, &g, |gi, _| {
                        for ((o, &zi), &yi) in gi.iter_mut().zip(zv).zip(yv) {
                            *o += scale * (sigmoid(zi) - yi);
                        }
                    });
                }
                Op::SoftmaxCe { z, targets, n, k, probs } => {
                    let (n, k) = (*n, *k);
                    let scale = g[0] / n as f64;
                    accumulate(grads, nodes, *z, &g, |gi, _| {
                        for i in 0..n {
                            let p = &probs[i * k..][..k];
                            let go = &mut gi[i * k..][..k];
                            for j in 0..k {
                                go[j] += scale * (p[j] - if j == targets[i] { 1.0 } else { 0.0 });
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }

    fn push(&mut self, dims: Vec<usize>, value: Vec<f64>, requires: bool, op: Op) -> Var {
        debug_assert_eq!(element_count(&dims), value.len());
        self.nodes.push(Node { dims, value, requires, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.nodes[a.0].dims != self.nodes[b.0].dims {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                expected: self.nodes[a.0].dims.clone(),
                got: self.nodes[b.0].dims.clone(),
            });
        }
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let dims = self.nodes[a.0].dims.clone();
        let req = self.nodes[a.0].requires || self.nodes[b.0].requires;
        Ok(self.push(dims, value, req, op))
    }
}

/// Runs `f` against the gradient buffer of `v`, creating it on first touch.
/// No-op when `v` does not require gradients.
fn accumulate(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    v: Var,
    gout: &[f64],
    f: impl FnOnce(&mut [f64], &[f64]),
) {
    if !nodes[v.0].requires {
        return;
    }
    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
    f(buf, gout);
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

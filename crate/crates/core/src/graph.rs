//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records coarse operations (linear maps, convolutions,
//! attention, normalisation) on top of a borrowed [`ParamStore`]. Forward
//! values are computed eagerly; [`Graph::backward`] walks the tape in reverse
//! and returns gradients for every parameter plus any input created with
//! [`Graph::input_with_grad`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::kernels as k;
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

/// Deliberate adjoint corruptions, used to prove the gradient checker bites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// ReLU passes half the upstream gradient where its input was negative.
    ReluLeak,
    /// Bias gradients of linear and convolution layers are doubled.
    BiasGradDoubled,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        kk: usize,
        n: usize,
    },
    Transpose {
        x: NodeId,
        rows: usize,
        cols: usize,
    },
    Reshape {
        x: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        h: usize,
        wd: usize,
        cin: usize,
        cout: usize,
        ksize: usize,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    Upsample2x {
        x: NodeId,
        h: usize,
        w: usize,
        c: usize,
    },
    AvgPool2x2 {
        x: NodeId,
        h: usize,
        w: usize,
        c: usize,
    },
    UpsampleBilinear {
        x: NodeId,
        h: usize,
        w: usize,
        c: usize,
        factor: usize,
    },
    Concat {
        parts: Vec<(NodeId, usize)>,
        total: usize,
    },
    SliceCols {
        x: NodeId,
        cols: usize,
        start: usize,
        len: usize,
    },
    Softmax {
        x: NodeId,
        n: usize,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        n: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    BroadcastRows {
        x: NodeId,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
        width: usize,
    },
    SelectRow {
        x: NodeId,
        row: usize,
        width: usize,
    },
    ScaleRows {
        x: NodeId,
        s: NodeId,
        width: usize,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        nq: usize,
        nk: usize,
        d: usize,
        dv: usize,
        heads: usize,
        weights: Vec<f64>,
    },
    GroupMean {
        x: NodeId,
        width: usize,
        groups: usize,
    },
    MeanRows {
        x: NodeId,
        width: usize,
    },
    PixelCorrelate {
        kernel: NodeId,
        feat: NodeId,
        p: usize,
    },
    Bce {
        p: NodeId,
        target: Vec<f64>,
    },
    Sum {
        x: NodeId,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
    fault: Option<Fault>,
}

/// Gradients produced by one backward pass.
pub struct Backward {
    node_grads: Vec<Option<Vec<f64>>>,
    pub params: Grads,
}

impl Backward {
    /// Gradient with respect to a node (zeros if it did not influence the loss).
    pub fn grad(&self, id: NodeId, len: usize) -> Vec<f64> {
        self.node_grads[id.0].clone().unwrap_or_else(|| vec![0.0; len])
    }
}

fn last(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

fn lead(shape: &[usize]) -> usize {
    shape[..shape.len().saturating_sub(1)].iter().product()
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            fault: None,
        }
    }

    pub fn with_fault(mut self, fault: Option<Fault>) -> Self {
        self.fault = fault;
        self
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        match self.nodes[id.0].op {
            Op::Param(p) => self.params.get(p).value.data(),
            _ => &self.nodes[id.0].value,
        }
    }

    /// Copy a node out as a standalone tensor.
    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.shape(id), self.value(id).to_vec()).expect("node shapes are valid")
    }

    /// Attention weights `[heads, nq, nk]` recorded by an attention node.
    pub fn attention_weights(&self, id: NodeId) -> Option<&[f64]> {
        match &self.nodes[id.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool) -> NodeId {
        debug_assert!(matches!(op, Op::Param(_)) || shape.iter().product::<usize>() == value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    pub fn input(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Input, t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn input_with_grad(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Input, t.shape().to_vec(), t.data().to_vec(), true)
    }

    /// Leaf for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        let shape = self.params.get(id).value.shape().to_vec();
        let n = self.push(Op::Param(id), shape, Vec::new(), true);
        self.param_nodes[id.0] = Some(n);
        n
    }

    /// `x[.., in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>) -> Result<NodeId> {
        let w = self.param(w);
        let b = b.map(|b| self.param(b));
        self.linear_nodes(x, w, b)
    }

    pub fn linear_nodes(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || last(&xs) != ws[0] {
            return Err(shape_err!("linear: input {xs:?} against weight {ws:?}"));
        }
        let (din, dout) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(shape_err!("linear: bias {:?} for {dout} outputs", self.shape(b)));
            }
        }
        let rows = lead(&xs).max(1);
        let y = k::linear(self.value(x), self.value(w), b.map(|b| self.value(b)), rows, din, dout);
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = dout;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(
            Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            },
            shape,
            y,
            ng,
        ))
    }

    /// `a[m, k] · b[k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul: {sa:?} x {sb:?}"));
        }
        let y = k::linear(self.value(a), self.value(b), None, sa[0], sa[1], sb[1]);
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            Op::MatMul {
                a,
                b,
                m: sa[0],
                kk: sa[1],
                n: sb[1],
            },
            vec![sa[0], sb[1]],
            y,
            ng,
        ))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err!("transpose expects a matrix, got {s:?}"));
        }
        let y = k::transpose(self.value(x), s[0], s[1]);
        let ng = self.ng(&[x]);
        Ok(self.push(
            Op::Transpose {
                x,
                rows: s[0],
                cols: s[1],
            },
            vec![s[1], s[0]],
            y,
            ng,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() || shape.contains(&0) {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", self.shape(x)));
        }
        let y = self.value(x).to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(Op::Reshape { x }, shape.to_vec(), y, ng))
    }

    /// Same-padded stride-1 convolution of `[H, W, Cin]` with `[k, k, Cin, Cout]`.
    pub fn conv2d(&mut self, x: NodeId, w: ParamId, b: ParamId) -> Result<NodeId> {
        let (w, b) = (self.param(w), self.param(b));
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[0] != ws[1] {
            return Err(shape_err!("conv2d: input {xs:?} with kernel {ws:?}"));
        }
        let ksize = ws[0];
        if ksize != 1 && ksize != 3 {
            return Err(shape_err!("conv2d: kernel size {ksize} (only 1 and 3 are supported)"));
        }
        if ws[2] != xs[2] {
            return Err(shape_err!(
                "conv2d: input has {} channels, kernel expects {}",
                xs[2],
                ws[2]
            ));
        }
        let cout = ws[3];
        if self.shape(b) != [cout] {
            return Err(shape_err!("conv2d: bias {:?} for {cout} outputs", self.shape(b)));
        }
        let (h, wd, cin) = (xs[0], xs[1], xs[2]);
        let y = k::conv2d(self.value(x), self.value(w), self.value(b), h, wd, cin, cout, ksize);
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                b,
                h,
                wd,
                cin,
                cout,
                ksize,
            },
            vec![h, wd, cout],
            y,
            ng,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let ng = self.ng(&[x]);
        self.push(Op::Relu { x }, self.shape(x).to_vec(), y, ng)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).iter().map(|&v| k::sigmoid(v)).collect();
        let ng = self.ng(&[x]);
        self.push(Op::Sigmoid { x }, self.shape(x).to_vec(), y, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("add: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let y = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Op::Add { a, b }, self.shape(a).to_vec(), y, ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("mul: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let y = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Op::Mul { a, b }, self.shape(a).to_vec(), y, ng))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let y = self.value(x).iter().map(|v| v * factor).collect();
        let ng = self.ng(&[x]);
        self.push(Op::Scale { x, factor }, self.shape(x).to_vec(), y, ng)
    }

    fn hwc(&self, x: NodeId, what: &str) -> Result<(usize, usize, usize)> {
        match *self.shape(x) {
            [h, w, c] => Ok((h, w, c)),
            ref s => Err(shape_err!("{what} expects [H, W, C], got {s:?}")),
        }
    }

    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let (h, w, c) = self.hwc(x, "upsample2x")?;
        let y = k::upsample2x(self.value(x), h, w, c);
        let ng = self.ng(&[x]);
        Ok(self.push(Op::Upsample2x { x, h, w, c }, vec![2 * h, 2 * w, c], y, ng))
    }

    pub fn avgpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let (h, w, c) = self.hwc(x, "avgpool2x2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("avgpool2x2 needs even spatial dims, got {h}x{w}"));
        }
        let y = k::avgpool2x2(self.value(x), h, w, c);
        let ng = self.ng(&[x]);
        Ok(self.push(Op::AvgPool2x2 { x, h, w, c }, vec![h / 2, w / 2, c], y, ng))
    }

    pub fn upsample_bilinear(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let (h, w, c) = self.hwc(x, "upsample_bilinear")?;
        if factor == 0 {
            return Err(shape_err!("upsample_bilinear: factor must be positive"));
        }
        let y = k::upsample_bilinear(self.value(x), h, w, c, factor);
        let ng = self.ng(&[x]);
        Ok(self.push(
            Op::UpsampleBilinear { x, h, w, c, factor },
            vec![h * factor, w * factor, c],
            y,
            ng,
        ))
    }

    /// Concatenate along the last axis; leading dims must agree.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let lead_shape = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead_shape[..] {
                return Err(shape_err!("concat: {:?} vs leading dims {lead_shape:?}", s));
            }
            widths.push((p, last(s)));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let rows: usize = lead_shape.iter().product::<usize>().max(1);
        let mut y = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, wdt) in &widths {
                y.extend_from_slice(&self.value(p)[r * wdt..(r + 1) * wdt]);
            }
        }
        let mut shape = lead_shape;
        shape.push(total);
        let ng = self.ng(parts);
        Ok(self.push(Op::Concat { parts: widths, total }, shape, y, ng))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let cols = last(&s);
        if len == 0 || start + len > cols {
            return Err(shape_err!("slice_cols {start}..{} of width {cols}", start + len));
        }
        let rows = lead(&s).max(1);
        let v = self.value(x);
        let mut y = Vec::with_capacity(rows * len);
        for r in 0..rows {
            y.extend_from_slice(&v[r * cols + start..r * cols + start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let ng = self.ng(&[x]);
        Ok(self.push(Op::SliceCols { x, cols, start, len }, shape, y, ng))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let n = last(self.shape(x));
        if self.value(x).is_empty() || n == 0 {
            return Err(shape_err!("softmax of an empty tensor"));
        }
        let y = k::softmax_rows(self.value(x), n);
        let ng = self.ng(&[x]);
        Ok(self.push(Op::Softmax { x, n }, self.shape(x).to_vec(), y, ng))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: ParamId, beta: ParamId, eps: f64) -> Result<NodeId> {
        let (gamma, beta) = (self.param(gamma), self.param(beta));
        self.layer_norm_nodes(x, gamma, beta, eps)
    }

    pub fn layer_norm_nodes(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let n = last(self.shape(x));
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(shape_err!(
                "layer_norm: affine {:?}/{:?} for rows of {n}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        if !(eps >= 0.0) {
            return Err(Error::InvalidConfig(format!("layer_norm eps must be >= 0, got {eps}")));
        }
        let (y, xhat, rstd) = k::layer_norm(self.value(x), self.value(gamma), self.value(beta), n, eps);
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                n,
                xhat,
                rstd,
            },
            self.shape(x).to_vec(),
            y,
            ng,
        ))
    }

    /// `[C] -> [n, C]` by repeating the row.
    pub fn broadcast_rows(&mut self, x: NodeId, n: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 1 || n == 0 {
            return Err(shape_err!("broadcast_rows: {s:?} x {n}"));
        }
        let v = self.value(x);
        let mut y = Vec::with_capacity(n * s[0]);
        for _ in 0..n {
            y.extend_from_slice(v);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Op::BroadcastRows { x }, vec![n, s[0]], y, ng))
    }

    /// Row gather from a `[V, C]` table.
    pub fn embedding(&mut self, table: ParamId, ids: &[usize]) -> Result<NodeId> {
        let table = self.param(table);
        let s = self.shape(table).to_vec();
        if s.len() != 2 || ids.is_empty() {
            return Err(shape_err!("embedding: table {s:?} with {} ids", ids.len()));
        }
        let (vocab, width) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(shape_err!("embedding id {bad} outside table of {vocab}"));
        }
        let tv = self.value(table);
        let mut y = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            y.extend_from_slice(&tv[i * width..(i + 1) * width]);
        }
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                width,
            },
            vec![ids.len(), width],
            y,
            true,
        ))
    }

    /// Row `row` of a matrix as a vector.
    pub fn select_row(&mut self, x: NodeId, row: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || row >= s[0] {
            return Err(shape_err!("select_row {row} of {s:?}"));
        }
        let width = s[1];
        let y = self.value(x)[row * width..(row + 1) * width].to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(Op::SelectRow { x, row, width }, vec![width], y, ng))
    }

    /// `y[i, :] = s[i] * x[i, :]`.
    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || self.shape(s) != [xs[0]] {
            return Err(shape_err!("scale_rows: {xs:?} by {:?}", self.shape(s)));
        }
        let width = xs[1];
        let (xv, sv) = (self.value(x), self.value(s));
        let mut y = Vec::with_capacity(xv.len());
        for (r, &f) in sv.iter().enumerate() {
            y.extend(xv[r * width..(r + 1) * width].iter().map(|v| f * v));
        }
        let ng = self.ng(&[x, s]);
        Ok(self.push(Op::ScaleRows { x, s, width }, xs, y, ng))
    }

    /// Multi-head scaled dot-product attention core (no projections).
    /// `q: [nq, d]`, `k: [nk, d]`, `v: [nk, dv]` -> `[nq, dv]`.
    pub fn attention(&mut self, q: NodeId, kn: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(kn).to_vec(), self.shape(v).to_vec());
        if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk[0] != sv[0] {
            return Err(shape_err!("attention: q {sq:?}, k {sk:?}, v {sv:?}"));
        }
        let (nq, nk, d, dv) = (sq[0], sk[0], sq[1], sv[1]);
        if heads == 0 || d % heads != 0 || dv % heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "attention: widths {d}/{dv} are not divisible by {heads} heads"
            )));
        }
        let (y, weights) = k::attention(self.value(q), self.value(kn), self.value(v), nq, nk, d, dv, heads);
        let ng = self.ng(&[q, kn, v]);
        Ok(self.push(
            Op::Attention {
                q,
                k: kn,
                v,
                nq,
                nk,
                d,
                dv,
                heads,
                weights,
            },
            vec![nq, dv],
            y,
            ng,
        ))
    }

    /// `[N, C] -> [N, groups]`, averaging contiguous channel groups.
    pub fn group_mean(&mut self, x: NodeId, groups: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || groups == 0 || groups > s[1] {
            return Err(shape_err!("group_mean of {s:?} into {groups} groups"));
        }
        let (rows, width) = (s[0], s[1]);
        let ranges = k::channel_groups(width, groups);
        let v = self.value(x);
        let mut y = Vec::with_capacity(rows * groups);
        for r in 0..rows {
            for &(a, b) in &ranges {
                let seg = &v[r * width + a..r * width + b];
                y.push(seg.iter().sum::<f64>() / seg.len() as f64);
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Op::GroupMean { x, width, groups }, vec![rows, groups], y, ng))
    }

    /// Column means of a matrix: `[n, C] -> [C]`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err!("mean_rows of {s:?}"));
        }
        let (rows, width) = (s[0], s[1]);
        let mut y = vec![0.0; width];
        for r in 0..rows {
            k::axpy(1.0, &self.value(x)[r * width..(r + 1) * width], &mut y);
        }
        for v in &mut y {
            *v /= rows as f64;
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Op::MeanRows { x, width }, vec![width], y, ng))
    }

    /// Per-pixel dynamic filter: `kernel: [H, W, 1 + P]`, `feat: [H, W, P]`
    /// -> `[H, W]` with `out = kernel[0] + Σ_p kernel[1 + p] · feat[p]`.
    pub fn pixel_correlate(&mut self, kernel: NodeId, feat: NodeId) -> Result<NodeId> {
        let (ks, fs) = (self.shape(kernel).to_vec(), self.shape(feat).to_vec());
        if ks.len() != 3 || fs.len() != 3 || ks[..2] != fs[..2] || ks[2] != fs[2] + 1 {
            return Err(shape_err!("pixel_correlate: kernel {ks:?} with features {fs:?}"));
        }
        let p = fs[2];
        let (kv, fv) = (self.value(kernel), self.value(feat));
        let y = kv
            .chunks_exact(p + 1)
            .zip(fv.chunks_exact(p))
            .map(|(kk, ff)| kk[0] + k::dot(&kk[1..], ff))
            .collect();
        let ng = self.ng(&[kernel, feat]);
        Ok(self.push(Op::PixelCorrelate { kernel, feat, p }, vec![ks[0], ks[1]], y, ng))
    }

    /// Mean binary cross-entropy of probabilities against a fixed target.
    pub fn bce(&mut self, p: NodeId, target: &Tensor) -> Result<NodeId> {
        if self.shape(p) != target.shape() {
            return Err(shape_err!(
                "bce: prediction {:?} vs target {:?}",
                self.shape(p),
                target.shape()
            ));
        }
        let loss = k::bce(self.value(p), target.data());
        let ng = self.ng(&[p]);
        Ok(self.push(
            Op::Bce {
                p,
                target: target.data().to_vec(),
            },
            vec![1],
            vec![loss],
            ng,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).iter().sum();
        let ng = self.ng(&[x]);
        self.push(Op::Sum { x }, vec![1], vec![s], ng)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Backward> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::InvalidUse(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params = self.params.zero_grads();
        for (pid, node) in self.param_nodes.iter().enumerate() {
            if let Some(n) = node {
                if let Some(g) = &grads[n.0] {
                    params.bufs[pid].copy_from_slice(g);
                }
            }
        }
        Ok(Backward {
            node_grads: grads,
            params,
        })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Gradient buffer for an upstream node, or None when it needs none.
        macro_rules! buf {
            ($id:expr) => {{
                let id: NodeId = $id;
                if nodes[id.0].needs_grad {
                    let len = self.value(id).len();
                    Some(grads[id.0].get_or_insert_with(|| vec![0.0; len]))
                } else {
                    None
                }
            }};
        }
        let bias_factor = if self.fault == Some(Fault::BiasGradDoubled) {
            2.0
        } else {
            1.0
        };
        match &nodes[i].op {
            Op::Input | Op::Param(_) => {}
            Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if let Some(dx) = buf!(*x) {
                    k::linear_backward(xv, wv, g, *rows, *din, *dout, Some(dx), None, None);
                }
                if let Some(dw) = buf!(*w) {
                    k::linear_backward(xv, wv, g, *rows, *din, *dout, None, Some(dw), None);
                }
                if let Some(b) = b {
                    if let Some(db) = buf!(*b) {
                        let mut tmp = vec![0.0; *dout];
                        k::linear_backward(xv, wv, g, *rows, *din, *dout, None, None, Some(&mut tmp));
                        k::axpy(bias_factor, &tmp, db);
                    }
                }
            }
            Op::MatMul { a, b, m, kk, n } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(da) = buf!(*a) {
                    k::linear_backward(av, bv, g, *m, *kk, *n, Some(da), None, None);
                }
                if let Some(db) = buf!(*b) {
                    k::linear_backward(av, bv, g, *m, *kk, *n, None, Some(db), None);
                }
            }
            Op::Transpose { x, rows, cols } => {
                if let Some(dx) = buf!(*x) {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            dx[r * cols + c] += g[c * rows + r];
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = buf!(*x) {
                    k::axpy(1.0, g, dx);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                h,
                wd,
                cin,
                cout,
                ksize,
            } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (h, wd, cin, cout, ks) = (*h, *wd, *cin, *cout, *ksize);
                if let Some(dx) = buf!(*x) {
                    k::conv2d_backward(xv, wv, g, h, wd, cin, cout, ks, Some(dx), None, None);
                }
                if let Some(dw) = buf!(*w) {
                    k::conv2d_backward(xv, wv, g, h, wd, cin, cout, ks, None, Some(dw), None);
                }
                if let Some(db) = buf!(*b) {
                    let mut tmp = vec![0.0; cout];
                    k::conv2d_backward(xv, wv, g, h, wd, cin, cout, ks, None, None, Some(&mut tmp));
                    k::axpy(bias_factor, &tmp, db);
                }
            }
            Op::Relu { x } => {
                let leak = if self.fault == Some(Fault::ReluLeak) { 0.5 } else { 0.0 };
                let xv = self.value(*x);
                if let Some(dx) = buf!(*x) {
                    for ((d, &v), &gv) in dx.iter_mut().zip(xv).zip(g) {
                        *d += if v > 0.0 { gv } else { leak * gv };
                    }
                }
            }
            Op::Sigmoid { x } => {
                let y = &nodes[i].value;
                if let Some(dx) = buf!(*x) {
                    for ((d, &yv), &gv) in dx.iter_mut().zip(y).zip(g) {
                        *d += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(da) = buf!(*a) {
                    k::axpy(1.0, g, da);
                }
                if let Some(db) = buf!(*b) {
                    k::axpy(1.0, g, db);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(da) = buf!(*a) {
                    for ((d, &o), &gv) in da.iter_mut().zip(bv).zip(g) {
                        *d += gv * o;
                    }
                }
                if let Some(db) = buf!(*b) {
                    for ((d, &o), &gv) in db.iter_mut().zip(av).zip(g) {
                        *d += gv * o;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(dx) = buf!(*x) {
                    k::axpy(*factor, g, dx);
                }
            }
            Op::Upsample2x { x, h, w, c } => {
                if let Some(dx) = buf!(*x) {
                    k::upsample2x_backward(g, *h, *w, *c, dx);
                }
            }
            Op::AvgPool2x2 { x, h, w, c } => {
                if let Some(dx) = buf!(*x) {
                    k::avgpool2x2_backward(g, *h, *w, *c, dx);
                }
            }
            Op::UpsampleBilinear { x, h, w, c, factor } => {
                if let Some(dx) = buf!(*x) {
                    k::upsample_bilinear_backward(g, *h, *w, *c, *factor, dx);
                }
            }
            Op::Concat { parts, total } => {
                let rows = g.len() / total;
                let mut off = 0;
                for &(p, wdt) in parts {
                    if let Some(dp) = buf!(p) {
                        for r in 0..rows {
                            k::axpy(
                                1.0,
                                &g[r * total + off..r * total + off + wdt],
                                &mut dp[r * wdt..(r + 1) * wdt],
                            );
                        }
                    }
                    off += wdt;
                }
            }
            Op::SliceCols { x, cols, start, len } => {
                if let Some(dx) = buf!(*x) {
                    let rows = g.len() / len;
                    for r in 0..rows {
                        k::axpy(
                            1.0,
                            &g[r * len..(r + 1) * len],
                            &mut dx[r * cols + start..r * cols + start + len],
                        );
                    }
                }
            }
            Op::Softmax { x, n } => {
                let y = &nodes[i].value;
                if let Some(dx) = buf!(*x) {
                    k::softmax_rows_backward(y, g, *n, dx);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                n,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma);
                if let Some(dx) = buf!(*x) {
                    k::layer_norm_backward(xhat, rstd, gv, g, *n, Some(dx), None, None);
                }
                if let Some(dg) = buf!(*gamma) {
                    k::layer_norm_backward(xhat, rstd, gv, g, *n, None, Some(dg), None);
                }
                if let Some(db) = buf!(*beta) {
                    k::layer_norm_backward(xhat, rstd, gv, g, *n, None, None, Some(db));
                }
            }
            Op::BroadcastRows { x } => {
                if let Some(dx) = buf!(*x) {
                    let width = dx.len();
                    for r in g.chunks_exact(width) {
                        k::axpy(1.0, r, dx);
                    }
                }
            }
            Op::Embedding { table, ids, width } => {
                if let Some(dt) = buf!(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        k::axpy(
                            1.0,
                            &g[r * width..(r + 1) * width],
                            &mut dt[id * width..(id + 1) * width],
                        );
                    }
                }
            }
            Op::SelectRow { x, row, width } => {
                if let Some(dx) = buf!(*x) {
                    k::axpy(1.0, g, &mut dx[row * width..(row + 1) * width]);
                }
            }
            Op::ScaleRows { x, s, width } => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                if let Some(dx) = buf!(*x) {
                    for (r, &f) in sv.iter().enumerate() {
                        k::axpy(f, &g[r * width..(r + 1) * width], &mut dx[r * width..(r + 1) * width]);
                    }
                }
                if let Some(ds) = buf!(*s) {
                    for (r, d) in ds.iter_mut().enumerate() {
                        *d += k::dot(&g[r * width..(r + 1) * width], &xv[r * width..(r + 1) * width]);
                    }
                }
            }
            Op::Attention {
                q,
                k: kn,
                v,
                nq,
                nk,
                d,
                dv,
                heads,
                weights,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*kn), self.value(*v));
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dvv = vec![0.0; vv.len()];
                k::attention_backward(
                    qv, kv, vv, weights, g, *nq, *nk, *d, *dv, *heads, &mut dq, &mut dk, &mut dvv,
                );
                for (id, d) in [(*q, dq), (*kn, dk), (*v, dvv)] {
                    if let Some(b) = buf!(id) {
                        k::axpy(1.0, &d, b);
                    }
                }
            }
            Op::GroupMean { x, width, groups } => {
                if let Some(dx) = buf!(*x) {
                    let ranges = k::channel_groups(*width, *groups);
                    let rows = g.len() / groups;
                    for r in 0..rows {
                        for (gi, &(a, b)) in ranges.iter().enumerate() {
                            let share = g[r * groups + gi] / (b - a) as f64;
                            for d in &mut dx[r * width + a..r * width + b] {
                                *d += share;
                            }
                        }
                    }
                }
            }
            Op::MeanRows { x, width } => {
                if let Some(dx) = buf!(*x) {
                    let rows = dx.len() / width;
                    let inv = 1.0 / rows as f64;
                    for r in dx.chunks_exact_mut(*width) {
                        k::axpy(inv, g, r);
                    }
                }
            }
            Op::PixelCorrelate { kernel, feat, p } => {
                let (kv, fv) = (self.value(*kernel), self.value(*feat));
                let p = *p;
                if let Some(dk) = buf!(*kernel) {
                    for (px, &gv) in g.iter().enumerate() {
                        let row = &mut dk[px * (p + 1)..(px + 1) * (p + 1)];
                        row[0] += gv;
                        k::axpy(gv, &fv[px * p..(px + 1) * p], &mut row[1..]);
                    }
                }
                if let Some(df) = buf!(*feat) {
                    for (px, &gv) in g.iter().enumerate() {
                        k::axpy(
                            gv,
                            &kv[px * (p + 1) + 1..(px + 1) * (p + 1)],
                            &mut df[px * p..(px + 1) * p],
                        );
                    }
                }
            }
            Op::Bce { p, target } => {
                let pv = self.value(*p);
                if let Some(dp) = buf!(*p) {
                    k::bce_backward(pv, target, g[0], dp);
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = buf!(*x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, CheckOptions};
    use crate::rng::RngStream;

    const TRIALS: u64 = 20;
    const TOL: f64 = 1e-6;

    fn random(rng: &mut RngStream, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    /// Random-weighted sum of `y`, so every output coordinate carries its
    /// own adjoint seed.
    fn readout(g: &mut Graph, y: NodeId, seed: u64) -> Result<NodeId> {
        let w = random(&mut RngStream::new(seed ^ 0xabc), g.shape(y));
        let w = g.input(&w);
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    }

    /// Run `TRIALS` randomised checks of one rule. `setup` draws parameter
    /// tensors and input shapes; `build` wires the op under test.
    fn check_rule<S, B>(name: &str, setup: S, build: B)
    where
        S: Fn(&mut RngStream) -> (Vec<(String, Tensor)>, Vec<Vec<usize>>),
        B: Fn(&mut Graph, &[NodeId], &[ParamId]) -> Result<NodeId> + Copy,
    {
        for trial in 0..TRIALS {
            let mut rng = RngStream::new(crate::rng::derive_seed(trial, 77));
            let (params, shapes) = setup(&mut rng);
            let mut store = ParamStore::new();
            let ids: Vec<ParamId> = params.into_iter().map(|(n, t)| store.add(n, t).unwrap()).collect();
            let mut inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
            let report = finite_diff_check(&mut store, &mut inputs, &CheckOptions::default(), |g, xs| {
                let y = build(g, xs, &ids)?;
                readout(g, y, trial)
            })
            .unwrap();
            assert!(
                report.max_rel_error() <= TOL,
                "{name} trial {trial}: {:?}",
                report.entries
            );
        }
    }

    fn dims(rng: &mut RngStream, lo: i64, hi: i64) -> usize {
        rng.range_inclusive(lo, hi) as usize
    }

    #[test]
    fn linear_adjoints() {
        check_rule(
            "linear",
            |r| {
                let (n, a, b) = (dims(r, 1, 4), dims(r, 1, 5), dims(r, 1, 5));
                (
                    vec![("w".into(), random(r, &[a, b])), ("b".into(), random(r, &[b]))],
                    vec![vec![n, a]],
                )
            },
            |g, x, p| g.linear(x[0], p[0], Some(p[1])),
        );
    }

    #[test]
    fn matmul_and_transpose_adjoints() {
        check_rule(
            "matmul",
            |r| {
                let (m, k, n) = (dims(r, 1, 4), dims(r, 1, 4), dims(r, 1, 4));
                (vec![], vec![vec![m, k], vec![n, k]])
            },
            |g, x, _| {
                let bt = g.transpose(x[1])?;
                g.matmul(x[0], bt)
            },
        );
    }

    #[test]
    fn conv2d_adjoints() {
        check_rule(
            "conv2d",
            |r| {
                let k = if r.below(2) == 0 { 1 } else { 3 };
                let (h, w, ci, co) = (dims(r, 1, 4), dims(r, 1, 4), dims(r, 1, 3), dims(r, 1, 3));
                (
                    vec![("w".into(), random(r, &[k, k, ci, co])), ("b".into(), random(r, &[co]))],
                    vec![vec![h, w, ci]],
                )
            },
            |g, x, p| g.conv2d(x[0], p[0], p[1]),
        );
    }

    #[test]
    fn elementwise_adjoints() {
        check_rule(
            "relu/sigmoid/add/mul/scale",
            |r| {
                let s = vec![dims(r, 1, 4), dims(r, 1, 4)];
                (vec![], vec![s.clone(), s])
            },
            |g, x, _| {
                let a = g.relu(x[0]);
                let b = g.sigmoid(x[1]);
                let c = g.mul(a, b)?;
                let d = g.add(c, x[0])?;
                Ok(g.scale(d, -1.7))
            },
        );
    }

    #[test]
    fn resampling_adjoints() {
        check_rule(
            "upsample/pool/bilinear",
            |r| (vec![], vec![vec![dims(r, 1, 3) * 2, dims(r, 1, 3) * 2, dims(r, 1, 2)]]),
            |g, x, _| {
                let p = g.avgpool2x2(x[0])?;
                let u = g.upsample2x(p)?;
                let b = g.upsample_bilinear(u, 2)?;
                let back = g.avgpool2x2(b)?;
                g.add(back, x[0])
            },
        );
    }

    #[test]
    fn structural_adjoints() {
        check_rule(
            "reshape/concat/slice/select/broadcast",
            |r| {
                let (n, a, b) = (dims(r, 2, 4), dims(r, 1, 3), dims(r, 2, 4));
                (vec![], vec![vec![n, a], vec![n, b]])
            },
            |g, x, _| {
                let c = g.concat(&[x[0], x[1]])?;
                let w = g.shape(c)[1];
                let s = g.slice_cols(c, 1, w - 1)?;
                let row = g.select_row(s, 1)?;
                let n = g.shape(s)[0];
                let rows = g.broadcast_rows(row, n)?;
                let m = g.mul(rows, s)?;
                let flat = g.reshape(m, &[n * (w - 1)])?;
                g.reshape(flat, &[n, w - 1])
            },
        );
    }

    #[test]
    fn softmax_adjoints() {
        check_rule(
            "softmax",
            |r| (vec![], vec![vec![dims(r, 1, 4), dims(r, 1, 6)]]),
            |g, x, _| {
                let s = g.scale(x[0], 3.0);
                g.softmax(s)
            },
        );
    }

    #[test]
    fn layer_norm_adjoints() {
        check_rule(
            "layer_norm",
            |r| {
                let n = dims(r, 2, 6);
                (
                    vec![("gamma".into(), random(r, &[n])), ("beta".into(), random(r, &[n]))],
                    vec![vec![dims(r, 1, 3), n]],
                )
            },
            |g, x, p| g.layer_norm(x[0], p[0], p[1], 1e-5),
        );
    }

    #[test]
    fn embedding_adjoints() {
        check_rule(
            "embedding",
            |r| {
                let (v, c) = (dims(r, 2, 5), dims(r, 1, 4));
                (vec![("table".into(), random(r, &[v, c]))], vec![vec![3, c]])
            },
            |g, x, p| {
                let v = g.params().get(p[0]).value.shape()[0];
                let e = g.embedding(p[0], &[0, v - 1, 0])?;
                g.mul(e, x[0])
            },
        );
    }

    #[test]
    fn scale_rows_and_reductions_adjoints() {
        check_rule(
            "scale_rows/group_mean/mean_rows",
            |r| {
                let (n, c) = (dims(r, 1, 4), dims(r, 2, 6));
                (vec![], vec![vec![n, c], vec![n]])
            },
            |g, x, _| {
                let s = g.scale_rows(x[0], x[1])?;
                let c = g.shape(s)[1];
                let gm = g.group_mean(s, c / 2)?;
                let mr = g.mean_rows(s)?;
                let a = g.sum(gm);
                let b = g.sum(mr);
                let both = g.concat(&[a, b])?;
                Ok(both)
            },
        );
    }

    #[test]
    fn attention_adjoints() {
        check_rule(
            "attention",
            |r| {
                let heads = dims(r, 1, 2);
                let (nq, nk) = (dims(r, 1, 4), dims(r, 1, 4));
                (
                    vec![],
                    vec![
                        vec![nq, 2 * heads],
                        vec![nk, 2 * heads],
                        vec![nk, heads * dims(r, 1, 2)],
                    ],
                )
            },
            |g, x, _| {
                let heads = g.shape(x[0])[1] / 2;
                g.attention(x[0], x[1], x[2], heads)
            },
        );
    }

    #[test]
    fn pixel_correlate_adjoints() {
        check_rule(
            "pixel_correlate",
            |r| {
                let (h, w, p) = (dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3));
                (vec![], vec![vec![h, w, p + 1], vec![h, w, p]])
            },
            |g, x, _| g.pixel_correlate(x[0], x[1]),
        );
    }

    #[test]
    fn bce_adjoints() {
        check_rule(
            "bce",
            |r| (vec![], vec![vec![dims(r, 1, 8)]]),
            |g, x, _| {
                let n = g.shape(x[0])[0];
                let t = Tensor::new(&[n], (0..n).map(|i| (i % 2) as f64).collect()).unwrap();
                let p = g.sigmoid(x[0]);
                g.bce(p, &t)
            },
        );
    }

    #[test]
    fn backward_requires_a_scalar() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input_with_grad(&Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::InvalidUse(_))));
    }

    #[test]
    fn shared_inputs_accumulate_gradients() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input_with_grad(&Tensor::new(&[2], vec![3.0, -1.0]).unwrap());
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let s = g.sum(z);
        let back = g.backward(s).unwrap();
        assert_eq!(back.grad(x, 2), vec![7.0, -1.0]);
    }
}

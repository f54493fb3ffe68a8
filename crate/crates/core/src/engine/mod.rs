//! Reverse-mode gradient graph.
//!
//! A [`Graph`] is an append-only arena of nodes. Every op validates shapes,
//! runs its forward kernel eagerly, and records the parent ids plus whatever
//! the backward pass needs (e.g. argmin maps, softmax caches). [`Graph::backward`]
//! walks the tape in reverse creating one gradient buffer per contributing
//! node. There is no interior mutability and no threading; combined with the
//! fixed loop order in [`kernels`], results are bit-reproducible.
//!
//! Ops propagate NaN rather than masking it, so a poisoned forward value is
//! visible at the loss.

pub mod kernels;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::optim::{ParamId, ParamSet};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};
use crate::Result;

use kernels::WeightDims;

/// Handle to a node in one specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TensorId(u32);

impl TensorId {
    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Handle for the node at `index`; panics later if out of range, like any
    /// other stale id. Intended for whole-graph sweeps (stats, debugging).
    pub fn from_index(index: usize) -> Self {
        TensorId(index as u32)
    }
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf {
        /// Registry binding, if this leaf mirrors a parameter.
        param: Option<ParamId>,
    },
    Conv2d {
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        pad: usize,
    },
    AvgPool2 {
        x: TensorId,
    },
    BilinearResample {
        x: TensorId,
    },
    BoxFilter {
        x: TensorId,
        window: usize,
    },
    Concat {
        xs: Vec<TensorId>,
    },
    Slice {
        x: TensorId,
        start: usize,
    },
    Cws {
        xs: Vec<TensorId>,
        w: TensorId,
    },
    GridSample {
        src: TensorId,
        u: TensorId,
        v: TensorId,
    },
    DiffX {
        x: TensorId,
    },
    DiffY {
        x: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Div {
        a: TensorId,
        b: TensorId,
    },
    /// `b` has shape (n,1,1,1) and broadcasts over c,h,w.
    AddB {
        a: TensorId,
        b: TensorId,
    },
    MulB {
        a: TensorId,
        b: TensorId,
    },
    Abs {
        x: TensorId,
    },
    Relu {
        x: TensorId,
    },
    Sigmoid {
        x: TensorId,
    },
    Clamp {
        x: TensorId,
        lo: T,
        hi: T,
    },
    ExpNeg {
        x: TensorId,
    },
    Sqrt {
        x: TensorId,
    },
    Sin {
        x: TensorId,
    },
    Cos {
        x: TensorId,
    },
    Recip {
        x: TensorId,
    },
    Scale {
        x: TensorId,
        k: T,
    },
    AddScalar {
        x: TensorId,
    },
    MeanAll {
        x: TensorId,
    },
    SumAll {
        x: TensorId,
    },
    MeanSpatial {
        x: TensorId,
    },
    SumChannels {
        x: TensorId,
    },
    MinList {
        xs: Vec<TensorId>,
        argmin: Arc<Vec<u32>>,
    },
    SoftmaxCe {
        logits: TensorId,
        targets: Arc<Vec<i32>>,
        probs: Arc<Vec<T>>,
        count: usize,
    },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2 { .. } => "avg_pool2",
            Op::BilinearResample { .. } => "bilinear_resample",
            Op::BoxFilter { .. } => "box_filter",
            Op::Concat { .. } => "concat_channels",
            Op::Slice { .. } => "slice_channels",
            Op::Cws { .. } => "channel_weighted_sum",
            Op::GridSample { .. } => "grid_sample",
            Op::DiffX { .. } => "diff_x",
            Op::DiffY { .. } => "diff_y",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Div { .. } => "div",
            Op::AddB { .. } => "add_broadcast",
            Op::MulB { .. } => "mul_broadcast",
            Op::Abs { .. } => "abs",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Clamp { .. } => "clamp",
            Op::ExpNeg { .. } => "exp_neg",
            Op::Sqrt { .. } => "sqrt",
            Op::Sin { .. } => "sin",
            Op::Cos { .. } => "cos",
            Op::Recip { .. } => "recip",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::MeanAll { .. } => "mean_all",
            Op::SumAll { .. } => "sum_all",
            Op::MeanSpatial { .. } => "mean_spatial",
            Op::SumChannels { .. } => "sum_channels",
            Op::MinList { .. } => "min_over_list",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<TensorId> {
        match self {
            Op::Leaf { .. } => Vec::new(),
            Op::Conv2d { x, w, b, .. } => {
                let mut v = alloc::vec![*x, *w];
                if let Some(b) = b {
                    v.push(*b);
                }
                v
            }
            Op::AvgPool2 { x }
            | Op::BilinearResample { x }
            | Op::BoxFilter { x, .. }
            | Op::Slice { x, .. }
            | Op::DiffX { x }
            | Op::DiffY { x }
            | Op::Abs { x }
            | Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::Clamp { x, .. }
            | Op::ExpNeg { x }
            | Op::Sqrt { x }
            | Op::Sin { x }
            | Op::Cos { x }
            | Op::Recip { x }
            | Op::Scale { x, .. }
            | Op::AddScalar { x }
            | Op::MeanAll { x }
            | Op::SumAll { x }
            | Op::MeanSpatial { x }
            | Op::SumChannels { x } => alloc::vec![*x],
            Op::Concat { xs } | Op::MinList { xs, .. } => xs.clone(),
            Op::Cws { xs, w } => {
                let mut v = xs.clone();
                v.push(*w);
                v
            }
            Op::GridSample { src, u, v } => alloc::vec![*src, *u, *v],
            Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::Div { a, b }
            | Op::AddB { a, b }
            | Op::MulB { a, b } => alloc::vec![*a, *b],
            Op::SoftmaxCe { logits, .. } => alloc::vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node<T: Real> {
    shape: Shape,
    values: Arc<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
    label: Option<String>,
}

/// Per-node gradient buffers produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T: Real> {
    buffers: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: TensorId) -> Option<&[T]> {
        self.buffers
            .get(id.index())
            .and_then(|b| b.as_deref())
    }
}

/// The gradient graph. See the module docs for the overall contract.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    bindings: BTreeMap<(u64, ParamId), TensorId>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bindings: BTreeMap::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn shape(&self, id: TensorId) -> Shape {
        self.nodes[id.index()].shape
    }

    pub fn values(&self, id: TensorId) -> &[T] {
        &self.nodes[id.index()].values
    }

    /// Cheap: clones the `Arc`, not the data.
    pub fn tensor(&self, id: TensorId) -> Tensor<T> {
        let n = &self.nodes[id.index()];
        Tensor::from_shared(n.shape, Arc::clone(&n.values)).expect("node invariant")
    }

    pub fn scalar(&self, id: TensorId) -> T {
        debug_assert_eq!(self.nodes[id.index()].shape.count(), 1);
        self.nodes[id.index()].values[0]
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.index()].requires_grad
    }

    pub fn op_name(&self, id: TensorId) -> &'static str {
        self.nodes[id.index()].op.name()
    }

    /// Direct data dependencies of a node, in argument order.
    pub fn op_inputs(&self, id: TensorId) -> Vec<TensorId> {
        self.nodes[id.index()].op.inputs()
    }

    /// The registry parameter a leaf is bound to, if any.
    pub fn param_binding(&self, id: TensorId) -> Option<ParamId> {
        match self.nodes[id.index()].op {
            Op::Leaf { param } => param,
            _ => None,
        }
    }

    pub fn set_label(&mut self, id: TensorId, label: impl Into<String>) {
        self.nodes[id.index()].label = Some(label.into());
    }

    pub fn label(&self, id: TensorId) -> Option<&str> {
        self.nodes[id.index()].label.as_deref()
    }

    /// Nodes holding any non-finite value, for failure diagnostics.
    pub fn nonfinite_nodes(&self) -> Vec<(TensorId, &'static str, Option<&str>)> {
        let mut out = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.values.iter().all(|v| v.is_finite()) {
                out.push((TensorId(i as u32), n.op.name(), n.label.as_deref()));
            }
        }
        out
    }

    fn push(&mut self, node: Node<T>) -> TensorId {
        debug_assert_eq!(node.values.len(), node.shape.count());
        let id = TensorId(self.nodes.len() as u32);
        self.nodes.push(node);
        id
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> TensorId {
        self.push(Node {
            shape: t.shape,
            values: t.shared(),
            op: Op::Leaf { param: None },
            requires_grad,
            label: None,
        })
    }

    pub fn constant(&mut self, t: Tensor<T>) -> TensorId {
        self.leaf(t, false)
    }

    /// Binds a registry parameter as a gradient-requiring leaf. Binding the
    /// same parameter twice returns the first leaf, so weight sharing works
    /// by construction. Several sets may bind into one graph; their ids are
    /// kept apart by the set uid.
    pub fn param(&mut self, set: &ParamSet<T>, pid: ParamId) -> TensorId {
        let key = (set.uid(), pid);
        if let Some(&tid) = self.bindings.get(&key) {
            return tid;
        }
        let p = set.get(pid);
        let id = self.push(Node {
            shape: p.value.shape,
            values: p.value.shared(),
            op: Op::Leaf { param: Some(pid) },
            requires_grad: true,
            label: Some(p.name.clone()),
        });
        self.bindings.insert(key, id);
        id
    }

    /// Leaves bound to registry parameters, in binding order.
    pub fn bound_params(&self) -> impl Iterator<Item = (u64, ParamId, TensorId)> + '_ {
        self.bindings.iter().map(|(&(u, p), &t)| (u, p, t))
    }

    /// The leaf a parameter of `set` is bound to in this graph, if any.
    pub fn bound_leaf(&self, set: &ParamSet<T>, pid: ParamId) -> Option<TensorId> {
        self.bindings.get(&(set.uid(), pid)).copied()
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.index()].requires_grad)
    }

    // ---- spatial ops ----

    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let wd: WeightDims = (ws.n, ws.c, ws.h, ws.w);
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        if wd.1 != xs.c {
            return Err(Error::shape(
                "conv2d",
                format!("weight expects {} input channels, got {}", wd.1, xs.c),
            ));
        }
        if xs.h + 2 * pad < wd.2 || xs.w + 2 * pad < wd.3 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {}x{} larger than padded input {}", wd.2, wd.3, xs),
            ));
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != Shape::new(wd.0, 1, 1, 1) {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {} does not match {} output channels", bs, wd.0),
                ));
            }
        }
        let os = kernels::conv2d_out_shape(xs, wd, stride, pad);
        let mut out = vec![T::zero(); os.count()];
        kernels::conv2d_forward(
            self.values(x),
            xs,
            self.values(w),
            wd,
            b.map(|b| &**self.nodes[b.index()].values),
            stride,
            pad,
            &mut out,
            os,
        );
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        let rg = self.any_grad(&parents);
        Ok(self.push(Node {
            shape: os,
            values: Arc::new(out),
            op: Op::Conv2d { x, w, b, stride, pad },
            requires_grad: rg,
            label: None,
        }))
    }

    /// Stride-1 convolution preserving resolution. Requires an odd kernel;
    /// even kernels have no symmetric same-padding.
    pub fn conv2d_same(&mut self, x: TensorId, w: TensorId, b: Option<TensorId>) -> Result<TensorId> {
        let ws = self.shape(w);
        if ws.h % 2 == 0 || ws.w % 2 == 0 {
            return Err(Error::Config(format!(
                "same-padding convolution needs an odd kernel, got {}x{}",
                ws.h, ws.w
            )));
        }
        self.conv2d(x, w, b, 1, ws.h / 2)
    }

    pub fn avg_pool2(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape(x);
        if xs.h % 2 != 0 || xs.w % 2 != 0 {
            return Err(Error::shape(
                "avg_pool2",
                format!("input {} must have even spatial extents", xs),
            ));
        }
        let os = Shape::new(xs.n, xs.c, xs.h / 2, xs.w / 2);
        let mut out = vec![T::zero(); os.count()];
        kernels::avg_pool2_forward(self.values(x), xs, &mut out, os);
        let rg = self.requires_grad(x);
        Ok(self.push(Node {
            shape: os,
            values: Arc::new(out),
            op: Op::AvgPool2 { x },
            requires_grad: rg,
            label: None,
        }))
    }

    /// Half-pixel-center bilinear resize to (oh, ow), edges clamped.
    pub fn bilinear_resample(&mut self, x: TensorId, oh: usize, ow: usize) -> Result<TensorId> {
        if oh == 0 || ow == 0 {
            return Err(Error::shape("bilinear_resample", "empty target"));
        }
        let xs = self.shape(x);
        let os = Shape::new(xs.n, xs.c, oh, ow);
        let mut out = vec![T::zero(); os.count()];
        kernels::bilinear_resize_forward(self.values(x), xs, &mut out, os);
        let rg = self.requires_grad(x);
        Ok(self.push(Node {
            shape: os,
            values: Arc::new(out),
            op: Op::BilinearResample { x },
            requires_grad: rg,
            label: None,
        }))
    }

    pub fn box_filter(&mut self, x: TensorId, window: usize) -> Result<TensorId> {
        if window == 0 || window % 2 == 0 {
            return Err(Error::Config(format!(
                "box filter window must be odd and positive, got {window}"
            )));
        }
        let xs = self.shape(x);
        let mut out = vec![T::zero(); xs.count()];
        kernels::box_filter_forward(self.values(x), xs, window, &mut out);
        let rg = self.requires_grad(x);
        Ok(self.push(Node {
            shape: xs,
            values: Arc::new(out),
            op: Op::BoxFilter { x, window },
            requires_grad: rg,
            label: None,
        }))
    }

    pub fn concat_channels(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::shape("concat_channels", "no inputs"));
        }
        let first = self.shape(xs[0]);
        let mut c_total = 0;
        for &x in xs {
            let s = self.shape(x);
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("input {} incompatible with {}", s, first),
                ));
            }
            c_total += s.c;
        }
        let os = Shape::new(first.n, c_total, first.h, first.w);
        let mut out = vec![T::zero(); os.count()];
        let plane = first.h * first.w;
        for n in 0..os.n {
            let mut co = 0;
            for &x in xs {
                let s = self.shape(x);
                let src = self.values(x);
                for c in 0..s.c {
                    let from = s.idx(n, c, 0, 0);
                    let to = os.idx(n, co + c, 0, 0);
                    out[to..to + plane].copy_from_slice(&src[from..from + plane]);
                }
                co += s.c;
            }
        }
        let rg = self.any_grad(xs);
        Ok(self.push(Node {
            shape: os,
            values: Arc::new(out),
            op: Op::Concat { xs: xs.to_vec() },
            requires_grad: rg,
            label: None,
        }))
    }

    pub fn slice_channels(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let xs = self.shape(x);
        if len == 0 || start + len > xs.c {
            return Err(Error::shape(
                "slice_channels",
                format!("slice [{start}, {}) out of {} channels", start + len, xs.c),
            ));
        }
        let os = Shape::new(xs.n, len, xs.h, xs.w);
        let mut out = vec![T::zero(); os.count()];
        let plane = xs.h * xs.w;
        let src = self.values(x);
        for n in 0..xs.n {
            for c in 0..len {
                let from = xs.idx(n, start + c, 0, 0);
                let to = os.idx(n, c, 0, 0);
                out[to..to + plane].copy_from_slice(&src[from..from + plane]);
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Node {
            shape: os,
            values: Arc::new(out),
            op: Op::Slice { x, start },
            requires_grad: rg,
            label: None,
        }))
    }

    /// Per-source, per-channel weighted sum: out[n,c] = sum_s w[s,c] * x_s[n,c].
    /// Weights have shape (sources, channels, 1, 1).
    pub fn channel_weighted_sum(&mut self, xs: &[TensorId], w: TensorId) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::shape("channel_weighted_sum", "no inputs"));
        }
        let s0 = self.shape(xs[0]);
        for &x in xs {
            if self.shape(x) != s0 {
                return Err(Error::shape(
                    "channel_weighted_sum",
                    format!("mixed input shapes {} vs {}", self.shape(x), s0),
                ));
            }
        }
        let ws = self.shape(w);
        if ws != Shape::new(xs.len(), s0.c, 1, 1) {
            return Err(Error::shape(
                "channel_weighted_sum",
                format!(
                    "weights {} do not match {} sources x {} channels",
                    ws,
                    xs.len(),
                    s0.c
                ),
            ));
        }
        let mut out = vec![T::zero(); s0.count()];
        let plane = s0.h * s0.w;
        for (si, &x) in xs.iter().enumerate() {
            let src = self.values(x);
            let wv = self.values(w);
            for n in 0..s0.n {
                for c in 0..s0.c {
                    let k = wv[si * s0.c + c];
                    let base = s0.idx(n, c, 0, 0);
                    for i in 0..plane {
                        out[base + i] = out[base + i] + k * src[base + i];
                    }
                }
            }
        }
        let rg = self.any_grad(xs) || self.requires_grad(w);
        Ok(self.push(Node {
            shape: s0,
            values: Arc::new(out),
            op: Op::Cws { xs: xs.to_vec(), w },
            requires_grad: rg,
            label: None,
        }))
    }

    /// Samples `src` at coordinates (u, v) given in source pixel units, with
    /// border clamping. u and v have shape (n,1,h,w); the output takes its
    /// spatial extent from the grids and its channels from the source.
    pub fn grid_sample(&mut self, src: TensorId, u: TensorId, v: TensorId) -> Result<TensorId> {
        let ss = self.shape(src);
        let us = self.shape(u);
        let vs = self.shape(v);
        if us != vs {
            return Err(Error::shape(
                "grid_sample",
                format!("u {} and v {} differ", us, vs),
            ));
        }
        if us.c != 1 || us.n != ss.n {
            return Err(Error::shape(
                "grid_sample",
                format!("grids {} must be (n,1,h,w) with n = {}", us, ss.n),
            ));
        }
        let os = Shape::new(ss.n, ss.c, us.h, us.w);
        let mut out = vec![T::zero(); os.count()];
        kernels::grid_sample_forward(
            self.values(src),
            ss,
            self.values(u),
            self.values(v),
            us,
            &mut out,
            os,
        );
        let rg = self.any_grad(&[src, u, v]);
        Ok(self.push(Node {
            shape: os,
            values: Arc::new(out),
            op: Op::GridSample { src, u, v },
            requires_grad: rg,
            label: None,
        }))
    }

    /// Forward difference along x: out[..., i] = x[..., i+1] - x[..., i].
    pub fn diff_x(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape(x);
        if xs.w < 2 {
            return Err(Error::shape("diff_x", format!("width {} too small", xs.w)));
        }
        let os = Shape::new(xs.n, xs.c, xs.h, xs.w - 1);
        let src = self.values(x);
        let mut out = vec![T::zero(); os.count()];
        for n in 0..os.n {
            for c in 0..os.c {
                for y in 0..os.h {
                    for i in 0..os.w {
                        out[os.idx(n, c, y, i)] =
                            src[xs.idx(n, c, y, i + 1)] - src[xs.idx(n, c, y, i)];
                    }
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Node {
            shape: os,
            values: Arc::new(out),
            op: Op::DiffX { x },
            requires_grad: rg,
            label: None,
        }))
    }

    pub fn diff_y(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape(x);
        if xs.h < 2 {
            return Err(Error::shape("diff_y", format!("height {} too small", xs.h)));
        }
        let os = Shape::new(xs.n, xs.c, xs.h - 1, xs.w);
        let src = self.values(x);
        let mut out = vec![T::zero(); os.count()];
        for n in 0..os.n {
            for c in 0..os.c {
                for y in 0..os.h {
                    for i in 0..os.w {
                        out[os.idx(n, c, y, i)] =
                            src[xs.idx(n, c, y + 1, i)] - src[xs.idx(n, c, y, i)];
                    }
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Node {
            shape: os,
            values: Arc::new(out),
            op: Op::DiffY { x },
            requires_grad: rg,
            label: None,
        }))
    }

    // ---- elementwise ----

    fn binary(
        &mut self,
        a: TensorId,
        b: TensorId,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        make: impl Fn(TensorId, TensorId) -> Op<T>,
    ) -> Result<TensorId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::shape(name, format!("{} vs {}", sa, sb)));
        }
        let va = self.values(a);
        let vb = self.values(b);
        let out: Vec<T> = va.iter().zip(vb.iter()).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Node {
            shape: sa,
            values: Arc::new(out),
            op: make(a, b),
            requires_grad: rg,
            label: None,
        }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "div", |x, y| x / y, |a, b| Op::Div { a, b })
    }

    fn broadcast_nb(
        &mut self,
        a: TensorId,
        b: TensorId,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        make: impl Fn(TensorId, TensorId) -> Op<T>,
    ) -> Result<TensorId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb != Shape::new(sa.n, 1, 1, 1) {
            return Err(Error::shape(
                name,
                format!("broadcast operand {} must be ({},1,1,1)", sb, sa.n),
            ));
        }
        let va = self.values(a);
        let vb = self.values(b);
        let per = sa.c * sa.h * sa.w;
        let mut out = Vec::with_capacity(sa.count());
        for n in 0..sa.n {
            let k = vb[n];
            for i in 0..per {
                out.push(f(va[n * per + i], k));
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Node {
            shape: sa,
            values: Arc::new(out),
            op: make(a, b),
            requires_grad: rg,
            label: None,
        }))
    }

    /// a + b with b of shape (n,1,1,1) broadcast over c,h,w.
    pub fn add_b(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.broadcast_nb(a, b, "add_broadcast", |x, y| x + y, |a, b| Op::AddB { a, b })
    }

    /// a * b with b of shape (n,1,1,1) broadcast over c,h,w.
    pub fn mul_b(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.broadcast_nb(a, b, "mul_broadcast", |x, y| x * y, |a, b| Op::MulB { a, b })
    }

    fn unary(
        &mut self,
        x: TensorId,
        f: impl Fn(T) -> T,
        op: Op<T>,
    ) -> TensorId {
        let xs = self.shape(x);
        let out: Vec<T> = self.values(x).iter().map(|&v| f(v)).collect();
        let rg = self.requires_grad(x);
        self.push(Node {
            shape: xs,
            values: Arc::new(out),
            op,
            requires_grad: rg,
            label: None,
        })
    }

    pub fn abs(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| v.abs(), Op::Abs { x })
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.unary(
            x,
            |v| {
                if v.is_nan() {
                    v
                } else if v > T::zero() {
                    v
                } else {
                    T::zero()
                }
            },
            Op::Relu { x },
        )
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.unary(
            x,
            |v| T::one() / (T::one() + (-v).exp()),
            Op::Sigmoid { x },
        )
    }

    pub fn clamp(&mut self, x: TensorId, lo: T, hi: T) -> Result<TensorId> {
        if !(lo <= hi) {
            return Err(Error::Config(format!("clamp bounds [{lo}, {hi}] inverted")));
        }
        Ok(self.unary(
            x,
            |v| {
                if v < lo {
                    lo
                } else if v > hi {
                    hi
                } else {
                    v
                }
            },
            Op::Clamp { x, lo, hi },
        ))
    }

    pub fn exp_neg(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| (-v).exp(), Op::ExpNeg { x })
    }

    pub fn sqrt(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| v.sqrt(), Op::Sqrt { x })
    }

    pub fn sin(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| v.sin(), Op::Sin { x })
    }

    pub fn cos(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| v.cos(), Op::Cos { x })
    }

    pub fn recip(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| T::one() / v, Op::Recip { x })
    }

    pub fn scale(&mut self, x: TensorId, k: T) -> TensorId {
        self.unary(x, |v| v * k, Op::Scale { x, k })
    }

    pub fn add_scalar(&mut self, x: TensorId, k: T) -> TensorId {
        self.unary(x, |v| v + k, Op::AddScalar { x })
    }

    // ---- reductions ----

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let count = T::of_usize(self.shape(x).count());
        let mut acc = T::zero();
        for &v in self.values(x) {
            acc = acc + v;
        }
        let rg = self.requires_grad(x);
        self.push(Node {
            shape: Shape::new(1, 1, 1, 1),
            values: Arc::new(vec![acc / count]),
            op: Op::MeanAll { x },
            requires_grad: rg,
            label: None,
        })
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let mut acc = T::zero();
        for &v in self.values(x) {
            acc = acc + v;
        }
        let rg = self.requires_grad(x);
        self.push(Node {
            shape: Shape::new(1, 1, 1, 1),
            values: Arc::new(vec![acc]),
            op: Op::SumAll { x },
            requires_grad: rg,
            label: None,
        })
    }

    /// (n,c,h,w) -> (n,c,1,1), mean over the spatial plane.
    pub fn mean_spatial(&mut self, x: TensorId) -> TensorId {
        let xs = self.shape(x);
        let os = Shape::new(xs.n, xs.c, 1, 1);
        let inv = T::one() / T::of_usize(xs.h * xs.w);
        let src = self.values(x);
        let mut out = Vec::with_capacity(os.count());
        for n in 0..xs.n {
            for c in 0..xs.c {
                let base = xs.idx(n, c, 0, 0);
                let mut acc = T::zero();
                for i in 0..xs.h * xs.w {
                    acc = acc + src[base + i];
                }
                out.push(acc * inv);
            }
        }
        let rg = self.requires_grad(x);
        self.push(Node {
            shape: os,
            values: Arc::new(out),
            op: Op::MeanSpatial { x },
            requires_grad: rg,
            label: None,
        })
    }

    /// (n,c,h,w) -> (n,1,h,w), sum across channels.
    pub fn sum_channels(&mut self, x: TensorId) -> TensorId {
        let xs = self.shape(x);
        let os = Shape::new(xs.n, 1, xs.h, xs.w);
        let src = self.values(x);
        let mut out = vec![T::zero(); os.count()];
        for n in 0..xs.n {
            for c in 0..xs.c {
                for y in 0..xs.h {
                    for x_ in 0..xs.w {
                        let o = os.idx(n, 0, y, x_);
                        out[o] = out[o] + src[xs.idx(n, c, y, x_)];
                    }
                }
            }
        }
        let rg = self.requires_grad(x);
        self.push(Node {
            shape: os,
            values: Arc::new(out),
            op: Op::SumChannels { x },
            requires_grad: rg,
            label: None,
        })
    }

    /// (n,c,h,w) -> (n,1,h,w), mean across channels.
    pub fn mean_channels(&mut self, x: TensorId) -> TensorId {
        let c = self.shape(x).c;
        let summed = self.sum_channels(x);
        self.scale(summed, T::one() / T::of_usize(c))
    }

    /// Pointwise minimum over a list of same-shaped tensors. Ties keep the
    /// earliest source; the gradient flows only to the winner. A NaN in any
    /// source poisons that pixel.
    pub fn min_over_list(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::shape("min_over_list", "no inputs"));
        }
        let s0 = self.shape(xs[0]);
        for &x in xs {
            if self.shape(x) != s0 {
                return Err(Error::shape(
                    "min_over_list",
                    format!("mixed shapes {} vs {}", self.shape(x), s0),
                ));
            }
        }
        let count = s0.count();
        let mut out = self.values(xs[0]).to_vec();
        let mut arg = vec![0u32; count];
        for (si, &x) in xs.iter().enumerate().skip(1) {
            let src = self.values(x);
            for i in 0..count {
                if src[i] < out[i] {
                    out[i] = src[i];
                    arg[i] = si as u32;
                }
            }
        }
        for &x in xs {
            let src = self.values(x);
            for i in 0..count {
                if src[i].is_nan() {
                    out[i] = T::nan();
                }
            }
        }
        let rg = self.any_grad(xs);
        Ok(self.push(Node {
            shape: s0,
            values: Arc::new(out),
            op: Op::MinList {
                xs: xs.to_vec(),
                argmin: Arc::new(arg),
            },
            requires_grad: rg,
            label: None,
        }))
    }

    /// Mean softmax cross entropy over pixels. `targets` holds one class id
    /// per (n, y, x) in row-major order; negative values are ignored pixels.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, targets: &[i32]) -> Result<TensorId> {
        let ls = self.shape(logits);
        if targets.len() != ls.n * ls.h * ls.w {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!(
                    "{} targets for {} pixels",
                    targets.len(),
                    ls.n * ls.h * ls.w
                ),
            ));
        }
        for &t in targets {
            if t >= ls.c as i32 {
                return Err(Error::Usage(format!(
                    "target class {t} out of range for {} channels",
                    ls.c
                )));
            }
        }
        let mut probs = vec![T::zero(); ls.count()];
        let (total, count) = kernels::softmax_ce_forward(self.values(logits), ls, targets, &mut probs);
        let mean = if count == 0 {
            T::zero()
        } else {
            total / T::of_usize(count)
        };
        let rg = self.requires_grad(logits);
        Ok(self.push(Node {
            shape: Shape::new(1, 1, 1, 1),
            values: Arc::new(vec![mean]),
            op: Op::SoftmaxCe {
                logits,
                targets: Arc::new(targets.to_vec()),
                probs: Arc::new(probs),
                count,
            },
            requires_grad: rg,
            label: None,
        }))
    }

    // ---- backward ----

    /// Reverse-mode sweep from a scalar loss. Returns one gradient buffer per
    /// contributing node; leaves keep theirs so callers can read them.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients<T>> {
        self.backward_blocking(loss, &[])
    }

    /// Like [`Graph::backward`], but discards the gradient arriving at each
    /// id in `blocked` instead of propagating it. Used to probe how much of
    /// the gradient flows through a given path.
    pub fn backward_blocking(&self, loss: TensorId, blocked: &[TensorId]) -> Result<Gradients<T>> {
        if self.shape(loss).count() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got {}",
                self.shape(loss)
            )));
        }
        let mut buffers: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if !self.requires_grad(loss) {
            return Ok(Gradients { buffers });
        }
        buffers[loss.index()] = Some(vec![T::one()]);
        for idx in (0..=loss.index()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                buffers[idx] = None;
                continue;
            }
            let Some(g) = buffers[idx].take() else {
                continue;
            };
            if blocked.iter().any(|b| b.index() == idx) {
                continue;
            }
            self.propagate(idx, &g, &mut buffers);
            if matches!(node.op, Op::Leaf { .. }) {
                buffers[idx] = Some(g);
            }
        }
        Ok(Gradients { buffers })
    }

    fn wants(&self, id: TensorId) -> bool {
        self.nodes[id.index()].requires_grad
    }

    fn buf<'a>(&self, buffers: &'a mut Vec<Option<Vec<T>>>, id: TensorId) -> &'a mut [T] {
        let slot = &mut buffers[id.index()];
        if slot.is_none() {
            *slot = Some(vec![T::zero(); self.nodes[id.index()].shape.count()]);
        }
        slot.as_mut().unwrap()
    }

    fn propagate(&self, idx: usize, g: &[T], buffers: &mut Vec<Option<Vec<T>>>) {
        let node = &self.nodes[idx];
        let os = node.shape;
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let wd: WeightDims = (ws.n, ws.c, ws.h, ws.w);
                if self.wants(*x) {
                    let wv = Arc::clone(&self.nodes[w.index()].values);
                    kernels::conv2d_backward_input(
                        g,
                        os,
                        &wv,
                        wd,
                        *stride,
                        *pad,
                        self.buf(buffers, *x),
                        xs,
                    );
                }
                if self.wants(*w) {
                    let xv = Arc::clone(&self.nodes[x.index()].values);
                    kernels::conv2d_backward_weight(
                        g,
                        os,
                        &xv,
                        xs,
                        *stride,
                        *pad,
                        self.buf(buffers, *w),
                        wd,
                    );
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        kernels::conv2d_backward_bias(g, os, self.buf(buffers, *b));
                    }
                }
            }
            Op::AvgPool2 { x } => {
                if self.wants(*x) {
                    let xs = self.shape(*x);
                    kernels::avg_pool2_backward(g, os, self.buf(buffers, *x), xs);
                }
            }
            Op::BilinearResample { x } => {
                if self.wants(*x) {
                    let xs = self.shape(*x);
                    kernels::bilinear_resize_backward(g, os, self.buf(buffers, *x), xs);
                }
            }
            Op::BoxFilter { x, window } => {
                if self.wants(*x) {
                    let xs = self.shape(*x);
                    kernels::box_filter_backward(g, xs, *window, self.buf(buffers, *x));
                }
            }
            Op::Concat { xs } => {
                let plane = os.h * os.w;
                let mut co = 0;
                for &x in xs {
                    let s = self.shape(x);
                    if self.wants(x) {
                        let gx = self.buf(buffers, x);
                        for n in 0..os.n {
                            for c in 0..s.c {
                                let from = os.idx(n, co + c, 0, 0);
                                let to = s.idx(n, c, 0, 0);
                                for i in 0..plane {
                                    gx[to + i] = gx[to + i] + g[from + i];
                                }
                            }
                        }
                    }
                    co += s.c;
                }
            }
            Op::Slice { x, start } => {
                if self.wants(*x) {
                    let xs = self.shape(*x);
                    let plane = os.h * os.w;
                    let gx = self.buf(buffers, *x);
                    for n in 0..os.n {
                        for c in 0..os.c {
                            let from = os.idx(n, c, 0, 0);
                            let to = xs.idx(n, start + c, 0, 0);
                            for i in 0..plane {
                                gx[to + i] = gx[to + i] + g[from + i];
                            }
                        }
                    }
                }
            }
            Op::Cws { xs, w } => {
                let s0 = os;
                let plane = s0.h * s0.w;
                let wv = Arc::clone(&self.nodes[w.index()].values);
                for (si, &x) in xs.iter().enumerate() {
                    if self.wants(x) {
                        let gx = self.buf(buffers, x);
                        for n in 0..s0.n {
                            for c in 0..s0.c {
                                let k = wv[si * s0.c + c];
                                let base = s0.idx(n, c, 0, 0);
                                for i in 0..plane {
                                    gx[base + i] = gx[base + i] + k * g[base + i];
                                }
                            }
                        }
                    }
                }
                if self.wants(*w) {
                    // d/dw[s,c] is the per-channel spatial dot product of the
                    // incoming gradient with source s.
                    for (si, &x) in xs.iter().enumerate() {
                        let xv = Arc::clone(&self.nodes[x.index()].values);
                        let gw = self.buf(buffers, *w);
                        for n in 0..s0.n {
                            for c in 0..s0.c {
                                let base = s0.idx(n, c, 0, 0);
                                let mut acc = T::zero();
                                for i in 0..plane {
                                    acc = acc + g[base + i] * xv[base + i];
                                }
                                gw[si * s0.c + c] = gw[si * s0.c + c] + acc;
                            }
                        }
                    }
                }
            }
            Op::GridSample { src, u, v } => {
                let ss = self.shape(*src);
                let gs = self.shape(*u);
                let uv = Arc::clone(&self.nodes[u.index()].values);
                let vv = Arc::clone(&self.nodes[v.index()].values);
                let sv = Arc::clone(&self.nodes[src.index()].values);
                let want_src = self.wants(*src);
                let want_u = self.wants(*u);
                let want_v = self.wants(*v);
                // Split buffers without aliasing: take each out, then restore.
                let mut gsrc = want_src.then(|| {
                    buffers[src.index()]
                        .take()
                        .unwrap_or_else(|| vec![T::zero(); ss.count()])
                });
                let mut gu = want_u.then(|| {
                    buffers[u.index()]
                        .take()
                        .unwrap_or_else(|| vec![T::zero(); gs.count()])
                });
                let mut gv = want_v.then(|| {
                    buffers[v.index()]
                        .take()
                        .unwrap_or_else(|| vec![T::zero(); gs.count()])
                });
                kernels::grid_sample_backward(
                    g,
                    os,
                    &sv,
                    ss,
                    &uv,
                    &vv,
                    gs,
                    gsrc.as_deref_mut(),
                    gu.as_deref_mut(),
                    gv.as_deref_mut(),
                );
                if let Some(b) = gsrc {
                    buffers[src.index()] = Some(b);
                }
                if let Some(b) = gu {
                    buffers[u.index()] = Some(b);
                }
                if let Some(b) = gv {
                    buffers[v.index()] = Some(b);
                }
            }
            Op::DiffX { x } => {
                if self.wants(*x) {
                    let xs = self.shape(*x);
                    let gx = self.buf(buffers, *x);
                    for n in 0..os.n {
                        for c in 0..os.c {
                            for y in 0..os.h {
                                for i in 0..os.w {
                                    let gv = g[os.idx(n, c, y, i)];
                                    let hi = xs.idx(n, c, y, i + 1);
                                    let lo = xs.idx(n, c, y, i);
                                    gx[hi] = gx[hi] + gv;
                                    gx[lo] = gx[lo] - gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::DiffY { x } => {
                if self.wants(*x) {
                    let xs = self.shape(*x);
                    let gx = self.buf(buffers, *x);
                    for n in 0..os.n {
                        for c in 0..os.c {
                            for y in 0..os.h {
                                for i in 0..os.w {
                                    let gv = g[os.idx(n, c, y, i)];
                                    let hi = xs.idx(n, c, y + 1, i);
                                    let lo = xs.idx(n, c, y, i);
                                    gx[hi] = gx[hi] + gv;
                                    gx[lo] = gx[lo] - gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for &p in &[*a, *b] {
                    if self.wants(p) {
                        let gp = self.buf(buffers, p);
                        for i in 0..g.len() {
                            gp[i] = gp[i] + g[i];
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.wants(*a) {
                    let ga = self.buf(buffers, *a);
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i];
                    }
                }
                if self.wants(*b) {
                    let gb = self.buf(buffers, *b);
                    for i in 0..g.len() {
                        gb[i] = gb[i] - g[i];
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    let bv = Arc::clone(&self.nodes[b.index()].values);
                    let ga = self.buf(buffers, *a);
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * bv[i];
                    }
                }
                if self.wants(*b) {
                    let av = Arc::clone(&self.nodes[a.index()].values);
                    let gb = self.buf(buffers, *b);
                    for i in 0..g.len() {
                        gb[i] = gb[i] + g[i] * av[i];
                    }
                }
            }
            Op::Div { a, b } => {
                let bv = Arc::clone(&self.nodes[b.index()].values);
                if self.wants(*a) {
                    let ga = self.buf(buffers, *a);
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] / bv[i];
                    }
                }
                if self.wants(*b) {
                    let av = Arc::clone(&self.nodes[a.index()].values);
                    let gb = self.buf(buffers, *b);
                    for i in 0..g.len() {
                        gb[i] = gb[i] - g[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
            }
            Op::AddB { a, b } => {
                let per = os.c * os.h * os.w;
                if self.wants(*a) {
                    let ga = self.buf(buffers, *a);
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i];
                    }
                }
                if self.wants(*b) {
                    let gb = self.buf(buffers, *b);
                    for n in 0..os.n {
                        let mut acc = T::zero();
                        for i in 0..per {
                            acc = acc + g[n * per + i];
                        }
                        gb[n] = gb[n] + acc;
                    }
                }
            }
            Op::MulB { a, b } => {
                let per = os.c * os.h * os.w;
                if self.wants(*a) {
                    let bv = Arc::clone(&self.nodes[b.index()].values);
                    let ga = self.buf(buffers, *a);
                    for n in 0..os.n {
                        let k = bv[n];
                        for i in 0..per {
                            ga[n * per + i] = ga[n * per + i] + g[n * per + i] * k;
                        }
                    }
                }
                if self.wants(*b) {
                    let av = Arc::clone(&self.nodes[a.index()].values);
                    let gb = self.buf(buffers, *b);
                    for n in 0..os.n {
                        let mut acc = T::zero();
                        for i in 0..per {
                            acc = acc + g[n * per + i] * av[n * per + i];
                        }
                        gb[n] = gb[n] + acc;
                    }
                }
            }
            Op::Abs { x } => {
                if self.wants(*x) {
                    let xv = Arc::clone(&self.nodes[x.index()].values);
                    let gx = self.buf(buffers, *x);
                    for i in 0..g.len() {
                        // subgradient 0 at the kink
                        let s = if xv[i] > T::zero() {
                            T::one()
                        } else if xv[i] < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        gx[i] = gx[i] + g[i] * s;
                    }
                }
            }
            Op::Relu { x } => {
                if self.wants(*x) {
                    let xv = Arc::clone(&self.nodes[x.index()].values);
                    let gx = self.buf(buffers, *x);
                    for i in 0..g.len() {
                        if xv[i] > T::zero() {
                            gx[i] = gx[i] + g[i];
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                if self.wants(*x) {
                    let ov = Arc::clone(&node.values);
                    let gx = self.buf(buffers, *x);
                    for i in 0..g.len() {
                        gx[i] = gx[i] + g[i] * ov[i] * (T::one() - ov[i]);
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                if self.wants(*x) {
                    let xv = Arc::clone(&self.nodes[x.index()].values);
                    let gx = self.buf(buffers, *x);
                    for i in 0..g.len() {
                        // strictly interior values pass gradient
                        if xv[i] > *lo && xv[i] < *hi {
                            gx[i] = gx[i] + g[i];
                        }
                    }
                }
            }
            Op::ExpNeg { x } => {
                if self.wants(*x) {
                    let ov = Arc::clone(&node.values);
                    let gx = self.buf(buffers, *x);
                    for i in 0..g.len() {
                        gx[i] = gx[i] - g[i] * ov[i];
                    }
                }
            }
            Op::Sqrt { x } => {
                if self.wants(*x) {
                    let ov = Arc::clone(&node.values);
                    let half = T::of(0.5);
                    let gx = self.buf(buffers, *x);
                    for i in 0..g.len() {
                        gx[i] = gx[i] + g[i] * half / ov[i];
                    }
                }
            }
            Op::Sin { x } => {
                if self.wants(*x) {
                    let xv = Arc::clone(&self.nodes[x.index()].values);
                    let gx = self.buf(buffers, *x);
                    for i in 0..g.len() {
                        gx[i] = gx[i] + g[i] * xv[i].cos();
                    }
                }
            }
            Op::Cos { x } => {
                if self.wants(*x) {
                    let xv = Arc::clone(&self.nodes[x.index()].values);
                    let gx = self.buf(buffers, *x);
                    for i in 0..g.len() {
                        gx[i] = gx[i] - g[i] * xv[i].sin();
                    }
                }
            }
            Op::Recip { x } => {
                if self.wants(*x) {
                    let ov = Arc::clone(&node.values);
                    let gx = self.buf(buffers, *x);
                    for i in 0..g.len() {
                        gx[i] = gx[i] - g[i] * ov[i] * ov[i];
                    }
                }
            }
            Op::Scale { x, k } => {
                if self.wants(*x) {
                    let gx = self.buf(buffers, *x);
                    for i in 0..g.len() {
                        gx[i] = gx[i] + g[i] * *k;
                    }
                }
            }
            Op::AddScalar { x, .. } => {
                if self.wants(*x) {
                    let gx = self.buf(buffers, *x);
                    for i in 0..g.len() {
                        gx[i] = gx[i] + g[i];
                    }
                }
            }
            Op::MeanAll { x } => {
                if self.wants(*x) {
                    let k = g[0] / T::of_usize(self.shape(*x).count());
                    let gx = self.buf(buffers, *x);
                    for v in gx.iter_mut() {
                        *v = *v + k;
                    }
                }
            }
            Op::SumAll { x } => {
                if self.wants(*x) {
                    let k = g[0];
                    let gx = self.buf(buffers, *x);
                    for v in gx.iter_mut() {
                        *v = *v + k;
                    }
                }
            }
            Op::MeanSpatial { x } => {
                if self.wants(*x) {
                    let xs = self.shape(*x);
                    let inv = T::one() / T::of_usize(xs.h * xs.w);
                    let gx = self.buf(buffers, *x);
                    for n in 0..xs.n {
                        for c in 0..xs.c {
                            let k = g[n * xs.c + c] * inv;
                            let base = xs.idx(n, c, 0, 0);
                            for i in 0..xs.h * xs.w {
                                gx[base + i] = gx[base + i] + k;
                            }
                        }
                    }
                }
            }
            Op::SumChannels { x } => {
                if self.wants(*x) {
                    let xs = self.shape(*x);
                    let gx = self.buf(buffers, *x);
                    for n in 0..xs.n {
                        for c in 0..xs.c {
                            for y in 0..xs.h {
                                for x_ in 0..xs.w {
                                    let i = xs.idx(n, c, y, x_);
                                    gx[i] = gx[i] + g[os.idx(n, 0, y, x_)];
                                }
                            }
                        }
                    }
                }
            }
            Op::MinList { xs, argmin } => {
                for (si, &x) in xs.iter().enumerate() {
                    if self.wants(x) {
                        let am = Arc::clone(argmin);
                        let gx = self.buf(buffers, x);
                        for i in 0..g.len() {
                            if am[i] == si as u32 {
                                gx[i] = gx[i] + g[i];
                            }
                        }
                    }
                }
            }
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
                count,
            } => {
                if self.wants(*logits) {
                    let ls = self.shape(*logits);
                    let t = Arc::clone(targets);
                    let p = Arc::clone(probs);
                    kernels::softmax_ce_backward(
                        g[0],
                        &p,
                        ls,
                        &t,
                        *count,
                        self.buf(buffers, *logits),
                    );
                }
            }
        }
    }

    /// Adds the gradients of leaves bound to `set` into the registry
    /// (`grad += leaf_grad`), so repeated backward calls accumulate until
    /// [`ParamSet::zero_grad`]. Leaves bound to other sets are untouched.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, set: &mut ParamSet<T>) {
        for (&(uid, pid), tid) in self.bindings.iter() {
            if uid != set.uid() {
                continue;
            }
            if let Some(g) = grads.get(*tid) {
                set.accumulate_grad(pid, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn t1(values: &[f64]) -> Tensor<f64> {
        Tensor::new(Shape::new(1, 1, 1, values.len()), values.to_vec()).unwrap()
    }

    #[test]
    fn add_mul_forward_backward() {
        let mut g = Graph::new();
        let a = g.leaf(t1(&[1.0, 2.0]), true);
        let b = g.leaf(t1(&[3.0, 5.0]), true);
        let p = g.mul(a, b).unwrap();
        let s = g.sum_all(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(g.values(p), &[3.0, 10.0]);
        assert_eq!(grads.get(a).unwrap(), &[3.0, 5.0]);
        assert_eq!(grads.get(b).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn division_gradients() {
        let mut g = Graph::new();
        let a = g.leaf(t1(&[6.0]), true);
        let b = g.leaf(t1(&[2.0]), true);
        let q = g.div(a, b).unwrap();
        let s = g.sum_all(q);
        let grads = g.backward(s).unwrap();
        assert_eq!(g.scalar(q), 3.0);
        assert_eq!(grads.get(a).unwrap(), &[0.5]);
        assert_eq!(grads.get(b).unwrap(), &[-1.5]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let a = g.leaf(t1(&[1.0, 2.0]), true);
        assert!(matches!(g.backward(a), Err(Error::Usage(_))));
    }

    #[test]
    fn avg_pool_gradient_is_quarter() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::from_fn(Shape::new(1, 1, 2, 2), |_, _, y, x| (y * 2 + x) as f64),
            true,
        );
        let p = g.avg_pool2(x).unwrap();
        let s = g.sum_all(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(g.scalar(p), 1.5);
        assert_eq!(grads.get(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn odd_extent_pooling_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(Shape::new(1, 1, 3, 4)), false);
        assert!(g.avg_pool2(x).is_err());
    }

    #[test]
    fn bilinear_doubling_of_two_pixels() {
        // Half-pixel centers with edge clamping: [0, 1] -> [0, 0.25, 0.75, 1].
        let mut g = Graph::new();
        let x = g.leaf(t1(&[0.0, 1.0]), false);
        let y = g.bilinear_resample(x, 1, 4).unwrap();
        let got = g.values(y);
        let want = [0.0, 0.25, 0.75, 1.0];
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12, "{got:?}");
        }
    }

    #[test]
    fn concat_slice_roundtrip_gradients() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::full(Shape::new(1, 2, 2, 2), 1.0), true);
        let b = g.leaf(Tensor::full(Shape::new(1, 1, 2, 2), 2.0), true);
        let cat = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.shape(cat).c, 3);
        let sl = g.slice_channels(cat, 2, 1).unwrap();
        let s = g.sum_all(sl);
        let grads = g.backward(s).unwrap();
        assert_eq!(g.scalar(s), 8.0);
        assert_eq!(grads.get(a).unwrap(), &[0.0; 8]);
        assert_eq!(grads.get(b).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::from_fn(Shape::new(1, 1, 3, 3), |_, _, y, x| (y * 3 + x) as f64),
            true,
        );
        // 3x3 kernel with 1 in the middle reproduces the input under same padding.
        let w = g.leaf(
            Tensor::from_fn(Shape::new(1, 1, 3, 3), |_, _, y, x| {
                if y == 1 && x == 1 {
                    1.0
                } else {
                    0.0
                }
            }),
            false,
        );
        let y = g.conv2d_same(x, w, None).unwrap();
        assert_eq!(g.values(y), g.values(x));
    }

    #[test]
    fn conv_channel_mismatch_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(Shape::new(1, 3, 4, 4)), false);
        let w = g.leaf(Tensor::zeros(Shape::new(2, 4, 3, 3)), false);
        assert!(g.conv2d_same(x, w, None).is_err());
    }

    #[test]
    fn even_kernel_same_padding_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(Shape::new(1, 1, 4, 4)), false);
        let w = g.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)), false);
        assert!(matches!(g.conv2d_same(x, w, None), Err(Error::Config(_))));
    }

    #[test]
    fn min_list_tie_prefers_first_source() {
        let mut g = Graph::new();
        let a = g.leaf(t1(&[1.0, 5.0]), true);
        let b = g.leaf(t1(&[1.0, 2.0]), true);
        let m = g.min_over_list(&[a, b]).unwrap();
        let s = g.sum_all(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(g.values(m), &[1.0, 2.0]);
        assert_eq!(grads.get(a).unwrap(), &[1.0, 0.0]);
        assert_eq!(grads.get(b).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn nan_propagates_through_min_relu_clamp() {
        let mut g = Graph::new();
        let a = g.leaf(t1(&[f64::NAN, 1.0]), false);
        let b = g.leaf(t1(&[0.5, 2.0]), false);
        let m = g.min_over_list(&[a, b]).unwrap();
        assert!(g.values(m)[0].is_nan());
        let r = g.relu(a);
        assert!(g.values(r)[0].is_nan());
        let c = g.clamp(a, 0.0, 10.0).unwrap();
        assert!(g.values(c)[0].is_nan());
        assert_eq!(g.nonfinite_nodes().len(), 4);
    }

    #[test]
    fn clamp_blocks_gradient_outside_bounds() {
        let mut g = Graph::new();
        let x = g.leaf(t1(&[-1.0, 0.5, 2.0]), true);
        let c = g.clamp(x, 0.0, 1.0).unwrap();
        let s = g.sum_all(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(g.values(c), &[0.0, 0.5, 1.0]);
        assert_eq!(grads.get(x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn broadcast_ops_reduce_to_batch_scalars() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::full(Shape::new(2, 1, 2, 2), 3.0), true);
        let b = g.leaf(
            Tensor::new(Shape::new(2, 1, 1, 1), vec![2.0, 4.0]).unwrap(),
            true,
        );
        let m = g.mul_b(a, b).unwrap();
        let s = g.sum_all(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(g.scalar(s), 3.0 * 2.0 * 4.0 + 3.0 * 4.0 * 4.0);
        assert_eq!(grads.get(b).unwrap(), &[12.0, 12.0]);
    }

    #[test]
    fn weighted_sum_matches_hand_value() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::full(Shape::new(1, 2, 1, 1), 1.0), true);
        let b = g.leaf(Tensor::full(Shape::new(1, 2, 1, 1), 10.0), true);
        let w = g.leaf(
            Tensor::new(Shape::new(2, 2, 1, 1), vec![0.25, 0.75, 0.75, 0.25]).unwrap(),
            true,
        );
        let y = g.channel_weighted_sum(&[a, b], w).unwrap();
        assert_eq!(g.values(y), &[0.25 + 7.5, 0.75 + 2.5]);
        let s = g.sum_all(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[1.0, 1.0, 10.0, 10.0]);
        assert_eq!(grads.get(a).unwrap(), &[0.25, 0.75]);
    }

    #[test]
    fn softmax_ce_uniform_logits() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::<f64>::zeros(Shape::new(1, 4, 1, 2)), true);
        let loss = g.softmax_cross_entropy(logits, &[0, -1]).unwrap();
        // uniform over 4 classes: -ln(1/4)
        assert!((g.scalar(loss) - 4.0f64.ln()).abs() < 1e-12);
        let grads = g.backward(loss).unwrap();
        let gl = grads.get(logits).unwrap();
        // ignored pixel gets zero gradient
        assert_eq!(gl[1], 0.0);
        assert!((gl[0] - (0.25 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn blocked_backward_drops_path() {
        let mut g = Graph::new();
        let x = g.leaf(t1(&[2.0]), true);
        let a = g.scale(x, 3.0);
        let b = g.scale(x, 5.0);
        let s0 = g.add(a, b).unwrap();
        let s = g.sum_all(s0);
        let full = g.backward(s).unwrap();
        assert_eq!(full.get(x).unwrap(), &[8.0]);
        let partial = g.backward_blocking(s, &[a]).unwrap();
        assert_eq!(partial.get(x).unwrap(), &[5.0]);
    }

    #[test]
    fn grad_accumulation_via_shared_leaf() {
        // the same leaf used twice accumulates both contributions
        let mut g = Graph::new();
        let x = g.leaf(t1(&[1.5]), true);
        let y = g.mul(x, x).unwrap();
        let s = g.sum_all(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[3.0]);
    }
}

use std::sync::Arc;

use super::kernels::{self, ConvDims, Geometry, Padding};
use super::{mismatch, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Geometry,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Geometry,
    },
    Depthwise {
        x: Var,
        w: Var,
        mult: usize,
        geom: Geometry,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f32),
    Abs(Var),
    Clip(Var, f32, f32),
    Sum(Var),
    Mean(Var),
    Gather(Var, Arc<Vec<u32>>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    StraightThrough(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Depthwise { x, w, .. } => vec![*x, *w],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Abs(a)
            | Op::Clip(a, _, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Gather(a, _)
            | Op::StraightThrough(a) => vec![*a],
            Op::SliceChannels { x, .. } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations, rebuilt for every forward pass.
///
/// Entries are appended in execution order, so the tape is topologically
/// sorted by construction and [`Graph::backward`] visits each entry once in
/// reverse. A graph created with [`Graph::inference`] never tracks gradients.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    track: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f32>>, len: usize) -> &mut [f32] {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            track: true,
        }
    }

    /// A graph that records values only; `backward` is unavailable.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            track: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Which linear piece every element of every piecewise-linear op
    /// (`relu`, `leaky_relu`, `abs`, `clip`) sits on, in tape order. Two
    /// forward passes with equal patterns share one smooth branch, which is
    /// what finite-difference checks need.
    pub fn branch_pattern(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu(a) | Op::LeakyRelu(a, _) | Op::Abs(a) => {
                    out.extend(self.value(a).data().iter().map(|&x| (x > 0.0) as u8));
                }
                Op::Clip(a, lo, hi) => {
                    out.extend(self.value(a).data().iter().map(|&x| (x >= lo) as u8 + (x > hi) as u8));
                }
                _ => {}
            }
        }
        out
    }

    /// Records a leaf. Gradients are produced for it only if `requires_grad`.
    pub fn leaf(&mut self, t: impl Into<Arc<Tensor>>, requires_grad: bool) -> Var {
        self.push(t.into(), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn push(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite values produced by {op:?}");
        let requires_grad = requires_grad && self.track;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, data: Vec<f32>, shape: &[usize], op: Op) -> Var {
        let rg = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let t = Tensor {
            shape: shape.to_vec(),
            data,
        };
        self.push(Arc::new(t), op, rg)
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, channels: usize) -> Result<(), TensorError> {
        if let Some(b) = b {
            let s = self.shape(b);
            if s != [channels] {
                return Err(mismatch(op, format!("bias shape {s:?}, expected [{channels}]")));
            }
        }
        Ok(())
    }

    /// 2-D convolution over NHWC input with `kh × kw × in × out` weights.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var, TensorError> {
        const OP: &str = "conv2d";
        if !(1..=2).contains(&stride) {
            return Err(TensorError::UnsupportedStride { op: OP, stride });
        }
        let [n, h, wd, c] = self.value(x).nhwc()?;
        let [kh, kw, ci, co] = match self.shape(w) {
            &[a, b, c, d] => [a, b, c, d],
            s => return Err(mismatch(OP, format!("weights must be rank 4, got {s:?}"))),
        };
        if ci != c {
            return Err(mismatch(
                OP,
                format!("input depth {c} != weight input depth {ci}"),
            ));
        }
        self.check_bias(OP, b, co)?;
        let geom = Geometry::new(h, wd, kh, kw, stride, padding)
            .ok_or_else(|| mismatch(OP, format!("kernel {kh}x{kw} exceeds input {h}x{wd}")))?;
        let dims = ConvDims {
            batch: n,
            in_c: c,
            out_c: co,
            geom,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &dims,
        );
        Ok(self.derived(out, &[n, geom.out_h, geom.out_w, co], Op::Conv2d { x, w, b, geom }))
    }

    /// Upsampling ("transposed") convolution: output extent is input × stride.
    /// Weights are `kh × kw × out × in`, the layout of the matching forward
    /// convolution from the upsampled space back down.
    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    ) -> Result<Var, TensorError> {
        const OP: &str = "conv2d_transpose";
        if !(1..=2).contains(&stride) {
            return Err(TensorError::UnsupportedStride { op: OP, stride });
        }
        let [n, h, wd, c] = self.value(x).nhwc()?;
        let [kh, kw, co, ci] = match self.shape(w) {
            &[a, b, c, d] => [a, b, c, d],
            s => return Err(mismatch(OP, format!("weights must be rank 4, got {s:?}"))),
        };
        if ci != c {
            return Err(mismatch(
                OP,
                format!("input depth {c} != weight input depth {ci}"),
            ));
        }
        self.check_bias(OP, b, co)?;
        let geom = Geometry::new(h * stride, wd * stride, kh, kw, stride, Padding::Same)
            .expect("same padding always yields a geometry");
        let dims = ConvDims {
            batch: n,
            in_c: co,
            out_c: c,
            geom,
        };
        let out = kernels::conv_transpose_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &dims,
        );
        Ok(self.derived(
            out,
            &[n, h * stride, wd * stride, co],
            Op::ConvTranspose { x, w, b, geom },
        ))
    }

    /// Per-channel spatial convolution, weights `kh × kw × channels × mult`.
    /// Output channel `c·mult + j` only ever sees input channel `c`.
    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var, TensorError> {
        const OP: &str = "depthwise_conv2d";
        if !(1..=2).contains(&stride) {
            return Err(TensorError::UnsupportedStride { op: OP, stride });
        }
        let [n, h, wd, c] = self.value(x).nhwc()?;
        let [kh, kw, wc, mult] = match self.shape(w) {
            &[a, b, c, d] => [a, b, c, d],
            s => return Err(mismatch(OP, format!("weights must be rank 4, got {s:?}"))),
        };
        if wc != c {
            return Err(mismatch(
                OP,
                format!("input depth {c} != weight depth {wc}"),
            ));
        }
        let geom = Geometry::new(h, wd, kh, kw, stride, padding)
            .ok_or_else(|| mismatch(OP, format!("kernel {kh}x{kw} exceeds input {h}x{wd}")))?;
        let out = kernels::depthwise_forward(
            self.value(x).data(),
            self.value(w).data(),
            n,
            c,
            mult,
            &geom,
        );
        Ok(self.derived(
            out,
            &[n, geom.out_h, geom.out_w, c * mult],
            Op::Depthwise { x, w, mult, geom },
        ))
    }

    /// Per-pixel linear map across channels; weights `1 × 1 × in × out`.
    pub fn pointwise_conv2d(&mut self, x: Var, w: Var) -> Result<Var, TensorError> {
        match self.shape(w) {
            &[1, 1, _, _] => self.conv2d(x, w, None, 1, Padding::Same),
            s => Err(mismatch(
                "pointwise_conv2d",
                format!("weights must be 1x1xin xout, got {s:?}"),
            )),
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        rec: Op,
    ) -> Result<Var, TensorError> {
        same_shape(op, self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.derived(data, &shape, rec))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32, rec: Op) -> Var {
        let data = self.value(a).data().iter().map(|x| f(*x)).collect();
        let shape = self.shape(a).to_vec();
        self.derived(data, &shape, rec)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f32::abs, Op::Abs(a))
    }

    /// Clamps to `[lo, hi]`; gradient is zero outside the bounds.
    pub fn clip(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clip(a, lo, hi))
    }

    /// Sum of all elements, accumulated in double precision.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        self.derived(vec![s as f32], &[1], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: f64 = t.data().iter().map(|&v| v as f64).sum();
        let m = s / t.len() as f64;
        self.derived(vec![m as f32], &[1], Op::Mean(a))
    }

    /// `out[i] = a[indices[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, indices: Arc<Vec<u32>>, shape: &[usize]) -> Result<Var, TensorError> {
        let n: usize = shape.iter().product();
        let src = self.value(a).data();
        if n != indices.len() || indices.iter().any(|&i| i as usize >= src.len()) {
            return Err(mismatch(
                "gather",
                format!("{} indices into {} values for shape {shape:?}", indices.len(), src.len()),
            ));
        }
        let data = indices.iter().map(|&i| src[i as usize]).collect();
        Ok(self.derived(data, shape, Op::Gather(a, indices)))
    }

    /// Channels `start..start+len` of an NHWC tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let [n, h, w, c] = self.value(x).nhwc()?;
        if start + len > c || len == 0 {
            return Err(mismatch(
                "slice_channels",
                format!("range {start}..{} of depth {c}", start + len),
            ));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * h * w * len);
        for px in src.chunks_exact(c) {
            data.extend_from_slice(&px[start..start + len]);
        }
        Ok(self.derived(data, &[n, h, w, len], Op::SliceChannels { x, start }))
    }

    /// Emits `values` in the forward pass while passing the incoming gradient
    /// to `x` unchanged.
    pub fn straight_through(&mut self, x: Var, values: Tensor) -> Result<Var, TensorError> {
        same_shape("straight_through", self.value(x), &values)?;
        let shape = values.shape().to_vec();
        Ok(self.derived(values.into_data(), &shape, Op::StraightThrough(x)))
    }

    /// Reverse pass from a scalar `loss`. Gradients accumulate additively
    /// across fan-out; only entries with `requires_grad` receive them.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        if !self.track {
            return Err(TensorError::NoGradGraph);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            self.backprop(node, &gy, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node, gy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let len = |v: Var| self.nodes[v.0].value.len();
        let y = node.value.data();
        // Elementwise chain rule into a single input.
        let mut unary = |a: Var, f: &dyn Fn(usize) -> f32| {
            if rg(a) {
                let n = len(a);
                let g = accumulate(&mut grads[a.0], n);
                for (i, gi) in g.iter_mut().enumerate() {
                    *gi += gy[i] * f(i);
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let [n, _, _, c] = self.value(*x).nhwc().expect("rank checked in forward");
                let co = self.shape(*w)[3];
                let dims = ConvDims {
                    batch: n,
                    in_c: c,
                    out_c: co,
                    geom: *geom,
                };
                let (mut dx, mut dw, mut db) = self.take_grad_slots(*x, *w, *b, grads);
                kernels::conv2d_backward(
                    val(*x),
                    val(*w),
                    gy,
                    &dims,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                self.restore_grad_slots(*x, *w, *b, dx, dw, db, grads);
            }
            Op::ConvTranspose { x, w, b, geom } => {
                let [n, _, _, c] = self.value(*x).nhwc().expect("rank checked in forward");
                let co = self.shape(*w)[2];
                let dims = ConvDims {
                    batch: n,
                    in_c: co,
                    out_c: c,
                    geom: *geom,
                };
                let (mut dx, mut dw, mut db) = self.take_grad_slots(*x, *w, *b, grads);
                kernels::conv_transpose_backward(
                    val(*x),
                    val(*w),
                    gy,
                    &dims,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                self.restore_grad_slots(*x, *w, *b, dx, dw, db, grads);
            }
            Op::Depthwise { x, w, mult, geom } => {
                let [n, _, _, c] = self.value(*x).nhwc().expect("rank checked in forward");
                let (mut dx, mut dw, _) = self.take_grad_slots(*x, *w, None, grads);
                kernels::depthwise_backward(
                    val(*x),
                    val(*w),
                    gy,
                    n,
                    c,
                    *mult,
                    geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                );
                self.restore_grad_slots(*x, *w, None, dx, dw, None, grads);
            }
            Op::Add(a, b) => {
                unary(*a, &|_| 1.0);
                unary(*b, &|_| 1.0);
            }
            Op::Sub(a, b) => {
                unary(*a, &|_| 1.0);
                unary(*b, &|_| -1.0);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                unary(*a, &|i| vb[i]);
                unary(*b, &|i| va[i]);
            }
            Op::Scale(a, s) => unary(*a, &|_| *s),
            Op::Tanh(a) => unary(*a, &|i| 1.0 - y[i] * y[i]),
            Op::Sigmoid(a) => unary(*a, &|i| y[i] * (1.0 - y[i])),
            Op::Relu(a) => {
                let va = val(*a);
                unary(*a, &|i| if va[i] > 0.0 { 1.0 } else { 0.0 });
            }
            Op::LeakyRelu(a, slope) => {
                let va = val(*a);
                unary(*a, &|i| if va[i] > 0.0 { 1.0 } else { *slope });
            }
            Op::Abs(a) => {
                let va = val(*a);
                unary(*a, &|i| {
                    if va[i] > 0.0 {
                        1.0
                    } else if va[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
            }
            Op::Clip(a, lo, hi) => {
                let va = val(*a);
                unary(*a, &|i| if va[i] >= *lo && va[i] <= *hi { 1.0 } else { 0.0 });
            }
            Op::Sum(a) | Op::Mean(a) => {
                let g0 = match &node.op {
                    Op::Mean(_) => gy[0] / len(*a) as f32,
                    _ => gy[0],
                };
                if rg(*a) {
                    let n = len(*a);
                    for gi in accumulate(&mut grads[a.0], n) {
                        *gi += g0;
                    }
                }
            }
            Op::Gather(a, idx) => {
                if rg(*a) {
                    let n = len(*a);
                    let g = accumulate(&mut grads[a.0], n);
                    for (o, &i) in idx.iter().enumerate() {
                        g[i as usize] += gy[o];
                    }
                }
            }
            Op::SliceChannels { x, start } => {
                if rg(*x) {
                    let c = self.shape(*x)[3];
                    let width = node.value.shape()[3];
                    let n = len(*x);
                    let g = accumulate(&mut grads[x.0], n);
                    for (dst, src) in g.chunks_exact_mut(c).zip(gy.chunks_exact(width)) {
                        for (d, s) in dst[*start..*start + width].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::StraightThrough(a) => unary(*a, &|_| 1.0),
        }
    }

    #[allow(clippy::type_complexity)]
    fn take_grad_slots(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        grads: &mut [Option<Vec<f32>>],
    ) -> (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>) {
        let mut take = |v: Var| {
            self.nodes[v.0]
                .requires_grad
                .then(|| grads[v.0].take().unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()]))
        };
        let dx = take(x);
        let dw = take(w);
        let db = b.and_then(&mut take);
        (dx, dw, db)
    }

    #[allow(clippy::too_many_arguments)]
    fn restore_grad_slots(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        dx: Option<Vec<f32>>,
        dw: Option<Vec<f32>>,
        db: Option<Vec<f32>>,
        grads: &mut [Option<Vec<f32>>],
    ) {
        if dx.is_some() {
            grads[x.0] = dx;
        }
        if dw.is_some() {
            grads[w.0] = dw;
        }
        if let (Some(b), Some(db)) = (b, db) {
            grads[b.0] = Some(db);
        }
    }
}

/// Largest `f32` strictly below one.
pub(crate) const BELOW_ONE: f32 = 1.0 - f32::EPSILON / 2.0;

/// Hyperbolic tangent kept strictly inside (−1, 1), so saturated units still
/// report a nonzero derivative and never produce an exact ±1.
#[inline]
pub fn tanh(x: f32) -> f32 {
    x.tanh().clamp(-BELOW_ONE, BELOW_ONE)
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

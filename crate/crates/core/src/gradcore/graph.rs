use std::collections::HashMap;

use super::kernels;
use super::{GradError, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf { name: String, trainable: bool },
    Identity(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId, f64),
    Scale(NodeId, f64),
    Exp(NodeId),
    Abs(NodeId),
    LeakyRelu(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    SumChannels(NodeId),
    SoftmaxChannels(NodeId),
    MulChannel(NodeId, NodeId),
    Linear { input: NodeId, weight: NodeId, bias: NodeId },
    Reshape(NodeId),
    BroadcastPixels(NodeId),
    Concat(NodeId, NodeId),
    GatherChannels { input: NodeId, map: Vec<Option<(usize, f64)>> },
    Conv2d { input: NodeId, kernel: NodeId, bias: NodeId },
    Resize(NodeId),
    BilinearSample { image: NodeId, positions: NodeId },
    ProjectFlow { jacobian: NodeId, delta: Vec<f64> },
    SubGrid(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Identity(_) => "identity",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::Scale(..) => "scale",
            Op::Exp(_) => "exp",
            Op::Abs(_) => "abs",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumChannels(_) => "sum_channels",
            Op::SoftmaxChannels(_) => "softmax_channels",
            Op::MulChannel(..) => "mul_channel",
            Op::Linear { .. } => "linear",
            Op::Reshape(_) => "reshape",
            Op::BroadcastPixels(_) => "broadcast_pixels",
            Op::Concat(..) => "concat",
            Op::GatherChannels { .. } => "gather_channels",
            Op::Conv2d { .. } => "conv2d",
            Op::Resize(_) => "resize",
            Op::BilinearSample { .. } => "bilinear_sample",
            Op::ProjectFlow { .. } => "project_flow",
            Op::SubGrid(_) => "sub_grid",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } => vec![],
            Op::Identity(a)
            | Op::AddScalar(a, _)
            | Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Abs(a)
            | Op::LeakyRelu(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumChannels(a)
            | Op::SoftmaxChannels(a)
            | Op::Reshape(a)
            | Op::BroadcastPixels(a)
            | Op::Resize(a)
            | Op::SubGrid(a) => vec![*a],
            Op::GatherChannels { input, .. } => vec![*input],
            Op::ProjectFlow { jacobian, .. } => vec![*jacobian],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MulChannel(a, b)
            | Op::Concat(a, b) => vec![*a, *b],
            Op::BilinearSample { image, positions } => vec![*image, *positions],
            Op::Linear {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => vec![*input, *kernel, *bias],
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op,
    shape: Vec<usize>,
    requires_grad: bool,
    value: Option<Tensor<T>>,
}

/// A differentiable computation over [`Tensor`]s.
///
/// Nodes are appended in topological order, so the graph is acyclic by
/// construction. Every builder method validates shapes eagerly; values are
/// produced by [`Graph::forward`] once every leaf is bound.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    evaluated: bool,
}

/// Gradients of a scalar output with respect to the trainable leaves.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    by_node: HashMap<NodeId, Tensor<T>>,
    names: HashMap<String, NodeId>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, leaf: NodeId) -> Option<&Tensor<T>> {
        self.by_node.get(&leaf)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.get(name).and_then(|id| self.by_node.get(id))
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> GradError {
    GradError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn rank3(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize), GradError> {
    match shape {
        &[h, w, c] => Ok((h, w, c)),
        _ => Err(mismatch(op, shape, &[])),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            evaluated: false,
        }
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

    /// Value of a node after [`Graph::forward`] (or of a bound leaf).
    pub fn value(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].value.as_ref()
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf { trainable: true, .. })
    }

    pub fn leaf_name(&self, id: NodeId) -> Option<&str> {
        match &self.nodes[id.0].op {
            Op::Leaf { name, .. } => Some(name),
            _ => None,
        }
    }

    /// Trainable leaves in creation order.
    pub fn trainable_leaves(&self) -> Vec<NodeId> {
        (0..self.nodes.len())
            .map(NodeId)
            .filter(|&id| self.is_trainable(id))
            .collect()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let requires_grad = match &op {
            Op::Leaf { trainable, .. } => *trainable,
            other => other
                .inputs()
                .iter()
                .any(|i| self.nodes[i.0].requires_grad),
        };
        self.evaluated = false;
        self.nodes.push(Node {
            op,
            shape,
            requires_grad,
            value: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, name: &str, shape: Vec<usize>, trainable: bool) -> Result<NodeId, GradError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(GradError::InvalidShape(shape));
        }
        Ok(self.push(
            Op::Leaf {
                name: name.to_string(),
                trainable,
            },
            shape,
        ))
    }

    /// Trainable leaf; must be bound before [`Graph::forward`].
    pub fn parameter(&mut self, name: &str, shape: impl Into<Vec<usize>>) -> Result<NodeId, GradError> {
        self.leaf(name, shape.into(), true)
    }

    /// Constant leaf; must be bound before [`Graph::forward`].
    pub fn input(&mut self, name: &str, shape: impl Into<Vec<usize>>) -> Result<NodeId, GradError> {
        self.leaf(name, shape.into(), false)
    }

    /// Constant leaf bound to `value`.
    pub fn constant(&mut self, name: &str, value: Tensor<T>) -> NodeId {
        let id = self.push(
            Op::Leaf {
                name: name.to_string(),
                trainable: false,
            },
            value.shape().to_vec(),
        );
        self.nodes[id.0].value = Some(value);
        id
    }

    pub fn bind(&mut self, leaf: NodeId, value: Tensor<T>) -> Result<(), GradError> {
        let node = &mut self.nodes[leaf.0];
        if !matches!(node.op, Op::Leaf { .. }) {
            return Err(GradError::NotALeaf(leaf.0));
        }
        if node.shape != value.shape() {
            return Err(mismatch("bind", &node.shape, value.shape()));
        }
        node.value = Some(value);
        self.evaluated = false;
        Ok(())
    }

    fn same_shape(&mut self, op: Op, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(mismatch(op.name(), &sa, &sb));
        }
        Ok(self.push(op, sa))
    }

    fn unary(&mut self, op: Op, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(op, s)
    }

    pub fn identity(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Identity(a), a)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.same_shape(Op::Add(a, b), a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.same_shape(Op::Sub(a, b), a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.same_shape(Op::Mul(a, b), a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.same_shape(Op::Div(a, b), a, b)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(Op::AddScalar(a, c), a)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(Op::Scale(a, c), a)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp(a), a)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Abs(a), a)
    }

    /// `max(x, slope·x)` elementwise, `slope ∈ (0, 1)`.
    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId, GradError> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(GradError::InvalidArgument(format!(
                "leaky_relu slope {slope} outside (0, 1)"
            )));
        }
        Ok(self.unary(Op::LeakyRelu(a, slope), a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), vec![1])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a), vec![1])
    }

    /// `H×W×C → H×W×1` channel sum.
    pub fn sum_channels(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        let (h, w, _) = rank3("sum_channels", self.shape(a))?;
        Ok(self.push(Op::SumChannels(a), vec![h, w, 1]))
    }

    /// Per-pixel softmax across channels, shifted by the pixel maximum so
    /// that very negative logits cannot underflow every weight.
    pub fn softmax_channels(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        rank3("softmax_channels", self.shape(a))?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::SoftmaxChannels(a), shape))
    }

    /// `H×W×C ⊙ H×W×1`, broadcasting the weight map across channels.
    pub fn mul_channel(&mut self, image: NodeId, weight: NodeId) -> Result<NodeId, GradError> {
        let (h, w, c) = rank3("mul_channel", self.shape(image))?;
        if self.shape(weight) != [h, w, 1] {
            return Err(mismatch("mul_channel", self.shape(image), self.shape(weight)));
        }
        Ok(self.push(Op::MulChannel(image, weight), vec![h, w, c]))
    }

    /// Fully connected layer: `[n] × [n, m] + [m] → [m]`.
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId, GradError> {
        let n = match self.shape(input) {
            &[n] => n,
            s => return Err(mismatch("linear", s, self.shape(weight))),
        };
        let m = match self.shape(weight) {
            &[wn, m] if wn == n => m,
            s => return Err(mismatch("linear", &[n], s)),
        };
        if self.shape(bias) != [m] {
            return Err(mismatch("linear", &[m], self.shape(bias)));
        }
        Ok(self.push(
            Op::Linear {
                input,
                weight,
                bias,
            },
            vec![m],
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId, GradError> {
        let shape = shape.into();
        let n: usize = self.shape(a).iter().product();
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != n {
            return Err(mismatch("reshape", self.shape(a), &shape));
        }
        Ok(self.push(Op::Reshape(a), shape))
    }

    /// Repeats a vector `[n]` at every pixel of an `h×w×n` image.
    pub fn broadcast_pixels(&mut self, a: NodeId, h: usize, w: usize) -> Result<NodeId, GradError> {
        let n = match self.shape(a) {
            &[n] => n,
            s => return Err(mismatch("broadcast_pixels", s, &[])),
        };
        if h == 0 || w == 0 {
            return Err(GradError::InvalidShape(vec![h, w, n]));
        }
        Ok(self.push(Op::BroadcastPixels(a), vec![h, w, n]))
    }

    /// Channel concatenation of two `H×W×·` images.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let (h, w, ca) = rank3("concat", self.shape(a))?;
        let (hb, wb, cb) = rank3("concat", self.shape(b))?;
        if (h, w) != (hb, wb) {
            return Err(mismatch("concat", self.shape(a), self.shape(b)));
        }
        Ok(self.push(Op::Concat(a, b), vec![h, w, ca + cb]))
    }

    /// Builds a new `H×W×map.len()` image where output channel `j` is
    /// `scale · input[.., idx]` for `map[j] = Some((idx, scale))`, else zero.
    pub fn gather_channels(
        &mut self,
        input: NodeId,
        map: Vec<Option<(usize, f64)>>,
    ) -> Result<NodeId, GradError> {
        let (h, w, c) = rank3("gather_channels", self.shape(input))?;
        if map.is_empty() || map.iter().flatten().any(|&(i, _)| i >= c) {
            return Err(GradError::InvalidArgument(format!(
                "channel map {map:?} invalid for {c} channels"
            )));
        }
        let n = map.len();
        Ok(self.push(Op::GatherChannels { input, map }, vec![h, w, n]))
    }

    /// Zero-padded stride-1 cross-correlation. `kernel` is `k×k×C_in×C_out`
    /// with odd `k`; `bias` is `[C_out]`.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId, GradError> {
        let (h, w, cin) = rank3("conv2d", self.shape(input))?;
        let (k, cout) = match self.shape(kernel) {
            &[k1, k2, ci, co] if k1 == k2 && k1 % 2 == 1 && ci == cin => (k1, co),
            s => return Err(mismatch("conv2d", &[h, w, cin], s)),
        };
        let _ = k;
        if self.shape(bias) != [cout] {
            return Err(mismatch("conv2d", &[cout], self.shape(bias)));
        }
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
            },
            vec![h, w, cout],
        ))
    }

    /// Bilinear 2× magnification with half-pixel-centred sampling.
    pub fn upsample2x(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        let (h, w, c) = rank3("upsample2x", self.shape(a))?;
        Ok(self.push(Op::Resize(a), vec![2 * h, 2 * w, c]))
    }

    /// Bilinear resampling to `oh×ow` with half-pixel-centred sampling.
    pub fn resize(&mut self, a: NodeId, oh: usize, ow: usize) -> Result<NodeId, GradError> {
        let (_, _, c) = rank3("resize", self.shape(a))?;
        if oh == 0 || ow == 0 {
            return Err(GradError::InvalidShape(vec![oh, ow, c]));
        }
        Ok(self.push(Op::Resize(a), vec![oh, ow, c]))
    }

    /// Reads `image` at continuous `(x, y)` positions (`H'×W'×2`) with
    /// bilinear filtering and clamp-to-edge addressing.
    pub fn bilinear_sample(&mut self, image: NodeId, positions: NodeId) -> Result<NodeId, GradError> {
        let (_, _, c) = rank3("bilinear_sample", self.shape(image))?;
        let (h2, w2, two) = rank3("bilinear_sample", self.shape(positions))?;
        if two != 2 {
            return Err(mismatch("bilinear_sample", self.shape(image), self.shape(positions)));
        }
        Ok(self.push(Op::BilinearSample { image, positions }, vec![h2, w2, c]))
    }

    /// `q[p] = p + J[p]·delta` for a Jacobian image `H×W×(2·n)` laid out
    /// as row-major `2×n` per pixel. Output is `H×W×2` in `(x, y)` order.
    pub fn project_flow(&mut self, jacobian: NodeId, delta: &[f64]) -> Result<NodeId, GradError> {
        let (h, w, c) = rank3("project_flow", self.shape(jacobian))?;
        if c != 2 * delta.len() || delta.is_empty() {
            return Err(GradError::InvalidArgument(format!(
                "jacobian with {c} channels cannot project a {}-vector",
                delta.len()
            )));
        }
        Ok(self.push(
            Op::ProjectFlow {
                jacobian,
                delta: delta.to_vec(),
            },
            vec![h, w, 2],
        ))
    }

    /// `a[p] − p` for an `H×W×2` position field.
    pub fn sub_grid(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        let (h, w, c) = rank3("sub_grid", self.shape(a))?;
        if c != 2 {
            return Err(mismatch("sub_grid", self.shape(a), &[h, w, 2]));
        }
        Ok(self.push(Op::SubGrid(a), vec![h, w, 2]))
    }

    fn val(&self, id: NodeId) -> &Tensor<T> {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("inputs are evaluated before their consumers")
    }

    /// Evaluates every node in order. Fails if a leaf is unbound or any
    /// node produces a non-finite value.
    pub fn forward(&mut self) -> Result<(), GradError> {
        for i in 0..self.nodes.len() {
            if let Op::Leaf { name, .. } = &self.nodes[i].op {
                match &self.nodes[i].value {
                    None => return Err(GradError::UnboundLeaf(name.clone())),
                    Some(v) if !v.is_finite() => {
                        return Err(GradError::NonFinite { node: i, op: "leaf" })
                    }
                    Some(_) => continue,
                }
            }
            let out = self.eval(i);
            if !out.is_finite() {
                return Err(GradError::NonFinite {
                    node: i,
                    op: self.nodes[i].op.name(),
                });
            }
            self.nodes[i].value = Some(out);
        }
        self.evaluated = true;
        Ok(())
    }

    fn eval(&self, i: usize) -> Tensor<T> {
        let node = &self.nodes[i];
        let shape = node.shape.clone();
        let zip = |a: NodeId, b: NodeId, f: &dyn Fn(T, T) -> T| {
            let (x, y) = (self.val(a).data(), self.val(b).data());
            Tensor::new(shape.clone(), x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect())
                .expect("shape checked at construction")
        };
        let map = |a: NodeId, f: &dyn Fn(T) -> T| {
            Tensor::new(shape.clone(), self.val(a).data().iter().map(|&v| f(v)).collect())
                .expect("shape checked at construction")
        };
        match &node.op {
            Op::Leaf { .. } => unreachable!("leaves are bound, not evaluated"),
            Op::Identity(a) => self.val(*a).clone(),
            Op::Add(a, b) => zip(*a, *b, &|p, q| p + q),
            Op::Sub(a, b) => zip(*a, *b, &|p, q| p - q),
            Op::Mul(a, b) => zip(*a, *b, &|p, q| p * q),
            Op::Div(a, b) => zip(*a, *b, &|p, q| p / q),
            Op::AddScalar(a, c) => {
                let c = T::from_f64_lossy(*c);
                map(*a, &|v| v + c)
            }
            Op::Scale(a, c) => {
                let c = T::from_f64_lossy(*c);
                map(*a, &|v| v * c)
            }
            Op::Exp(a) => map(*a, &|v| v.exp()),
            Op::Abs(a) => map(*a, &|v| v.abs()),
            Op::LeakyRelu(a, s) => {
                let s = T::from_f64_lossy(*s);
                map(*a, &|v| v.max(s * v))
            }
            Op::Sum(a) => {
                let mut acc = T::zero();
                for &v in self.val(*a).data() {
                    acc += v;
                }
                Tensor::scalar(acc)
            }
            Op::Mean(a) => {
                let x = self.val(*a);
                let mut acc = T::zero();
                for &v in x.data() {
                    acc += v;
                }
                Tensor::scalar(acc / T::from_usize(x.len()).unwrap())
            }
            Op::SoftmaxChannels(a) => {
                let x = self.val(*a);
                let c = x.shape()[2];
                let mut out = Vec::with_capacity(x.len());
                for px in x.data().chunks_exact(c) {
                    let top = px.iter().copied().fold(T::neg_infinity(), T::max);
                    let start = out.len();
                    let mut total = T::zero();
                    for &v in px {
                        let e = (v - top).exp();
                        total += e;
                        out.push(e);
                    }
                    for e in &mut out[start..] {
                        *e /= total;
                    }
                }
                Tensor::new(x.shape().to_vec(), out).unwrap()
            }
            Op::SumChannels(a) => {
                let x = self.val(*a);
                let c = x.shape()[2];
                let data = x
                    .data()
                    .chunks_exact(c)
                    .map(|px| {
                        let mut acc = T::zero();
                        for &v in px {
                            acc += v;
                        }
                        acc
                    })
                    .collect();
                Tensor::new(shape, data).unwrap()
            }
            Op::MulChannel(img, wt) => {
                let x = self.val(*img);
                let c = x.shape()[2];
                let wv = self.val(*wt).data();
                let mut out = x.clone();
                for (px, &s) in out.data_mut().chunks_exact_mut(c).zip(wv) {
                    for v in px {
                        *v *= s;
                    }
                }
                out
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.val(*input).data();
                let wt = self.val(*weight).data();
                let mut out = self.val(*bias).clone();
                let m = out.len();
                for (i, &xv) in x.iter().enumerate() {
                    for (o, &wv) in out.data_mut().iter_mut().zip(&wt[i * m..(i + 1) * m]) {
                        *o += xv * wv;
                    }
                }
                out
            }
            Op::Reshape(a) => self.val(*a).clone().reshape(shape).unwrap(),
            Op::BroadcastPixels(a) => {
                let x = self.val(*a).data();
                let n = x.len();
                let count = shape[0] * shape[1];
                let mut data = Vec::with_capacity(count * n);
                for _ in 0..count {
                    data.extend_from_slice(x);
                }
                Tensor::new(shape, data).unwrap()
            }
            Op::Concat(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                let (ca, cb) = (x.shape()[2], y.shape()[2]);
                let mut data = Vec::with_capacity(x.len() + y.len());
                for (pa, pb) in x.data().chunks_exact(ca).zip(y.data().chunks_exact(cb)) {
                    data.extend_from_slice(pa);
                    data.extend_from_slice(pb);
                }
                Tensor::new(shape, data).unwrap()
            }
            Op::GatherChannels { input, map } => {
                let x = self.val(*input);
                let c = x.shape()[2];
                let map: Vec<_> = map
                    .iter()
                    .map(|m| m.map(|(i, s)| (i, T::from_f64_lossy(s))))
                    .collect();
                let mut data = Vec::with_capacity(shape.iter().product());
                for px in x.data().chunks_exact(c) {
                    for m in &map {
                        data.push(match m {
                            Some((i, s)) => px[*i] * *s,
                            None => T::zero(),
                        });
                    }
                }
                Tensor::new(shape, data).unwrap()
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => {
                let x = self.val(*input);
                let kt = self.val(*kernel);
                let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (k, cout) = (kt.shape()[0], kt.shape()[3]);
                let mut out = Tensor::zeros(shape);
                kernels::conv2d_forward(
                    x.data(),
                    kt.data(),
                    self.val(*bias).data(),
                    h,
                    w,
                    cin,
                    cout,
                    k,
                    out.data_mut(),
                );
                out
            }
            Op::Resize(a) => {
                let x = self.val(*a);
                let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut out = Tensor::zeros(shape.clone());
                kernels::resize_forward(x.data(), h, w, c, shape[0], shape[1], out.data_mut());
                out
            }
            Op::BilinearSample { image, positions } => {
                let x = self.val(*image);
                let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut out = Tensor::zeros(shape);
                kernels::bilinear_forward(
                    x.data(),
                    h,
                    w,
                    c,
                    self.val(*positions).data(),
                    out.data_mut(),
                );
                out
            }
            Op::ProjectFlow { jacobian, delta } => {
                let j = self.val(*jacobian);
                let (h, w) = (shape[0], shape[1]);
                let n = delta.len();
                let delta: Vec<T> = delta.iter().map(|&d| T::from_f64_lossy(d)).collect();
                let mut data = Vec::with_capacity(h * w * 2);
                for (idx, px) in j.data().chunks_exact(2 * n).enumerate() {
                    let (y, x) = (idx / w, idx % w);
                    let mut qx = T::from_usize(x).unwrap();
                    let mut qy = T::from_usize(y).unwrap();
                    for (i, &d) in delta.iter().enumerate() {
                        qx += px[i] * d;
                        qy += px[n + i] * d;
                    }
                    data.push(qx);
                    data.push(qy);
                }
                Tensor::new(shape, data).unwrap()
            }
            Op::SubGrid(a) => {
                let x = self.val(*a);
                let w = shape[1];
                let mut out = x.clone();
                for (idx, px) in out.data_mut().chunks_exact_mut(2).enumerate() {
                    px[0] -= T::from_usize(idx % w).unwrap();
                    px[1] -= T::from_usize(idx / w).unwrap();
                }
                out
            }
        }
    }

    /// Reverse-mode sweep from a scalar `output`. Returns a gradient for every
    /// trainable leaf (zeros where the output does not depend on it).
    pub fn backward(&self, output: NodeId) -> Result<Gradients<T>, GradError> {
        if !self.evaluated {
            return Err(GradError::NotEvaluated);
        }
        let out_shape = self.shape(output);
        if out_shape.iter().product::<usize>() != 1 {
            return Err(GradError::NonScalarOutput(out_shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(out_shape.to_vec(), T::one()));
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf { .. } = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }
        let mut by_node = HashMap::new();
        let mut names = HashMap::new();
        for id in self.trainable_leaves() {
            let g = grads
                .get_mut(id.0)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(self.shape(id).to_vec()));
            by_node.insert(id, g);
            if let Some(name) = self.leaf_name(id) {
                names.insert(name.to_string(), id);
            }
        }
        Ok(Gradients { by_node, names })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backprop(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        // Adds `f(k)` into the gradient of `target` elementwise.
        let acc = |grads: &mut [Option<Tensor<T>>], target: NodeId, f: &dyn Fn(usize) -> T| {
            if !self.wants(target) {
                return;
            }
            let slot = grads[target.0]
                .get_or_insert_with(|| Tensor::zeros(self.shape(target).to_vec()));
            for (k, v) in slot.data_mut().iter_mut().enumerate() {
                *v += f(k);
            }
        };
        let zeros = |target: NodeId| -> Option<Tensor<T>> {
            self.wants(target)
                .then(|| Tensor::zeros(self.shape(target).to_vec()))
        };
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Identity(a) | Op::AddScalar(a, _) | Op::Reshape(a) | Op::SubGrid(a) => {
                acc(grads, *a, &|k| gd[k])
            }
            Op::Add(a, b) => {
                acc(grads, *a, &|k| gd[k]);
                acc(grads, *b, &|k| gd[k]);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &|k| gd[k]);
                acc(grads, *b, &|k| -gd[k]);
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.val(*a).data(), self.val(*b).data());
                acc(grads, *a, &|k| gd[k] * y[k]);
                acc(grads, *b, &|k| gd[k] * x[k]);
            }
            Op::Div(a, b) => {
                let (x, y) = (self.val(*a).data(), self.val(*b).data());
                acc(grads, *a, &|k| gd[k] / y[k]);
                acc(grads, *b, &|k| -gd[k] * x[k] / (y[k] * y[k]));
            }
            Op::Scale(a, c) => {
                let c = T::from_f64_lossy(*c);
                acc(grads, *a, &|k| gd[k] * c)
            }
            Op::Exp(a) => {
                let y = node.value.as_ref().unwrap().data();
                acc(grads, *a, &|k| gd[k] * y[k])
            }
            Op::Abs(a) => {
                let x = self.val(*a).data();
                acc(grads, *a, &|k| {
                    if x[k] > T::zero() {
                        gd[k]
                    } else if x[k] < T::zero() {
                        -gd[k]
                    } else {
                        T::zero()
                    }
                })
            }
            Op::LeakyRelu(a, s) => {
                let x = self.val(*a).data();
                let s = T::from_f64_lossy(*s);
                acc(grads, *a, &|k| if x[k] > T::zero() { gd[k] } else { gd[k] * s })
            }
            Op::Sum(a) => acc(grads, *a, &|_| gd[0]),
            Op::Mean(a) => {
                let n = T::from_usize(self.val(*a).len()).unwrap();
                let v = gd[0] / n;
                acc(grads, *a, &|_| v)
            }
            Op::SumChannels(a) => {
                let c = self.shape(*a)[2];
                acc(grads, *a, &|k| gd[k / c])
            }
            Op::SoftmaxChannels(a) => {
                let y = node.value.as_ref().unwrap().data();
                let c = self.shape(*a)[2];
                let dots: Vec<T> = gd
                    .chunks_exact(c)
                    .zip(y.chunks_exact(c))
                    .map(|(g, s)| g.iter().zip(s).map(|(&g, &s)| g * s).sum())
                    .collect();
                acc(grads, *a, &|k| y[k] * (gd[k] - dots[k / c]))
            }
            Op::MulChannel(img, wt) => {
                let x = self.val(*img).data();
                let wv = self.val(*wt).data();
                let c = self.shape(*img)[2];
                acc(grads, *img, &|k| gd[k] * wv[k / c]);
                acc(grads, *wt, &|p| {
                    let mut s = T::zero();
                    for ch in 0..c {
                        s += gd[p * c + ch] * x[p * c + ch];
                    }
                    s
                });
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.val(*input).data();
                let wt = self.val(*weight).data();
                let m = gd.len();
                acc(grads, *input, &|i| {
                    let mut s = T::zero();
                    for j in 0..m {
                        s += gd[j] * wt[i * m + j];
                    }
                    s
                });
                acc(grads, *weight, &|k| x[k / m] * gd[k % m]);
                acc(grads, *bias, &|k| gd[k]);
            }
            Op::BroadcastPixels(a) => {
                let n = self.shape(*a)[0];
                acc(grads, *a, &|c| {
                    let mut s = T::zero();
                    for px in gd.chunks_exact(n) {
                        s += px[c];
                    }
                    s
                })
            }
            Op::Concat(a, b) => {
                let (ca, cb) = (self.shape(*a)[2], self.shape(*b)[2]);
                let c = ca + cb;
                acc(grads, *a, &|k| gd[(k / ca) * c + k % ca]);
                acc(grads, *b, &|k| gd[(k / cb) * c + ca + k % cb]);
            }
            Op::GatherChannels { input, map } => {
                if let Some(mut gi) = zeros(*input) {
                    let cin = self.shape(*input)[2];
                    let cout = map.len();
                    for (p, px) in gd.chunks_exact(cout).enumerate() {
                        for (j, m) in map.iter().enumerate() {
                            if let Some((idx, s)) = m {
                                gi.data_mut()[p * cin + idx] += px[j] * T::from_f64_lossy(*s);
                            }
                        }
                    }
                    merge(grads, *input, gi);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => {
                let x = self.val(*input);
                let kt = self.val(*kernel);
                let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (k, cout) = (kt.shape()[0], kt.shape()[3]);
                let (mut gi, mut gk, mut gb) = (zeros(*input), zeros(*kernel), zeros(*bias));
                kernels::conv2d_backward(
                    x.data(),
                    kt.data(),
                    gd,
                    h,
                    w,
                    cin,
                    cout,
                    k,
                    gi.as_mut().map(|t| t.data_mut()),
                    gk.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                for (target, grad) in [(*input, gi), (*kernel, gk), (*bias, gb)] {
                    if let Some(grad) = grad {
                        merge(grads, target, grad);
                    }
                }
            }
            Op::Resize(a) => {
                if let Some(mut gi) = zeros(*a) {
                    let s = self.shape(*a);
                    let (h, w, c) = (s[0], s[1], s[2]);
                    kernels::resize_backward(
                        gd,
                        h,
                        w,
                        c,
                        node.shape[0],
                        node.shape[1],
                        gi.data_mut(),
                    );
                    merge(grads, *a, gi);
                }
            }
            Op::BilinearSample { image, positions } => {
                let x = self.val(*image);
                let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (mut gi, mut gp) = (zeros(*image), zeros(*positions));
                kernels::bilinear_backward(
                    x.data(),
                    h,
                    w,
                    c,
                    self.val(*positions).data(),
                    gd,
                    gi.as_mut().map(|t| t.data_mut()),
                    gp.as_mut().map(|t| t.data_mut()),
                );
                for (target, grad) in [(*image, gi), (*positions, gp)] {
                    if let Some(grad) = grad {
                        merge(grads, target, grad);
                    }
                }
            }
            Op::ProjectFlow { jacobian, delta } => {
                let n = delta.len();
                let delta: Vec<T> = delta.iter().map(|&d| T::from_f64_lossy(d)).collect();
                acc(grads, *jacobian, &|k| {
                    let (p, e) = (k / (2 * n), k % (2 * n));
                    gd[2 * p + e / n] * delta[e % n]
                });
            }
        }
    }

    /// Ops that are only piecewise smooth report which piece every element
    /// currently sits on. Central differences are valid only when a
    /// perturbation leaves this signature unchanged.
    pub(crate) fn branch_signature(&self) -> Vec<i64> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Abs(a) | Op::LeakyRelu(a, _) => {
                    for &v in self.val(*a).data() {
                        sig.push(if v > T::zero() { 1 } else if v < T::zero() { -1 } else { 0 });
                    }
                }
                Op::BilinearSample { image, positions } => {
                    let s = self.shape(*image);
                    let (h, w) = (s[0], s[1]);
                    for pos in self.val(*positions).data().chunks_exact(2) {
                        for (v, n) in [(pos[0], w), (pos[1], h)] {
                            let l = kernels::lookup(v, n);
                            let code = if !l.inside {
                                if v < T::zero() { -1 } else { -2 }
                            } else {
                                l.i0 as i64
                            };
                            sig.push(code);
                        }
                    }
                }
                _ => {}
            }
        }
        sig
    }

    /// Fails if any piecewise op is evaluated within `tol` of a kink.
    pub fn check_differentiable(&self, tol: f64) -> Result<(), GradError> {
        if !self.evaluated {
            return Err(GradError::NotEvaluated);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let bad = match &node.op {
                Op::Abs(a) | Op::LeakyRelu(a, _) => self
                    .val(*a)
                    .data()
                    .iter()
                    .any(|v| v.to_f64_lossy().abs() < tol),
                Op::BilinearSample { image, positions } => {
                    let s = self.shape(*image);
                    let (h, w) = (s[0] as f64, s[1] as f64);
                    self.val(*positions).data().chunks_exact(2).any(|pos| {
                        [(pos[0].to_f64_lossy(), w), (pos[1].to_f64_lossy(), h)]
                            .iter()
                            .any(|&(v, n)| {
                                let r = v.round();
                                r >= 0.0 && r <= n - 1.0 && (v - r).abs() < tol
                            })
                    })
                }
                _ => false,
            };
            if bad {
                return Err(GradError::NonDifferentiable {
                    node: i,
                    op: node.op.name(),
                });
            }
        }
        Ok(())
    }
}

fn merge<T: Real>(grads: &mut [Option<Tensor<T>>], target: NodeId, grad: Tensor<T>) {
    match &mut grads[target.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(grad.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(grad),
    }
}

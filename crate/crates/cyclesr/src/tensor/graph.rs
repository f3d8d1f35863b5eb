//! Reverse-mode autodiff over whole tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value,
//! the op kind and parent ids. Creation order is a topological order, so the
//! backward sweep is a single reverse pass visiting each node exactly once.
//! Each sweep computes adjoints in a scratch buffer and then adds them into
//! the persistent per-node gradients, so repeated [`Graph::backward`] calls
//! accumulate until [`Graph::zero_grads`].

use crate::error::{Error, Result};
use crate::tensor::kernels::{
    conv2d_backward, conv2d_forward, convt2d_backward, convt2d_forward,
};
use crate::tensor::resize::{bilinear_backward, bilinear_forward};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    needs_grad: bool,
    op: Op<T>,
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnStats<T: Scalar> {
    pub mean: Tensor<T>,
    pub var_biased: Tensor<T>,
    pub var_unbiased: Tensor<T>,
}

enum Op<T: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScalarMul(NodeId, T),
    ScalarAdd(NodeId, T),
    Abs(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Sqrt(NodeId),
    Log { src: NodeId, floor: T },
    Mean(NodeId),
    ConcatC(Vec<NodeId>),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Tensor<T>,
        inv_std: Tensor<T>,
        training: bool,
    },
    Bilinear {
        input: NodeId,
        in_h: usize,
        in_w: usize,
    },
}

/// Per-sweep adjoint buffer.
struct Adjoints<T: Scalar>(Vec<Option<Tensor<T>>>);

impl<T: Scalar> Adjoints<T> {
    fn add(&mut self, id: NodeId, g: Tensor<T>) {
        match &mut self.0[id.0] {
            Some(existing) => {
                let data = existing.data_mut();
                for (d, s) in data.iter_mut().zip(g.data()) {
                    *d += *s;
                }
            }
            slot => *slot = Some(g),
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf. Only leaves with `requires_grad` (and nodes depending on
    /// them) receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<Tensor<T>> {
        self.nodes[id.0].grad.clone()
    }

    /// Detach: re-enter a node's value as a fresh constant leaf, cutting the
    /// gradient path to whatever produced it.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.clone();
        self.constant(v)
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, op: Op<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn check_broadcast(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        let da = self.value(a).dims();
        let db = self.value(b).dims();
        if da == db || self.value(a).is_scalar() || self.value(b).is_scalar() {
            Ok(())
        } else {
            Err(Error::shape(format!("{what}: dims {da:?} vs {db:?}")))
        }
    }

    fn broadcast_zip(&self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.dims() == tb.dims() {
            Tensor::from_fn(ta.dims(), |i| f(ta.data()[i], tb.data()[i]))
        } else if tb.is_scalar() {
            let s = tb.item();
            ta.map(|v| f(v, s))
        } else {
            let s = ta.item();
            tb.map(|v| f(s, v))
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_broadcast(a, b, "add")?;
        let v = self.broadcast_zip(a, b, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, ng, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_broadcast(a, b, "sub")?;
        let v = self.broadcast_zip(a, b, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, ng, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_broadcast(a, b, "mul")?;
        let v = self.broadcast_zip(a, b, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, ng, Op::Mul(a, b)))
    }

    pub fn scalar_mul(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        let ng = self.needs(a);
        self.push(v, ng, Op::ScalarMul(a, s))
    }

    pub fn scalar_add(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.value(a).map(|x| x + s);
        let ng = self.needs(a);
        self.push(v, ng, Op::ScalarAdd(a, s))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.abs());
        let ng = self.needs(a);
        self.push(v, ng, Op::Abs(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let ng = self.needs(a);
        self.push(v, ng, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(stable_sigmoid);
        let ng = self.needs(a);
        self.push(v, ng, Op::Sigmoid(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.data().iter().any(|&x| x < T::zero()) {
            return Err(Error::numeric("sqrt of negative value"));
        }
        let v = t.map(|x| x.sqrt());
        let ng = self.needs(a);
        Ok(self.push(v, ng, Op::Sqrt(a)))
    }

    /// Natural log; errors on any non-positive element.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if let Some(i) = t.data().iter().position(|&x| x <= T::zero()) {
            return Err(Error::numeric(format!(
                "log of non-positive value {} at flat index {i}",
                t.data()[i]
            )));
        }
        let v = t.map(|x| x.ln());
        let ng = self.needs(a);
        Ok(self.push(v, ng, Op::Log { src: a, floor: T::zero() }))
    }

    /// `ln(max(x, floor))`; the clamped region is treated as constant.
    pub fn log_clamped(&mut self, a: NodeId, floor: T) -> NodeId {
        let v = self.value(a).map(|x| x.max(floor).ln());
        let ng = self.needs(a);
        self.push(v, ng, Op::Log { src: a, floor })
    }

    /// Mean of all elements; result has dims `[1]`.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let n = T::cast_from(t.numel() as f64);
        let v = Tensor::scalar(t.data().iter().copied().sum::<T>() / n);
        let ng = self.needs(a);
        self.push(v, ng, Op::Mean(a))
    }

    /// Concatenate BCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let (b0, _, h0, w0) = self.value(parts[0]).dims4()?;
        let mut c_total = 0;
        for &p in parts {
            let (b, c, h, w) = self.value(p).dims4()?;
            if (b, h, w) != (b0, h0, w0) {
                return Err(Error::shape(format!(
                    "concat: {:?} does not match leading {:?}",
                    self.value(p).dims(),
                    self.value(parts[0]).dims()
                )));
            }
            c_total += c;
        }
        let plane = h0 * w0;
        let mut out = Vec::with_capacity(b0 * c_total * plane);
        for b in 0..b0 {
            for &p in parts {
                let t = self.value(p);
                let c = t.dims()[1];
                let start = b * c * plane;
                out.extend_from_slice(&t.data()[start..start + c * plane]);
            }
        }
        let v = Tensor::from_vec(&[b0, c_total, h0, w0], out)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(v, ng, Op::ConcatC(parts.to_vec())))
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let v = conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let ng = self.needs(input)
            || self.needs(weight)
            || bias.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(
            v,
            ng,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
        ))
    }

    pub fn convt2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<NodeId> {
        let v = convt2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
            out_pad,
        )?;
        let ng = self.needs(input)
            || self.needs(weight)
            || bias.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(
            v,
            ng,
            Op::ConvT2d {
                input,
                weight,
                bias,
                stride,
                pad,
                out_pad,
            },
        ))
    }

    /// Batch normalization with eps 1e-5. Training mode normalizes by batch
    /// statistics and returns them (the caller maintains running stats);
    /// eval mode normalizes by the supplied running statistics.
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: Option<(&Tensor<T>, &Tensor<T>)>,
        training: bool,
    ) -> Result<(NodeId, Option<BnStats<T>>)> {
        let eps = T::cast_from(1e-5);
        let (b, c, h, w) = self.value(input).dims4()?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape(format!(
                "batch norm affine params must have length {c}"
            )));
        }
        let n = b * h * w;
        if n == 0 {
            return Err(Error::invalid("zero-size batch"));
        }
        let (mean, inv_std, stats) = if training {
            let x = self.value(input).data();
            let plane = h * w;
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let nf = T::cast_from(n as f64);
            for ch in 0..c {
                let mut s = T::zero();
                for bi in 0..b {
                    let p = &x[(bi * c + ch) * plane..][..plane];
                    s += p.iter().copied().sum::<T>();
                }
                mean[ch] = s / nf;
                let mut v = T::zero();
                for bi in 0..b {
                    let p = &x[(bi * c + ch) * plane..][..plane];
                    for &e in p {
                        let d = e - mean[ch];
                        v += d * d;
                    }
                }
                var[ch] = v / nf;
            }
            let var_unbiased: Vec<T> = if n > 1 {
                let corr = T::cast_from(n as f64 / (n as f64 - 1.0));
                var.iter().map(|&v| v * corr).collect()
            } else {
                var.clone()
            };
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let mean_t = Tensor::from_vec(&[c], mean)?;
            let stats = BnStats {
                mean: mean_t.clone(),
                var_biased: Tensor::from_vec(&[c], var)?,
                var_unbiased: Tensor::from_vec(&[c], var_unbiased)?,
            };
            (mean_t, Tensor::from_vec(&[c], inv_std)?, Some(stats))
        } else {
            let (rm, rv) = running.ok_or_else(|| {
                Error::invalid("eval-mode batch norm requires running statistics")
            })?;
            if rm.numel() != c || rv.numel() != c {
                return Err(Error::shape("running stats length mismatch"));
            }
            let inv_std: Vec<T> = rv.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            (rm.clone(), Tensor::from_vec(&[c], inv_std)?, None)
        };

        let x = self.value(input).data();
        let gm = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let plane = h * w;
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * plane;
                let (m, istd, ga, be) = (mean.data()[ch], inv_std.data()[ch], gm[ch], bt[ch]);
                for i in 0..plane {
                    out[base + i] = ga * (x[base + i] - m) * istd + be;
                }
            }
        }
        let v = Tensor::from_vec(&[b, c, h, w], out)?;
        let ng = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let id = self.push(
            v,
            ng,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                training,
            },
        );
        Ok((id, stats))
    }

    /// Differentiable bilinear resize (align-corners=false) to `(out_h, out_w)`.
    pub fn resize_bilinear(&mut self, input: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let (_, _, h, w) = self.value(input).dims4()?;
        let v = bilinear_forward(self.value(input), out_h, out_w)?;
        let ng = self.needs(input);
        Ok(self.push(v, ng, Op::Bilinear { input, in_h: h, in_w: w }))
    }

    /// Reverse sweep from a scalar root. Adjoints are computed fresh per
    /// sweep, then added into the persistent node gradients.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got dims {:?}",
                self.value(root).dims()
            )));
        }
        let mut adj = Adjoints(vec![None; root.0 + 1]);
        if self.nodes[root.0].needs_grad {
            adj.add(NodeId(root.0), Tensor::scalar(T::one()));
        }
        for i in (0..=root.0).rev() {
            let Some(g) = adj.0[i].take() else {
                continue;
            };
            self.propagate(NodeId(i), &g, &mut adj)?;
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(existing) => {
                    let data = existing.data_mut();
                    for (d, s) in data.iter_mut().zip(g.data()) {
                        *d += *s;
                    }
                }
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: NodeId, g: &Tensor<T>, adj: &mut Adjoints<T>) -> Result<()> {
        match &self.nodes[id.0].op {
            Op::Leaf => Ok(()),
            &Op::Add(a, b) => {
                if self.needs(a) {
                    self.adj_broadcast(adj, a, g, |x| x);
                }
                if self.needs(b) {
                    self.adj_broadcast(adj, b, g, |x| x);
                }
                Ok(())
            }
            &Op::Sub(a, b) => {
                if self.needs(a) {
                    self.adj_broadcast(adj, a, g, |x| x);
                }
                if self.needs(b) {
                    self.adj_broadcast(adj, b, g, |x| -x);
                }
                Ok(())
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    self.adj_product(adj, a, g, self.value(b));
                }
                if self.needs(b) {
                    self.adj_product(adj, b, g, self.value(a));
                }
                Ok(())
            }
            &Op::ScalarMul(a, s) => {
                if self.needs(a) {
                    adj.add(a, g.map(|x| x * s));
                }
                Ok(())
            }
            &Op::ScalarAdd(a, _) => {
                if self.needs(a) {
                    adj.add(a, g.clone());
                }
                Ok(())
            }
            &Op::Abs(a) => {
                if self.needs(a) {
                    let x = self.value(a);
                    let ga = Tensor::from_fn(g.dims(), |i| {
                        let xi = x.data()[i];
                        if xi > T::zero() {
                            g.data()[i]
                        } else if xi < T::zero() {
                            -g.data()[i]
                        } else {
                            T::zero()
                        }
                    });
                    adj.add(a, ga);
                }
                Ok(())
            }
            &Op::Relu(a) => {
                if self.needs(a) {
                    let x = self.value(a);
                    let ga = Tensor::from_fn(g.dims(), |i| {
                        if x.data()[i] > T::zero() {
                            g.data()[i]
                        } else {
                            T::zero()
                        }
                    });
                    adj.add(a, ga);
                }
                Ok(())
            }
            &Op::Sigmoid(a) => {
                if self.needs(a) {
                    let y = self.value(id);
                    let ga = Tensor::from_fn(g.dims(), |i| {
                        let yi = y.data()[i];
                        g.data()[i] * yi * (T::one() - yi)
                    });
                    adj.add(a, ga);
                }
                Ok(())
            }
            &Op::Sqrt(a) => {
                if self.needs(a) {
                    let y = self.value(id);
                    let half = T::cast_from(0.5);
                    let ga = Tensor::from_fn(g.dims(), |i| {
                        let yi = y.data()[i];
                        if yi > T::zero() {
                            g.data()[i] * half / yi
                        } else {
                            T::zero()
                        }
                    });
                    adj.add(a, ga);
                }
                Ok(())
            }
            &Op::Log { src, floor } => {
                if self.needs(src) {
                    let x = self.value(src);
                    let ga = Tensor::from_fn(g.dims(), |i| {
                        let xi = x.data()[i];
                        if xi > floor {
                            g.data()[i] / xi
                        } else {
                            T::zero()
                        }
                    });
                    adj.add(src, ga);
                }
                Ok(())
            }
            &Op::Mean(a) => {
                if self.needs(a) {
                    let dims = self.value(a).dims().to_vec();
                    let n = T::cast_from(self.value(a).numel() as f64);
                    let gv = g.item() / n;
                    adj.add(a, Tensor::full(&dims, gv));
                }
                Ok(())
            }
            Op::ConcatC(parts) => {
                let (b, c_total, h, w) = self.value(id).dims4()?;
                let plane = h * w;
                let mut offset = 0usize;
                for &p in parts {
                    let c = self.value(p).dims()[1];
                    if self.needs(p) {
                        let mut gp = vec![T::zero(); b * c * plane];
                        for bi in 0..b {
                            let src = &g.data()[(bi * c_total + offset) * plane..][..c * plane];
                            gp[bi * c * plane..(bi + 1) * c * plane].copy_from_slice(src);
                        }
                        adj.add(p, Tensor::from_vec(&[b, c, h, w], gp)?);
                    }
                    offset += c;
                }
                Ok(())
            }
            &Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let need_i = self.needs(input);
                let need_w = self.needs(weight);
                let need_b = bias.map(|b| self.needs(b)).unwrap_or(false);
                let (gi, gw, gb) = conv2d_backward(
                    self.value(input),
                    self.value(weight),
                    g,
                    stride,
                    pad,
                    need_i,
                    need_w,
                    need_b,
                )?;
                if let Some(gi) = gi {
                    adj.add(input, gi);
                }
                if let Some(gw) = gw {
                    adj.add(weight, gw);
                }
                if let (Some(gb), Some(bid)) = (gb, bias) {
                    adj.add(bid, gb);
                }
                Ok(())
            }
            &Op::ConvT2d {
                input,
                weight,
                bias,
                stride,
                pad,
                out_pad,
            } => {
                let need_i = self.needs(input);
                let need_w = self.needs(weight);
                let need_b = bias.map(|b| self.needs(b)).unwrap_or(false);
                let (gi, gw, gb) = convt2d_backward(
                    self.value(input),
                    self.value(weight),
                    g,
                    stride,
                    pad,
                    out_pad,
                    need_i,
                    need_w,
                    need_b,
                )?;
                if let Some(gi) = gi {
                    adj.add(input, gi);
                }
                if let Some(gw) = gw {
                    adj.add(weight, gw);
                }
                if let (Some(gb), Some(bid)) = (gb, bias) {
                    adj.add(bid, gb);
                }
                Ok(())
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                training,
            } => self.batch_norm_backward(*input, *gamma, *beta, mean, inv_std, *training, g, adj),
            &Op::Bilinear { input, in_h, in_w } => {
                if self.needs(input) {
                    adj.add(input, bilinear_backward(g, in_h, in_w)?);
                }
                Ok(())
            }
        }
    }

    /// Add `f(g)` to `target`'s adjoint, sum-reducing if `target` is a
    /// broadcast scalar.
    fn adj_broadcast(&self, adj: &mut Adjoints<T>, target: NodeId, g: &Tensor<T>, f: impl Fn(T) -> T) {
        let tdims = self.value(target).dims();
        if tdims == g.dims() {
            adj.add(target, g.map(&f));
        } else {
            let s: T = g.data().iter().map(|&x| f(x)).sum();
            adj.add(target, Tensor::from_vec(tdims, vec![s]).unwrap());
        }
    }

    /// Add `g * other` to `target`'s adjoint (product rule), handling the
    /// scalar-broadcast cases of `mul`.
    fn adj_product(&self, adj: &mut Adjoints<T>, target: NodeId, g: &Tensor<T>, other: &Tensor<T>) {
        let tdims = self.value(target).dims();
        if other.is_scalar() {
            let s = other.item();
            if tdims == g.dims() {
                adj.add(target, g.map(|x| x * s));
            } else {
                let total: T = g.data().iter().map(|&x| x * s).sum();
                adj.add(target, Tensor::from_vec(tdims, vec![total]).unwrap());
            }
        } else if tdims == g.dims() {
            let prod = Tensor::from_fn(g.dims(), |i| g.data()[i] * other.data()[i]);
            adj.add(target, prod);
        } else {
            // target is the broadcast scalar: reduce g .* other
            let total: T = g.data().iter().zip(other.data()).map(|(&a, &b)| a * b).sum();
            adj.add(target, Tensor::from_vec(tdims, vec![total]).unwrap());
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_backward(
        &self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &Tensor<T>,
        inv_std: &Tensor<T>,
        training: bool,
        g: &Tensor<T>,
        adj: &mut Adjoints<T>,
    ) -> Result<()> {
        let (b, c, h, w) = self.value(input).dims4()?;
        let plane = h * w;
        let n = T::cast_from((b * plane) as f64);
        let x = self.value(input);
        let gm = self.value(gamma);

        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * plane;
                let m = mean.data()[ch];
                let istd = inv_std.data()[ch];
                for i in 0..plane {
                    let dy = g.data()[base + i];
                    let xhat = (x.data()[base + i] - m) * istd;
                    sum_dy[ch] += dy;
                    sum_dy_xhat[ch] += dy * xhat;
                }
            }
        }

        if self.needs(beta) {
            adj.add(beta, Tensor::from_vec(&[c], sum_dy.clone())?);
        }
        if self.needs(gamma) {
            adj.add(gamma, Tensor::from_vec(&[c], sum_dy_xhat.clone())?);
        }
        if self.needs(input) {
            let mut gi = vec![T::zero(); b * c * plane];
            for bi in 0..b {
                for ch in 0..c {
                    let base = (bi * c + ch) * plane;
                    let m = mean.data()[ch];
                    let istd = inv_std.data()[ch];
                    let ga = gm.data()[ch];
                    if training {
                        let mean_dy = sum_dy[ch] / n;
                        let mean_dy_xhat = sum_dy_xhat[ch] / n;
                        for i in 0..plane {
                            let dy = g.data()[base + i];
                            let xhat = (x.data()[base + i] - m) * istd;
                            gi[base + i] = ga * istd * (dy - mean_dy - xhat * mean_dy_xhat);
                        }
                    } else {
                        for i in 0..plane {
                            gi[base + i] = g.data()[base + i] * ga * istd;
                        }
                    }
                }
            }
            adj.add(input, Tensor::from_vec(&[b, c, h, w], gi)?);
        }
        Ok(())
    }
}

fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

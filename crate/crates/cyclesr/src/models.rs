//! Network architectures: the multi-scale LR->HR generator, the
//! noise-conditioned HR->LR degradation generator, the conditional patch
//! discriminator, and the frozen feature extractor behind the perceptual
//! loss.
//!
//! Every model has two forward paths over the same parameters: a graph
//! (autodiff) path used in training and a raw path that keeps no
//! intermediates, used for inference on large canvases. Both produce
//! bitwise-identical values.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::{seeded_normal, Initializer, ParamStore};
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::kernels::{conv2d_forward, convt2d_forward};
use crate::tensor::{Scalar, Tensor};

/// Binds store parameters into a graph (each at most once), records which
/// names were bound, and defers batch-norm running-stat updates so the store
/// can stay immutable during a forward pass.
pub struct Binder<'s, T: Scalar> {
    store: &'s ParamStore<T>,
    trainable_prefixes: Vec<String>,
    ids: HashMap<String, NodeId>,
    order: Vec<String>,
    pending_buffers: HashMap<String, Tensor<T>>,
    buffer_order: Vec<String>,
}

impl<'s, T: Scalar> Binder<'s, T> {
    /// `trainable_prefixes` name the parameter families that should receive
    /// gradients in this pass (e.g. `["G.", "F."]`).
    pub fn new(store: &'s ParamStore<T>, trainable_prefixes: &[&str]) -> Self {
        Binder {
            store,
            trainable_prefixes: trainable_prefixes.iter().map(|s| s.to_string()).collect(),
            ids: HashMap::new(),
            order: Vec::new(),
            pending_buffers: HashMap::new(),
            buffer_order: Vec::new(),
        }
    }

    pub fn bind(&mut self, g: &mut Graph<T>, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.ids.get(name) {
            return Ok(id);
        }
        let entry = self.store.entry(name)?;
        let requires = entry.trainable
            && self
                .trainable_prefixes
                .iter()
                .any(|p| name.starts_with(p.as_str()));
        let id = g.leaf(entry.value.clone(), requires);
        self.ids.insert(name.to_string(), id);
        self.order.push(name.to_string());
        Ok(id)
    }

    /// Current value of a (batch-norm) buffer, respecting pending updates.
    pub fn buffer(&self, name: &str) -> Result<Tensor<T>> {
        if let Some(t) = self.pending_buffers.get(name) {
            return Ok(t.clone());
        }
        Ok(self.store.value(name)?.clone())
    }

    pub fn stage_buffer(&mut self, name: &str, value: Tensor<T>) {
        if !self.pending_buffers.contains_key(name) {
            self.buffer_order.push(name.to_string());
        }
        self.pending_buffers.insert(name.to_string(), value);
    }

    /// Accumulate autodiff gradients of every bound trainable parameter into
    /// the store and write back staged buffer updates.
    pub fn commit(self, g: &Graph<T>, store: &mut ParamStore<T>) -> Result<()> {
        for name in &self.order {
            let id = self.ids[name];
            if let Some(grad) = g.grad(id) {
                store.accumulate_grad(name, &grad)?;
            }
        }
        for name in &self.buffer_order {
            store.set_value(name, self.pending_buffers[name].clone())?;
        }
        Ok(())
    }
}

/// 3x3-style convolution layer with optional fused ReLU.
#[derive(Clone, Debug)]
struct Conv2dLayer {
    name: String,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
    relu: bool,
}

impl Conv2dLayer {
    fn new(name: String, in_ch: usize, out_ch: usize, k: usize, stride: usize, relu: bool) -> Self {
        Conv2dLayer {
            name,
            in_ch,
            out_ch,
            k,
            stride,
            pad: k / 2,
            relu,
        }
    }

    fn init<T: Scalar>(&self, store: &mut ParamStore<T>, init: &mut Initializer, trainable: bool) -> Result<()> {
        let fan_in = self.in_ch * self.k * self.k;
        let w = init.he_normal(&[self.out_ch, self.in_ch, self.k, self.k], fan_in);
        store.insert(format!("{}.weight", self.name), w, trainable)?;
        store.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.out_ch]), trainable)?;
        Ok(())
    }

    fn forward_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = binder.bind(g, &format!("{}.weight", self.name))?;
        let b = binder.bind(g, &format!("{}.bias", self.name))?;
        let y = g.conv2d(x, w, Some(b), self.stride, self.pad)?;
        Ok(if self.relu { g.relu(y) } else { y })
    }

    fn forward_raw<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let w = store.value(&format!("{}.weight", self.name))?;
        let b = store.value(&format!("{}.bias", self.name))?;
        let y = conv2d_forward(x, w, Some(b), self.stride, self.pad)?;
        Ok(if self.relu {
            y.map(|v| if v > T::zero() { v } else { T::zero() })
        } else {
            y
        })
    }
}

/// Transposed-convolution layer; stride-2 instances carry output padding 1 so
/// they exactly double even spatial sizes.
#[derive(Clone, Debug)]
struct ConvT2dLayer {
    name: String,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
    relu: bool,
}

impl ConvT2dLayer {
    fn new(name: String, in_ch: usize, out_ch: usize, k: usize, stride: usize, relu: bool) -> Self {
        ConvT2dLayer {
            name,
            in_ch,
            out_ch,
            k,
            stride,
            pad: k / 2,
            out_pad: stride - 1,
            relu,
        }
    }

    fn init<T: Scalar>(&self, store: &mut ParamStore<T>, init: &mut Initializer, trainable: bool) -> Result<()> {
        let fan_in = self.in_ch * self.k * self.k;
        let w = init.he_normal(&[self.in_ch, self.out_ch, self.k, self.k], fan_in);
        store.insert(format!("{}.weight", self.name), w, trainable)?;
        store.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.out_ch]), trainable)?;
        Ok(())
    }

    fn forward_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = binder.bind(g, &format!("{}.weight", self.name))?;
        let b = binder.bind(g, &format!("{}.bias", self.name))?;
        let y = g.convt2d(x, w, Some(b), self.stride, self.pad, self.out_pad)?;
        Ok(if self.relu { g.relu(y) } else { y })
    }

    fn forward_raw<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let w = store.value(&format!("{}.weight", self.name))?;
        let b = store.value(&format!("{}.bias", self.name))?;
        let y = convt2d_forward(x, w, Some(b), self.stride, self.pad, self.out_pad)?;
        Ok(if self.relu {
            y.map(|v| if v > T::zero() { v } else { T::zero() })
        } else {
            y
        })
    }
}

/// Batch normalization layer owning gamma/beta parameters plus running-stat
/// buffers (momentum 0.1).
#[derive(Clone, Debug)]
struct BatchNormLayer {
    name: String,
    ch: usize,
}

const BN_MOMENTUM: f64 = 0.1;

impl BatchNormLayer {
    fn init<T: Scalar>(&self, store: &mut ParamStore<T>, trainable: bool) -> Result<()> {
        store.insert(format!("{}.gamma", self.name), Tensor::full(&[self.ch], T::one()), trainable)?;
        store.insert(format!("{}.beta", self.name), Tensor::zeros(&[self.ch]), trainable)?;
        store.insert(format!("{}.running_mean", self.name), Tensor::zeros(&[self.ch]), false)?;
        store.insert(
            format!("{}.running_var", self.name),
            Tensor::full(&[self.ch], T::one()),
            false,
        )?;
        Ok(())
    }

    fn forward_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder<T>,
        x: NodeId,
        training: bool,
    ) -> Result<NodeId> {
        let gamma = binder.bind(g, &format!("{}.gamma", self.name))?;
        let beta = binder.bind(g, &format!("{}.beta", self.name))?;
        let rm_name = format!("{}.running_mean", self.name);
        let rv_name = format!("{}.running_var", self.name);
        if training {
            let (y, stats) = g.batch_norm(x, gamma, beta, None, true)?;
            let stats = stats.expect("training mode returns stats");
            let mom = T::cast_from(BN_MOMENTUM);
            let keep = T::one() - mom;
            let old_m = binder.buffer(&rm_name)?;
            let old_v = binder.buffer(&rv_name)?;
            let new_m = Tensor::from_fn(old_m.dims(), |i| {
                keep * old_m.data()[i] + mom * stats.mean.data()[i]
            });
            let new_v = Tensor::from_fn(old_v.dims(), |i| {
                keep * old_v.data()[i] + mom * stats.var_unbiased.data()[i]
            });
            binder.stage_buffer(&rm_name, new_m);
            binder.stage_buffer(&rv_name, new_v);
            Ok(y)
        } else {
            let rm = binder.buffer(&rm_name)?;
            let rv = binder.buffer(&rv_name)?;
            let (y, _) = g.batch_norm(x, gamma, beta, Some((&rm, &rv)), false)?;
            Ok(y)
        }
    }
}

const GEN_KERNEL: usize = 3;

struct GeneratorBranch {
    encoders: Vec<Conv2dLayer>,
    decoders: Vec<ConvT2dLayer>,
    proj: Conv2dLayer,
    depth: usize,
}

/// Multi-scale LR->HR generator: three encoder-decoder branches of depth 1..3
/// produce one-channel detail maps. Each detail is added to the input, the
/// three reconstructions are concatenated and fused by a final 3x3 conv.
pub struct MultiScaleGenerator {
    prefix: String,
    branches: Vec<GeneratorBranch>,
    fusion: Conv2dLayer,
}

/// Channel widths per encoder stage of branch `j` (deepest stage of branch 3
/// widens to 64); decoders mirror them in reverse.
fn branch_widths(depth: usize) -> Vec<usize> {
    match depth {
        1 => vec![32],
        2 => vec![32, 32],
        3 => vec![32, 32, 64],
        _ => unreachable!("generator has exactly 3 branches"),
    }
}

impl MultiScaleGenerator {
    pub fn new(prefix: &str) -> Self {
        let mut branches = Vec::new();
        for depth in 1..=3 {
            let widths = branch_widths(depth);
            let mut encoders = Vec::new();
            let mut in_ch = 1;
            for (stage, &ch) in widths.iter().enumerate() {
                let base = format!("{prefix}.scale{depth}.enc{}", stage + 1);
                encoders.push(Conv2dLayer::new(
                    format!("{base}.conv1"),
                    in_ch,
                    ch,
                    GEN_KERNEL,
                    1,
                    true,
                ));
                encoders.push(Conv2dLayer::new(
                    format!("{base}.conv2"),
                    ch,
                    ch,
                    GEN_KERNEL,
                    2,
                    true,
                ));
                in_ch = ch;
            }
            let mut decoders = Vec::new();
            let mut cur = *widths.last().expect("non-empty widths");
            for stage in 0..depth {
                // decoder stage `stage+1` mirrors encoder stage `depth-stage`
                let out_ch = widths[depth - 1 - stage];
                let base = format!("{prefix}.scale{depth}.dec{}", stage + 1);
                decoders.push(ConvT2dLayer::new(
                    format!("{base}.conv1"),
                    cur,
                    out_ch,
                    GEN_KERNEL,
                    2,
                    true,
                ));
                decoders.push(ConvT2dLayer::new(
                    format!("{base}.conv2"),
                    out_ch,
                    out_ch,
                    GEN_KERNEL,
                    1,
                    true,
                ));
                cur = out_ch;
            }
            let proj = Conv2dLayer::new(
                format!("{prefix}.scale{depth}.proj"),
                cur,
                1,
                GEN_KERNEL,
                1,
                false,
            );
            branches.push(GeneratorBranch {
                encoders,
                decoders,
                proj,
                depth,
            });
        }
        let fusion = Conv2dLayer::new(format!("{prefix}.fusion"), 3, 1, GEN_KERNEL, 1, false);
        MultiScaleGenerator {
            prefix: prefix.to_string(),
            branches,
            fusion,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn init_into<T: Scalar>(&self, store: &mut ParamStore<T>, init: &mut Initializer) -> Result<()> {
        for b in &self.branches {
            for l in &b.encoders {
                l.init(store, init, true)?;
            }
            for l in &b.decoders {
                l.init(store, init, true)?;
            }
            b.proj.init(store, init, true)?;
        }
        self.fusion.init(store, init, true)
    }

    fn check_dims<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
        let (b, c, h, w) = x.dims4()?;
        if c != 1 {
            return Err(Error::shape(format!("generator expects 1 channel, got {c}")));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::shape(format!(
                "generator input dims {h}x{w} must be divisible by 8"
            )));
        }
        Ok((b, c, h, w))
    }

    pub fn forward_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        Self::check_dims(g.value(x))?;
        let mut recons = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let mut h = x;
            for l in &b.encoders {
                h = l.forward_graph(g, binder, h)?;
            }
            for l in &b.decoders {
                h = l.forward_graph(g, binder, h)?;
            }
            let detail = b.proj.forward_graph(g, binder, h)?;
            recons.push(g.add(x, detail)?);
        }
        let cat = g.concat_channels(&recons)?;
        self.fusion.forward_graph(g, binder, cat)
    }

    pub fn forward_raw<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Self::check_dims(x)?;
        let mut recons = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let mut h = x.clone();
            for l in &b.encoders {
                h = l.forward_raw(store, &h)?;
            }
            for l in &b.decoders {
                h = l.forward_raw(store, &h)?;
            }
            let detail = b.proj.forward_raw(store, &h)?;
            recons.push(Tensor::from_fn(x.dims(), |i| {
                x.data()[i] + detail.data()[i]
            }));
        }
        let (bn, _, h, w) = x.dims4()?;
        let plane = h * w;
        let mut cat = Vec::with_capacity(bn * 3 * plane);
        for bi in 0..bn {
            for r in &recons {
                cat.extend_from_slice(&r.data()[bi * plane..(bi + 1) * plane]);
            }
        }
        let cat = Tensor::from_vec(&[bn, 3, h, w], cat)?;
        self.fusion.forward_raw(store, &cat)
    }

    /// Spatial size of branch `depth`'s deepest feature map.
    pub fn deepest_dims(&self, h: usize, w: usize, depth: usize) -> (usize, usize) {
        debug_assert!(self.branches.iter().any(|b| b.depth == depth));
        (h >> depth, w >> depth)
    }
}

/// HR->LR degradation generator: the HR image is stacked with one Gaussian
/// noise channel, pushed through a stride-4 conv body to a quarter-size
/// latent, then bilinearly up-sampled back to the full canvas.
pub struct DegradationGenerator {
    prefix: String,
    layers: Vec<Conv2dLayer>,
    pub sigma_noise: f64,
}

impl DegradationGenerator {
    pub fn new(prefix: &str, sigma_noise: f64) -> Self {
        let spec = [
            (2usize, 32usize, 1usize, true),
            (32, 32, 2, true),
            (32, 64, 2, true),
            (64, 64, 1, true),
            (64, 1, 1, false),
        ];
        let layers = spec
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, s, relu))| {
                Conv2dLayer::new(format!("{prefix}.conv{}", i + 1), ci, co, GEN_KERNEL, s, relu)
            })
            .collect();
        DegradationGenerator {
            prefix: prefix.to_string(),
            layers,
            sigma_noise,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn init_into<T: Scalar>(&self, store: &mut ParamStore<T>, init: &mut Initializer) -> Result<()> {
        for l in &self.layers {
            l.init(store, init, true)?;
        }
        Ok(())
    }

    fn check_dims<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
        let (b, c, h, w) = x.dims4()?;
        if c != 1 {
            return Err(Error::shape(format!("degrader expects 1 channel, got {c}")));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!(
                "degrader input dims {h}x{w} must be divisible by 4"
            )));
        }
        Ok((b, c, h, w))
    }

    pub fn noise_for<T: Scalar>(&self, dims: &[usize], seed: u64) -> Tensor<T> {
        seeded_normal(dims, self.sigma_noise, seed)
    }

    /// Graph forward; returns the output node and the latent spatial dims
    /// (always exactly a quarter of the input).
    pub fn forward_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder<T>,
        hr: NodeId,
        noise_seed: u64,
    ) -> Result<(NodeId, (usize, usize))> {
        let (b, _, h, w) = Self::check_dims(g.value(hr))?;
        let noise = g.constant(self.noise_for(&[b, 1, h, w], noise_seed));
        let mut cur = g.concat_channels(&[hr, noise])?;
        for l in &self.layers {
            cur = l.forward_graph(g, binder, cur)?;
        }
        let (_, _, lh, lw) = g.value(cur).dims4()?;
        debug_assert_eq!((lh, lw), (h / 4, w / 4));
        let out = g.resize_bilinear(cur, h, w)?;
        Ok((out, (lh, lw)))
    }

    pub fn forward_raw<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        hr: &Tensor<T>,
        noise_seed: u64,
    ) -> Result<(Tensor<T>, (usize, usize))> {
        let (b, _, h, w) = Self::check_dims(hr)?;
        let noise: Tensor<T> = self.noise_for(&[b, 1, h, w], noise_seed);
        let plane = h * w;
        let mut cat = Vec::with_capacity(b * 2 * plane);
        for bi in 0..b {
            cat.extend_from_slice(&hr.data()[bi * plane..(bi + 1) * plane]);
            cat.extend_from_slice(&noise.data()[bi * plane..(bi + 1) * plane]);
        }
        let mut cur = Tensor::from_vec(&[b, 2, h, w], cat)?;
        for l in &self.layers {
            cur = l.forward_raw(store, &cur)?;
        }
        let (_, _, lh, lw) = cur.dims4()?;
        let out = crate::tensor::resize::bilinear_forward(&cur, h, w)?;
        Ok((out, (lh, lw)))
    }
}

const PATCH_INPUT: usize = 64;

/// Conditional patch discriminator: candidate and conditioning label are
/// channel-stacked into a 2x64x64 input; four stride-2 blocks
/// (conv -> ReLU -> BN) shrink it to a 4x4 sigmoid probability map.
pub struct PatchDiscriminator {
    prefix: String,
    input: Conv2dLayer,
    blocks: Vec<(Conv2dLayer, BatchNormLayer)>,
    head: Conv2dLayer,
}

impl PatchDiscriminator {
    pub fn new(prefix: &str) -> Self {
        let input = Conv2dLayer::new(format!("{prefix}.input"), 2, 64, GEN_KERNEL, 1, true);
        let widths = [(64usize, 64usize), (64, 64), (64, 128), (128, 128)];
        let blocks = widths
            .iter()
            .enumerate()
            .map(|(i, &(ci, co))| {
                let conv = Conv2dLayer::new(
                    format!("{prefix}.blk{}.conv", i + 1),
                    ci,
                    co,
                    GEN_KERNEL,
                    2,
                    true,
                );
                let bn = BatchNormLayer {
                    name: format!("{prefix}.blk{}.bn", i + 1),
                    ch: co,
                };
                (conv, bn)
            })
            .collect();
        let head = Conv2dLayer::new(format!("{prefix}.head"), 128, 1, GEN_KERNEL, 1, false);
        PatchDiscriminator {
            prefix: prefix.to_string(),
            input,
            blocks,
            head,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn init_into<T: Scalar>(&self, store: &mut ParamStore<T>, init: &mut Initializer) -> Result<()> {
        self.input.init(store, init, true)?;
        for (conv, bn) in &self.blocks {
            conv.init(store, init, true)?;
            bn.init(store, true)?;
        }
        self.head.init(store, init, true)
    }

    /// Probability map over 4x4 patches for a (candidate, label) pair, both
    /// `1x1x64x64`.
    pub fn discriminate<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder<T>,
        candidate: NodeId,
        label: NodeId,
        training: bool,
    ) -> Result<NodeId> {
        for (what, id) in [("candidate", candidate), ("label", label)] {
            let (b, c, h, w) = g.value(id).dims4()?;
            if (b, c, h, w) != (1, 1, PATCH_INPUT, PATCH_INPUT) {
                return Err(Error::shape(format!(
                    "discriminator {what} must be 1x1x{PATCH_INPUT}x{PATCH_INPUT}, got {:?}",
                    g.value(id).dims()
                )));
            }
        }
        let mut cur = g.concat_channels(&[candidate, label])?;
        cur = self.input.forward_graph(g, binder, cur)?;
        for (conv, bn) in &self.blocks {
            cur = conv.forward_graph(g, binder, cur)?;
            cur = bn.forward_graph(g, binder, cur, training)?;
        }
        let logits = self.head.forward_graph(g, binder, cur)?;
        Ok(g.sigmoid(logits))
    }
}

/// Frozen perceptual feature extractor: a seeded random five-layer conv stack
/// (16-32-32-64-64 channels, stride 2 at layers 2 and 4). Its parameters are
/// never trained; gradients flow through it to the image only.
pub struct FeatureExtractor {
    prefix: String,
    layers: Vec<Conv2dLayer>,
}

impl FeatureExtractor {
    pub fn new(prefix: &str) -> Self {
        let spec = [
            (1usize, 16usize, 1usize),
            (16, 32, 2),
            (32, 32, 1),
            (32, 64, 2),
            (64, 64, 1),
        ];
        let layers = spec
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, s))| {
                Conv2dLayer::new(format!("{prefix}.conv{}", i + 1), ci, co, GEN_KERNEL, s, true)
            })
            .collect();
        FeatureExtractor {
            prefix: prefix.to_string(),
            layers,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Register frozen (non-trainable) parameters.
    pub fn init_into<T: Scalar>(&self, store: &mut ParamStore<T>, init: &mut Initializer) -> Result<()> {
        for l in &self.layers {
            l.init(store, init, false)?;
        }
        Ok(())
    }

    /// Adopt feature weights from an external checkpoint (same layer names
    /// under this extractor's prefix); entries stay frozen.
    pub fn load_external<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        external: &ParamStore<T>,
    ) -> Result<()> {
        for l in &self.layers {
            for part in ["weight", "bias"] {
                let name = format!("{}.{part}", l.name);
                let v = external.value(&name)?.clone();
                store.set_value(&name, v)?;
            }
        }
        Ok(())
    }

    fn check_dims<T: Scalar>(x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != 1 {
            return Err(Error::shape(format!("extractor expects 1 channel, got {c}")));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!(
                "extractor input dims {h}x{w} must be divisible by 4"
            )));
        }
        Ok(())
    }

    pub fn forward_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        Self::check_dims(g.value(x))?;
        let mut cur = x;
        for l in &self.layers {
            cur = l.forward_graph(g, binder, cur)?;
        }
        Ok(cur)
    }

    pub fn forward_raw<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Self::check_dims(x)?;
        let mut cur = x.clone();
        for l in &self.layers {
            cur = l.forward_raw(store, &cur)?;
        }
        Ok(cur)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with_g(seed: u64) -> (MultiScaleGenerator, ParamStore<f64>) {
        let g = MultiScaleGenerator::new("G");
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        g.init_into(&mut store, &mut init).unwrap();
        (g, store)
    }

    #[test]
    fn generator_preserves_dims() {
        let (model, store) = store_with_g(3);
        let x = Tensor::<f64>::from_fn(&[1, 1, 64, 64], |i| (i % 97) as f64 / 97.0);
        let y = model.forward_raw(&store, &x).unwrap();
        assert_eq!(y.dims(), &[1, 1, 64, 64]);
    }

    #[test]
    fn generator_rejects_indivisible_dims() {
        let (model, store) = store_with_g(3);
        let x = Tensor::<f64>::zeros(&[1, 1, 60, 64]);
        assert!(model.forward_raw(&store, &x).is_err());
    }

    #[test]
    fn zeroed_fusion_head_means_zero_output() {
        let (model, mut store) = store_with_g(3);
        store
            .set_value("G.fusion.weight", Tensor::zeros(&[1, 3, 3, 3]))
            .unwrap();
        store.set_value("G.fusion.bias", Tensor::zeros(&[1])).unwrap();
        let x = Tensor::<f64>::from_fn(&[1, 1, 64, 64], |i| (i % 31) as f64 / 31.0);
        let y = model.forward_raw(&store, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_path_with_averaging_fusion_is_identity() {
        // zero every branch conv; set the fusion conv to average the three
        // reconstruction channels at the center tap. Input values are exact
        // multiples of 3/256 so v/3 is dyadic and the sum is exact.
        let (model, mut store) = store_with_g(3);
        let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
        for name in &names {
            if name.starts_with("G.scale") {
                let dims = store.value(name).unwrap().dims().to_vec();
                store.set_value(name, Tensor::zeros(&dims)).unwrap();
            }
        }
        let mut fusion = Tensor::<f64>::zeros(&[1, 3, 3, 3]);
        for ci in 0..3 {
            fusion.data_mut()[(ci * 3 + 1) * 3 + 1] = 1.0 / 3.0;
        }
        store.set_value("G.fusion.weight", fusion).unwrap();
        store.set_value("G.fusion.bias", Tensor::zeros(&[1])).unwrap();
        let x = Tensor::<f64>::from_fn(&[1, 1, 64, 64], |i| 3.0 * ((i % 86) as f64) / 256.0);
        let y = model.forward_raw(&store, &x).unwrap();
        assert_eq!(y.data(), x.data(), "residual path must be exact");
    }

    #[test]
    fn graph_and_raw_forward_agree_bitwise() {
        let (model, store) = store_with_g(11);
        let x = Tensor::<f64>::from_fn(&[1, 1, 64, 64], |i| ((i * 7) % 53) as f64 / 53.0);
        let raw = model.forward_raw(&store, &x).unwrap();
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, &["G."]);
        let xid = g.leaf(x, false);
        let yid = model.forward_graph(&mut g, &mut binder, xid).unwrap();
        assert_eq!(g.value(yid).data(), raw.data());
    }

    #[test]
    fn degrader_quarter_latent_and_shape() {
        let f = DegradationGenerator::new("F", 0.03);
        let mut store = ParamStore::<f64>::new();
        let mut init = Initializer::new(5);
        f.init_into(&mut store, &mut init).unwrap();
        let hr = Tensor::<f64>::from_fn(&[1, 1, 64, 64], |i| (i % 11) as f64 / 11.0);
        let (out, latent) = f.forward_raw(&store, &hr, 42).unwrap();
        assert_eq!(out.dims(), hr.dims());
        assert_eq!(latent, (16, 16));
    }

    #[test]
    fn degrader_is_seed_deterministic() {
        let f = DegradationGenerator::new("F", 0.0);
        let mut store = ParamStore::<f64>::new();
        let mut init = Initializer::new(5);
        f.init_into(&mut store, &mut init).unwrap();
        let hr = Tensor::<f64>::from_fn(&[1, 1, 32, 32], |i| (i % 7) as f64 / 7.0);
        let (a, _) = f.forward_raw(&store, &hr, 1).unwrap();
        let (b, _) = f.forward_raw(&store, &hr, 1).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn discriminator_output_is_4x4_probability_map() {
        let d = PatchDiscriminator::new("D_hr");
        let mut store = ParamStore::<f64>::new();
        let mut init = Initializer::new(9);
        d.init_into(&mut store, &mut init).unwrap();
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, &["D_hr."]);
        let cand = g.leaf(Tensor::from_fn(&[1, 1, 64, 64], |i| (i % 5) as f64 / 5.0), false);
        let label = g.leaf(Tensor::from_fn(&[1, 1, 64, 64], |i| (i % 9) as f64 / 9.0), false);
        let y = d.discriminate(&mut g, &mut binder, cand, label, true).unwrap();
        assert_eq!(g.value(y).dims(), &[1, 1, 4, 4]);
        assert!(g.value(y).data().iter().all(|&v| v > 0.0 && v < 1.0));
        // wrong input dims are rejected
        let small = g.leaf(Tensor::zeros(&[1, 1, 32, 32]), false);
        assert!(d.discriminate(&mut g, &mut binder, small, label, true).is_err());
    }

    #[test]
    fn extractor_features_are_reproducible_and_noise_sensitive() {
        let phi = FeatureExtractor::new("PHI");
        let mut store = ParamStore::<f64>::new();
        let mut init = Initializer::new(21);
        phi.init_into(&mut store, &mut init).unwrap();
        let img = Tensor::<f64>::from_fn(&[1, 1, 32, 32], |i| ((i * 13) % 29) as f64 / 29.0);
        let f1 = phi.forward_raw(&store, &img).unwrap();
        let f2 = phi.forward_raw(&store, &img).unwrap();
        assert_eq!(f1.data(), f2.data());

        let rms = |a: &Tensor<f64>, b: &Tensor<f64>| {
            (a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / a.numel() as f64)
                .sqrt()
        };
        assert_eq!(rms(&f1, &f2), 0.0);
        let mut dists = Vec::new();
        for &std in &[0.01, 0.05, 0.1] {
            let noisy = Tensor::from_fn(img.dims(), |i| {
                img.data()[i] + seeded_normal::<f64>(&[1], std, 777 + i as u64).item()
            });
            let fn_ = phi.forward_raw(&store, &noisy).unwrap();
            dists.push(rms(&f1, &fn_));
        }
        assert!(dists[0] < dists[1] && dists[1] < dists[2], "{dists:?}");
    }

    #[test]
    fn fully_convolutional_scales_to_double_size() {
        let (model, store) = store_with_g(3);
        let x = Tensor::<f64>::from_fn(&[1, 1, 128, 128], |i| (i % 19) as f64 / 19.0);
        let y = model.forward_raw(&store, &x).unwrap();
        assert_eq!(y.dims(), &[1, 1, 128, 128]);
        let f = DegradationGenerator::new("F", 0.01);
        let mut store2 = ParamStore::<f64>::new();
        let mut init = Initializer::new(5);
        f.init_into(&mut store2, &mut init).unwrap();
        let (z, latent) = f.forward_raw(&store2, &y, 3).unwrap();
        assert_eq!(z.dims(), y.dims());
        assert_eq!(latent, (32, 32));
    }
}

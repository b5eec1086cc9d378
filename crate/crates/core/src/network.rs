//! Network descriptions, the dense reference pipeline, conversion to
//! change-based execution and frame-sequence driving.
//!
//! Networks are DAGs listed in topological order: every layer names its
//! inputs, either the network input or an earlier layer. The last layer is
//! the network output. Sequential networks are the common case and can be
//! built with [`NetworkSpec::sequential`].

use std::sync::Arc;
use std::time::Instant;

use crate::calibration::LossMetric;
use crate::change::{changed_pixels, extract_indexes, ChangeMap, DetectionMode, IndexList};
use crate::error::{Error, Result};
use crate::gemm::PackedKernel;
use crate::layers::{
    CbConvLayer, CbElementwise, CbPoolLayer, DetectionPolicy, ElementwiseOp, FrameOptions, LayerFrameStats, Upstream,
};
use crate::tensor::{
    all_pixels, conv2d_dense, conv_pixels, maxpool, relu, relu_scalar, write_pixel, ConvSpec, Pixel, PoolSpec, Shape3,
    Tensor3,
};

/// Convolution hyper-parameters without the weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    /// Apply ReLU as part of the output update.
    pub fuse_relu: bool,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.patch_len()
    }

    /// Weights plus biases.
    pub fn param_len(&self) -> usize {
        self.weight_len() + self.out_channels
    }

    pub fn with_params(&self, weights: Vec<f32>, bias: Vec<f32>) -> Result<ConvSpec> {
        ConvSpec::new(
            self.in_channels,
            self.out_channels,
            self.kernel_h,
            self.kernel_w,
            self.stride,
            self.padding,
            weights,
            bias,
        )
    }

    fn zero_spec(&self) -> ConvSpec {
        ConvSpec {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel_h: self.kernel_h,
            kernel_w: self.kernel_w,
            stride: self.stride,
            padding: self.padding,
            weights: Vec::new(),
            bias: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv(ConvGeometry),
    Relu,
    MaxPool(PoolSpec),
    /// Elementwise sum of two or more inputs.
    Add,
    /// Channel concatenation of two or more inputs.
    Concat,
}

impl LayerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::Conv(_) => "conv",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool(_) => "maxpool",
            LayerKind::Add => "add",
            LayerKind::Concat => "concat",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Source {
    Input,
    Layer(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerDesc {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<Source>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub input: Shape3,
    pub layers: Vec<LayerDesc>,
}

impl NetworkSpec {
    /// A chain where every layer consumes its predecessor.
    pub fn sequential(input: Shape3, layers: Vec<(String, LayerKind)>) -> Self {
        let layers = layers
            .into_iter()
            .enumerate()
            .map(|(i, (name, kind))| LayerDesc {
                name,
                kind,
                inputs: vec![if i == 0 { Source::Input } else { Source::Layer(i - 1) }],
            })
            .collect();
        NetworkSpec { input, layers }
    }

    /// Output shape of every layer, validating the whole graph.
    pub fn shapes(&self) -> Result<Vec<Shape3>> {
        if self.layers.is_empty() {
            return Err(Error::config("network has no layers"));
        }
        let mut shapes: Vec<Shape3> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let fail = |message: String| Error::Dimension {
                index: i,
                name: layer.name.clone(),
                message,
            };
            let mut ins = Vec::with_capacity(layer.inputs.len());
            for src in &layer.inputs {
                ins.push(match *src {
                    Source::Input => self.input,
                    Source::Layer(j) if j < i => shapes[j],
                    Source::Layer(j) => {
                        return Err(fail(format!("input refers to layer {j}, which does not precede it")))
                    }
                });
            }
            let unary = matches!(layer.kind, LayerKind::Conv(_) | LayerKind::Relu | LayerKind::MaxPool(_));
            if unary && ins.len() != 1 {
                return Err(fail(format!(
                    "{} takes exactly one input, got {}",
                    layer.kind.as_str(),
                    ins.len()
                )));
            }
            if !unary && ins.len() < 2 {
                return Err(fail(format!("{} needs at least two inputs", layer.kind.as_str())));
            }
            let out = match &layer.kind {
                LayerKind::Conv(g) => g.zero_spec().output_shape(ins[0]).map_err(|e| fail(strip(e)))?,
                LayerKind::Relu => ins[0],
                LayerKind::MaxPool(p) => p.output_shape(ins[0]).map_err(|e| fail(strip(e)))?,
                LayerKind::Add => {
                    if ins.iter().any(|s| *s != ins[0]) {
                        return Err(fail("add inputs differ in shape".into()));
                    }
                    ins[0]
                }
                LayerKind::Concat => {
                    if ins.iter().any(|s| (s.height, s.width) != (ins[0].height, ins[0].width)) {
                        return Err(fail("concat inputs differ in spatial size".into()));
                    }
                    Shape3::new(ins.iter().map(|s| s.channels).sum(), ins[0].height, ins[0].width)
                }
            };
            if out.is_empty() {
                return Err(fail("empty output".into()));
            }
            shapes.push(out);
        }
        Ok(shapes)
    }

    /// Shape of the first input of layer `i`, given the output shapes.
    pub fn input_shape_of(&self, i: usize, shapes: &[Shape3]) -> Shape3 {
        match self.layers[i].inputs[0] {
            Source::Input => self.input,
            Source::Layer(j) => shapes[j],
        }
    }

    /// Indices of the convolution layers, in order.
    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.kind, LayerKind::Conv(_)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::InvalidInput(m) => m,
        other => other.to_string(),
    }
}

/// Parameters of one convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights {
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Clone, Debug)]
struct DenseConv {
    spec: Arc<ConvSpec>,
    kernel: Arc<PackedKernel>,
    fuse_relu: bool,
}

/// The full-frame pipeline; reference for every change-based run.
#[derive(Clone, Debug)]
pub struct DenseNetwork {
    spec: Arc<NetworkSpec>,
    shapes: Vec<Shape3>,
    convs: Vec<Option<DenseConv>>,
}

/// Binds weights (in convolution-layer order) to a spec.
pub fn build_network(spec: &NetworkSpec, weights: Vec<ConvWeights>) -> Result<DenseNetwork> {
    let shapes = spec.shapes()?;
    let conv_layers = spec.conv_layers();
    if weights.len() != conv_layers.len() {
        return Err(Error::config(format!(
            "network has {} convolution layers but {} weight sets were given",
            conv_layers.len(),
            weights.len()
        )));
    }
    let mut convs = vec![None; spec.layers.len()];
    for (&i, w) in conv_layers.iter().zip(weights) {
        let LayerKind::Conv(g) = &spec.layers[i].kind else {
            unreachable!()
        };
        let conv = g.with_params(w.weights, w.bias).map_err(|e| Error::Dimension {
            index: i,
            name: spec.layers[i].name.clone(),
            message: strip(e),
        })?;
        convs[i] = Some(DenseConv {
            kernel: Arc::new(PackedKernel::new(&conv.kernel_matrix())),
            spec: Arc::new(conv),
            fuse_relu: g.fuse_relu,
        });
    }
    Ok(DenseNetwork {
        spec: Arc::new(spec.clone()),
        shapes,
        convs,
    })
}

impl DenseNetwork {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn output_shapes(&self) -> &[Shape3] {
        &self.shapes
    }

    pub fn output_shape(&self) -> Shape3 {
        *self.shapes.last().expect("validated non-empty")
    }

    /// Convolution parameters of layer `i`, if it is a convolution.
    pub fn conv(&self, i: usize) -> Option<&ConvSpec> {
        self.convs[i].as_ref().map(|c| &*c.spec)
    }

    /// All convolution parameters in layer order.
    pub fn conv_weights(&self) -> Vec<ConvWeights> {
        self.convs
            .iter()
            .flatten()
            .map(|c| ConvWeights {
                weights: c.spec.weights.clone(),
                bias: c.spec.bias.clone(),
            })
            .collect()
    }

    fn check_frame(&self, x: &Tensor3) -> Result<()> {
        if x.shape() != self.spec.input {
            return Err(Error::invalid(format!(
                "network expects input {}, got {}",
                self.spec.input,
                x.shape()
            )));
        }
        Ok(())
    }

    fn run(&self, x: &Tensor3, direct: bool) -> Result<Vec<Tensor3>> {
        self.check_frame(x)?;
        let mut outs: Vec<Tensor3> = Vec::with_capacity(self.spec.layers.len());
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let ins: Vec<&Tensor3> = layer
                .inputs
                .iter()
                .map(|s| match *s {
                    Source::Input => x,
                    Source::Layer(j) => &outs[j],
                })
                .collect();
            let y = match &layer.kind {
                LayerKind::Conv(_) => {
                    let c = self.convs[i].as_ref().expect("conv bound at build");
                    if direct {
                        let y = conv2d_dense(ins[0], &c.spec)?;
                        if c.fuse_relu {
                            relu(&y)
                        } else {
                            y
                        }
                    } else {
                        let mut y = Tensor3::zeros(self.shapes[i]);
                        let pixels: Vec<Pixel> = all_pixels(self.shapes[i].height, self.shapes[i].width).collect();
                        conv_pixels(ins[0], &c.spec, &c.kernel, &pixels, |px, vals| {
                            write_pixel(&mut y, px, vals, &c.spec.bias, c.fuse_relu)
                        });
                        y
                    }
                }
                LayerKind::Relu => relu(ins[0]),
                LayerKind::MaxPool(p) => maxpool(ins[0], p)?,
                LayerKind::Add => {
                    let mut y = Tensor3::zeros(self.shapes[i]);
                    for (k, v) in y.data_mut().iter_mut().enumerate() {
                        *v = ins.iter().fold(0.0, |acc, t| acc + t.data()[k]);
                    }
                    y
                }
                LayerKind::Concat => {
                    let data = ins.iter().flat_map(|t| t.data().iter().copied()).collect();
                    Tensor3::from_vec(self.shapes[i], data)?
                }
            };
            outs.push(y);
        }
        Ok(outs)
    }

    /// Output of every layer, through im2col + GEMM.
    pub fn forward_all(&self, x: &Tensor3) -> Result<Vec<Tensor3>> {
        self.run(x, false)
    }

    pub fn forward(&self, x: &Tensor3) -> Result<Tensor3> {
        Ok(self.run(x, false)?.pop().expect("non-empty"))
    }

    /// Same as [`forward`](Self::forward) but through the direct convolution
    /// loop.
    pub fn forward_direct(&self, x: &Tensor3) -> Result<Tensor3> {
        Ok(self.run(x, true)?.pop().expect("non-empty"))
    }
}

/// Inference-time batch normalisation parameters, one entry per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

impl BatchNorm {
    fn channels(&self) -> Result<usize> {
        let n = self.gamma.len();
        if self.beta.len() != n || self.mean.len() != n || self.var.len() != n {
            return Err(Error::invalid("batch-norm parameter vectors differ in length"));
        }
        Ok(n)
    }

    fn scale(&self, c: usize) -> f32 {
        self.gamma[c] / (self.var[c] + self.eps).sqrt()
    }

    /// `γ (x − μ) / √(σ² + ε) + β` per channel.
    pub fn apply(&self, x: &Tensor3) -> Result<Tensor3> {
        if self.channels()? != x.channels() {
            return Err(Error::invalid("batch-norm channel count does not match input"));
        }
        let n = x.shape().pixels();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                let c = k / n;
                (v - self.mean[c]) / (self.var[c] + self.eps).sqrt() * self.gamma[c] + self.beta[c]
            })
            .collect();
        Tensor3::from_vec(x.shape(), data)
    }
}

/// Absorbs a following batch normalisation into the convolution:
/// `w' = w·s`, `b' = (b − μ)·s + β` with `s = γ / √(σ² + ε)`.
pub fn fold_batchnorm(conv: &ConvSpec, bn: &BatchNorm) -> Result<ConvSpec> {
    if bn.channels()? != conv.out_channels {
        return Err(Error::invalid(format!(
            "batch norm has {} channels, convolution produces {}",
            bn.gamma.len(),
            conv.out_channels
        )));
    }
    let mut folded = conv.clone();
    let row = conv.patch_len();
    for o in 0..conv.out_channels {
        let s = bn.scale(o);
        for w in &mut folded.weights[o * row..(o + 1) * row] {
            *w *= s;
        }
        folded.bias[o] = (conv.bias[o] - bn.mean[o]) * s + bn.beta[o];
    }
    folded.validate()?;
    Ok(folded)
}

/// One executing layer of a change-based network.
#[derive(Clone, Debug)]
pub enum CbNode {
    Conv(CbConvLayer),
    Pool(CbPoolLayer),
    Elementwise(CbElementwise),
}

impl CbNode {
    pub fn output(&self) -> &Tensor3 {
        match self {
            CbNode::Conv(l) => l.output(),
            CbNode::Pool(l) => l.output(),
            CbNode::Elementwise(l) => l.output(),
        }
    }

    pub fn change_map(&self) -> &ChangeMap {
        match self {
            CbNode::Conv(l) => l.change_map(),
            CbNode::Pool(l) => l.change_map(),
            CbNode::Elementwise(l) => l.change_map(),
        }
    }

    pub fn indexes(&self) -> &IndexList {
        match self {
            CbNode::Conv(l) => l.indexes(),
            CbNode::Pool(l) => l.indexes(),
            CbNode::Elementwise(l) => l.indexes(),
        }
    }

    pub fn as_conv(&self) -> Option<&CbConvLayer> {
        match self {
            CbNode::Conv(l) => Some(l),
            _ => None,
        }
    }

    fn reset(&mut self) {
        match self {
            CbNode::Conv(l) => l.reset(),
            CbNode::Pool(l) => l.reset(),
            CbNode::Elementwise(l) => l.reset(),
        }
    }
}

/// Instrumentation switches for change-based runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Record the worst-case propagated map next to every detected one.
    pub track_propagation: bool,
    /// Record fine-grained operation estimates.
    pub estimate_fg: bool,
    /// Record wall-clock time per layer and frame (otherwise 0).
    pub timing: bool,
}

/// Exact frame-to-frame differences of the network input, used as the input
/// node's change map.
#[derive(Clone, Debug)]
struct InputTracker {
    prev: Tensor3,
    map: ChangeMap,
    indexes: IndexList,
}

/// Change-based network with per-stream state. Weights are shared between
/// clones.
#[derive(Clone, Debug)]
pub struct CbNetwork {
    spec: Arc<NetworkSpec>,
    shapes: Vec<Shape3>,
    nodes: Vec<CbNode>,
    conv_layers: Vec<usize>,
    options: RunOptions,
    bootstrapped: bool,
    tracker: Option<InputTracker>,
}

/// Converts every layer to its change-based form. `thresholds` and
/// `policies` are given per convolution layer, in order; an empty `policies`
/// means detect everywhere.
pub fn convert_to_cb(net: &DenseNetwork, thresholds: &[f32], policies: &[DetectionPolicy]) -> Result<CbNetwork> {
    let spec = &net.spec;
    let conv_layers = spec.conv_layers();
    if thresholds.len() != conv_layers.len() {
        return Err(Error::config(format!(
            "{} thresholds for {} convolution layers",
            thresholds.len(),
            conv_layers.len()
        )));
    }
    if !policies.is_empty() && policies.len() != conv_layers.len() {
        return Err(Error::config(format!(
            "{} policies for {} convolution layers",
            policies.len(),
            conv_layers.len()
        )));
    }
    let mut nodes = Vec::with_capacity(spec.layers.len());
    let mut ordinal = 0;
    for (i, layer) in spec.layers.iter().enumerate() {
        let in_shape = spec.input_shape_of(i, &net.shapes);
        let ctx = |e: Error| match e {
            Error::Config(m) | Error::InvalidInput(m) => Error::Config(format!("layer {i} ({}): {m}", layer.name)),
            other => other,
        };
        let node = match &layer.kind {
            LayerKind::Conv(g) => {
                let policy = policies.get(ordinal).copied().unwrap_or_default();
                if policy != DetectionPolicy::Detect && layer.inputs[0] == Source::Input {
                    return Err(ctx(Error::config(format!(
                        "policy '{}' needs an upstream change-based layer",
                        policy.as_str()
                    ))));
                }
                let c = net.convs[i].as_ref().expect("conv bound at build");
                let l = CbConvLayer::with_shared(
                    c.spec.clone(),
                    c.kernel.clone(),
                    in_shape,
                    thresholds[ordinal],
                    g.fuse_relu,
                    policy,
                )
                .map_err(ctx)?;
                ordinal += 1;
                CbNode::Conv(l)
            }
            LayerKind::MaxPool(p) => CbNode::Pool(CbPoolLayer::new(*p, in_shape).map_err(ctx)?),
            LayerKind::Relu => CbNode::Elementwise(CbElementwise::new(ElementwiseOp::Relu, net.shapes[i])),
            LayerKind::Add => CbNode::Elementwise(CbElementwise::new(ElementwiseOp::Add, net.shapes[i])),
            LayerKind::Concat => CbNode::Elementwise(CbElementwise::new(ElementwiseOp::Concat, net.shapes[i])),
        };
        nodes.push(node);
    }
    let mut cb = CbNetwork {
        spec: net.spec.clone(),
        shapes: net.shapes.clone(),
        nodes,
        conv_layers,
        options: RunOptions::default(),
        bootstrapped: false,
        tracker: None,
    };
    cb.sync_tracker();
    Ok(cb)
}

/// Per-frame, per-layer record of a change-based run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunStats {
    pub layer_names: Vec<String>,
    pub frames: Vec<FrameRecord>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameRecord {
    pub layers: Vec<LayerFrameStats>,
    /// Loss against the supplied reference output, if any.
    pub loss: Option<f64>,
    pub wall_ns: u64,
}

impl FrameRecord {
    pub fn eff_ops(&self) -> u64 {
        self.layers.iter().map(|l| l.eff_ops).sum()
    }
}

impl RunStats {
    /// Effective convolution operations summed over frames `range`.
    pub fn total_eff_ops(&self, range: std::ops::Range<usize>) -> u64 {
        self.frames
            .get(range.start.min(self.frames.len())..range.end.min(self.frames.len()))
            .unwrap_or(&[])
            .iter()
            .map(FrameRecord::eff_ops)
            .sum()
    }

    pub fn losses(&self) -> Vec<Option<f64>> {
        self.frames.iter().map(|f| f.loss).collect()
    }
}

/// Reference outputs, one per frame, and the metric to score against them.
#[derive(Clone, Copy, Debug)]
pub struct Reference<'a> {
    pub outputs: &'a [Tensor3],
    pub metric: LossMetric,
}

impl CbNetwork {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Output shape of every layer.
    pub fn output_shapes(&self) -> &[Shape3] {
        &self.shapes
    }

    pub fn nodes(&self) -> &[CbNode] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &CbNode {
        &self.nodes[i]
    }

    /// Indices of the convolution layers, in order.
    pub fn conv_layers(&self) -> &[usize] {
        &self.conv_layers
    }

    pub fn output(&self) -> &Tensor3 {
        self.nodes.last().expect("non-empty").output()
    }

    pub fn options(&self) -> RunOptions {
        self.options
    }

    pub fn set_options(&mut self, options: RunOptions) {
        self.options = options;
        self.sync_tracker();
    }

    pub fn thresholds(&self) -> Vec<f32> {
        self.conv_layers
            .iter()
            .map(|&i| self.nodes[i].as_conv().expect("conv").threshold())
            .collect()
    }

    pub fn set_thresholds(&mut self, thresholds: &[f32]) -> Result<()> {
        if thresholds.len() != self.conv_layers.len() {
            return Err(Error::config(format!(
                "{} thresholds for {} convolution layers",
                thresholds.len(),
                self.conv_layers.len()
            )));
        }
        for (&i, &t) in self.conv_layers.iter().zip(thresholds) {
            if let CbNode::Conv(l) = &mut self.nodes[i] {
                l.set_threshold(t)?;
            }
        }
        Ok(())
    }

    pub fn set_mode(&mut self, mode: DetectionMode) {
        for node in &mut self.nodes {
            if let CbNode::Conv(l) = node {
                l.set_mode(mode);
            }
        }
    }

    /// Zeroes all state; the next frame is a full update.
    pub fn reset_state(&mut self) {
        for node in &mut self.nodes {
            node.reset();
        }
        self.bootstrapped = false;
        self.sync_tracker();
    }

    fn needs_input_map(&self) -> bool {
        self.spec.layers.iter().any(|l| {
            l.inputs.contains(&Source::Input)
                && (self.options.track_propagation || !matches!(l.kind, LayerKind::Conv(_)))
        })
    }

    fn sync_tracker(&mut self) {
        if self.needs_input_map() {
            let s = self.spec.input;
            self.tracker.get_or_insert_with(|| InputTracker {
                prev: Tensor3::zeros(s),
                map: ChangeMap::empty(s.height, s.width),
                indexes: IndexList::default(),
            });
            if !self.bootstrapped {
                if let Some(t) = &mut self.tracker {
                    t.prev.data_mut().fill(0.0);
                }
            }
        } else {
            self.tracker = None;
        }
    }

    /// Processes one frame and returns the per-layer statistics.
    pub fn forward_frame(&mut self, x: &Tensor3) -> Result<Vec<LayerFrameStats>> {
        if x.shape() != self.spec.input {
            return Err(Error::invalid(format!(
                "network expects input {}, got {}",
                self.spec.input,
                x.shape()
            )));
        }
        let opts = FrameOptions {
            force_full: !self.bootstrapped,
            track_propagation: self.options.track_propagation,
            estimate_fg: self.options.estimate_fg,
            timing: self.options.timing,
        };
        if let Some(t) = &mut self.tracker {
            t.map = if opts.force_full {
                ChangeMap::full(x.height(), x.width())
            } else {
                changed_pixels(x, &t.prev, 0.0)
            };
            t.indexes = extract_indexes(&t.map);
            t.prev.data_mut().copy_from_slice(x.data());
        }
        let mut stats = Vec::with_capacity(self.nodes.len());
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let (done, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let inputs: Vec<&Tensor3> = layer
                .inputs
                .iter()
                .map(|s| match *s {
                    Source::Input => x,
                    Source::Layer(j) => done[j].output(),
                })
                .collect();
            let upstream: Vec<Upstream<'_>> = layer
                .inputs
                .iter()
                .filter_map(|s| match *s {
                    Source::Input => self.tracker.as_ref().map(|t| Upstream {
                        map: &t.map,
                        indexes: &t.indexes,
                    }),
                    Source::Layer(j) => Some(Upstream {
                        map: done[j].change_map(),
                        indexes: done[j].indexes(),
                    }),
                })
                .collect();
            let s = match node {
                CbNode::Conv(l) => l.forward(inputs[0], upstream.first().copied(), &opts),
                CbNode::Pool(l) => l.forward(inputs[0], upstream.first().copied(), &opts),
                CbNode::Elementwise(l) => l.forward(&inputs, &upstream, &opts),
            }
            .map_err(|e| match e {
                Error::InvalidInput(m) | Error::Config(m) => Error::Dimension {
                    index: i,
                    name: layer.name.clone(),
                    message: m,
                },
                other => other,
            })?;
            stats.push(s);
        }
        self.bootstrapped = true;
        Ok(stats)
    }

    /// Runs `frames` in order, carrying state, and returns every output.
    pub fn forward_sequence(
        &mut self,
        frames: &[Tensor3],
        reference: Option<Reference<'_>>,
    ) -> Result<(Vec<Tensor3>, RunStats)> {
        let mut outputs = Vec::with_capacity(frames.len());
        let stats = self.drive(frames, reference, |out| outputs.push(out.clone()))?;
        Ok((outputs, stats))
    }

    /// Like [`forward_sequence`](Self::forward_sequence) without keeping the
    /// outputs.
    pub fn run_sequence(&mut self, frames: &[Tensor3], reference: Option<Reference<'_>>) -> Result<RunStats> {
        self.drive(frames, reference, |_| {})
    }

    fn drive<F: FnMut(&Tensor3)>(
        &mut self,
        frames: &[Tensor3],
        reference: Option<Reference<'_>>,
        mut sink: F,
    ) -> Result<RunStats> {
        if let Some(r) = &reference {
            if r.outputs.len() != frames.len() {
                return Err(Error::invalid(format!(
                    "{} reference outputs for {} frames",
                    r.outputs.len(),
                    frames.len()
                )));
            }
        }
        let mut stats = RunStats {
            layer_names: self.spec.layers.iter().map(|l| l.name.clone()).collect(),
            frames: Vec::with_capacity(frames.len()),
        };
        for (f, x) in frames.iter().enumerate() {
            if x.shape() != self.spec.input {
                return Err(Error::invalid(format!(
                    "frame {f}: expected {}, got {}",
                    self.spec.input,
                    x.shape()
                )));
            }
            let start = self.options.timing.then(Instant::now);
            let layers = self.forward_frame(x)?;
            let wall_ns = start.map_or(0, |t| t.elapsed().as_nanos() as u64);
            let loss = match &reference {
                Some(r) => Some(r.metric.loss(self.output(), &r.outputs[f])?),
                None => None,
            };
            sink(self.output());
            stats.frames.push(FrameRecord { layers, loss, wall_ns });
        }
        Ok(stats)
    }

    /// Dense convolution of each layer's input state, with the layer's fused
    /// activation: what every `prev_output` must equal in closed-loop mode.
    pub fn closed_loop_outputs(&self) -> Result<Vec<(usize, Tensor3, Tensor3)>> {
        self.conv_layers
            .iter()
            .map(|&i| {
                let l = self.nodes[i].as_conv().expect("conv");
                let mut y = conv2d_dense(l.state().tensor(), l.spec())?;
                if l.fuse_relu() {
                    y.data_mut().iter_mut().for_each(|v| *v = relu_scalar(*v));
                }
                Ok((i, y, l.output().clone()))
            })
            .collect()
    }
}

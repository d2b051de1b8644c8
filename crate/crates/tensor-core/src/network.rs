//! Networks as flat layer DAGs with forward/backward execution.
//!
//! Design notes:
//!
//! * Node order is a topological order: a node may only read the network
//!   input or outputs of earlier nodes. Validation happens once, at
//!   construction; execution assumes a valid graph.
//! * `forward` returns a [`Trace`] owning every intermediate activation;
//!   `backward` consumes the trace and assigns parameter gradients. Traces
//!   are stamped with the network's parameter `version`, so replaying a
//!   trace after any parameter mutation is a structured error — including
//!   the degenerate "backward before forward" case.
//! * The version counter covers trainable parameters only. Batch-norm
//!   running statistics update during training forwards but never feed the
//!   training-mode backward pass, so they do not invalidate traces.
//! * Spatial activations are stored channel-major (`[C][N][H][W]`);
//!   flattened activations are `[N][F]`. The public input/logits tensors use
//!   the conventional `[N, C, H, W]` / `[N, F]` shapes.

use crate::error::{EngineError, Result};
use crate::kernels::{self, BnSaved, ConvDims, Workspace};
use crate::layer::{IoShape, LayerKind, Node, ParamName, Src};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Whether batch statistics (Train) or running statistics (Eval) drive
/// normalization layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One intermediate activation buffer in execution layout; the shape lives
/// on the network (`shapes`), keyed by node index.
#[derive(Debug, Clone)]
pub(crate) struct Act<T: Scalar>(Vec<T>);

impl<T: Scalar> Act<T> {
    pub(crate) fn buf(&self) -> &[T] {
        &self.0
    }
}

/// Per-node auxiliary forward state needed by backward.
#[derive(Debug, Clone)]
pub(crate) enum Aux<T: Scalar> {
    None,
    Bn(BnSaved<T>),
    Pool(Vec<u32>),
}

/// Everything produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T: Scalar> {
    version: u64,
    mode: Mode,
    n: usize,
    labels: Vec<usize>,
    input: Vec<T>,
    acts: Vec<Act<T>>,
    aux: Vec<Aux<T>>,
    loss: f64,
    logits: Tensor<T>,
}

impl<T: Scalar> Trace<T> {
    /// Mean cross-entropy over the batch.
    pub fn loss(&self) -> f64 {
        self.loss
    }

    /// Pre-softmax outputs, shape `[N, num_classes]`.
    pub fn logits(&self) -> &Tensor<T> {
        &self.logits
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn batch_size(&self) -> usize {
        self.n
    }

    /// Argmax class per sample; ties resolve to the lower index.
    pub fn predictions(&self) -> Vec<usize> {
        let classes = self.logits.shape()[1];
        let data = self.logits.data();
        (0..self.n)
            .map(|s| {
                let row = &data[s * classes..][..classes];
                let mut best = 0;
                for (c, v) in row.iter().enumerate().skip(1) {
                    if *v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

/// A validated feed-forward network.
#[derive(Debug, Clone)]
pub struct Network<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    input_shape: (usize, usize, usize),
    num_classes: usize,
    shapes: Vec<IoShape>,
    version: u64,
    steps: u64,
    ws: Workspace<T>,
}

// ======================================================================
// Construction and validation
// ======================================================================

/// Parameter tensors (names and shapes) a layer kind requires given its
/// input shape. Single source of truth for builders and validation.
pub fn param_template(kind: &LayerKind, input: &IoShape) -> Result<Vec<(ParamName, Vec<usize>)>> {
    use ParamName::*;
    match kind {
        LayerKind::Conv2d { out_channels, kernel, bias, .. } => {
            let IoShape::Spatial { c, .. } = input else {
                return Err(EngineError::InvalidArg("conv2d expects a spatial input".into()));
            };
            let mut v = vec![(Weight, vec![*out_channels, *c, *kernel, *kernel])];
            if *bias {
                v.push((Bias, vec![*out_channels]));
            }
            Ok(v)
        }
        LayerKind::BatchNorm { .. } => {
            let IoShape::Spatial { c, .. } = input else {
                return Err(EngineError::InvalidArg("batch norm expects a spatial input".into()));
            };
            Ok(vec![
                (Gamma, vec![*c]),
                (Beta, vec![*c]),
                (RunningMean, vec![*c]),
                (RunningVar, vec![*c]),
            ])
        }
        LayerKind::Dense { out_features, bias } => {
            let IoShape::Flat { f } = input else {
                return Err(EngineError::InvalidArg("dense expects a flat input".into()));
            };
            let mut v = vec![(Weight, vec![*out_features, *f])];
            if *bias {
                v.push((Bias, vec![*out_features]));
            }
            Ok(v)
        }
        _ => Ok(vec![]),
    }
}

/// Output shape of a layer kind applied to the given input shape(s).
fn infer_one(kind: &LayerKind, inputs: &[IoShape], num_classes: usize) -> Result<IoShape> {
    let one = |by: &str| -> Result<IoShape> {
        if inputs.len() != 1 {
            return Err(EngineError::InvalidArg(format!("{by} takes exactly one input")));
        }
        Ok(inputs[0])
    };
    match kind {
        LayerKind::Conv2d { out_channels, kernel, stride, padding, .. } => {
            let IoShape::Spatial { h, w, .. } = one("conv2d")? else {
                return Err(EngineError::InvalidArg("conv2d expects a spatial input".into()));
            };
            if *kernel == 0 || *stride == 0 || *out_channels == 0 {
                return Err(EngineError::InvalidArg("conv2d hyperparameters must be positive".into()));
            }
            let he = h + 2 * padding;
            let we = w + 2 * padding;
            if he < *kernel || we < *kernel {
                return Err(EngineError::InvalidArg(format!(
                    "conv2d kernel {kernel} exceeds padded input {he}x{we}"
                )));
            }
            Ok(IoShape::Spatial {
                c: *out_channels,
                h: (he - kernel) / stride + 1,
                w: (we - kernel) / stride + 1,
            })
        }
        LayerKind::BatchNorm { eps, momentum } => {
            if *eps <= 0.0 || !(0.0..=1.0).contains(momentum) {
                return Err(EngineError::InvalidArg("batch norm eps/momentum out of range".into()));
            }
            match one("batch norm")? {
                s @ IoShape::Spatial { .. } => Ok(s),
                _ => Err(EngineError::InvalidArg("batch norm expects a spatial input".into())),
            }
        }
        LayerKind::Dense { out_features, .. } => {
            let IoShape::Flat { .. } = one("dense")? else {
                return Err(EngineError::InvalidArg("dense expects a flat input".into()));
            };
            if *out_features == 0 {
                return Err(EngineError::InvalidArg("dense out_features must be positive".into()));
            }
            Ok(IoShape::Flat { f: *out_features })
        }
        LayerKind::Relu => match one("relu")? {
            IoShape::Scalar => Err(EngineError::InvalidArg("relu cannot follow the loss".into())),
            s => Ok(s),
        },
        LayerKind::MaxPool { kernel, stride } | LayerKind::AvgPool { kernel, stride } => {
            let IoShape::Spatial { c, h, w } = one("pool")? else {
                return Err(EngineError::InvalidArg("pooling expects a spatial input".into()));
            };
            if *kernel == 0 || *stride == 0 || *kernel > h || *kernel > w {
                return Err(EngineError::InvalidArg(format!(
                    "pool kernel {kernel} invalid for {h}x{w} input"
                )));
            }
            Ok(IoShape::Spatial { c, h: (h - kernel) / stride + 1, w: (w - kernel) / stride + 1 })
        }
        LayerKind::Flatten => {
            let IoShape::Spatial { c, h, w } = one("flatten")? else {
                return Err(EngineError::InvalidArg("flatten expects a spatial input".into()));
            };
            Ok(IoShape::Flat { f: c * h * w })
        }
        LayerKind::ResidualAdd => {
            if inputs.len() != 2 {
                return Err(EngineError::InvalidArg("residual add takes exactly two inputs".into()));
            }
            if inputs[0] != inputs[1] {
                return Err(EngineError::InvalidArg(format!(
                    "residual add inputs disagree: {:?} vs {:?}",
                    inputs[0], inputs[1]
                )));
            }
            match inputs[0] {
                s @ IoShape::Spatial { .. } => Ok(s),
                _ => Err(EngineError::InvalidArg("residual add expects spatial inputs".into())),
            }
        }
        LayerKind::SoftmaxCrossEntropy => {
            let IoShape::Flat { f } = one("softmax cross-entropy")? else {
                return Err(EngineError::InvalidArg("loss expects flat logits".into()));
            };
            if f != num_classes {
                return Err(EngineError::InvalidArg(format!(
                    "loss expects {num_classes} logit features, got {f}"
                )));
            }
            Ok(IoShape::Scalar)
        }
    }
}

fn layer_name<T: Scalar>(i: usize, node: &Node<T>) -> String {
    format!("node {i} ({})", node.kind.tag())
}

fn infer_shapes<T: Scalar>(
    nodes: &[Node<T>],
    input_shape: (usize, usize, usize),
    num_classes: usize,
) -> Result<Vec<IoShape>> {
    if nodes.is_empty() {
        return Err(EngineError::Graph("network has no nodes".into()));
    }
    let (c, h, w) = input_shape;
    if c == 0 || h == 0 || w == 0 || num_classes == 0 {
        return Err(EngineError::InvalidArg("input shape and class count must be positive".into()));
    }
    let input_io = IoShape::Spatial { c, h, w };
    let mut shapes: Vec<IoShape> = Vec::with_capacity(nodes.len());
    let mut consumed = vec![false; nodes.len()];
    for (i, node) in nodes.iter().enumerate() {
        let mut in_shapes = Vec::with_capacity(node.inputs.len());
        for src in &node.inputs {
            match *src {
                Src::Input => in_shapes.push(input_io),
                Src::Node(j) => {
                    if j >= i {
                        return Err(EngineError::Graph(format!(
                            "{} reads node {j}, which is not earlier in the graph",
                            layer_name(i, node)
                        )));
                    }
                    consumed[j] = true;
                    in_shapes.push(shapes[j]);
                }
            }
        }
        let out = infer_one(&node.kind, &in_shapes, num_classes).map_err(|e| match e {
            EngineError::InvalidArg(detail) => {
                EngineError::ShapeMismatch { layer: layer_name(i, node), detail }
            }
            other => other,
        })?;
        // Parameter tensors must match the template exactly.
        let template = param_template(&node.kind, &in_shapes[0]).map_err(|e| match e {
            EngineError::InvalidArg(detail) => {
                EngineError::ShapeMismatch { layer: layer_name(i, node), detail }
            }
            other => other,
        })?;
        if node.params.len() != template.len()
            || node
                .params
                .iter()
                .zip(&template)
                .any(|((name, t), (tn, ts))| name != tn || t.shape() != &ts[..])
        {
            return Err(EngineError::ShapeMismatch {
                layer: layer_name(i, node),
                detail: format!(
                    "parameters {:?} do not match required {:?}",
                    node.params.iter().map(|(n, t)| (*n, t.shape().to_vec())).collect::<Vec<_>>(),
                    template
                ),
            });
        }
        let is_loss = matches!(node.kind, LayerKind::SoftmaxCrossEntropy);
        if is_loss && i != nodes.len() - 1 {
            return Err(EngineError::Graph("loss must be the final node".into()));
        }
        shapes.push(out);
    }
    if !matches!(nodes.last().unwrap().kind, LayerKind::SoftmaxCrossEntropy) {
        return Err(EngineError::Graph("network must end in softmax cross-entropy".into()));
    }
    for (j, used) in consumed.iter().enumerate().take(nodes.len() - 1) {
        if !used {
            return Err(EngineError::Graph(format!(
                "{} is never consumed",
                layer_name(j, &nodes[j])
            )));
        }
    }
    Ok(shapes)
}

fn nchw_to_cmaj<T: Scalar>(src: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let plane = h * w;
    let mut dst = vec![T::ZERO; src.len()];
    for img in 0..n {
        for ch in 0..c {
            dst[(ch * n + img) * plane..][..plane]
                .copy_from_slice(&src[(img * c + ch) * plane..][..plane]);
        }
    }
    dst
}

fn add_grad<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        None => *slot = Some(g),
        Some(d) => {
            for (a, b) in d.iter_mut().zip(&g) {
                *a += *b;
            }
        }
    }
}

// ======================================================================
// Network
// ======================================================================

impl<T: Scalar> Network<T> {
    /// Validates the graph and fixes the execution shapes.
    pub fn new(
        nodes: Vec<Node<T>>,
        input_shape: (usize, usize, usize),
        num_classes: usize,
    ) -> Result<Self> {
        let shapes = infer_shapes(&nodes, input_shape, num_classes)?;
        Ok(Network {
            nodes,
            input_shape,
            num_classes,
            shapes,
            version: 0,
            steps: 0,
            ws: Workspace::default(),
        })
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &Node<T> {
        &self.nodes[i]
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Output shape of node `i`.
    pub fn shape_of(&self, i: usize) -> IoShape {
        self.shapes[i]
    }

    fn shape_of_src(&self, src: Src) -> IoShape {
        match src {
            Src::Input => {
                let (c, h, w) = self.input_shape;
                IoShape::Spatial { c, h, w }
            }
            Src::Node(j) => self.shapes[j],
        }
    }

    /// Trainable-parameter mutation counter; traces are valid only while it
    /// is unchanged.
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Optimizer steps taken since the last initialization.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Restores the step counter (checkpoint resume hook).
    pub fn set_steps(&mut self, steps: u64) {
        self.steps = steps;
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    pub(crate) fn note_step(&mut self) {
        self.steps += 1;
    }

    pub(crate) fn reset_steps(&mut self) {
        self.steps = 0;
    }

    pub(crate) fn nodes_internal_mut(&mut self) -> &mut [Node<T>] {
        &mut self.nodes
    }

    pub fn param(&self, node: usize, name: ParamName) -> Option<&Tensor<T>> {
        self.nodes.get(node).and_then(|n| n.param(name))
    }

    /// Mutable parameter access. Counts as a parameter mutation and
    /// invalidates outstanding traces.
    pub fn param_mut(&mut self, node: usize, name: ParamName) -> Option<&mut Tensor<T>> {
        self.version += 1;
        self.nodes.get_mut(node).and_then(|n| n.param_mut(name))
    }

    /// Visits every parameter in canonical order (node index, then the
    /// node's parameter order).
    pub fn for_each_param(&self, mut f: impl FnMut(usize, ParamName, &Tensor<T>)) {
        for (i, node) in self.nodes.iter().enumerate() {
            for (name, t) in &node.params {
                f(i, *name, t);
            }
        }
    }

    /// Mutable variant of [`Network::for_each_param`]. Counts as a parameter
    /// mutation and invalidates outstanding traces.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(usize, ParamName, &mut Tensor<T>)) {
        self.version += 1;
        for (i, node) in self.nodes.iter_mut().enumerate() {
            for (name, t) in &mut node.params {
                f(i, *name, t);
            }
        }
    }

    /// Drops all gradient buffers.
    pub fn clear_grads(&mut self) {
        for node in &mut self.nodes {
            for (_, t) in &mut node.params {
                t.clear_grad();
            }
        }
    }

    /// Deep-converts the network to another element type. The copy starts at
    /// version 0 with no gradients.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            nodes: self
                .nodes
                .iter()
                .map(|n| Node {
                    kind: n.kind.clone(),
                    inputs: n.inputs.clone(),
                    params: n
                        .params
                        .iter()
                        .map(|(name, t)| {
                            let mut c: Tensor<U> = t.cast();
                            c.clear_grad();
                            (*name, c)
                        })
                        .collect(),
                })
                .collect(),
            input_shape: self.input_shape,
            num_classes: self.num_classes,
            shapes: self.shapes.clone(),
            version: 0,
            steps: self.steps,
            ws: Workspace::default(),
        }
    }

    // ------------------------------------------------------------------
    // Forward
    // ------------------------------------------------------------------

    /// Runs the network on a `[N, C, H, W]` batch, returning the trace.
    pub fn forward(&mut self, images: &Tensor<T>, labels: &[usize], mode: Mode) -> Result<Trace<T>> {
        let sh = images.shape();
        if sh.len() != 4 {
            return Err(EngineError::ShapeMismatch {
                layer: "input".into(),
                detail: format!("expected a [N, C, H, W] batch, got shape {sh:?}"),
            });
        }
        let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        if (c, h, w) != self.input_shape {
            return Err(EngineError::ShapeMismatch {
                layer: "input".into(),
                detail: format!("batch is {c}x{h}x{w}, network expects {:?}", self.input_shape),
            });
        }
        if n == 0 {
            return Err(EngineError::InvalidArg("batch is empty".into()));
        }
        if labels.len() != n {
            return Err(EngineError::InvalidArg(format!(
                "{} labels for a batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(EngineError::InvalidArg(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }

        let input = nchw_to_cmaj(images.data(), n, c, h, w);
        let count = self.nodes.len();
        let mut acts: Vec<Act<T>> = Vec::with_capacity(count);
        let mut aux: Vec<Aux<T>> = Vec::with_capacity(count);
        let mut loss = 0.0f64;
        let mut logits: Option<Tensor<T>> = None;

        for i in 0..count {
            let srcs = self.nodes[i].inputs.clone();
            let in_shape = self.shape_of_src(srcs[0]);
            let out_shape = self.shapes[i];
            let x: &[T] = match srcs[0] {
                Src::Input => &input,
                Src::Node(j) => acts[j].buf(),
            };
            let kind = self.nodes[i].kind.clone();
            let (act, ax) = match kind {
                LayerKind::Conv2d { out_channels, kernel, stride, padding, bias } => {
                    let IoShape::Spatial { c: pc, h: ph, w: pw } = in_shape else { unreachable!() };
                    let IoShape::Spatial { c: oc, h: oh, w: ow } = out_shape else { unreachable!() };
                    debug_assert_eq!(oc, out_channels);
                    let dims = ConvDims {
                        c_in: pc,
                        n,
                        h: ph,
                        w: pw,
                        c_out: oc,
                        kernel,
                        stride,
                        padding,
                        h_out: oh,
                        w_out: ow,
                    };
                    let mut y = vec![T::ZERO; oc * n * oh * ow];
                    let node = &self.nodes[i];
                    let weight = node.param(ParamName::Weight).unwrap().data();
                    let b = if bias { node.param(ParamName::Bias).map(|t| t.data()) } else { None };
                    kernels::conv2d_forward(x, weight, b, &dims, &mut y, &mut self.ws);
                    (Act(y), Aux::None)
                }
                LayerKind::BatchNorm { eps, momentum } => {
                    let IoShape::Spatial { c: pc, h: ph, w: pw } = in_shape else { unreachable!() };
                    let per = n * ph * pw;
                    let mut y = vec![T::ZERO; pc * per];
                    let node = &mut self.nodes[i];
                    debug_assert!(node.params[0].0 == ParamName::Gamma
                        && node.params[1].0 == ParamName::Beta
                        && node.params[2].0 == ParamName::RunningMean
                        && node.params[3].0 == ParamName::RunningVar);
                    let (affine, running) = node.params.split_at_mut(2);
                    let gamma = affine[0].1.data();
                    let beta = affine[1].1.data();
                    let (rm_s, rv_s) = running.split_at_mut(1);
                    match mode {
                        Mode::Train => {
                            let mut saved = BnSaved::default();
                            kernels::batchnorm_forward_train(
                                x,
                                pc,
                                per,
                                gamma,
                                beta,
                                rm_s[0].1.data_mut(),
                                rv_s[0].1.data_mut(),
                                eps,
                                momentum,
                                &mut y,
                                &mut saved,
                            )?;
                            (Act(y), Aux::Bn(saved))
                        }
                        Mode::Eval => {
                            kernels::batchnorm_forward_eval(
                                x,
                                pc,
                                per,
                                gamma,
                                beta,
                                rm_s[0].1.data(),
                                rv_s[0].1.data(),
                                eps,
                                &mut y,
                            );
                            (Act(y), Aux::None)
                        }
                    }
                }
                LayerKind::Relu => {
                    let buf: Vec<T> =
                        x.iter().map(|&v| if v > T::ZERO { v } else { T::ZERO }).collect();
                    (Act(buf), Aux::None)
                }
                LayerKind::MaxPool { kernel, stride } => {
                    let IoShape::Spatial { c: pc, h: ph, w: pw } = in_shape else { unreachable!() };
                    let IoShape::Spatial { c: oc, h: oh, w: ow } = out_shape else { unreachable!() };
                    let mut y = vec![T::ZERO; oc * n * oh * ow];
                    let mut arg = Vec::new();
                    kernels::maxpool_forward(x, pc * n, ph, pw, kernel, stride, &mut y, &mut arg);
                    (Act(y), Aux::Pool(arg))
                }
                LayerKind::AvgPool { kernel, stride } => {
                    let IoShape::Spatial { c: pc, h: ph, w: pw } = in_shape else { unreachable!() };
                    let IoShape::Spatial { c: oc, h: oh, w: ow } = out_shape else { unreachable!() };
                    let mut y = vec![T::ZERO; oc * n * oh * ow];
                    kernels::avgpool_forward(x, pc * n, ph, pw, kernel, stride, &mut y);
                    (Act(y), Aux::None)
                }
                LayerKind::Flatten => {
                    let IoShape::Spatial { c: pc, h: ph, w: pw } = in_shape else { unreachable!() };
                    let plane = ph * pw;
                    let f = pc * plane;
                    let mut y = vec![T::ZERO; n * f];
                    for ch in 0..pc {
                        for img in 0..n {
                            y[img * f + ch * plane..][..plane]
                                .copy_from_slice(&x[(ch * n + img) * plane..][..plane]);
                        }
                    }
                    (Act(y), Aux::None)
                }
                LayerKind::Dense { out_features, bias } => {
                    let IoShape::Flat { f } = in_shape else { unreachable!() };
                    let mut y = vec![T::ZERO; n * out_features];
                    let node = &self.nodes[i];
                    let weight = node.param(ParamName::Weight).unwrap().data();
                    let b = if bias { node.param(ParamName::Bias).map(|t| t.data()) } else { None };
                    kernels::dense_forward(x, n, f, weight, b, out_features, &mut y);
                    (Act(y), Aux::None)
                }
                LayerKind::ResidualAdd => {
                    let x2: &[T] = match srcs[1] {
                        Src::Input => &input,
                        Src::Node(j) => acts[j].buf(),
                    };
                    let buf: Vec<T> = x.iter().zip(x2).map(|(&a, &b)| a + b).collect();
                    (Act(buf), Aux::None)
                }
                LayerKind::SoftmaxCrossEntropy => {
                    let IoShape::Flat { f } = in_shape else { unreachable!() };
                    loss = kernels::softmax_xent_loss(x, n, f, labels);
                    if !loss.is_finite() {
                        return Err(EngineError::NonFinite { context: "loss".into() });
                    }
                    logits = Some(Tensor::from_vec(&[n, f], x.to_vec())?);
                    (Act(Vec::new()), Aux::None)
                }
            };
            acts.push(act);
            aux.push(ax);
        }

        Ok(Trace {
            version: self.version,
            mode,
            n,
            labels: labels.to_vec(),
            input,
            acts,
            aux,
            loss,
            logits: logits.unwrap(),
        })
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Assigns parameter gradients from a training-mode trace. The trace is
    /// consumed; parameter gradients are assigned, not accumulated.
    pub fn backward(&mut self, trace: Trace<T>) -> Result<()> {
        if trace.version != self.version {
            return Err(EngineError::StaleTrace { trace: trace.version, network: self.version });
        }
        if trace.mode != Mode::Train {
            return Err(EngineError::InvalidArg(
                "backward requires a training-mode trace".into(),
            ));
        }
        let n = trace.n;
        let count = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..count).map(|_| None).collect();

        for i in (0..count).rev() {
            let srcs = self.nodes[i].inputs.clone();
            let in_shape = self.shape_of_src(srcs[0]);
            let out_shape = self.shapes[i];
            let kind = self.nodes[i].kind.clone();

            if matches!(kind, LayerKind::SoftmaxCrossEntropy) {
                let IoShape::Flat { f } = in_shape else { unreachable!() };
                let x: &[T] = src_buf(&trace, srcs[0]);
                let mut g = vec![T::ZERO; n * f];
                kernels::softmax_xent_backward(x, n, f, &trace.labels, &mut g);
                match srcs[0] {
                    Src::Node(j) => add_grad(&mut grads[j], g),
                    Src::Input => {
                        return Err(EngineError::Graph("loss wired directly to input".into()))
                    }
                }
                continue;
            }

            let gy = match grads[i].take() {
                Some(g) => g,
                None => {
                    return Err(EngineError::Graph(format!(
                        "{} received no gradient",
                        layer_name(i, &self.nodes[i])
                    )))
                }
            };

            match kind {
                LayerKind::Conv2d { kernel, stride, padding, bias, .. } => {
                    let IoShape::Spatial { c: pc, h: ph, w: pw } = in_shape else { unreachable!() };
                    let IoShape::Spatial { c: oc, h: oh, w: ow } = out_shape else { unreachable!() };
                    let dims = ConvDims {
                        c_in: pc,
                        n,
                        h: ph,
                        w: pw,
                        c_out: oc,
                        kernel,
                        stride,
                        padding,
                        h_out: oh,
                        w_out: ow,
                    };
                    let x = src_buf(&trace, srcs[0]);
                    let need_dx = matches!(srcs[0], Src::Node(_));
                    let mut dw = vec![T::ZERO; oc * dims.patch_len()];
                    let mut db = bias.then(|| vec![T::ZERO; oc]);
                    let mut dx = need_dx.then(|| vec![T::ZERO; pc * n * ph * pw]);
                    {
                        let weight = self.nodes[i].param(ParamName::Weight).unwrap().data();
                        kernels::conv2d_backward(
                            x,
                            weight,
                            &dims,
                            &gy,
                            &mut dw,
                            db.as_deref_mut(),
                            dx.as_deref_mut(),
                            &mut self.ws,
                        );
                    }
                    let node = &mut self.nodes[i];
                    node.param_mut(ParamName::Weight).unwrap().set_grad(dw)?;
                    if let Some(db) = db {
                        node.param_mut(ParamName::Bias).unwrap().set_grad(db)?;
                    }
                    if let (Src::Node(j), Some(dx)) = (srcs[0], dx) {
                        add_grad(&mut grads[j], dx);
                    }
                }
                LayerKind::BatchNorm { .. } => {
                    let IoShape::Spatial { c: pc, h: ph, w: pw } = in_shape else { unreachable!() };
                    let per = n * ph * pw;
                    let Aux::Bn(saved) = &trace.aux[i] else {
                        return Err(EngineError::Graph(
                            "batch norm trace is missing saved statistics".into(),
                        ));
                    };
                    let x = src_buf(&trace, srcs[0]);
                    let mut dgamma = vec![T::ZERO; pc];
                    let mut dbeta = vec![T::ZERO; pc];
                    let mut dx = vec![T::ZERO; pc * per];
                    {
                        let gamma = self.nodes[i].param(ParamName::Gamma).unwrap().data();
                        kernels::batchnorm_backward(
                            x, pc, per, gamma, saved, &gy, &mut dgamma, &mut dbeta, &mut dx,
                        );
                    }
                    let node = &mut self.nodes[i];
                    node.param_mut(ParamName::Gamma).unwrap().set_grad(dgamma)?;
                    node.param_mut(ParamName::Beta).unwrap().set_grad(dbeta)?;
                    if let Src::Node(j) = srcs[0] {
                        add_grad(&mut grads[j], dx);
                    }
                }
                LayerKind::Relu => {
                    let x = src_buf(&trace, srcs[0]);
                    let mut g = gy;
                    for (gv, &v) in g.iter_mut().zip(x) {
                        if v <= T::ZERO {
                            *gv = T::ZERO;
                        }
                    }
                    if let Src::Node(j) = srcs[0] {
                        add_grad(&mut grads[j], g);
                    }
                }
                LayerKind::MaxPool { .. } => {
                    let IoShape::Spatial { c: pc, h: ph, w: pw } = in_shape else { unreachable!() };
                    let IoShape::Spatial { h: oh, w: ow, .. } = out_shape else { unreachable!() };
                    let Aux::Pool(argmax) = &trace.aux[i] else {
                        return Err(EngineError::Graph("max pool trace is missing argmax".into()));
                    };
                    let mut dx = vec![T::ZERO; pc * n * ph * pw];
                    kernels::maxpool_backward(pc * n, ph, pw, oh, ow, &gy, argmax, &mut dx);
                    if let Src::Node(j) = srcs[0] {
                        add_grad(&mut grads[j], dx);
                    }
                }
                LayerKind::AvgPool { kernel, stride } => {
                    let IoShape::Spatial { c: pc, h: ph, w: pw } = in_shape else { unreachable!() };
                    let mut dx = vec![T::ZERO; pc * n * ph * pw];
                    kernels::avgpool_backward(pc * n, ph, pw, kernel, stride, &gy, &mut dx);
                    if let Src::Node(j) = srcs[0] {
                        add_grad(&mut grads[j], dx);
                    }
                }
                LayerKind::Flatten => {
                    let IoShape::Spatial { c: pc, h: ph, w: pw } = in_shape else { unreachable!() };
                    let plane = ph * pw;
                    let f = pc * plane;
                    let mut dx = vec![T::ZERO; pc * n * plane];
                    for ch in 0..pc {
                        for img in 0..n {
                            dx[(ch * n + img) * plane..][..plane]
                                .copy_from_slice(&gy[img * f + ch * plane..][..plane]);
                        }
                    }
                    if let Src::Node(j) = srcs[0] {
                        add_grad(&mut grads[j], dx);
                    }
                }
                LayerKind::Dense { out_features, bias } => {
                    let IoShape::Flat { f } = in_shape else { unreachable!() };
                    let x = src_buf(&trace, srcs[0]);
                    let mut dw = vec![T::ZERO; out_features * f];
                    let mut db = bias.then(|| vec![T::ZERO; out_features]);
                    let mut dx = vec![T::ZERO; n * f];
                    {
                        let weight = self.nodes[i].param(ParamName::Weight).unwrap().data();
                        kernels::dense_backward(
                            x,
                            n,
                            f,
                            weight,
                            out_features,
                            &gy,
                            &mut dw,
                            db.as_deref_mut(),
                            Some(&mut dx),
                        );
                    }
                    let node = &mut self.nodes[i];
                    node.param_mut(ParamName::Weight).unwrap().set_grad(dw)?;
                    if let Some(db) = db {
                        node.param_mut(ParamName::Bias).unwrap().set_grad(db)?;
                    }
                    if let Src::Node(j) = srcs[0] {
                        add_grad(&mut grads[j], dx);
                    }
                }
                LayerKind::ResidualAdd => {
                    if let Src::Node(j) = srcs[1] {
                        add_grad(&mut grads[j], gy.clone());
                    }
                    if let Src::Node(j) = srcs[0] {
                        add_grad(&mut grads[j], gy);
                    }
                }
                LayerKind::SoftmaxCrossEntropy => unreachable!(),
            }
        }
        Ok(())
    }
}

fn src_buf<'t, T: Scalar>(trace: &'t Trace<T>, src: Src) -> &'t [T] {
    match src {
        Src::Input => &trace.input,
        Src::Node(j) => trace.acts[j].buf(),
    }
}
